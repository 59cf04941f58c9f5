"""PPO trainer for the control policy and supervised regression for the
muscle-coordination network.

The policy is a diagonal Gaussian with a state-independent learnable log-std
living in the tail of the policy parameter vector.  One update consumes one
full rollout buffer: ``epochs`` passes of shuffled minibatches, Adam on the
negated clipped surrogate for the policy and on MSE-to-returns for the value
function.  Advantages are normalized once per buffer.  The muscle network is
regressed on (desired torque, muscle state) pairs collected at the simulation
rate, against the plant's exact affine torque map tau(a) = D a + tau0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .nnet import Adam, MlpParams, MlpSpec


@dataclass
class PpoConfig:
    gamma: float = 0.99
    clip_eps: float = 0.2
    epochs: int = 10
    batch_size: int = 128
    buffer_size: int = 2048
    lr: float = 1e-4
    gae_lambda: float = 0.95
    w_reg: float = 0.01          # activation regularization in the muscle loss
    mcn_lr: float = 1e-4
    mcn_updates: int = 50        # regression minibatches per iteration
    mcn_batch: int = 256
    mcn_warmup: int = 600        # synthetic achievable-demand batches before RL
    mcn_warmup_lr: float = 1e-3  # warmup-only rate; continual updates stay gentle
    grad_clip: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if min(self.epochs, self.batch_size, self.buffer_size) <= 0:
            raise ValueError("sizes must be positive")


@dataclass
class RolloutBuffer:
    """On-policy rollout storage (plus the muscle-training side channel)."""

    obs: np.ndarray          # (T, d_obs)
    actions: np.ndarray      # (T, d_act)
    rewards: np.ndarray      # (T,)
    log_probs: np.ndarray    # (T,)
    values: np.ndarray       # (T + 1,): bootstrap value appended
    dones: np.ndarray        # (T,) 1.0 at episode ends
    # per-substep muscle tuples
    mcn_inputs: np.ndarray | None = None   # (S, d_mcn)
    tau_d: np.ndarray | None = None        # (S, n_act)
    k1: np.ndarray | None = None           # (S, n_m) dtau/da diagonal factors
    f0: np.ndarray | None = None           # (S, n_m) passive tendon forces

    def __len__(self):
        return len(self.rewards)


def compute_gae(rewards, values, dones, gamma: float, lam: float):
    """Generalized advantage estimation.

    ``values`` must hold one bootstrap entry more than ``rewards``; ``dones``
    marks terminal steps (no bootstrap across them).  Returns raw
    (advantages, returns); normalization happens in the update.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    T = len(r)
    if len(v) != T + 1 or len(d) != T:
        raise ValueError("misaligned GAE inputs")
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * nonterminal - v[t]
        acc = delta + gamma * lam * nonterminal * acc
        adv[t] = acc
    return adv, adv + v[:T]


def ppo_ratio(log_prob_new, log_prob_old):
    """Probability ratio new/old from log probabilities."""
    return np.exp(np.asarray(log_prob_new) - np.asarray(log_prob_old))


def clipped_objective(ratio, advantage, eps: float):
    """Pessimistic clipped surrogate min(P A, clip(P, 1-eps, 1+eps) A)."""
    p = np.asarray(ratio, dtype=np.float64)
    a = np.asarray(advantage, dtype=np.float64)
    return np.minimum(p * a, np.clip(p, 1.0 - eps, 1.0 + eps) * a)


@dataclass
class Net:
    """A spec/params/optimizer bundle."""

    spec: MlpSpec
    params: MlpParams
    opt: Adam = field(default=None)

    @classmethod
    def create(cls, spec: MlpSpec, rng, lr: float, **init_kw):
        params = nnet.init_params(spec, rng, **init_kw)
        return cls(spec, params, Adam(spec.n_params(), lr=lr))


class UpdateAborted(RuntimeError):
    """An update produced non-finite gradients and was rolled back."""


def ppo_update(buffer: RolloutBuffer, policy: Net, value: Net,
               config: PpoConfig, rng: np.random.Generator) -> dict:
    """One PPO update over a full buffer; returns training metrics."""
    T = len(buffer)
    adv, returns = compute_gae(buffer.rewards, buffer.values, buffer.dones,
                               config.gamma, config.gae_lambda)
    std = adv.std()
    adv_n = (adv - adv.mean()) / (std + 1e-8)

    pol_snapshot = policy.params.flat.copy()
    val_snapshot = value.params.flat.copy()
    n_out = policy.spec.n_out
    clip_hits = 0
    clip_total = 0
    kl_sum = 0.0
    obj_sum = 0.0
    vloss_sum = 0.0
    n_mb = 0
    try:
        for _ in range(config.epochs):
            order = rng.permutation(T)
            for start in range(0, T, config.batch_size):
                mb = order[start:start + config.batch_size]
                B = len(mb)
                obs = buffer.obs[mb]
                acts = buffer.actions[mb]
                adv_mb = adv_n[mb]

                mean, cache = nnet.forward_cached(policy.spec, policy.params, obs)
                log_std = policy.params.log_std
                lp_new = nnet.gaussian_log_prob(acts, mean, log_std)
                ratio = ppo_ratio(lp_new, buffer.log_probs[mb])
                surr = clipped_objective(ratio, adv_mb, config.clip_eps)

                # d(-mean surr)/d lp_new: active only on the unclipped branch
                active = (ratio * adv_mb) <= (
                    np.clip(ratio, 1 - config.clip_eps, 1 + config.clip_eps) * adv_mb)
                dlp = -(ratio * adv_mb * active) / B
                sigma2 = np.exp(2.0 * log_std)
                dmean = dlp[:, None] * (acts - mean) / sigma2
                g_pol = nnet.backward(policy.spec, policy.params, cache, dmean)
                z2 = ((acts - mean) ** 2) / sigma2
                g_pol[-n_out:] = (dlp[:, None] * (z2 - 1.0)).sum(axis=0)
                _check_finite_grad(g_pol)
                policy.opt.step(policy.params,
                                nnet.clip_grad_norm(g_pol, config.grad_clip))

                v, vcache = nnet.forward_cached(value.spec, value.params, obs)
                verr = v[:, 0] - returns[mb]
                vloss = float((verr ** 2).mean())
                g_val = nnet.backward(value.spec, value.params, vcache,
                                      (2.0 * verr / B)[:, None])
                _check_finite_grad(g_val)
                value.opt.step(value.params,
                               nnet.clip_grad_norm(g_val, config.grad_clip))

                clip_hits += int((np.abs(ratio - 1.0) > config.clip_eps).sum())
                clip_total += B
                kl_sum += float((buffer.log_probs[mb] - lp_new).sum())
                obj_sum += float(surr.sum())
                vloss_sum += vloss
                n_mb += 1
    except UpdateAborted:
        policy.params.flat[:] = pol_snapshot
        value.params.flat[:] = val_snapshot
        return {"objective": float("nan"), "clip_fraction": float("nan"),
                "approx_kl": float("nan"), "value_loss": float("nan"),
                "aborted": True}

    return {
        "objective": obj_sum / clip_total,
        "clip_fraction": clip_hits / clip_total,
        "approx_kl": kl_sum / clip_total,
        "value_loss": vloss_sum / n_mb,
        "aborted": False,
    }


def _check_finite_grad(grad):
    if not np.all(np.isfinite(grad)):
        raise UpdateAborted("non-finite gradient")


# ---------------------------------------------------------------------------
# muscle coordination regression
# ---------------------------------------------------------------------------

def mcn_loss(tau_d, activations, k1, tau0_act, R_act, w_reg: float):
    """Torque-matching loss with activation regularization.

    ``R_act`` is the (n_act, n_m) actuated-row moment-arm transpose, ``k1``
    the per-sample activation-to-force slope, ``tau0_act`` the passive torque
    on the actuated dofs.  All arrays are batched along axis 0 except
    ``R_act``.  Returns (loss, dloss/dactivations).
    """
    a = np.atleast_2d(np.asarray(activations, dtype=np.float64))
    td = np.atleast_2d(np.asarray(tau_d, dtype=np.float64))
    k1 = np.atleast_2d(np.asarray(k1, dtype=np.float64))
    t0 = np.atleast_2d(np.asarray(tau0_act, dtype=np.float64))
    B = a.shape[0]
    force_a = k1 * a                             # (B, n_m) active tendon force
    tau = force_a @ R_act.T + t0                 # (B, n_act)
    res = td - tau
    loss = float((res ** 2).sum() + w_reg * (a ** 2).sum()) / B
    dl_da = (-2.0 * (res @ R_act) * k1 + 2.0 * w_reg * a) / B
    return loss, dl_da


def mcn_update(inputs, tau_d, k1, tau0_act, R_act, mcn: Net,
               w_reg: float, grad_clip: float = 1.0) -> dict:
    """One Adam step of the muscle-coordination regression; returns {loss}."""
    a, cache = nnet.forward_cached(mcn.spec, mcn.params, inputs)
    loss, dl_da = mcn_loss(tau_d, a, k1, tau0_act, R_act, w_reg)
    grad = nnet.backward(mcn.spec, mcn.params, cache, dl_da)
    if not np.all(np.isfinite(grad)):
        return {"loss": loss, "aborted": True}
    mcn.opt.step(mcn.params, nnet.clip_grad_norm(grad, grad_clip))
    return {"loss": loss, "aborted": False}
