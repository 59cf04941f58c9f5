"""Training loop: rollout collection, PPO + muscle-regression updates,
reward logging, checkpointing, and the three initialization strategies.

Method 1 randomizes the initial ankle angle only (zero velocity); method 2
adds a random ankle velocity whose mean follows the pendulum stable
direction (slope -omega); method 3 runs method 1 and continues with method 2
from the best method-1 checkpoint.  One iteration is one PPO update over a
full rollout buffer.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import nnet, rl
from .env import BalanceEnv, Controller, EnvConfig, EpisodeRunner, RsiConfig
from .nnet import MlpSpec
from .plant import SkeletonModel
from .rl import Net, PpoConfig, RolloutBuffer

METHODS = ("M1", "M2", "M3")
LOG_COLUMNS = ("iteration", "reward", "smoothed_reward_5pt", "mcn_loss",
               "clip_fraction", "kl")


@dataclass
class NetsConfig:
    cpn_hidden: tuple = (256, 256)
    value_hidden: tuple = (256, 256)
    mcn_hidden: tuple = (512, 256, 256)
    log_std_init: float = float(np.log(0.05))


def rsi_for_method(method: str, mu_p: float, omega: float,
                   sigma_p: float = 0.1, sigma_v: float = 0.1) -> RsiConfig:
    """The initial-state distribution each training method uses."""
    if method == "M1":
        return RsiConfig(mu_p=mu_p, sigma_p=sigma_p, s=0.0, sigma_v=0.0)
    if method in ("M2", "M3"):
        return RsiConfig(mu_p=mu_p, sigma_p=sigma_p, s=-omega, sigma_v=sigma_v)
    raise ValueError(f"unknown method {method!r}")


def build_nets(env: BalanceEnv, nets_cfg: NetsConfig, ppo_cfg: PpoConfig,
               rng: np.random.Generator):
    """Fresh CPN / value / MCN bundles sized for the environment."""
    cpn = Net.create(
        MlpSpec((env.obs_dim, *nets_cfg.cpn_hidden, env.action_dim), "gaussian"),
        rng, ppo_cfg.lr, log_std_init=nets_cfg.log_std_init)
    value = Net.create(
        MlpSpec((env.obs_dim, *nets_cfg.value_hidden, 1)), rng, ppo_cfg.lr,
        out_gain=1.0)
    mcn = Net.create(
        MlpSpec((env.mcn_in_dim, *nets_cfg.mcn_hidden, env.model.n_muscles),
                "bounded01"),
        rng, ppo_cfg.mcn_lr, out_gain=0.01)   # near-silent muscles at start
    return cpn, value, mcn


@dataclass
class StageResult:
    log_rows: list
    best_reward: float
    best_iteration: int
    best_nets: dict
    final_nets: dict


class Trainer:
    """Single-worker on-policy trainer with a persistent rollout episode."""

    def __init__(self, model: SkeletonModel, env_cfg: EnvConfig, rsi: RsiConfig,
                 ppo_cfg: PpoConfig, seed: int,
                 cpn: Net, value: Net, mcn: Net):
        self.env = BalanceEnv(model, env_cfg)
        self.rsi = rsi
        self.ppo_cfg = ppo_cfg
        self.seed = seed
        self.cpn, self.value, self.mcn = cpn, value, mcn
        self.controller = Controller(cpn.spec, cpn.params, mcn.spec, mcn.params)
        self.update_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
        self.episode_index = 0
        self.runner: EpisodeRunner | None = None
        R = self.env.model.R
        self.R_act = np.ascontiguousarray(R[:, self.env.model.act_dof].T)

    def _episode_rng(self) -> np.random.Generator:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=(1, self.episode_index)))
        self.episode_index += 1
        return rng

    def warmup_mcn(self, steps: int, batch: int = 128) -> float:
        """Pre-train the muscle net on synthetic achievable torque demands.

        The plant's affine torque map makes achievable (demand, activation)
        pairs free to generate; without this the policy has to learn through
        an incoherent muscle mapping and early episodes terminate instantly.
        Returns the final regression loss.
        """
        from . import models as _models
        from . import plant as _plant
        from . import _kernels as K

        env, model = self.env, self.env.model
        rng = np.random.default_rng(np.random.SeedSequence(entropy=self.seed,
                                                           spawn_key=(3,)))
        n_act, n_m = model.n_actuated, model.n_muscles
        saved_opt = self.mcn.opt
        self.mcn.opt = nnet.Adam(self.mcn.spec.n_params(),
                                 lr=self.ppo_cfg.mcn_warmup_lr)
        loss = math.inf
        for _ in range(steps):
            ins = np.empty((batch, env.mcn_in_dim))
            tds = np.empty((batch, n_act))
            k1s = np.empty((batch, n_m))
            f0s = np.empty((batch, n_m))
            for i in range(batch):
                alpha = rng.normal(env.target_ankle, 0.15)
                q = _models.lean_posture(model, alpha)
                q += rng.normal(scale=0.05, size=model.n_dof)
                qd = rng.normal(scale=0.5, size=model.n_dof)
                l, v = K.muscle_geometry(model.mus, q, qd)
                if np.any(l <= 0):
                    l = np.maximum(l, 1e-3)
                _, k1, f0 = K.muscle_forces(model.mus, np.zeros(n_m), l, v)
                a_tgt = np.where(rng.random(n_m) < 0.5, 0.0,
                                 rng.uniform(0, 1.0, n_m))
                tau_d = (k1 * a_tgt) @ self.R_act.T + f0 @ self.R_act.T
                ins[i, :n_act] = tau_d * env.mcn_tau_scale
                ins[i, n_act + 0::3] = l
                ins[i, n_act + 1::3] = v
                ins[i, n_act + 2::3] = rng.uniform(0, 0.4, n_m)
                tds[i] = tau_d
                k1s[i] = k1
                f0s[i] = f0
            m = rl.mcn_update(ins, tds, k1s, f0s @ self.R_act.T, self.R_act,
                              self.mcn, self.ppo_cfg.w_reg, self.ppo_cfg.grad_clip)
            loss = m["loss"]
        saved_opt.m[:] = 0.0   # continual updates restart with fresh moments
        saved_opt.v[:] = 0.0
        saved_opt.t = 0
        self.mcn.opt = saved_opt
        return loss

    def _new_runner(self) -> EpisodeRunner:
        rng = self._episode_rng()
        state = self.env.randomize_initial_state(self.rsi, rng)
        return EpisodeRunner(self.env, self.controller, state, rng,
                             value=(self.value.spec, self.value.params),
                             collect_mcn=True)

    def collect(self) -> tuple[RolloutBuffer, list]:
        """Fill one rollout buffer; returns (buffer, completed episode rewards)."""
        size = self.ppo_cfg.buffer_size
        obs, actions, rewards, lps, values, dones = [], [], [], [], [], []
        mcn_in, tau_d, k1, f0 = [], [], [], []
        completed = []
        while len(rewards) < size:
            if self.runner is None or self.runner.done:
                self.runner = self._new_runner()
            res = self.runner.tick()
            obs.append(res["obs"])
            actions.append(res["action"])
            rewards.append(res["reward"])
            lps.append(res["log_prob"])
            values.append(res["value"])
            dones.append(1.0 if res["done"] else 0.0)
            m_in, m_td, m_k1, m_f0 = res["mcn"]
            mcn_in.append(m_in)
            tau_d.append(m_td)
            k1.append(m_k1)
            f0.append(m_f0)
            if res["done"]:
                completed.append(self.runner.reward_total)
        if dones[-1] > 0:
            bootstrap = 0.0
        else:
            o = self.env.observe(self.runner.state)
            bootstrap = float(nnet.forward(self.value.spec, self.value.params, o)[0])
        buf = RolloutBuffer(
            obs=np.array(obs), actions=np.array(actions),
            rewards=np.array(rewards), log_probs=np.array(lps),
            values=np.append(np.array(values), bootstrap),
            dones=np.array(dones),
            mcn_inputs=np.concatenate(mcn_in), tau_d=np.concatenate(tau_d),
            k1=np.concatenate(k1), f0=np.concatenate(f0))
        return buf, completed

    def update(self, buf: RolloutBuffer) -> dict:
        metrics = rl.ppo_update(buf, self.cpn, self.value, self.ppo_cfg,
                                self.update_rng)
        n = len(buf.mcn_inputs)
        losses = []
        for _ in range(self.ppo_cfg.mcn_updates):
            idx = self.update_rng.integers(0, n, size=min(self.ppo_cfg.mcn_batch, n))
            tau0_act = buf.f0[idx] @ self.R_act.T
            m = rl.mcn_update(buf.mcn_inputs[idx], buf.tau_d[idx], buf.k1[idx],
                              tau0_act, self.R_act, self.mcn,
                              self.ppo_cfg.w_reg, self.ppo_cfg.grad_clip)
            losses.append(m["loss"])
        metrics["mcn_loss"] = float(np.mean(losses))
        return metrics

    def snapshot_nets(self) -> dict:
        return {"cpn": self.cpn.params.copy(), "value": self.value.params.copy(),
                "mcn": self.mcn.params.copy()}


def smoothed(values, window: int = 5) -> float:
    tail = values[-window:]
    return float(np.mean(tail))


def train_stage(model, env_cfg, rsi, ppo_cfg, seed, iterations,
                cpn: Net, value: Net, mcn: Net,
                progress=None, warmup: bool = True) -> StageResult:
    trainer = Trainer(model, env_cfg, rsi, ppo_cfg, seed, cpn, value, mcn)
    if warmup and ppo_cfg.mcn_warmup > 0:
        trainer.warmup_mcn(ppo_cfg.mcn_warmup)
    rows = []
    rewards = []
    best_reward = -math.inf
    best_iteration = -1
    best_nets = trainer.snapshot_nets()
    last_reward = 0.0
    for it in range(iterations):
        buf, completed = trainer.collect()
        metrics = trainer.update(buf)
        if completed:
            last_reward = float(np.mean(completed))
        rewards.append(last_reward)
        sm = smoothed(rewards)
        rows.append({
            "iteration": it,
            "reward": last_reward,
            "smoothed_reward_5pt": sm,
            "mcn_loss": metrics["mcn_loss"],
            "clip_fraction": metrics["clip_fraction"],
            "kl": metrics["approx_kl"],
        })
        if sm > best_reward:
            best_reward = sm
            best_iteration = it
            best_nets = trainer.snapshot_nets()
        if progress is not None:
            progress(it, rows[-1])
    return StageResult(rows, best_reward, best_iteration, best_nets,
                       trainer.snapshot_nets())


def write_log(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float)
                              else str(row[c]) for c in LOG_COLUMNS) + "\n")


def save_stage(out_dir, stage: StageResult, meta: dict):
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    write_log(os.path.join(out_dir, "training_log.csv"), stage.log_rows)
    nnet.save_checkpoint(
        os.path.join(out_dir, "checkpoints", "best.json"), stage.best_nets,
        meta={**meta, "iteration": stage.best_iteration,
              "smoothed_reward": stage.best_reward, "kind": "best"})
    final_meta = {**meta, "iteration": len(stage.log_rows) - 1, "kind": "final"}
    if stage.log_rows:
        final_meta["smoothed_reward"] = stage.log_rows[-1]["smoothed_reward_5pt"]
    nnet.save_checkpoint(
        os.path.join(out_dir, "checkpoints", "final.json"), stage.final_nets,
        meta=final_meta)


@dataclass
class TrainResult:
    method: str
    stages: list              # list of (dir_name, StageResult)
    best_checkpoint: str


def train(model: SkeletonModel, method: str, env_cfg: EnvConfig,
          ppo_cfg: PpoConfig, nets_cfg: NetsConfig, iterations: int,
          seed: int, out_dir: str,
          mu_p: float | None = None, sigma_p: float = 0.1,
          sigma_v: float = 0.1, progress=None) -> TrainResult:
    """Train with one of the three methods and persist artifacts to out_dir."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    os.makedirs(out_dir, exist_ok=True)
    env = BalanceEnv(model, env_cfg)
    if mu_p is None:
        mu_p = env.target_ankle
    init_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                            spawn_key=(0,)))
    cpn, value, mcn = build_nets(env, nets_cfg, ppo_cfg, init_rng)

    if method in ("M1", "M2"):
        rsi = rsi_for_method(method, mu_p, env.omega, sigma_p, sigma_v)
        stage = train_stage(model, env_cfg, rsi, ppo_cfg, seed, iterations,
                            cpn, value, mcn, progress=progress)
        save_stage(out_dir, stage, {"method": method, "stage": 1, "seed": seed})
        best = os.path.join(out_dir, "checkpoints", "best.json")
        return TrainResult(method, [(out_dir, stage)], best)

    # M3: method-1 curriculum stage, then method-2 from its best checkpoint
    dir1 = os.path.join(out_dir, "stage1")
    dir2 = os.path.join(out_dir, "stage2")
    os.makedirs(dir1, exist_ok=True)
    os.makedirs(dir2, exist_ok=True)
    rsi1 = rsi_for_method("M1", mu_p, env.omega, sigma_p, sigma_v)
    stage1 = train_stage(model, env_cfg, rsi1, ppo_cfg, seed, iterations,
                         cpn, value, mcn, progress=progress)
    save_stage(dir1, stage1, {"method": "M3", "stage": 1, "seed": seed})

    # reload the stage-1 best into fresh nets (fresh optimizer state)
    cpn2, value2, mcn2 = build_nets(env, nets_cfg, ppo_cfg, init_rng)
    cpn2.params.flat[:] = stage1.best_nets["cpn"].flat
    value2.params.flat[:] = stage1.best_nets["value"].flat
    mcn2.params.flat[:] = stage1.best_nets["mcn"].flat
    rsi2 = rsi_for_method("M2", mu_p, env.omega, sigma_p, sigma_v)
    stage2 = train_stage(model, env_cfg, rsi2, ppo_cfg, seed + 1, iterations,
                         cpn2, value2, mcn2, progress=progress,
                         warmup=False)   # stage-1 muscle net transfers
    save_stage(dir2, stage2, {"method": "M3", "stage": 2, "seed": seed + 1})
    best = os.path.join(dir2, "checkpoints", "best.json")
    return TrainResult("M3", [(dir1, stage1), (dir2, stage2)], best)


def controller_from_checkpoint(path) -> Controller:
    nets, _ = nnet.load_checkpoint(path)
    return Controller(nets["cpn"].spec, nets["cpn"], nets["mcn"].spec, nets["mcn"])
