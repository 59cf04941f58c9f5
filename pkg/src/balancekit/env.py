"""Balance-recovery environment.

An episode runs two clocks: the control policy emits desired joint angles at
``policy_rate`` (30 Hz); between policy ticks the muscle network, activation
dynamics and plant integrate at ``sim_rate`` (600 Hz).  Episodes start from
randomized leaning states (ankle angle/velocity sampled from normals, feet
level and still) and end on fall, foot slide, foot lift, or at the 10 s
horizon.

The COM analysis state is (x, v): whole-body COM horizontal position relative
to the episode's initial ankle x, and its horizontal velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import nnet
from .models import compute_target_ankle, lean_posture
from .plant import (PD_KP, PD_KV, SkeletonModel, SkeletonState,
                    body_kinematics, com_jacobian, com_state, marker_position,
                    neutral_state)

STATUS_NAMES = {
    K.STATUS_CONTINUE: "running",
    K.STATUS_FALL: "fall",
    K.STATUS_FOOT_SLIDE: "foot_slide",
    K.STATUS_FOOT_LIFT: "foot_lift",
    K.STATUS_NUMERIC: "fall",   # numeric blowup recorded as a fall + flag
}

SUCCESS = "success"


class RsiError(RuntimeError):
    """Initial-state randomization failed to converge repeatedly."""


@dataclass
class EnvConfig:
    policy_rate: int = 30
    sim_rate: int = 600
    episode_len: float = 10.0
    w_p: float = 1.0
    w_torque: float = 0.1
    w_upright: float = 0.1
    w_xcom: float = 0.1
    sigma_p: float = 2.0
    sigma_torque: float = 0.001
    sigma_upright: float = 5.0      # unspecified upstream; documented default
    sigma_xcom: float = 5.0         # unspecified upstream; documented default
    target_ankle: float | None = None    # None: computed from model geometry
    fall_pelvis_height: float = 0.8
    foot_slide_max: float = 0.01
    foot_lift_max: float = 0.01
    symmetric_action: bool = True
    lip_com_height: float | None = None  # None: COM height at target posture
    kp: float = PD_KP
    kv: float = PD_KV
    mcn_tau_scale: float | None = None   # None: 2 / max torque capacity
    tau_clip_scale: float = 1.2   # torque-command clamp, x muscle capacity

    def __post_init__(self):
        if self.sim_rate % self.policy_rate != 0:
            raise ValueError("sim_rate must be divisible by policy_rate")
        if min(self.w_p, self.w_torque, self.w_upright, self.w_xcom) < 0:
            raise ValueError("reward weights must be nonnegative")
        if min(self.fall_pelvis_height, self.foot_slide_max, self.foot_lift_max) <= 0:
            raise ValueError("termination thresholds must be positive")


@dataclass
class RsiConfig:
    mu_p: float = 0.09745
    sigma_p: float = 0.1
    s: float = 0.0                 # velocity mean = s * mu_p
    sigma_v: float = 0.0
    tolerance: float = 1e-8
    max_iter: int = 100
    gd_step: float = 0.25

    def __post_init__(self):
        if self.sigma_p < 0 or self.sigma_v < 0 or self.tolerance <= 0:
            raise ValueError("bad RSI configuration")


@dataclass
class EpisodeOutcome:
    status: str                       # success | fall | foot_slide | foot_lift
    initial_com: tuple                # (x, v) relative to initial ankle x
    com_trajectory: np.ndarray        # (n_ticks, 2) sampled at the policy rate
    t_end: float
    reward_total: float
    final_q: np.ndarray
    numeric_failure: bool = False
    joint_history: np.ndarray | None = None       # (n_ticks, n_act)
    activation_history: np.ndarray | None = None  # (n_ticks, n_m)
    reward_history: np.ndarray | None = None      # (n_ticks, 4) components
    time_history: np.ndarray | None = None        # (n_ticks,)

    @property
    def success(self) -> bool:
        return self.status == SUCCESS


@dataclass
class Controller:
    """Parameter snapshot pair driving episodes."""

    cpn_spec: nnet.MlpSpec
    cpn: nnet.MlpParams
    mcn_spec: nnet.MlpSpec
    mcn: nnet.MlpParams


def xcom(x: float, v: float, omega: float) -> float:
    """Extrapolated center of mass x + v/omega."""
    if omega <= 0:
        raise ValueError("omega must be positive")
    return x + v / omega


class BalanceEnv:
    """Binds a skeleton model to the balance task configuration."""

    def __init__(self, model: SkeletonModel, config: EnvConfig | None = None):
        self.model = model
        self.config = config or EnvConfig()
        cfg = self.config
        self.n_sub = cfg.sim_rate // cfg.policy_rate
        self.dt = 1.0 / cfg.sim_rate
        self.n_ticks = int(round(cfg.episode_len * cfg.policy_rate))

        self.target_ankle = (cfg.target_ankle if cfg.target_ankle is not None
                             else compute_target_ankle(model))
        self.q_target = lean_posture(model, self.target_ankle)
        self.target_q_act = self.q_target[model.act_dof].copy()
        if cfg.lip_com_height is not None:
            self.lip_com_height = cfg.lip_com_height
        else:
            pos, _ = com_state(model, self.q_target)
            self.lip_com_height = float(pos[1])
        self.omega = math.sqrt(model.gravity / self.lip_com_height)

        # per-dof torque capacity: all muscles at full activation
        R_act = model.R[:, model.act_dof]
        fmax_eff = model.mus[3] * model.mus[4]       # f_max * cos(pennation)
        capacity = (np.abs(R_act) * fmax_eff[:, None]).sum(axis=0)
        self.tau_clip = cfg.tau_clip_scale * capacity
        self.mcn_tau_scale = (cfg.mcn_tau_scale if cfg.mcn_tau_scale is not None
                              else 2.0 / max(float(capacity.max()), 1e-9))

        self.obs_dim = 4 * len(model.bodies)
        n_act = model.n_actuated
        if cfg.symmetric_action:
            if n_act % 2 != 0:
                raise ValueError("symmetric action needs an even actuated count")
            self.action_dim = n_act // 2
            self.action_map = np.arange(n_act) % self.action_dim
        else:
            self.action_dim = n_act
            self.action_map = np.arange(n_act)
        self.mcn_in_dim = n_act + 3 * model.n_muscles

    # -- observation -------------------------------------------------------
    def observe(self, state: SkeletonState) -> np.ndarray:
        """Per-body planar COM positions and velocities, pelvis-x-centered."""
        _, _, _, _, cpos, cvel = body_kinematics(self.model, state.q, state.qdot)
        obs = np.empty(self.obs_dim)
        px = cpos[self.model.pelvis_idx, 0]
        nb = len(self.model.bodies)
        obs[0:4 * nb:4] = cpos[:, 0] - px
        obs[1:4 * nb:4] = cpos[:, 1]
        obs[2:4 * nb:4] = cvel[:, 0]
        obs[3:4 * nb:4] = cvel[:, 1]
        return obs

    # -- reward ------------------------------------------------------------
    def reward(self, state: SkeletonState, tau_applied) -> tuple[float, np.ndarray]:
        """Posture, torque, upright and XcoM terms; total in (0, 1.3]."""
        cfg = self.config
        model = self.model
        q_err = float(((state.q[model.act_dof] - self.target_q_act) ** 2).sum())
        r_p = cfg.w_p * math.exp(-cfg.sigma_p * q_err)
        tau2 = float((np.asarray(tau_applied) ** 2).sum())
        r_tau = cfg.w_torque * math.exp(-cfg.sigma_torque * tau2)
        head_x = marker_position(model, state.q, "head")[0]
        _, _, _, _, cpos, cvel = body_kinematics(model, state.q, state.qdot)
        pelvis_x = cpos[model.pelvis_idx, 0]
        r_up = cfg.w_upright * math.exp(-cfg.sigma_upright * (head_x - pelvis_x) ** 2)
        m = model.topo[4]
        com_x = float((m * cpos[:, 0]).sum() / model.total_mass)
        com_vx = float((m * cvel[:, 0]).sum() / model.total_mass)
        xc = xcom(com_x, com_vx, self.omega)
        xc_target = float(cpos[model.foot_body_idx, 0].mean())
        r_xc = cfg.w_xcom * math.exp(-cfg.sigma_xcom * (xc - xc_target) ** 2)
        comps = np.array([r_p, r_tau, r_up, r_xc])
        return float(comps.sum()), comps

    # -- termination -------------------------------------------------------
    def check_termination(self, state: SkeletonState, initial_foot_pos, t: float):
        """First trigger in order fall -> foot slide -> foot lift, else
        success at the horizon, else None."""
        cfg = self.config
        _, _, _, _, cpos, _ = body_kinematics(self.model, state.q, state.qdot)
        if cpos[self.model.pelvis_idx, 1] < cfg.fall_pelvis_height:
            return "fall"
        feet = cpos[self.model.foot_body_idx]
        for f in range(len(feet)):
            if abs(feet[f, 0] - initial_foot_pos[f, 0]) > cfg.foot_slide_max:
                return "foot_slide"
        for f in range(len(feet)):
            if feet[f, 1] - initial_foot_pos[f, 1] > cfg.foot_lift_max:
                return "foot_lift"
        if t >= cfg.episode_len - 0.5 * self.dt:
            return SUCCESS
        return None

    # -- initial states (reference state initialization) --------------------
    def randomize_initial_state(self, rsi: RsiConfig, rng: np.random.Generator,
                                max_attempts: int = 10) -> SkeletonState:
        for _ in range(max_attempts):
            alpha = rng.normal(rsi.mu_p, rsi.sigma_p) if rsi.sigma_p > 0 else rsi.mu_p
            mu_v = rsi.s * rsi.mu_p
            alphadot = rng.normal(mu_v, rsi.sigma_v) if rsi.sigma_v > 0 else mu_v
            state = self._build_lean_state(alpha, alphadot, rsi)
            if state is not None:
                return state
        raise RsiError(f"no convergent sample in {max_attempts} attempts")

    def _build_lean_state(self, alpha: float, alphadot: float,
                          rsi: RsiConfig) -> SkeletonState | None:
        model = self.model
        q = lean_posture(model, alpha)
        # drop the root by the static penetration so the penalty contact
        # carries the weight from the first substep (kickoff-free start)
        n_sph = len(model.contact_spheres)
        if n_sph:
            q[1] -= model.total_mass * model.gravity / (model.contact.k_n * n_sph)
        qdot = np.zeros(model.n_dof)
        for aj in model.ankle_joints:
            qdot[model.joint_dof[aj]] = alphadot
        qdot[2] = -alphadot
        # gradient descent on the pelvis translational velocity until the
        # foot-COM linear velocities vanish
        converged = False
        for _ in range(rsi.max_iter):
            err = 0.0
            dqd = np.zeros(model.n_dof)
            for f in model.foot_body_idx:
                J = com_jacobian(model, q, int(f))
                v = J @ qdot
                err += float(v @ v)
                dqd -= 2.0 * rsi.gd_step * (J.T @ v)
            if err < rsi.tolerance:
                converged = True
                break
            qdot[0:2] += dqd[0:2]
        if not converged:
            return None
        st = SkeletonState(q, qdot)
        from .plant import _ensure_anchors
        _ensure_anchors(model, st)
        return st

    def initial_com_state(self, state: SkeletonState) -> tuple[float, float, float]:
        """(x, v, ankle_x_ref) of the whole-body COM at episode start."""
        pos, _, _, _, _, _ = body_kinematics(self.model, state.q, state.qdot)
        ankle_x = float(pos[self.model.foot_body_idx, 0].mean())
        cpos, cvel = com_state(self.model, state.q, state.qdot)
        return float(cpos[0] - ankle_x), float(cvel[0]), ankle_x


class EpisodeRunner:
    """Advances one episode a policy tick at a time (training or testing)."""

    def __init__(self, env: BalanceEnv, controller: Controller,
                 state: SkeletonState, rng: np.random.Generator,
                 value: tuple | None = None, record_histories: bool = False,
                 collect_mcn: bool = False):
        self.env = env
        self.controller = controller
        self.state = state.copy()
        self.rng = rng
        self.value = value
        self.record_histories = record_histories
        self.collect_mcn = collect_mcn
        model = env.model

        # slide/lift references are the nominal standing foot positions, not
        # the contact-preloaded episode start (which sits a few mm lower)
        kin0 = body_kinematics(model, model.q_neutral)
        self.foot_init = np.ascontiguousarray(kin0[4][model.foot_body_idx])
        x0, v0, self.ankle_x_ref = env.initial_com_state(state)
        self.initial_com = (x0, v0)

        self.tick_idx = 0
        self.done = False
        self.status = "running"
        self.numeric_failure = False
        self.reward_total = 0.0
        self.com_traj: list = []
        self.joint_hist: list = []
        self.act_hist: list = []
        self.reward_hist: list = []
        self.time_hist: list = []

        self.mcn_wflat = controller.mcn.weights_flat()
        self.mcn_shapes = controller.mcn_spec.shapes_array()
        self.act = np.zeros(model.n_muscles)
        n_sub, n_act, n_m = env.n_sub, model.n_actuated, model.n_muscles
        self._tau_d = np.zeros((n_sub, n_act))
        self._mcn_in = np.zeros((n_sub, env.mcn_in_dim))
        self._k1 = np.zeros((n_sub, n_m))
        self._f0 = np.zeros((n_sub, n_m))

    def _record_com(self):
        m = self.env.model
        cpos, cvel = com_state(m, self.state.q, self.state.qdot)
        self.com_traj.append((float(cpos[0] - self.ankle_x_ref), float(cvel[0])))

    def tick(self):
        """One policy step. Returns a dict of training quantities."""
        if self.done:
            raise RuntimeError("episode already finished")
        env, model, cfg = self.env, self.env.model, self.env.config
        st = self.state

        self._record_com()
        if self.record_histories:
            self.joint_hist.append(st.q[model.act_dof].copy())
            self.act_hist.append(self.act.copy())
            self.time_hist.append(st.t)

        obs = env.observe(st)
        mean = nnet.forward(self.controller.cpn_spec, self.controller.cpn, obs)
        action, log_prob = nnet.gaussian_sample(self.controller.cpn, mean, self.rng)
        full = action[env.action_map]
        q_des = np.clip(env.target_q_act + full,
                        model.lo[model.act_dof], model.hi[model.act_dof])

        val = 0.0
        if self.value is not None:
            vspec, vparams = self.value
            val = float(nnet.forward(vspec, vparams, obs)[0])

        status_code, n_done = K.run_substeps(
            model.topo, model.mus, model.con, model.gravity,
            model.free, model.lo, model.hi,
            st.q, st.qdot, self.act, st.anchor_x, st.anchor_on,
            q_des, model.act_dof, cfg.kp, cfg.kv,
            model.contact.k_n, model.contact.k_d, model.contact.mu,
            self.mcn_wflat, self.mcn_shapes, env.mcn_tau_scale, env.tau_clip,
            env.dt, env.n_sub, self.tick_idx == 0,
            model.pelvis_idx, cfg.fall_pelvis_height,
            model.foot_body_idx, self.foot_init,
            cfg.foot_slide_max, cfg.foot_lift_max,
            self._tau_d, self._mcn_in, self._k1, self._f0,
        )
        st.t += n_done * env.dt
        self.tick_idx += 1

        tau_last = self._tau_d[n_done - 1]
        if status_code == K.STATUS_NUMERIC:
            r, comps = 0.0, np.zeros(4)
            self.numeric_failure = True
        else:
            r, comps = env.reward(st, tau_last)
        self.reward_total += r
        if self.record_histories:
            self.reward_hist.append(comps)

        if status_code != K.STATUS_CONTINUE:
            self.done = True
            self.status = STATUS_NAMES[status_code]
        elif st.t >= cfg.episode_len - 0.5 * env.dt:
            self.done = True
            self.status = SUCCESS

        result = {"obs": obs, "action": action, "log_prob": float(log_prob),
                  "value": val, "reward": r, "done": self.done}
        if self.collect_mcn:
            result["mcn"] = (self._mcn_in[:n_done].copy(),
                             self._tau_d[:n_done].copy(),
                             self._k1[:n_done].copy(),
                             self._f0[:n_done].copy())
        return result

    def outcome(self) -> EpisodeOutcome:
        out = EpisodeOutcome(
            status=self.status if self.done else "running",
            initial_com=self.initial_com,
            com_trajectory=np.array(self.com_traj).reshape(-1, 2),
            t_end=self.state.t,
            reward_total=self.reward_total,
            final_q=self.state.q.copy(),
            numeric_failure=self.numeric_failure,
        )
        if self.record_histories:
            out.joint_history = np.array(self.joint_hist)
            out.activation_history = np.array(self.act_hist)
            out.reward_history = np.array(self.reward_hist).reshape(-1, 4)
            out.time_history = np.array(self.time_hist)
        return out


def run_episode(env: BalanceEnv, controller: Controller, state: SkeletonState,
                rng: np.random.Generator,
                record_histories: bool = False) -> EpisodeOutcome:
    """Run one episode to termination or the horizon."""
    runner = EpisodeRunner(env, controller, state, rng,
                           record_histories=record_histories)
    while not runner.done:
        runner.tick()
    return runner.outcome()


def episode_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-split per-episode stream: independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                        spawn_key=(1, index)))


def run_test_episodes(env: BalanceEnv, rsi: RsiConfig, episode_fn, n: int,
                      seed: int):
    """Classify n episodes from randomized starts.

    ``episode_fn(state, rng) -> EpisodeOutcome`` is injectable so tests can
    substitute stub policies.  Episode i always sees the same RNG stream
    regardless of execution order.
    """
    outcomes = []
    for i in range(n):
        rng = episode_rng(seed, i)
        state = env.randomize_initial_state(rsi, rng)
        outcomes.append(episode_fn(state, rng))
    return outcomes
