"""Planar articulated rigid-body dynamics with penalty ground contact.

The skeleton is a tree of planar rigid bodies.  Body 0 (the root) carries a
3-DOF planar joint (x, y, tilt); every other body hangs off a 1-DOF revolute
joint.  Generalized coordinates are ordered ``[root_x, root_y, root_tilt,
<revolute joints in declaration order>]``.  Angles are CCW-positive with x
pointing forward and y up, which makes forward lean a negative root tilt.

Muscle paths are linear in the joint angles: path length
``L_i(q) = l0_i - sum_j R_ij (q_j - q_neutral_j)`` with constant moment arms
``R``, so tendon tension F produces generalized torques ``R^T F`` exactly.

Heavy numeric work is delegated to :mod:`balancekit._kernels`, which runs
either numba-compiled or as plain numpy (``BALANCEKIT_NUMBA=0``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as K
from .muscle import MuscleParams

SIM_DT = 1.0 / 600.0
PD_KP = 300.0
PD_KV = math.sqrt(2.0) * 300.0


class ModelConfigError(ValueError):
    """Model definition is inconsistent (bad topology, non-positive lengths...)."""


class NumericError(RuntimeError):
    """Simulation produced non-finite values or an unsolvable system."""


@dataclass(frozen=True)
class Body:
    name: str
    mass: float
    inertia: float
    com_offset: tuple[float, float]
    length: float = 0.0


@dataclass(frozen=True)
class Joint:
    name: str
    kind: str                      # "planar-root" | "revolute"
    parent: str                    # parent body name; "world" for the root
    child: str
    anchor: tuple[float, float] = (0.0, 0.0)
    limits: tuple[float, float] | None = None
    locked: bool = False


@dataclass(frozen=True)
class MusclePath:
    params: MuscleParams
    moment_arms: dict              # joint name -> arm (m); + shortens with +q
    rest_length: float
    side: str | None = None


@dataclass(frozen=True)
class ContactSphere:
    body: str
    offset: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class ContactParams:
    # Both gains are bounded by explicit-integration stability of the foot
    # pitch mode at 600 Hz: dt*sqrt(k_n*sum(x_s^2)/I_foot) and
    # dt*k_d*sum(x_s^2)/I_foot must stay below 2.  k_n is large enough that
    # static penetrations stay well under the sphere radii.
    k_n: float = 1.5e5
    k_d: float = 100.0
    mu: float = 0.8

    def __post_init__(self):
        if self.k_n <= 0 or self.k_d < 0 or self.mu <= 0:
            raise ModelConfigError("contact parameters out of range")


@dataclass
class SkeletonModel:
    """Immutable-by-convention skeleton description plus packed kernel arrays."""

    name: str
    bodies: list
    joints: list
    muscles: list
    contact_spheres: list
    contact: ContactParams = field(default_factory=ContactParams)
    markers: dict = field(default_factory=dict)   # name -> (body, (ox, oy))
    gravity: float = 9.81
    pelvis_body: str = "pelvis"
    foot_bodies: tuple = ()
    ankle_joints: tuple = ()
    actuated_joints: tuple = ()
    q_neutral_root: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        self._build()

    # -- derived arrays ----------------------------------------------------
    def _build(self):
        body_index = {b.name: i for i, b in enumerate(self.bodies)}
        if len(body_index) != len(self.bodies):
            raise ModelConfigError("duplicate body names")
        root_joints = [j for j in self.joints if j.kind == "planar-root"]
        if len(root_joints) != 1 or self.joints[0].kind != "planar-root":
            raise ModelConfigError("exactly one planar-root joint must come first")
        if body_index.get(root_joints[0].child) != 0:
            raise ModelConfigError("the planar-root joint must drive body 0")

        n_b = len(self.bodies)
        parent = np.full(n_b, -1, dtype=np.int64)
        jdof = np.full(n_b, -1, dtype=np.int64)
        anchor = np.zeros((n_b, 2))
        joint_dof = {}
        dof_names = ["root_x", "root_y", "root_tilt"]
        lo = [-np.inf, -np.inf, -np.inf]
        hi = [np.inf, np.inf, np.inf]
        locked = [self.joints[0].locked] * 3
        seen_children = {root_joints[0].child}
        for j in self.joints[1:]:
            if j.kind != "revolute":
                raise ModelConfigError(f"unsupported joint kind {j.kind!r}")
            if j.child in seen_children:
                raise ModelConfigError(f"body {j.child!r} has two parent joints")
            seen_children.add(j.child)
            b = body_index[j.child]
            p = body_index[j.parent]
            if p >= b:
                raise ModelConfigError("bodies must be ordered parents-first")
            parent[b] = p
            jdof[b] = len(dof_names)
            joint_dof[j.name] = len(dof_names)
            dof_names.append(j.name)
            anchor[b] = j.anchor
            lim = j.limits if j.limits is not None else (-np.inf, np.inf)
            lo.append(lim[0])
            hi.append(lim[1])
            locked.append(j.locked)
        if seen_children != set(body_index):
            raise ModelConfigError("every body needs exactly one parent joint")

        mass = np.array([b.mass for b in self.bodies])
        inertia = np.array([b.inertia for b in self.bodies])
        if np.any(mass <= 0) or np.any(inertia <= 0):
            raise ModelConfigError("masses and inertias must be positive")
        com_off = np.array([b.com_offset for b in self.bodies], dtype=np.float64)

        self.n_dof = len(dof_names)
        self.dof_names = dof_names
        self.body_index = body_index
        self.joint_dof = joint_dof
        self.q_neutral = np.zeros(self.n_dof)
        self.q_neutral[0:2] = self.q_neutral_root
        self.free = ~np.array(locked, dtype=bool)
        self.lo = np.array(lo)
        self.hi = np.array(hi)
        self.topo = (parent, jdof,
                     np.ascontiguousarray(anchor),
                     np.ascontiguousarray(com_off),
                     mass, inertia)

        n_m = len(self.muscles)
        R = np.zeros((n_m, self.n_dof))
        for i, mp in enumerate(self.muscles):
            for jname, arm in mp.moment_arms.items():
                if jname not in joint_dof:
                    raise ModelConfigError(
                        f"muscle {mp.params.name!r} spans unknown joint {jname!r}")
                R[i, joint_dof[jname]] = arm
            if mp.rest_length <= 0:
                raise ModelConfigError(f"muscle {mp.params.name!r}: rest length <= 0")
        self.R = R
        self.mus = (
            np.ascontiguousarray(R),
            np.array([m.rest_length for m in self.muscles]),
            np.array([m.params.l_opt for m in self.muscles]),
            np.array([m.params.f_max * m.params.strength_scale for m in self.muscles]),
            np.array([math.cos(m.params.pennation) for m in self.muscles]),
            np.array([m.params.v_max for m in self.muscles]),
            np.array([m.params.tau_act for m in self.muscles]),
            np.array([m.params.tau_deact for m in self.muscles]),
            self.q_neutral,
        )

        self.con = (
            np.array([body_index[s.body] for s in self.contact_spheres], dtype=np.int64),
            np.ascontiguousarray(
                np.array([s.offset for s in self.contact_spheres], dtype=np.float64).reshape(-1, 2)),
            np.array([s.radius for s in self.contact_spheres]),
        )

        self.act_dof = np.array([joint_dof[j] for j in self.actuated_joints], dtype=np.int64)
        self.foot_body_idx = np.array([body_index[b] for b in self.foot_bodies], dtype=np.int64)
        self.pelvis_idx = body_index[self.pelvis_body]
        self.total_mass = float(mass.sum())

    # -- convenience -------------------------------------------------------
    @property
    def n_muscles(self) -> int:
        return len(self.muscles)

    @property
    def n_actuated(self) -> int:
        return len(self.act_dof)

    def muscle_index(self, name: str) -> int:
        for i, m in enumerate(self.muscles):
            if m.params.name == name:
                return i
        raise KeyError(name)

    def with_muscles(self, muscles: list) -> "SkeletonModel":
        """Copy of this model with a replacement muscle set (scenario transforms)."""
        return SkeletonModel(
            name=self.name, bodies=self.bodies, joints=self.joints,
            muscles=muscles, contact_spheres=self.contact_spheres,
            contact=self.contact, markers=self.markers, gravity=self.gravity,
            pelvis_body=self.pelvis_body, foot_bodies=self.foot_bodies,
            ankle_joints=self.ankle_joints, actuated_joints=self.actuated_joints,
            q_neutral_root=self.q_neutral_root)


@dataclass
class SkeletonState:
    """Generalized state plus per-sphere friction anchors. Owned by one episode."""

    q: np.ndarray
    qdot: np.ndarray
    t: float = 0.0
    anchor_x: np.ndarray | None = None
    anchor_on: np.ndarray | None = None

    def copy(self) -> "SkeletonState":
        return SkeletonState(self.q.copy(), self.qdot.copy(), self.t,
                             None if self.anchor_x is None else self.anchor_x.copy(),
                             None if self.anchor_on is None else self.anchor_on.copy())


def neutral_state(model: SkeletonModel) -> SkeletonState:
    st = SkeletonState(model.q_neutral.copy(), np.zeros(model.n_dof))
    _ensure_anchors(model, st)
    return st


def _ensure_anchors(model: SkeletonModel, state: SkeletonState):
    ns = len(model.contact_spheres)
    if state.anchor_x is None:
        state.anchor_x = np.zeros(ns)
        state.anchor_on = np.zeros(ns, dtype=bool)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite state")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def mass_matrix(model: SkeletonModel, q) -> np.ndarray:
    """Symmetric positive-definite generalized mass matrix."""
    q = np.asarray(q, dtype=np.float64)
    _check_finite(q)
    return K.mass_matrix(model.topo, q, model.n_dof)


def bias_forces(model: SkeletonModel, q, qdot) -> np.ndarray:
    """Coriolis/centrifugal plus gravity generalized forces."""
    q = np.asarray(q, dtype=np.float64)
    qdot = np.asarray(qdot, dtype=np.float64)
    _check_finite(q, qdot)
    return K.bias_forces(model.topo, q, qdot, model.gravity, model.n_dof)


def muscle_lengths(model: SkeletonModel, q, qdot):
    """Per-muscle (l_norm, v_norm) from the linear path model."""
    q = np.asarray(q, dtype=np.float64)
    qdot = np.asarray(qdot, dtype=np.float64)
    _check_finite(q)
    l_norm, v_norm = K.muscle_geometry(model.mus, q, qdot)
    if np.any(l_norm <= 0):
        bad = [model.muscles[i].params.name for i in np.nonzero(l_norm <= 0)[0]]
        raise ModelConfigError(f"non-positive muscle path length for {bad}")
    return l_norm, v_norm


def muscle_joint_torques(model: SkeletonModel, activations, q, qdot) -> np.ndarray:
    """Generalized torques R^T F_M(a, q, qdot); affine in the activations."""
    act = np.asarray(activations, dtype=np.float64)
    if act.shape != (model.n_muscles,):
        raise ValueError("activation vector has wrong length")
    if np.any((act < 0) | (act > 1)):
        raise ValueError("activations outside [0, 1]")
    l_norm, v_norm = muscle_lengths(model, q, qdot)
    force, _, _ = K.muscle_forces(model.mus, act, l_norm, v_norm)
    return K.muscle_torques(model.mus, force, model.n_dof)


def muscle_torque_affine(model: SkeletonModel, q, qdot):
    """The affine map tau(a) = D a + tau0 on the actuated dofs.

    Returns (D, tau0) with D of shape (n_actuated, n_muscles).  This is what
    the muscle-coordination regression needs from the plant.
    """
    l_norm, v_norm = muscle_lengths(model, q, qdot)
    zeros = np.zeros(model.n_muscles)
    _, k1, f0 = K.muscle_forces(model.mus, zeros, l_norm, v_norm)
    Ract = model.R[:, model.act_dof]           # (n_m, n_act)
    D = Ract.T * k1[np.newaxis, :]
    tau0 = Ract.T @ f0
    return D, tau0


def contact_forces(model: SkeletonModel, state: SkeletonState,
                   params: ContactParams | None = None):
    """Per-sphere world forces and the COP x-position (None if airborne).

    Pure: friction anchors are advanced on a copy, not on ``state``.
    """
    params = params or model.contact
    _ensure_anchors(model, state)
    ax = state.anchor_x.copy()
    aon = state.anchor_on.copy()
    _check_finite(state.q, state.qdot)
    _, forces, cop_num, cop_den = K.contact_forces(
        model.topo, model.con, params.k_n, params.k_d, params.mu,
        state.q, state.qdot, ax, aon, model.n_dof)
    cop = cop_num / cop_den if cop_den > 0 else None
    return forces, cop


def stable_pd_torque(q, qdot, q_desired, dt, kp: float = PD_KP, kv: float = PD_KV):
    """Stable-PD torque: -kp (q + dt qdot - q_desired) - kv qdot."""
    q = np.asarray(q, dtype=np.float64)
    qdot = np.asarray(qdot, dtype=np.float64)
    q_desired = np.asarray(q_desired, dtype=np.float64)
    return -kp * (q + dt * qdot - q_desired) - kv * qdot


def step(model: SkeletonModel, state: SkeletonState, activations,
         params: ContactParams | None = None, dt: float = SIM_DT) -> SkeletonState:
    """One semi-implicit Euler substep under muscle activations and contact."""
    params = params or model.contact
    new = state.copy()
    _ensure_anchors(model, new)
    _check_finite(new.q, new.qdot)
    act = np.asarray(activations, dtype=np.float64)
    if model.n_muscles:
        l_norm, v_norm = muscle_lengths(model, new.q, new.qdot)
        force, _, _ = K.muscle_forces(model.mus, act, l_norm, v_norm)
        Q = K.muscle_torques(model.mus, force, model.n_dof)
    else:
        Q = np.zeros(model.n_dof)
    Qc, _, _, _ = K.contact_forces(
        model.topo, model.con, params.k_n, params.k_d, params.mu,
        new.q, new.qdot, new.anchor_x, new.anchor_on, model.n_dof)
    Q = Q + Qc
    try:
        K.integrate_step(model.topo, new.q, new.qdot, Q, model.gravity,
                         model.free, model.lo, model.hi, dt, model.n_dof)
    except Exception as exc:  # singular mass matrix cannot occur for M > 0
        raise NumericError(f"dynamics solve failed: {exc}") from exc
    if not (np.all(np.isfinite(new.q)) and np.all(np.isfinite(new.qdot))):
        raise NumericError("integration produced non-finite state")
    new.t = state.t + dt
    return new


# ---------------------------------------------------------------------------
# kinematic helpers
# ---------------------------------------------------------------------------

def body_kinematics(model: SkeletonModel, q, qdot=None):
    """FK for all bodies: (pos, theta, vel, omega, com_pos, com_vel)."""
    q = np.asarray(q, dtype=np.float64)
    if qdot is None:
        qdot = np.zeros(model.n_dof)
    qdot = np.asarray(qdot, dtype=np.float64)
    return K.fk(model.topo, q, qdot)


def com_state(model: SkeletonModel, q, qdot=None):
    """Whole-body COM position and velocity (2-vectors)."""
    _, _, _, _, cpos, cvel = body_kinematics(model, q, qdot)
    m = model.topo[4]
    pos = (m[:, np.newaxis] * cpos).sum(axis=0) / model.total_mass
    vel = (m[:, np.newaxis] * cvel).sum(axis=0) / model.total_mass
    return pos, vel


def com_jacobian(model: SkeletonModel, q, body: int):
    """Linear-velocity Jacobian (2, n_dof) of one body's COM."""
    Jv, _, _, _, _ = K.com_jacobians(model.topo, np.asarray(q, dtype=np.float64),
                                     model.n_dof)
    return Jv[body]


def marker_position(model: SkeletonModel, q, name: str):
    body, off = model.markers[name]
    pos, theta, _, _, _, _ = body_kinematics(model, q)
    b = model.body_index[body]
    c, s = math.cos(theta[b]), math.sin(theta[b])
    return np.array([pos[b, 0] + c * off[0] - s * off[1],
                     pos[b, 1] + s * off[0] + c * off[1]])


def linear_momentum(model: SkeletonModel, q, qdot):
    _, _, _, _, _, cvel = body_kinematics(model, q, qdot)
    m = model.topo[4]
    return (m[:, np.newaxis] * cvel).sum(axis=0)


def total_energy(model: SkeletonModel, state: SkeletonState) -> float:
    """Kinetic plus gravitational potential energy (contact springs excluded)."""
    _, _, _, omega, cpos, cvel = body_kinematics(model, state.q, state.qdot)
    m = model.topo[4]
    inr = model.topo[5]
    ke = 0.5 * float((m * (cvel ** 2).sum(axis=1)).sum() + (inr * omega ** 2).sum())
    pe = model.gravity * float((m * cpos[:, 1]).sum())
    return ke + pe
