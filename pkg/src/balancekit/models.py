"""Model definitions: bundled skeletons, JSON schema I/O, posture helpers.

The bundled segment masses, inertias, lengths and muscle tables are
documented defaults, not measured ground truth: they are calibrated so that
the upright whole-body COM sits at 0.9877 m, the pelvis COM at 0.965 m, and
the forward-lean angle that puts the whole-body COM over the foot COM lands
near 5.56 deg.  Everything here can be overridden through a model JSON file
(schema ``balancekit/model-v1``).
"""

from __future__ import annotations

import json
import math
from importlib import resources

import numpy as np

from .muscle import MuscleParams
from .plant import (Body, ContactParams, ContactSphere, Joint, MusclePath,
                    SkeletonModel, body_kinematics, com_state)

MODEL_SCHEMA = "balancekit/model-v1"

DEG = math.pi / 180.0

# 9 bilateral muscles: (name, f_max N, l_opt m, pennation rad, {joint: arm m})
# Arm signs follow the joint conventions: +hip flexion, -knee flexion,
# +ankle dorsiflexion.  A positive arm shortens the muscle as q increases.
_MUSCLE_TABLE = [
    ("GMAX", 1500.0, 0.16, 0.00, {"hip": -0.05}),
    ("IL",   1500.0, 0.16, 0.00, {"hip": +0.05}),
    ("HAMS", 3000.0, 0.22, 0.00, {"hip": -0.05, "knee": -0.02}),
    ("RF",   1200.0, 0.22, 0.09, {"hip": +0.04, "knee": +0.03}),
    ("VAS",  6000.0, 0.12, 0.09, {"knee": +0.04}),
    ("BFSH",  800.0, 0.10, 0.40, {"knee": -0.03}),
    ("GAS",  1500.0, 0.14, 0.30, {"knee": -0.02, "ankle": -0.05}),
    ("SOL",  4000.0, 0.08, 0.44, {"ankle": -0.05}),
    ("TA",    600.0, 0.07, 0.09, {"ankle": +0.03}),
]

# pelvis/torso COM x-offsets solved so the computed COM-over-foot-COM lean
# angle is ~5.56 deg (see compute_target_ankle)
_PELVIS_COM_X = -0.077122
_TORSO_COM_X = -0.06


def human_planar() -> SkeletonModel:
    """Planar 8-segment human: pelvis+torso (lumbar locked), legs, feet."""
    bodies = [
        Body("pelvis", 11.777, 0.10, (_PELVIS_COM_X, 0.045)),
        Body("torso", 34.2366, 1.40, (_TORSO_COM_X, 0.324), length=0.60),
        Body("thigh_l", 9.3014, 0.13, (0.0, -0.1775), length=0.41),
        Body("shank_l", 3.7075, 0.048, (0.0, -0.186), length=0.43),
        Body("foot_l", 1.5666, 0.010, (0.051, -0.04), length=0.20),
        Body("thigh_r", 9.3014, 0.13, (0.0, -0.1775), length=0.41),
        Body("shank_r", 3.7075, 0.048, (0.0, -0.186), length=0.43),
        Body("foot_r", 1.5666, 0.010, (0.051, -0.04), length=0.20),
    ]
    hip_lim = (-30 * DEG, 120 * DEG)
    knee_lim = (-120 * DEG, 10 * DEG)
    ankle_lim = (-40 * DEG, 30 * DEG)
    joints = [
        Joint("root", "planar-root", "world", "pelvis"),
        Joint("lumbar", "revolute", "pelvis", "torso", (0.0, 0.115),
              limits=(-0.5, 0.5), locked=True),
        Joint("hip_l", "revolute", "pelvis", "thigh_l", (0.0, 0.0), hip_lim),
        Joint("knee_l", "revolute", "thigh_l", "shank_l", (0.0, -0.41), knee_lim),
        Joint("ankle_l", "revolute", "shank_l", "foot_l", (0.0, -0.43), ankle_lim),
        Joint("hip_r", "revolute", "pelvis", "thigh_r", (0.0, 0.0), hip_lim),
        Joint("knee_r", "revolute", "thigh_r", "shank_r", (0.0, -0.41), knee_lim),
        Joint("ankle_r", "revolute", "shank_r", "foot_r", (0.0, -0.43), ankle_lim),
    ]
    muscles = []
    for side, tag in (("left", "_l"), ("right", "_r")):
        for name, f_max, l_opt, penn, arms in _MUSCLE_TABLE:
            muscles.append(MusclePath(
                params=MuscleParams(name=name + tag, f_max=f_max, l_opt=l_opt,
                                    pennation=penn),
                moment_arms={j + tag: a for j, a in arms.items()},
                rest_length=l_opt,
                side=side,
            ))
    spheres = []
    for tag in ("_l", "_r"):
        # heel 4.9 cm behind the ankle, two toe spheres 15 cm in front
        spheres.append(ContactSphere("foot" + tag, (-0.049, -0.06), 0.02))
        spheres.append(ContactSphere("foot" + tag, (0.15, -0.06), 0.02))
        spheres.append(ContactSphere("foot" + tag, (0.15, -0.06), 0.02))
    return SkeletonModel(
        name="human_planar",
        bodies=bodies,
        joints=joints,
        muscles=muscles,
        contact_spheres=spheres,
        contact=ContactParams(),
        markers={"head": ("torso", (_PELVIS_COM_X, 0.60))},
        pelvis_body="pelvis",
        foot_bodies=("foot_l", "foot_r"),
        ankle_joints=("ankle_l", "ankle_r"),
        actuated_joints=("hip_l", "knee_l", "ankle_l", "hip_r", "knee_r", "ankle_r"),
        q_neutral_root=(0.0, 0.92),   # hips at 0.92 m puts the pelvis COM at 0.965 m
    )


def ankle_toy() -> SkeletonModel:
    """Single-DOF ankle inverted pendulum with one plantarflexor/dorsiflexor pair."""
    bodies = [
        Body("body", 70.0, 19.0, (0.0, 0.90), length=1.80),
        Body("foot", 1.2, 0.005, (0.04, -0.02), length=0.18),
    ]
    joints = [
        Joint("root", "planar-root", "world", "body"),
        Joint("ankle", "revolute", "body", "foot", (0.0, 0.0), (-0.7, 0.6)),
    ]
    muscles = [
        MusclePath(MuscleParams("pf", 8000.0, 0.08), {"ankle": -0.05}, 0.08),
        MusclePath(MuscleParams("df", 2500.0, 0.07), {"ankle": +0.04}, 0.07),
    ]
    spheres = [
        ContactSphere("foot", (-0.06, -0.03), 0.01),
        ContactSphere("foot", (0.12, -0.03), 0.01),
    ]
    return SkeletonModel(
        name="ankle_toy",
        bodies=bodies,
        joints=joints,
        muscles=muscles,
        contact_spheres=spheres,
        contact=ContactParams(),
        markers={"head": ("body", (0.0, 1.60))},
        pelvis_body="body",
        foot_bodies=("foot",),
        ankle_joints=("ankle",),
        actuated_joints=("ankle",),
        q_neutral_root=(0.0, 0.04),
    )


_BUILTINS = {"human_planar": human_planar, "ankle_toy": ankle_toy}


# ---------------------------------------------------------------------------
# posture helpers
# ---------------------------------------------------------------------------

def lean_posture(model: SkeletonModel, theta: float) -> np.ndarray:
    """Coordinates for a straight-legged lean of ``theta`` at the ankles.

    Ankles are set to theta, every other joint to neutral, and the root tilt
    compensates so the feet stay flat; the root is then translated so the
    ankle joints sit at their neutral world position.
    """
    q = model.q_neutral.copy()
    chain = 0.0
    foot = model.foot_body_idx[0]
    parent = model.topo[0]
    jdof = model.topo[1]
    for aj in model.ankle_joints:
        q[model.joint_dof[aj]] = model.q_neutral[model.joint_dof[aj]] + theta
    b = foot
    while b != 0:
        chain += q[jdof[b]]
        b = parent[b]
    q[2] = -chain
    pos0, _, _, _, _, _ = body_kinematics(model, model.q_neutral)
    pos1, _, _, _, _, _ = body_kinematics(model, q)
    q[0] += pos0[foot, 0] - pos1[foot, 0]
    q[1] += pos0[foot, 1] - pos1[foot, 1]
    return q


def foot_com_x(model: SkeletonModel, q) -> float:
    """Mean world x of the foot-body COMs."""
    _, _, _, _, cpos, _ = body_kinematics(model, q)
    return float(cpos[model.foot_body_idx, 0].mean())


def compute_target_ankle(model: SkeletonModel, lo: float = -0.2, hi: float = 0.3,
                         tol: float = 1e-12) -> float:
    """Ankle angle of the straight-legged lean with COM over the foot COM."""
    def err(theta):
        q = lean_posture(model, theta)
        pos, _ = com_state(model, q)
        return pos[0] - foot_com_x(model, q)

    elo, ehi = err(lo), err(hi)
    if elo * ehi > 0:
        raise ValueError("COM-over-foot-COM lean angle not bracketed")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        em = err(mid)
        if abs(em) < tol or hi - lo < tol:
            return mid
        if elo * em <= 0:
            hi, ehi = mid, em
        else:
            lo, elo = mid, em
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# JSON schema (balancekit/model-v1)
# ---------------------------------------------------------------------------

def model_to_dict(model: SkeletonModel) -> dict:
    return {
        "schema": MODEL_SCHEMA,
        "name": model.name,
        "gravity": model.gravity,
        "bodies": [
            {"name": b.name, "mass": b.mass, "inertia": b.inertia,
             "com_offset": list(b.com_offset), "length": b.length}
            for b in model.bodies
        ],
        "joints": [
            {"name": j.name, "kind": j.kind, "parent": j.parent, "child": j.child,
             "anchor": list(j.anchor),
             "limits": list(j.limits) if j.limits else None,
             "locked": j.locked}
            for j in model.joints
        ],
        "muscles": [
            {"name": m.params.name, "f_max": m.params.f_max,
             "l_opt": m.params.l_opt, "pennation": m.params.pennation,
             "v_max": m.params.v_max, "tau_act": m.params.tau_act,
             "tau_deact": m.params.tau_deact,
             "strength_scale": m.params.strength_scale,
             "moment_arms": dict(m.moment_arms),
             "rest_length": m.rest_length, "side": m.side}
            for m in model.muscles
        ],
        "contact_spheres": [
            {"body": s.body, "offset": list(s.offset), "radius": s.radius}
            for s in model.contact_spheres
        ],
        "contact": {"k_n": model.contact.k_n, "k_d": model.contact.k_d,
                    "mu": model.contact.mu},
        "markers": {k: {"body": v[0], "offset": list(v[1])}
                    for k, v in model.markers.items()},
        "pelvis_body": model.pelvis_body,
        "foot_bodies": list(model.foot_bodies),
        "ankle_joints": list(model.ankle_joints),
        "actuated_joints": list(model.actuated_joints),
        "q_neutral_root": list(model.q_neutral_root),
    }


def model_from_dict(data: dict) -> SkeletonModel:
    if data.get("schema") != MODEL_SCHEMA:
        raise ValueError(f"unsupported model schema {data.get('schema')!r}")
    return SkeletonModel(
        name=data["name"],
        bodies=[Body(b["name"], b["mass"], b["inertia"], tuple(b["com_offset"]),
                     b.get("length", 0.0)) for b in data["bodies"]],
        joints=[Joint(j["name"], j["kind"], j["parent"], j["child"],
                      tuple(j.get("anchor", (0.0, 0.0))),
                      tuple(j["limits"]) if j.get("limits") else None,
                      j.get("locked", False)) for j in data["joints"]],
        muscles=[MusclePath(
            MuscleParams(m["name"], m["f_max"], m["l_opt"], m.get("pennation", 0.0),
                         m.get("v_max", 10.0), m.get("tau_act", 0.01),
                         m.get("tau_deact", 0.04), m.get("strength_scale", 1.0)),
            dict(m["moment_arms"]), m["rest_length"], m.get("side"))
            for m in data["muscles"]],
        contact_spheres=[ContactSphere(s["body"], tuple(s["offset"]), s["radius"])
                         for s in data["contact_spheres"]],
        contact=ContactParams(**data.get("contact", {})),
        markers={k: (v["body"], tuple(v["offset"]))
                 for k, v in data.get("markers", {}).items()},
        gravity=data.get("gravity", 9.81),
        pelvis_body=data["pelvis_body"],
        foot_bodies=tuple(data["foot_bodies"]),
        ankle_joints=tuple(data["ankle_joints"]),
        actuated_joints=tuple(data["actuated_joints"]),
        q_neutral_root=tuple(data.get("q_neutral_root", (0.0, 0.0))),
    )


def save_model(model: SkeletonModel, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path_or_builtin) -> SkeletonModel:
    """Load a model JSON file, or resolve a ``builtin:<name>`` reference."""
    ref = str(path_or_builtin)
    if ref.startswith("builtin:"):
        name = ref.split(":", 1)[1]
        if name not in _BUILTINS:
            raise ValueError(f"unknown builtin model {name!r}")
        return _BUILTINS[name]()
    with open(ref) as fh:
        return model_from_dict(json.load(fh))


def packaged_model_path(name: str):
    return resources.files("balancekit").joinpath(f"data/{name}.json")
