import numpy as np
import pytest

from balancekit import models
from balancekit.muscle import MuscleParams
from balancekit.plant import (Body, ContactParams, ContactSphere, Joint,
                              MusclePath, SkeletonModel)


def make_pendulum(mass=2.0, inertia=0.06, d=0.5, base_y=1.0, gravity=9.81):
    """Locked base + one revolute link hanging down (com at (0, -d))."""
    return SkeletonModel(
        name="pendulum",
        bodies=[Body("base", 1.0, 1.0, (0.0, 0.0)),
                Body("link", mass, inertia, (0.0, -d), length=2 * d)],
        joints=[Joint("root", "planar-root", "world", "base", locked=True),
                Joint("hinge", "revolute", "base", "link", (0.0, 0.0))],
        muscles=[], contact_spheres=[], contact=ContactParams(),
        gravity=gravity,
        pelvis_body="base", foot_bodies=(), ankle_joints=(), actuated_joints=(),
        q_neutral_root=(0.0, base_y),
    )


TWO_LINK = dict(m1=2.3, I1=0.11, d1=0.21, L1=0.5,
                m2=1.4, I2=0.05, d2=0.17, L2=0.4, base_y=1.2)


def make_two_link(gravity=9.81):
    p = TWO_LINK
    return SkeletonModel(
        name="two_link",
        bodies=[Body("base", 1.0, 1.0, (0.0, 0.0)),
                Body("link1", p["m1"], p["I1"], (0.0, -p["d1"]), length=p["L1"]),
                Body("link2", p["m2"], p["I2"], (0.0, -p["d2"]), length=p["L2"])],
        joints=[Joint("root", "planar-root", "world", "base", locked=True),
                Joint("j1", "revolute", "base", "link1", (0.0, 0.0)),
                Joint("j2", "revolute", "link1", "link2", (0.0, -p["L1"]))],
        muscles=[], contact_spheres=[], contact=ContactParams(),
        gravity=gravity,
        pelvis_body="base", foot_bodies=(), ankle_joints=(), actuated_joints=(),
        q_neutral_root=(0.0, p["base_y"]),
    )


def make_one_joint_muscle(arm=0.05, f_max=1000.0, l_opt=0.1):
    """Pendulum with a single muscle spanning the hinge."""
    m = make_pendulum()
    return SkeletonModel(
        name="pendulum_muscle",
        bodies=m.bodies, joints=m.joints,
        muscles=[MusclePath(MuscleParams("mono", f_max, l_opt), {"hinge": arm}, l_opt)],
        contact_spheres=[], contact=ContactParams(),
        pelvis_body="base", foot_bodies=(), ankle_joints=(), actuated_joints=("hinge",),
        q_neutral_root=(0.0, 1.0),
    )


def make_statue():
    """Human model with every revolute joint locked (rigid body on springs)."""
    human = models.human_planar()
    joints = [Joint(j.name, j.kind, j.parent, j.child, j.anchor, j.limits,
                    locked=(j.kind == "revolute")) for j in human.joints]
    return SkeletonModel(
        name="statue", bodies=human.bodies, joints=joints, muscles=[],
        contact_spheres=human.contact_spheres, contact=human.contact,
        markers=human.markers, pelvis_body="pelvis",
        foot_bodies=human.foot_bodies, ankle_joints=(), actuated_joints=(),
        q_neutral_root=human.q_neutral_root)


@pytest.fixture(scope="session")
def human():
    return models.human_planar()


@pytest.fixture(scope="session")
def toy():
    return models.ankle_toy()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240915)
