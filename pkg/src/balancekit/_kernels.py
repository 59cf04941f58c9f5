"""Hot numeric kernels for the 600 Hz simulation loop.

Every function here is written once and runs on two paths:

* compiled with ``numba.njit`` (the default), or
* as plain numpy/Python when the environment variable ``BALANCEKIT_NUMBA``
  is set to ``0``/``false``/``off``/``no`` (or numba is not installed).

Both paths execute the same source, so they produce bit-identical results
(dense linear algebra goes through the same BLAS/LAPACK either way).  The
compiled path is typically two orders of magnitude faster on the articulated
dynamics loops; see ``benchmarks/bench_kernels.py``.

Array conventions
-----------------
Bodies form a tree; body 0 is the root and carries the planar root joint
(q[0]=x, q[1]=y, q[2]=tilt, CCW positive).  Every other body b attaches to
``parent[b]`` through a revolute joint located at ``anchor[b]`` (parent
frame); its joint angle is coordinate ``q[jdof[b]]``.  Child orientation is
``theta[parent] + q[jdof]``.  Parents precede children in the body order.

Packed model tuples (built by :mod:`balancekit.plant`):

* topo = (parent, jdof, anchor, com_off, mass, inertia)
* mus  = (R, l0, lopt, fmax_eff, cospen, vmax, tau_act, tau_deact, q_neutral)
* con  = (sph_body, sph_off, sph_r)
"""

from __future__ import annotations

import math
import os

import numpy as np

FL_WIDTH = 0.45       # active force-length Gaussian width
FV_AF = 0.25          # concentric curvature
FV_ECC = 1.4          # eccentric plateau
FV_C = (FV_ECC - 1.0) / (1.0 + 1.0 / FV_AF)  # slope-continuity constant (= 0.08)
FP_KPE = 4.0          # passive exponential shape
FP_E0 = 0.6           # passive strain at unit normalized force

STATUS_CONTINUE = 0
STATUS_FALL = 1
STATUS_FOOT_SLIDE = 2
STATUS_FOOT_LIFT = 3
STATUS_NUMERIC = 9


def _numba_requested() -> bool:
    flag = os.environ.get("BALANCEKIT_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


NUMBA_ENABLED = False
if _numba_requested():
    try:
        from numba import njit as _njit

        NUMBA_ENABLED = True
    except ImportError:  # pragma: no cover - numba is a hard dependency
        NUMBA_ENABLED = False

if NUMBA_ENABLED:
    def jit(fn):
        return _njit(cache=True)(fn)
else:
    def jit(fn):
        return fn


def py_impl(fn):
    """Return the uncompiled implementation of a kernel (for path-equality tests)."""
    return getattr(fn, "py_func", fn)


# ---------------------------------------------------------------------------
# muscle curves (scalar)
# ---------------------------------------------------------------------------

@jit
def active_force_length_s(l_norm):
    d = (l_norm - 1.0) / FL_WIDTH
    return math.exp(-d * d)


@jit
def force_velocity_s(v_norm):
    if v_norm <= -1.0:
        return 0.0
    if v_norm <= 0.0:
        return (1.0 + v_norm) / (1.0 - v_norm / FV_AF)
    return (FV_ECC * v_norm + FV_C) / (v_norm + FV_C)


@jit
def passive_force_s(l_norm):
    if l_norm <= 1.0:
        return 0.0
    return (math.exp(FP_KPE * (l_norm - 1.0) / FP_E0) - 1.0) / (math.exp(FP_KPE) - 1.0)


@jit
def activation_tau_s(u, a, tau_act, tau_deact):
    if u - a > 0.0:
        return tau_act * (0.5 + 1.5 * a)
    return tau_deact / (0.5 + 1.5 * a)


# ---------------------------------------------------------------------------
# forward kinematics / Jacobians
# ---------------------------------------------------------------------------

@jit
def fk(topo, q, qdot):
    """Body origin/COM poses and velocities for the whole tree.

    Returns (pos, theta, vel, omega, cpos, cvel).
    """
    parent, jdof, anchor, com_off, mass, inertia = topo
    nb = parent.shape[0]
    pos = np.empty((nb, 2))
    theta = np.empty(nb)
    vel = np.empty((nb, 2))
    omega = np.empty(nb)
    cpos = np.empty((nb, 2))
    cvel = np.empty((nb, 2))

    pos[0, 0] = q[0]
    pos[0, 1] = q[1]
    theta[0] = q[2]
    vel[0, 0] = qdot[0]
    vel[0, 1] = qdot[1]
    omega[0] = qdot[2]

    for b in range(1, nb):
        p = parent[b]
        c = math.cos(theta[p])
        s = math.sin(theta[p])
        rx = c * anchor[b, 0] - s * anchor[b, 1]
        ry = s * anchor[b, 0] + c * anchor[b, 1]
        pos[b, 0] = pos[p, 0] + rx
        pos[b, 1] = pos[p, 1] + ry
        theta[b] = theta[p] + q[jdof[b]]
        vel[b, 0] = vel[p, 0] - omega[p] * ry
        vel[b, 1] = vel[p, 1] + omega[p] * rx
        omega[b] = omega[p] + qdot[jdof[b]]

    for b in range(nb):
        c = math.cos(theta[b])
        s = math.sin(theta[b])
        rx = c * com_off[b, 0] - s * com_off[b, 1]
        ry = s * com_off[b, 0] + c * com_off[b, 1]
        cpos[b, 0] = pos[b, 0] + rx
        cpos[b, 1] = pos[b, 1] + ry
        cvel[b, 0] = vel[b, 0] - omega[b] * ry
        cvel[b, 1] = vel[b, 1] + omega[b] * rx
    return pos, theta, vel, omega, cpos, cvel


@jit
def com_jacobians(topo, q, n_dof):
    """Geometric COM Jacobians: Jv (nb,2,n_dof), Jw (nb,n_dof), plus FK poses."""
    parent, jdof, anchor, com_off, mass, inertia = topo
    nb = parent.shape[0]
    zero = np.zeros(q.shape[0])
    pos, theta, vel, omega, cpos, cvel = fk(topo, q, zero)
    Jv = np.zeros((nb, 2, n_dof))
    Jw = np.zeros((nb, n_dof))
    for b in range(nb):
        Jv[b, 0, 0] = 1.0
        Jv[b, 1, 1] = 1.0
        Jv[b, 0, 2] = -(cpos[b, 1] - pos[0, 1])
        Jv[b, 1, 2] = cpos[b, 0] - pos[0, 0]
        Jw[b, 2] = 1.0
        a = b
        while a != 0:
            j = jdof[a]
            Jv[b, 0, j] = -(cpos[b, 1] - pos[a, 1])
            Jv[b, 1, j] = cpos[b, 0] - pos[a, 0]
            Jw[b, j] = 1.0
            a = parent[a]
    return Jv, Jw, pos, theta, cpos


@jit
def mass_matrix(topo, q, n_dof):
    parent, jdof, anchor, com_off, mass, inertia = topo
    nb = parent.shape[0]
    Jv, Jw, pos, theta, cpos = com_jacobians(topo, q, n_dof)
    M = np.zeros((n_dof, n_dof))
    for b in range(nb):
        m = mass[b]
        inr = inertia[b]
        for j in range(n_dof):
            jx = Jv[b, 0, j]
            jy = Jv[b, 1, j]
            jw = Jw[b, j]
            if jx == 0.0 and jy == 0.0 and jw == 0.0:
                continue
            for k in range(j, n_dof):
                M[j, k] += m * (jx * Jv[b, 0, k] + jy * Jv[b, 1, k]) + inr * jw * Jw[b, k]
    for j in range(n_dof):
        for k in range(j + 1, n_dof):
            M[k, j] = M[j, k]
    return M


@jit
def bias_forces(topo, q, qdot, gravity, n_dof):
    """Generalized bias c(q, qdot): Coriolis/centrifugal plus gravity."""
    parent, jdof, anchor, com_off, mass, inertia = topo
    nb = parent.shape[0]
    pos, theta, vel, omega, cpos, cvel = fk(topo, q, qdot)
    Jv, Jw, _, _, _ = com_jacobians(topo, q, n_dof)

    # velocity-product accelerations of body origins and COMs (qddot = 0)
    avp = np.empty((nb, 2))
    avp[0, 0] = 0.0
    avp[0, 1] = 0.0
    avpc = np.empty((nb, 2))
    for b in range(nb):
        if b > 0:
            p = parent[b]
            c = math.cos(theta[p])
            s = math.sin(theta[p])
            rx = c * anchor[b, 0] - s * anchor[b, 1]
            ry = s * anchor[b, 0] + c * anchor[b, 1]
            avp[b, 0] = avp[p, 0] - omega[p] * omega[p] * rx
            avp[b, 1] = avp[p, 1] - omega[p] * omega[p] * ry
        c = math.cos(theta[b])
        s = math.sin(theta[b])
        rx = c * com_off[b, 0] - s * com_off[b, 1]
        ry = s * com_off[b, 0] + c * com_off[b, 1]
        avpc[b, 0] = avp[b, 0] - omega[b] * omega[b] * rx
        avpc[b, 1] = avp[b, 1] - omega[b] * omega[b] * ry

    out = np.zeros(n_dof)
    for b in range(nb):
        ax = avpc[b, 0]
        ay = avpc[b, 1] + gravity  # minus g_vec with g_vec = (0, -gravity)
        m = mass[b]
        for j in range(n_dof):
            out[j] += m * (Jv[b, 0, j] * ax + Jv[b, 1, j] * ay)
    return out


# ---------------------------------------------------------------------------
# muscle path geometry and forces
# ---------------------------------------------------------------------------

@jit
def muscle_geometry(mus, q, qdot):
    """Normalized lengths and velocities from the linear path model."""
    R, l0, lopt, fmax_eff, cospen, vmax, tau_act, tau_deact, q_neutral = mus
    nm = R.shape[0]
    nd = R.shape[1]
    l_norm = np.empty(nm)
    v_norm = np.empty(nm)
    for i in range(nm):
        L = l0[i]
        Ld = 0.0
        for j in range(nd):
            L -= R[i, j] * (q[j] - q_neutral[j])
            Ld -= R[i, j] * qdot[j]
        l_norm[i] = L / lopt[i]
        v_norm[i] = Ld / (vmax[i] * lopt[i])
    return l_norm, v_norm


@jit
def muscle_forces(mus, act, l_norm, v_norm):
    """Tendon-line forces plus the affine decomposition F = k1*a + f0."""
    R, l0, lopt, fmax_eff, cospen, vmax, tau_act, tau_deact, q_neutral = mus
    nm = R.shape[0]
    force = np.empty(nm)
    k1 = np.empty(nm)
    f0 = np.empty(nm)
    for i in range(nm):
        fl = active_force_length_s(l_norm[i])
        fv = force_velocity_s(v_norm[i])
        fp = passive_force_s(l_norm[i])
        k1[i] = fmax_eff[i] * fl * fv * cospen[i]
        f0[i] = fmax_eff[i] * fp * cospen[i]
        force[i] = k1[i] * act[i] + f0[i]
    return force, k1, f0


@jit
def muscle_torques(mus, force, n_dof):
    R = mus[0]
    nm = R.shape[0]
    tau = np.zeros(n_dof)
    for i in range(nm):
        for j in range(n_dof):
            tau[j] += R[i, j] * force[i]
    return tau


# ---------------------------------------------------------------------------
# penalty ground contact with anchored Coulomb friction
# ---------------------------------------------------------------------------

@jit
def contact_forces(topo, con, kn, kd, mu, q, qdot, anchor_x, anchor_on, n_dof):
    """Sphere-ground penalty forces.

    Mutates the per-sphere friction anchors.  Returns (Q, forces, cop_num,
    cop_den) where Q is the generalized contact force and forces[s] is the
    world-frame (fx, fy) applied at sphere s's lowest point.
    """
    parent, jdof, anchor, com_off, mass, inertia = topo
    sph_body, sph_off, sph_r = con
    ns = sph_body.shape[0]
    pos, theta, vel, omega, cpos, cvel = fk(topo, q, qdot)
    Q = np.zeros(n_dof)
    forces = np.zeros((ns, 2))
    cop_num = 0.0
    cop_den = 0.0
    for s in range(ns):
        b = sph_body[s]
        c = math.cos(theta[b])
        sn = math.sin(theta[b])
        ox = c * sph_off[s, 0] - sn * sph_off[s, 1]
        oy = sn * sph_off[s, 0] + c * sph_off[s, 1]
        cxp = pos[b, 0] + ox
        cyp = pos[b, 1] + oy - sph_r[s]  # lowest point of the sphere
        pen = -cyp
        if pen <= 0.0:
            anchor_on[s] = False
            continue
        # contact-point velocity
        rx = cxp - pos[b, 0]
        ry = cyp - pos[b, 1]
        vx = vel[b, 0] - omega[b] * ry
        vy = vel[b, 1] + omega[b] * rx
        fn = kn * pen - kd * vy
        if fn < 0.0:
            fn = 0.0
        if not anchor_on[s]:
            anchor_x[s] = cxp
            anchor_on[s] = True
        ft = -kn * (cxp - anchor_x[s]) - kd * vx
        lim = mu * fn
        if ft > lim:
            ft = lim
            anchor_x[s] = cxp + ft / kn
        elif ft < -lim:
            ft = -lim
            anchor_x[s] = cxp + ft / kn
        forces[s, 0] = ft
        forces[s, 1] = fn
        cop_num += fn * cxp
        cop_den += fn
        # map to generalized coordinates (point Jacobian transpose)
        Q[0] += ft
        Q[1] += fn
        Q[2] += -(cyp - pos[0, 1]) * ft + (cxp - pos[0, 0]) * fn
        a = b
        while a != 0:
            j = jdof[a]
            Q[j] += -(cyp - pos[a, 1]) * ft + (cxp - pos[a, 0]) * fn
            a = parent[a]
    return Q, forces, cop_num, cop_den


# ---------------------------------------------------------------------------
# semi-implicit integration step
# ---------------------------------------------------------------------------

@jit
def integrate_step(topo, q, qdot, Q_applied, gravity, free, lo, hi, dt, n_dof):
    """Solve M qddot = Q_applied - c on the free dofs and integrate in place."""
    M = mass_matrix(topo, q, n_dof)
    c = bias_forces(topo, q, qdot, gravity, n_dof)
    nf = 0
    for j in range(n_dof):
        if free[j]:
            nf += 1
    Mff = np.empty((nf, nf))
    rhs = np.empty(nf)
    fi = 0
    for j in range(n_dof):
        if not free[j]:
            continue
        rhs[fi] = Q_applied[j] - c[j]
        fk_ = 0
        for k in range(n_dof):
            if free[k]:
                Mff[fi, fk_] = M[j, k]
                fk_ += 1
        fi += 1
    acc = np.linalg.solve(Mff, rhs)
    fi = 0
    for j in range(n_dof):
        if free[j]:
            qdot[j] += dt * acc[fi]
            fi += 1
        else:
            qdot[j] = 0.0
    for j in range(n_dof):
        q[j] += dt * qdot[j]
    # joint limits: clamp coordinate, zero the limit-violating velocity
    for j in range(3, n_dof):
        if q[j] < lo[j]:
            q[j] = lo[j]
            if qdot[j] < 0.0:
                qdot[j] = 0.0
        elif q[j] > hi[j]:
            q[j] = hi[j]
            if qdot[j] > 0.0:
                qdot[j] = 0.0


# ---------------------------------------------------------------------------
# MLP forward (flat parameter layout shared with balancekit.nnet)
# ---------------------------------------------------------------------------

@jit
def mlp_forward_flat(wflat, shapes, x):
    """Dense tanh MLP forward on a flat parameter vector.

    ``shapes[l] = (n_in, n_out)``.  Hidden layers use tanh; the final layer
    is linear (heads are applied by the caller).
    """
    h = x
    off = 0
    nl = shapes.shape[0]
    for l in range(nl):
        nin = shapes[l, 0]
        nout = shapes[l, 1]
        W = wflat[off:off + nout * nin].reshape(nout, nin)
        off += nout * nin
        z = np.dot(W, h)
        for i in range(nout):
            z[i] += wflat[off + i]
        off += nout
        if l < nl - 1:
            for i in range(nout):
                z[i] = math.tanh(z[i])
        h = z
    return h


# ---------------------------------------------------------------------------
# fused policy-tick loop (the hot path)
# ---------------------------------------------------------------------------

@jit
def run_substeps(
    topo, mus, con, gravity, free, lo, hi,
    q, qdot, act, anchor_x, anchor_on,
    q_des, act_dof, kp, kv, kn, kd, mu,
    mcn_wflat, mcn_shapes, mcn_tau_scale, tau_clip,
    dt, n_sub, anticipate,
    pelvis_body, fall_height, foot_bodies, foot_init, slide_max, lift_max,
    tau_d_hist, mcn_in_hist, k1_hist, f0_hist,
):
    """Run up to ``n_sub`` simulation substeps of one policy tick.

    State arrays (q, qdot, act, anchors) are updated in place; per-substep
    training tuples are written into the ``*_hist`` buffers.  Returns
    (status, n_done).
    """
    n_dof = q.shape[0]
    n_act = act_dof.shape[0]
    nm = act.shape[0]
    for i in range(n_sub):
        # stable-PD target torques, clamped to the muscle capacity envelope
        # (demands beyond it are unachievable and destabilize the regression)
        for k in range(n_act):
            j = act_dof[k]
            td = -kp * (q[j] + dt * qdot[j] - q_des[k]) - kv * qdot[j]
            if td > tau_clip[k]:
                td = tau_clip[k]
            elif td < -tau_clip[k]:
                td = -tau_clip[k]
            tau_d_hist[i, k] = td

        l_norm, v_norm = muscle_geometry(mus, q, qdot)
        for m in range(nm):
            if l_norm[m] <= 0.0 or not math.isfinite(l_norm[m]):
                return STATUS_NUMERIC, i + 1

        # muscle-network input: desired torques (scaled into tanh range)
        # then (l, v, a) per muscle
        for k in range(n_act):
            mcn_in_hist[i, k] = tau_d_hist[i, k] * mcn_tau_scale
        for m in range(nm):
            mcn_in_hist[i, n_act + 3 * m] = l_norm[m]
            mcn_in_hist[i, n_act + 3 * m + 1] = v_norm[m]
            mcn_in_hist[i, n_act + 3 * m + 2] = act[m]

        u = mlp_forward_flat(mcn_wflat, mcn_shapes, mcn_in_hist[i].copy())
        for m in range(nm):
            t = math.tanh(u[m])
            u[m] = t if t > 0.0 else 0.0

        if anticipate and i == 0:
            for m in range(nm):
                act[m] = u[m]
        else:
            for m in range(nm):
                tau = activation_tau_s(u[m], act[m], mus[6][m], mus[7][m])
                a_new = act[m] + dt * (u[m] - act[m]) / tau
                if a_new < 0.0:
                    a_new = 0.0
                elif a_new > 1.0:
                    a_new = 1.0
                act[m] = a_new

        force, k1, f0 = muscle_forces(mus, act, l_norm, v_norm)
        for m in range(nm):
            k1_hist[i, m] = k1[m]
            f0_hist[i, m] = f0[m]

        Q = muscle_torques(mus, force, n_dof)
        Qc, cf, cop_n, cop_d = contact_forces(
            topo, con, kn, kd, mu, q, qdot, anchor_x, anchor_on, n_dof)
        for j in range(n_dof):
            Q[j] += Qc[j]

        integrate_step(topo, q, qdot, Q, gravity, free, lo, hi, dt, n_dof)

        for j in range(n_dof):
            if not math.isfinite(q[j]) or not math.isfinite(qdot[j]):
                return STATUS_NUMERIC, i + 1

        # early-termination checks: fall, then foot slide, then foot lift
        pos, theta, vel, omega, cpos, cvel = fk(topo, q, qdot)
        if cpos[pelvis_body, 1] < fall_height:
            return STATUS_FALL, i + 1
        for f in range(foot_bodies.shape[0]):
            b = foot_bodies[f]
            if abs(cpos[b, 0] - foot_init[f, 0]) > slide_max:
                return STATUS_FOOT_SLIDE, i + 1
        for f in range(foot_bodies.shape[0]):
            b = foot_bodies[f]
            if cpos[b, 1] - foot_init[f, 1] > lift_max:
                return STATUS_FOOT_LIFT, i + 1
    return STATUS_CONTINUE, n_sub
