"""Planar articulated rigid-body simulation in reduced coordinates.

The floating base contributes three generalized coordinates (x, z, pitch),
every actuated joint one more. Internally the base is expanded into two
virtual prismatic bodies plus the base revolute, so each body carries
exactly one degree of freedom and body index == dof index.

Planar spatial vectors are (omega, vx, vz). The mass matrix comes from the
composite-rigid-body recursion, bias forces from a recursive Newton-Euler
pass with zero accelerations and the gravity-as-base-acceleration trick.
Integration is semi-implicit Euler. Ground contact is a spring-damper
penalty at declared contact points with a Coulomb-style tangential clamp.

All heavy routines are batched over a leading environment axis; the
module-level `step`/`fk` functions are single-instance conveniences that
run a cached batch of one.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np

from .robot import RobotModel, ModelError, UPPER, LOWER

GRAVITY = 9.81

ALIVE = "alive"
FELL = "fell"
LOST_TRACKING = "lost_tracking"


class SimulationError(RuntimeError):
    """Non-finite state detected after a step; message names the entry."""


@dataclass
class SimParams:
    control_dt: float = 0.02
    substeps: int = 4
    gravity: float = GRAVITY
    contact_kn: float = 4.0e4       # normal penalty stiffness, N/m
    contact_dn: float = 2.0e3       # normal penalty damping, N s/m
    contact_kt: float = 3.0e4       # tangential anchor-spring stiffness, N/m
    anchor_release: float = 0.005   # anchor survives separations shallower than this, m
    limit_kp: float = 300.0         # joint-limit penalty stiffness
    limit_kd: float = 8.0
    ground_height: float = 0.0
    termination_margin: float = 0.04    # non-foot points below ground+margin => fell
    tracking_cutoff: float = 0.5        # mean keypoint error above this => lost_tracking

    @property
    def sub_dt(self) -> float:
        return self.control_dt / self.substeps


@dataclass
class RandomizationRanges:
    """Multiplicative uniform ranges plus additive observation noise sigma."""
    mass: tuple[float, float] = (0.8, 1.2)
    kp: tuple[float, float] = (0.9, 1.1)
    kd: tuple[float, float] = (0.9, 1.1)
    friction: tuple[float, float] = (0.7, 1.3)
    obs_noise: float = 0.01

    def validate(self) -> None:
        for name in ("mass", "kp", "kd", "friction"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"randomization range {name!r} must satisfy 0 < lo <= hi")
        if self.obs_noise < 0:
            raise ValueError("obs_noise must be >= 0")


def sample_scales(ranges: RandomizationRanges, rng: np.random.Generator) -> dict[str, float]:
    ranges.validate()
    return {
        "mass": float(rng.uniform(*ranges.mass)),
        "kp": float(rng.uniform(*ranges.kp)),
        "kd": float(rng.uniform(*ranges.kd)),
        "friction": float(rng.uniform(*ranges.friction)),
    }


def randomize(model: RobotModel, ranges: RandomizationRanges, seed: int) -> RobotModel:
    """Deterministic per seed: returns a scaled copy of the model."""
    from .robot import scale_model
    s = sample_scales(ranges, np.random.default_rng(seed))
    return scale_model(model, s["mass"], s["kp"], s["kd"], s["friction"])


# -- compiled topology -----------------------------------------------------

_REV, _PX, _PZ = 0, 1, 2  # joint archetypes: revolute, prismatic-x, prismatic-z


@dataclass
class CompiledModel:
    model: RobotModel
    nb: int                       # bodies == dofs
    parent: np.ndarray            # (nb,) int, -1 for the root
    jtype: np.ndarray             # (nb,) int
    sidx: np.ndarray              # (nb,) component index of the joint's motion axis
    ssign: np.ndarray             # (nb,) axis sign
    attach: np.ndarray            # (nb, 2) joint origin in the parent frame
    rest: np.ndarray              # (nb,) mounting angle
    mass: np.ndarray              # (nb,)
    com: np.ndarray               # (nb, 2)
    inertia: np.ndarray           # (nb,) about the COM
    anc: np.ndarray               # (nb, nb) bool, anc[b, d]: dof d on root path of body b
    dof_names: list[str]
    link_body: np.ndarray         # (n_links,) body index per model link order
    kp_body: np.ndarray           # (K,) body per keypoint
    kp_off: np.ndarray            # (K, 2)
    contact_body: np.ndarray      # (C,)
    contact_off: np.ndarray       # (C, 2)
    check_body: np.ndarray        # termination probe points (non-foot link ends)
    check_off: np.ndarray
    upper_joints: np.ndarray      # (J,) bool masks over actuated joints
    lower_joints: np.ndarray
    foot_joint_of_contact: np.ndarray  # (C,) index into foot list (identity here)

    @property
    def ndof(self) -> int:
        return self.nb

    @property
    def nj(self) -> int:
        return self.nb - 3


def _spatial_inertia(mass: float, com: np.ndarray, inertia: float) -> np.ndarray:
    """Planar spatial inertia in (omega, vx, vz) coordinates."""
    cx, cz = com
    m = mass
    return np.array([
        [inertia + m * (cx * cx + cz * cz), -m * cz, m * cx],
        [-m * cz, m, 0.0],
        [m * cx, 0.0, m],
    ])


@functools.lru_cache(maxsize=32)
def compile_model(model: RobotModel) -> CompiledModel:
    nb = 3 + len(model.joints)
    parent = np.full(nb, -1, dtype=np.intp)
    jtype = np.zeros(nb, dtype=np.intp)
    sidx = np.zeros(nb, dtype=np.intp)
    ssign = np.ones(nb)
    attach = np.zeros((nb, 2))
    rest = np.zeros(nb)
    mass = np.zeros(nb)
    com = np.zeros((nb, 2))
    inertia = np.zeros(nb)

    # bodies 0, 1: virtual prismatics; body 2: base link with the pitch dof
    jtype[0], sidx[0] = _PX, 1
    jtype[1], sidx[1] = _PZ, 2
    parent[1] = 0
    jtype[2], sidx[2] = _REV, 0
    parent[2] = 1
    rest[2] = model.base_mount
    base_link = model.link(model.base)
    mass[2], com[2], inertia[2] = base_link.mass, base_link.com, base_link.inertia

    body_of_link = {model.base: 2}
    for i, j in enumerate(model.joints):
        b = 3 + i
        if j.parent not in body_of_link:
            raise ModelError(
                f"joint {j.name!r}: joints must be listed parent-first "
                f"(link {j.parent!r} not yet placed)")
        parent[b] = body_of_link[j.parent]
        jtype[b], sidx[b] = _REV, 0
        ssign[b] = float(j.axis)
        attach[b] = j.attach
        rest[b] = j.rest
        link = model.link(j.child)
        mass[b], com[b], inertia[b] = link.mass, link.com, link.inertia
        body_of_link[j.child] = b

    anc = np.zeros((nb, nb), dtype=bool)
    for b in range(nb):
        cur = b
        while cur >= 0:
            anc[b, cur] = True
            cur = parent[cur]

    dof_names = ["base_x", "base_z", "base_pitch"] + [j.name for j in model.joints]
    link_body = np.array([body_of_link[l.name] for l in model.links], dtype=np.intp)
    kp_body = np.array([body_of_link[k.link] for k in model.keypoints], dtype=np.intp)
    kp_off = np.array([k.offset for k in model.keypoints])
    contact_body = np.array([body_of_link[l] for l, _ in model.contact_points], dtype=np.intp)
    contact_off = np.array([off for _, off in model.contact_points]).reshape(-1, 2)

    check_body, check_off = [], []
    for l in model.links:
        if l.name in model.foot_links:
            continue
        b = body_of_link[l.name]
        check_body += [b, b]
        check_off += [(0.0, 0.0), (l.length, 0.0)]

    upper = np.array([j.region == UPPER for j in model.joints])
    return CompiledModel(
        model=model, nb=nb, parent=parent, jtype=jtype, sidx=sidx, ssign=ssign,
        attach=attach, rest=rest, mass=mass, com=com, inertia=inertia, anc=anc,
        dof_names=dof_names, link_body=link_body, kp_body=kp_body, kp_off=kp_off,
        contact_body=contact_body, contact_off=contact_off,
        check_body=np.array(check_body, dtype=np.intp),
        check_off=np.array(check_off) if check_off else np.zeros((0, 2)),
        upper_joints=upper, lower_joints=~upper,
        foot_joint_of_contact=np.arange(len(model.contact_points), dtype=np.intp),
    )


# -- planar spatial helpers -------------------------------------------------

def _rot(theta: np.ndarray) -> np.ndarray:
    """(...,) -> (..., 2, 2) rotation matrices, CCW positive in (x, z)."""
    c, s = np.cos(theta), np.sin(theta)
    out = np.empty(theta.shape + (2, 2))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    return out


def _crm_mul(v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Planar motion cross product crm(v) @ u for (..., 3) arrays."""
    out = np.empty_like(u)
    out[..., 0] = 0.0
    out[..., 1] = v[..., 2] * u[..., 0] - v[..., 0] * u[..., 2]
    out[..., 2] = -v[..., 1] * u[..., 0] + v[..., 0] * u[..., 1]
    return out


def _crf_mul(v: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Planar force cross product crf(v) @ h = -crm(v)^T @ h."""
    out = np.empty_like(h)
    out[..., 0] = v[..., 1] * h[..., 2] - v[..., 2] * h[..., 1]
    out[..., 1] = -v[..., 0] * h[..., 2]
    out[..., 2] = v[..., 0] * h[..., 1]
    return out


# -- state -------------------------------------------------------------------

@dataclass
class SimState:
    """Single-robot snapshot. Arrays are owned copies."""
    q: np.ndarray                 # (ndof,) generalized coordinates
    qd: np.ndarray                # (ndof,) generalized velocities
    time: float = 0.0
    foot_contact: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    contact_forces: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    applied_torque: np.ndarray = field(default_factory=lambda: np.zeros(0))
    torque_excess: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # stiction anchor x per contact point; NaN while the point is airborne
    contact_anchor: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def base_pos(self) -> np.ndarray:
        return self.q[0:2]

    @property
    def base_pitch(self) -> float:
        return float(self.q[2])


def zero_state(model: RobotModel) -> SimState:
    nd = model.num_dof
    nc = len(model.contact_points)
    return SimState(q=np.zeros(nd), qd=np.zeros(nd),
                    foot_contact=np.zeros(nc, dtype=bool),
                    contact_forces=np.zeros((nc, 2)),
                    applied_torque=np.zeros(model.num_joints),
                    torque_excess=np.zeros(model.num_joints),
                    contact_anchor=np.full(nc, np.nan))


# -- batched simulator --------------------------------------------------------

class PlanarSim:
    """Vectorized simulator over a fixed topology with per-env parameters."""

    def __init__(self, model: RobotModel, num_envs: int, params: SimParams | None = None):
        self.model = model
        self.c = compile_model(model)
        self.params = params or SimParams()
        self.E = num_envs
        c = self.c
        self._base_kp = model.joint_array("kp")
        self._base_kd = model.joint_array("kd")
        self.kp = np.tile(self._base_kp, (num_envs, 1))
        self.kd = np.tile(self._base_kd, (num_envs, 1))
        self.friction = np.full(num_envs, model.friction)
        self.mass_scale = np.ones(num_envs)
        self._isp_unit = np.stack([
            _spatial_inertia(c.mass[b], c.com[b], c.inertia[b]) for b in range(c.nb)
        ])  # (nb, 3, 3), unscaled
        self.isp = np.tile(self._isp_unit, (num_envs, 1, 1, 1))
        lims = np.array([j.limit for j in model.joints])
        self.limit_lo = lims[:, 0]
        self.limit_hi = lims[:, 1]
        self.torque_limit = model.joint_array("torque_limit")
        self.vel_limit = model.joint_array("vel_limit")
        # mask of prismatic unit columns for jacobians
        self._prism_col = np.zeros((c.nb, 2))
        self._prism_col[0] = (1.0, 0.0)
        self._prism_col[1] = (0.0, 1.0)
        self._is_rev = c.jtype == _REV
        # angular velocity weights: w_body = qd @ wmat[b]
        self._wmat = (c.anc & self._is_rev[None, :]) * c.ssign[None, :]  # (nb, nb)

    # -- per-env parameter updates ----------------------------------------

    def apply_scales(self, env_ids: np.ndarray, scales: dict[str, np.ndarray]) -> None:
        """Domain randomization hook: scales arrays indexed like env_ids."""
        self.kp[env_ids] = self._base_kp[None, :] * np.asarray(scales["kp"])[:, None]
        self.kd[env_ids] = self._base_kd[None, :] * np.asarray(scales["kd"])[:, None]
        self.friction[env_ids] = self.model.friction * np.asarray(scales["friction"])
        self.mass_scale[env_ids] = np.asarray(scales["mass"])
        self.isp[env_ids] = self._isp_unit[None] * self.mass_scale[env_ids, None, None, None]

    # -- kinematics ---------------------------------------------------------

    def _fk_pass(self, q: np.ndarray):
        """World angles, origins, world rotations and parent->body planar
        motion transforms for every body. q: (E, ndof)."""
        c, E = self.c, q.shape[0]
        angles = np.zeros((E, c.nb))
        origins = np.zeros((E, c.nb, 2))
        X = np.zeros((E, c.nb, 3, 3))
        Rw = np.zeros((E, c.nb, 2, 2))
        for b in range(c.nb):
            p = c.parent[b]
            if c.jtype[b] == _REV:
                rel_ang = c.rest[b] + c.ssign[b] * q[:, b]
                off = np.broadcast_to(c.attach[b], (E, 2))
            else:
                rel_ang = np.full(E, c.rest[b])
                off = c.attach[b] + self._prism_col[b][None, :] * q[:, b, None]
            if p < 0:
                angles[:, b] = rel_ang
                origins[:, b] = off
                par_R = np.broadcast_to(np.eye(2), (E, 2, 2))
            else:
                angles[:, b] = angles[:, p] + rel_ang
                par_R = Rw[:, p]
                origins[:, b] = origins[:, p] + np.einsum("eij,ej->ei", par_R, off)
            Rw[:, b] = _rot(angles[:, b])
            Erel = _rot(rel_ang)
            # motion transform parent->body: [[1, 0], [E^T perp(r), E^T]]
            Et = np.swapaxes(Erel, -1, -2)
            perp = np.stack([-off[:, 1], off[:, 0]], axis=-1)
            X[:, b, 0, 0] = 1.0
            X[:, b, 1:, 0] = np.einsum("eij,ej->ei", Et, perp)
            X[:, b, 1:, 1:] = Et
        return angles, origins, Rw, X

    def _point_jacobians(self, origins: np.ndarray, Rw: np.ndarray,
                         body: np.ndarray, off: np.ndarray):
        """World positions and Jacobians for points fixed on bodies.
        Returns pos (E, P, 2) and J (E, P, 2, ndof)."""
        c = self.c
        pos = origins[:, body] + np.einsum("epij,pj->epi", Rw[:, body], off)
        rel = pos[:, :, None, :] - origins[:, None, :, :]          # (E,P,nb,2)
        col_rev = np.stack([-rel[..., 1], rel[..., 0]], axis=-1) * c.ssign[None, None, :, None]
        cols = np.where(self._is_rev[None, None, :, None], col_rev,
                        self._prism_col[None, None, :, :])
        mask = c.anc[body]                                         # (P, nb)
        J = cols * mask[None, :, :, None]
        return pos, np.swapaxes(J, 2, 3)                           # (E,P,2,ndof)

    def fk_full(self, q: np.ndarray, qd: np.ndarray) -> dict[str, np.ndarray]:
        """Everything observations and rewards need, batched."""
        c = self.c
        angles, origins, Rw, _ = self._fk_pass(q)
        lb = c.link_body
        com_pos, com_J = self._point_jacobians(origins, Rw, lb, c.com[lb])
        kp_pos, kp_J = self._point_jacobians(origins, Rw, c.kp_body, c.kp_off)
        ct_pos, ct_J = self._point_jacobians(origins, Rw, c.contact_body, c.contact_off)
        w = qd @ self._wmat.T                                      # (E, nb)
        return {
            "link_angle": angles[:, lb],
            "link_origin": origins[:, lb],
            "link_com": com_pos,
            "link_com_vel": np.einsum("epij,ej->epi", com_J, qd),
            "link_ang_vel": w[:, lb],
            "keypoints": kp_pos,
            "keypoint_vel": np.einsum("epij,ej->epi", kp_J, qd),
            "contacts": ct_pos,
            "contact_vel": np.einsum("epij,ej->epi", ct_J, qd),
            "foot_angle": angles[:, c.contact_body],
        }

    def check_points(self, q: np.ndarray) -> np.ndarray:
        """Heights of the termination probe points (non-foot link ends)."""
        c = self.c
        angles, origins, Rw, _ = self._fk_pass(q)
        pos = origins[:, c.check_body] + np.einsum(
            "epij,pj->epi", Rw[:, c.check_body], c.check_off)
        return pos[..., 1]

    def keypoint_jacobians(self, q: np.ndarray):
        """Keypoint world positions (E, K, 2) and Jacobians (E, K, 2, ndof)."""
        angles, origins, Rw, _ = self._fk_pass(q)
        return self._point_jacobians(origins, Rw, self.c.kp_body, self.c.kp_off)

    # -- dynamics ------------------------------------------------------------

    def _crba(self, X: np.ndarray) -> np.ndarray:
        """Mass matrix via the composite-rigid-body recursion."""
        c, E = self.c, X.shape[0]
        Ic = self.isp.copy()
        H = np.zeros((E, c.nb, c.nb))
        for b in range(c.nb - 1, -1, -1):
            p = c.parent[b]
            if p >= 0:
                Ic[:, p] += np.einsum("eji,ejk,ekl->eil", X[:, b], Ic[:, b], X[:, b])
        for b in range(c.nb):
            f = Ic[:, b, :, c.sidx[b]] * c.ssign[b]      # (E, 3) column Ic @ S
            H[:, b, b] = f[:, c.sidx[b]] * c.ssign[b]
            j = b
            while c.parent[j] >= 0:
                f = np.einsum("eji,ej->ei", X[:, j], f)  # force transform X^T f
                j = c.parent[j]
                H[:, b, j] = f[:, c.sidx[j]] * c.ssign[j]
                H[:, j, b] = H[:, b, j]
        return H

    def _rnea_bias(self, qd: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Coriolis, centrifugal and gravity bias: tau = bias when qdd = 0."""
        c, E = self.c, X.shape[0]
        v = np.zeros((E, c.nb, 3))
        a = np.zeros((E, c.nb, 3))
        f = np.zeros((E, c.nb, 3))
        a_root = np.array([0.0, 0.0, self.params.gravity])  # gravity trick
        for b in range(c.nb):
            p = c.parent[b]
            vp = v[:, p] if p >= 0 else np.zeros((E, 3))
            ap = a[:, p] if p >= 0 else np.broadcast_to(a_root, (E, 3))
            s_qd = np.zeros((E, 3))
            s_qd[:, c.sidx[b]] = c.ssign[b] * qd[:, b]
            v[:, b] = np.einsum("eij,ej->ei", X[:, b], vp) + s_qd
            a[:, b] = np.einsum("eij,ej->ei", X[:, b], ap) + _crm_mul(v[:, b], s_qd)
            h = np.einsum("eij,ej->ei", self.isp[:, b], v[:, b])
            f[:, b] = np.einsum("eij,ej->ei", self.isp[:, b], a[:, b]) + _crf_mul(v[:, b], h)
        bias = np.zeros((E, c.nb))
        for b in range(c.nb - 1, -1, -1):
            bias[:, b] = f[:, b, c.sidx[b]] * c.ssign[b]
            p = c.parent[b]
            if p >= 0:
                f[:, p] += np.einsum("eji,ej->ei", X[:, b], f[:, b])
        return bias

    def _contact_forces(self, pos, vel_free, anchor, m_t, m_n, h):
        """Penalty spring-damper contact, solved implicitly at the velocity
        level per contact direction. vel_free is the contact-point velocity
        the free dynamics would produce this substep; the scalar implicit
        update f = (spring - damp * v_next) / (1 + (k*h + d) * h / m_eff)
        is unconditionally stable, so stiff gains cannot chatter on light
        swing legs. Tangential force is an anchored spring (true stiction,
        no viscous creep): the anchor is planted where the foot touches and
        drags along whenever the Coulomb clamp saturates. Returns forces
        (E, C, 2) and the updated anchors."""
        p = self.params
        z = pos[..., 1] - p.ground_height
        x = pos[..., 0]
        pen = z < 0.0
        fn = -p.contact_kn * z - (p.contact_kn * h + p.contact_dn) * vel_free[..., 1]
        fn /= 1.0 + (p.contact_kn * h + p.contact_dn) * h / m_n
        fn = np.maximum(fn, 0.0) * pen
        active = fn > 0.0
        anchor_eff = np.where(np.isnan(anchor), x, anchor)
        ktd = 2.0 * np.sqrt(p.contact_kt * m_t)
        ft_raw = (-p.contact_kt * (x - anchor_eff)
                  - (p.contact_kt * h + ktd) * vel_free[..., 0])
        ft_raw /= 1.0 + (p.contact_kt * h + ktd) * h / m_t
        lim = self.friction[:, None] * fn
        ft = np.clip(ft_raw, -lim, lim) * active
        slid = active & (np.abs(ft_raw) > lim)
        # micro-separations during contact chatter keep the anchor; only a
        # clear liftoff releases it
        keep = active | (z < p.anchor_release)
        new_anchor = np.where(keep, np.where(slid, x + ft / p.contact_kt, anchor_eff),
                              np.nan)
        return np.stack([ft, fn], axis=-1), new_anchor

    def substep(self, q, qd, targets, anchors, h):
        c, p = self.c, self.params
        E = q.shape[0]
        angles, origins, Rw, X = self._fk_pass(q)
        M = self._crba(X)
        bias = self._rnea_bias(qd, X)

        qj, qdj = q[:, 3:], qd[:, 3:]
        tau_pd = self.kp[:E] * (targets - qj) - self.kd[:E] * qdj
        excess = np.maximum(np.abs(tau_pd) - self.torque_limit[None, :], 0.0)
        tau_motor = np.clip(tau_pd, -self.torque_limit, self.torque_limit)

        over_hi = np.maximum(qj - self.limit_hi[None, :], 0.0)
        over_lo = np.maximum(self.limit_lo[None, :] - qj, 0.0)
        violating = (over_hi > 0) | (over_lo > 0)
        tau_lim = -p.limit_kp * over_hi + p.limit_kp * over_lo - p.limit_kd * qdj * violating

        tau = np.zeros((E, c.nb))
        tau[:, 3:] = tau_motor + tau_lim

        rhs = tau - bias
        qdd = np.zeros_like(q)
        if self.model.base_free:
            qdd = np.linalg.solve(M, rhs[..., None])[..., 0]
        else:
            qdd[:, 3:] = np.linalg.solve(M[:, 3:, 3:], rhs[:, 3:, None])[..., 0]

        cpos, cJ = self._point_jacobians(origins, Rw, c.contact_body, c.contact_off)
        if c.contact_body.size:
            # effective mass seen along each contact direction,
            # 1 / (J M^-1 J^T) per row (contacts treated independently)
            E_, C_ = cpos.shape[:2]
            Jf = cJ.reshape(E_, 2 * C_, -1)
            if self.model.base_free:
                Y = np.linalg.solve(M, np.swapaxes(Jf, 1, 2))
                D = np.einsum("ecd,edc->ec", Jf, Y)
            else:
                Y = np.linalg.solve(M[:, 3:, 3:], np.swapaxes(Jf[:, :, 3:], 1, 2))
                D = np.einsum("ecd,edc->ec", Jf[:, :, 3:], Y)
            D = D.reshape(E_, C_, 2)
            m_t = 1.0 / np.maximum(D[..., 0], 1e-9)
            m_n = 1.0 / np.maximum(D[..., 1], 1e-9)
            cvel_free = np.einsum("ecij,ej->eci", cJ, qd + h * qdd)
            cf, anchors = self._contact_forces(cpos, cvel_free, anchors, m_t, m_n, h)
            fgen = np.einsum("ecij,eci->ej", cJ, cf)
            if self.model.base_free:
                qdd = qdd + np.linalg.solve(M, fgen[..., None])[..., 0]
            else:
                qdd[:, 3:] += np.linalg.solve(M[:, 3:, 3:], fgen[:, 3:, None])[..., 0]
        else:
            cf = np.zeros(cpos.shape[:2] + (2,))

        qd = qd + h * qdd
        if not self.model.base_free:
            qd[:, :3] = 0.0
        q = q + h * qd
        info = {
            "contact": (cpos[..., 1] < p.ground_height) & (cf[..., 1] > 0),
            "contact_force": cf,
            "torque": tau_motor,
            "torque_excess": excess,
        }
        return q, qd, anchors, info

    def step(self, q, qd, targets, anchors=None):
        """One control step (params.substeps substeps). Returns new q, qd,
        contact anchors and a dict with contact flags (last substep), mean
        contact forces, mean applied torques and mean torque-limit excess."""
        p = self.params
        h = p.sub_dt
        if anchors is None:
            anchors = np.full((q.shape[0], self.c.contact_body.size), np.nan)
        acc_force = 0.0
        acc_tau = 0.0
        acc_exc = 0.0
        info = {}
        for _ in range(p.substeps):
            q, qd, anchors, info = self.substep(q, qd, targets, anchors, h)
            acc_force = acc_force + info["contact_force"]
            acc_tau = acc_tau + info["torque"]
            acc_exc = acc_exc + info["torque_excess"]
        bad = ~np.isfinite(q) | ~np.isfinite(qd)
        if bad.any():
            e, d = np.argwhere(bad)[0]
            raise SimulationError(
                f"non-finite state after step: env {e}, dof {self.c.dof_names[d]}, "
                f"q={q[e, d]!r} qd={qd[e, d]!r}")
        out = {
            "contact": info["contact"],
            "contact_force": acc_force / p.substeps,
            "torque": acc_tau / p.substeps,
            "torque_excess": acc_exc / p.substeps,
        }
        return q, qd, anchors, out


# -- single-instance API -----------------------------------------------------

@functools.lru_cache(maxsize=16)
def _single(model: RobotModel, params_key: tuple) -> PlanarSim:
    params = SimParams(*params_key)
    return PlanarSim(model, 1, params)


def _params_key(params: SimParams | None) -> tuple:
    p = params or SimParams()
    return (p.control_dt, p.substeps, p.gravity, p.contact_kn, p.contact_dn,
            p.contact_kt, p.anchor_release, p.limit_kp, p.limit_kd,
            p.ground_height, p.termination_margin, p.tracking_cutoff)


def step(model: RobotModel, state: SimState, pd_targets: np.ndarray,
         dt: float | None = None, params: SimParams | None = None) -> SimState:
    """Advance one control step. `dt` overrides params.control_dt."""
    sim = _single(model, _params_key(params))
    if dt is not None and dt != sim.params.control_dt:
        p = SimParams(**{**sim.params.__dict__, "control_dt": dt})
        sim = _single(model, _params_key(p))
    targets = np.asarray(pd_targets, dtype=np.float64)[None, :]
    if targets.shape[1] != model.num_joints:
        raise ValueError(f"pd_targets must have {model.num_joints} entries, "
                         f"got {targets.shape[1]}")
    nc = len(model.contact_points)
    anchors = state.contact_anchor
    if anchors.shape != (nc,):
        anchors = np.full(nc, np.nan)
    q, qd, anchors, info = sim.step(
        state.q[None, :].copy(), state.qd[None, :].copy(), targets,
        anchors[None, :].copy())
    return SimState(
        q=q[0], qd=qd[0], time=state.time + sim.params.control_dt,
        foot_contact=info["contact"][0],
        contact_forces=info["contact_force"][0],
        applied_torque=info["torque"][0],
        torque_excess=info["torque_excess"][0],
        contact_anchor=anchors[0],
    )


@dataclass
class FkResult:
    link_angle: np.ndarray      # (L,) world angles, model link order
    link_origin: np.ndarray     # (L, 2)
    link_com: np.ndarray        # (L, 2) world COM positions
    link_com_vel: np.ndarray    # (L, 2)
    link_ang_vel: np.ndarray    # (L,)
    keypoints: np.ndarray       # (K, 2)
    keypoint_vel: np.ndarray    # (K, 2)
    contacts: np.ndarray        # (C, 2)
    foot_angle: np.ndarray      # (C,) world angle of each contact's link


def fk(model: RobotModel, q: np.ndarray, qd: np.ndarray | None = None) -> FkResult:
    """Forward kinematics for one robot. Pure: no state is touched."""
    sim = _single(model, _params_key(None))
    q = np.asarray(q, dtype=np.float64)[None, :]
    qd = np.zeros_like(q) if qd is None else np.asarray(qd, dtype=np.float64)[None, :]
    r = sim.fk_full(q, qd)
    return FkResult(
        link_angle=r["link_angle"][0], link_origin=r["link_origin"][0],
        link_com=r["link_com"][0], link_com_vel=r["link_com_vel"][0],
        link_ang_vel=r["link_ang_vel"][0], keypoints=r["keypoints"][0],
        keypoint_vel=r["keypoint_vel"][0], contacts=r["contacts"][0],
        foot_angle=r["foot_angle"][0],
    )


def mass_matrix(model: RobotModel, q: np.ndarray) -> np.ndarray:
    sim = _single(model, _params_key(None))
    _, _, _, X = sim._fk_pass(np.asarray(q, dtype=np.float64)[None, :])
    return sim._crba(X)[0]


def bias_forces(model: RobotModel, q: np.ndarray, qd: np.ndarray) -> np.ndarray:
    sim = _single(model, _params_key(None))
    _, _, _, X = sim._fk_pass(np.asarray(q, dtype=np.float64)[None, :])
    return sim._rnea_bias(np.asarray(qd, dtype=np.float64)[None, :], X)[0]


def total_energy(model: RobotModel, state: SimState,
                 gravity: float = GRAVITY) -> float:
    """Kinetic plus gravitational potential energy (contact springs excluded)."""
    M = mass_matrix(model, state.q)
    ke = 0.5 * float(state.qd @ M @ state.qd)
    r = fk(model, state.q)
    masses = np.array([l.mass for l in model.links])
    pe = gravity * float(masses @ r.link_com[:, 1])
    return ke + pe


def check_termination(model: RobotModel, state: SimState, tracking_error: float,
                      params: SimParams | None = None) -> str:
    """Order: a fall beats a tracking loss when both hold this step."""
    p = params or SimParams()
    sim = _single(model, _params_key(params))
    heights = sim.check_points(state.q[None, :])[0]
    if heights.size and heights.min() < p.ground_height + p.termination_margin:
        return FELL
    if tracking_error > p.tracking_cutoff:
        return LOST_TRACKING
    return ALIVE
