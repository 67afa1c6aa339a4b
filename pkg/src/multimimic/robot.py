"""Planar humanoid model description.

A robot is a tree of rigid links in the sagittal (x, z) plane, rooted at a
floating base with three degrees of freedom (base x, base z, base pitch).
Every other joint is a revolute hinge about the out-of-plane axis. Link
geometry extends along the link frame's local +x axis; mounting angles
(`rest`) orient child links at the zero configuration.

Angles are radians, positive counterclockwise in the (x, z) plane viewed
with +x right and +z up. Gravity points along -z.
"""

from __future__ import annotations

from dataclasses import dataclass, replace, asdict
from pathlib import Path

import numpy as np
import yaml

UPPER = "upper"
LOWER = "lower"
REGIONS = (UPPER, LOWER)


class ModelError(ValueError):
    """Raised when a robot description violates a structural rule."""


@dataclass(frozen=True)
class Link:
    name: str
    length: float            # m, along local +x
    mass: float              # kg
    com: tuple[float, float]  # center of mass in the link frame, m
    inertia: float           # kg m^2 about the COM
    region: str              # 'upper' or 'lower'


@dataclass(frozen=True)
class Joint:
    name: str
    parent: str              # parent link name
    child: str               # child link name
    attach: tuple[float, float]  # joint origin in the parent link frame, m
    rest: float              # mounting angle of child frame at q = 0, rad
    axis: int                # rotation sign, +1 or -1
    limit: tuple[float, float]   # joint angle range, rad
    vel_limit: float         # rad/s
    torque_limit: float      # N m
    kp: float                # PD stiffness, N m / rad
    kd: float                # PD damping, N m s / rad
    region: str


@dataclass(frozen=True)
class Keypoint:
    name: str
    link: str
    offset: tuple[float, float]  # attachment point in the link frame, m


@dataclass(frozen=True)
class RobotModel:
    """Declarative robot description. Frozen and hashable so compiled
    dynamics can be cached per model instance."""

    name: str
    base: str                          # name of the floating-base link
    links: tuple[Link, ...]
    joints: tuple[Joint, ...]          # actuated joints, tree order
    keypoints: tuple[Keypoint, ...]
    foot_links: tuple[str, ...]        # links whose ground contact is legal
    contact_points: tuple[tuple[str, tuple[float, float]], ...]  # (link, offset)
    friction: float = 1.0              # ground Coulomb friction coefficient
    base_free: bool = True             # False pins the base (test rigs)
    base_mount: float = 0.0            # base link angle at zero pitch, rad

    # -- lookups ---------------------------------------------------------

    def link(self, name: str) -> Link:
        for l in self.links:
            if l.name == name:
                return l
        raise KeyError(name)

    def link_index(self, name: str) -> int:
        for i, l in enumerate(self.links):
            if l.name == name:
                return i
        raise KeyError(name)

    def joint_names(self) -> list[str]:
        return [j.name for j in self.joints]

    def joints_in_region(self, region: str) -> list[int]:
        return [i for i, j in enumerate(self.joints) if j.region == region]

    def keypoints_in_region(self, region: str) -> list[int]:
        out = []
        for i, kp in enumerate(self.keypoints):
            if self.link(kp.link).region == region:
                out.append(i)
        return out

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def num_dof(self) -> int:
        # 3 base coordinates + one per actuated joint
        return 3 + len(self.joints)

    def joint_array(self, field: str) -> np.ndarray:
        return np.array([getattr(j, field) for j in self.joints], dtype=np.float64)

    def total_mass(self) -> float:
        return float(sum(l.mass for l in self.links))


def validate(model: RobotModel) -> None:
    """Structural checks: connected acyclic tree rooted at the base, exactly
    one parent per non-base link, known regions, sane limits."""
    names = [l.name for l in model.links]
    if len(set(names)) != len(names):
        raise ModelError("duplicate link names")
    if model.base not in names:
        raise ModelError(f"base link {model.base!r} not among links")
    for l in model.links:
        if l.region not in REGIONS:
            raise ModelError(f"link {l.name!r} has unknown region {l.region!r}")
        if l.mass < 0 or l.inertia < 0:
            raise ModelError(f"link {l.name!r} has negative mass or inertia")
    parent_of: dict[str, str] = {}
    for j in model.joints:
        if j.parent not in names or j.child not in names:
            raise ModelError(f"joint {j.name!r} references unknown link")
        if j.child == model.base:
            raise ModelError("base link cannot be a joint child")
        if j.child in parent_of:
            raise ModelError(f"link {j.child!r} has two parents")
        parent_of[j.child] = j.parent
        if j.region not in REGIONS:
            raise ModelError(f"joint {j.name!r} has unknown region {j.region!r}")
        if not (j.limit[0] < j.limit[1]):
            raise ModelError(f"joint {j.name!r} limit range is empty")
        if j.vel_limit <= 0 or j.torque_limit <= 0:
            raise ModelError(f"joint {j.name!r} needs positive limits")
        if j.axis not in (1, -1):
            raise ModelError(f"joint {j.name!r} axis must be +1 or -1")
    # connectivity: every non-base link must reach the base through parents
    for l in model.links:
        seen = set()
        cur = l.name
        while cur != model.base:
            if cur in seen:
                raise ModelError(f"cycle through link {cur!r}")
            seen.add(cur)
            if cur not in parent_of:
                raise ModelError(f"link {cur!r} is not connected to the base")
            cur = parent_of[cur]
    if len(parent_of) != len(names) - 1:
        raise ModelError("link tree is not spanning")
    for f in model.foot_links:
        if f not in names:
            raise ModelError(f"foot link {f!r} unknown")
    for kp in model.keypoints:
        if kp.link not in names:
            raise ModelError(f"keypoint {kp.name!r} on unknown link")
    for link, _ in model.contact_points:
        if link not in model.foot_links:
            raise ModelError(f"contact point on non-foot link {link!r}")
    if not (0 < model.friction):
        raise ModelError("friction must be positive")


# -- default planar biped -------------------------------------------------

def default_biped() -> RobotModel:
    """Nine-DOF sagittal biped: torso base, two 2-segment legs, two single
    segment arms, point feet at the shank tips. Standing upright is the
    zero configuration with the pelvis 0.8 m above the ground."""
    torso_l, thigh_l, shank_l, arm_l = 0.60, 0.40, 0.40, 0.55
    links = (
        Link("torso", torso_l, 16.0, (torso_l / 2, 0.0), 16.0 * torso_l**2 / 12, UPPER),
        Link("l_thigh", thigh_l, 4.0, (thigh_l / 2, 0.0), 4.0 * thigh_l**2 / 12, LOWER),
        Link("l_shank", shank_l, 2.5, (shank_l / 2, 0.0), 2.5 * shank_l**2 / 12, LOWER),
        Link("r_thigh", thigh_l, 4.0, (thigh_l / 2, 0.0), 4.0 * thigh_l**2 / 12, LOWER),
        Link("r_shank", shank_l, 2.5, (shank_l / 2, 0.0), 2.5 * shank_l**2 / 12, LOWER),
        Link("l_arm", arm_l, 1.8, (arm_l / 2, 0.0), 1.8 * arm_l**2 / 12, UPPER),
        Link("r_arm", arm_l, 1.8, (arm_l / 2, 0.0), 1.8 * arm_l**2 / 12, UPPER),
    )
    # q = 0: legs straight down (rest pi from the upward torso), arms hanging
    leg = dict(vel_limit=20.0, torque_limit=90.0, kp=250.0, kd=8.0, region=LOWER)
    arm = dict(vel_limit=25.0, torque_limit=30.0, kp=50.0, kd=2.0, region=UPPER)
    joints = (
        Joint("l_hip", "torso", "l_thigh", (0.0, 0.0), np.pi, 1, (-0.8, 2.2), **leg),
        Joint("l_knee", "l_thigh", "l_shank", (thigh_l, 0.0), 0.0, 1, (-2.3, 0.02), **leg),
        Joint("r_hip", "torso", "r_thigh", (0.0, 0.0), np.pi, 1, (-0.8, 2.2), **leg),
        Joint("r_knee", "r_thigh", "r_shank", (thigh_l, 0.0), 0.0, 1, (-2.3, 0.02), **leg),
        Joint("l_shoulder", "torso", "l_arm", (torso_l, 0.0), np.pi, 1, (-1.5, 3.0), **arm),
        Joint("r_shoulder", "torso", "r_arm", (torso_l, 0.0), np.pi, 1, (-1.5, 3.0), **arm),
    )
    keypoints = (
        Keypoint("head", "torso", (0.75, 0.0)),
        Keypoint("l_shoulder", "torso", (torso_l, 0.0)),
        Keypoint("r_shoulder", "torso", (torso_l, 0.0)),
        Keypoint("l_elbow", "l_arm", (arm_l / 2, 0.0)),
        Keypoint("r_elbow", "r_arm", (arm_l / 2, 0.0)),
        Keypoint("l_hand", "l_arm", (arm_l, 0.0)),
        Keypoint("r_hand", "r_arm", (arm_l, 0.0)),
        Keypoint("l_ankle", "l_shank", (shank_l, 0.0)),
        Keypoint("r_ankle", "r_shank", (shank_l, 0.0)),
    )
    model = RobotModel(
        name="biped9",
        base="torso",
        links=links,
        joints=joints,
        keypoints=keypoints,
        foot_links=("l_shank", "r_shank"),
        contact_points=(("l_shank", (shank_l, 0.0)), ("r_shank", (shank_l, 0.0))),
        friction=1.0,
        base_mount=np.pi / 2,  # torso points up at zero pitch
    )
    validate(model)
    return model


# -- config file round trip ------------------------------------------------

def save_robot(model: RobotModel, path: str | Path) -> None:
    doc = {
        "name": model.name,
        "base": model.base,
        "friction": model.friction,
        "base_free": model.base_free,
        "base_mount": float(model.base_mount),
        "links": [asdict(l) | {"com": list(l.com)} for l in model.links],
        "joints": [
            asdict(j) | {"attach": list(j.attach), "limit": list(j.limit)}
            for j in model.joints
        ],
        "keypoints": [asdict(k) | {"offset": list(k.offset)} for k in model.keypoints],
        "foot_links": list(model.foot_links),
        "contact_points": [[link, list(off)] for link, off in model.contact_points],
    }
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def load_robot(path: str | Path) -> RobotModel:
    doc = yaml.safe_load(Path(path).read_text())
    try:
        model = RobotModel(
            name=doc["name"],
            base=doc["base"],
            friction=float(doc.get("friction", 1.0)),
            base_free=bool(doc.get("base_free", True)),
            base_mount=float(doc.get("base_mount", 0.0)),
            links=tuple(
                Link(d["name"], float(d["length"]), float(d["mass"]),
                     (float(d["com"][0]), float(d["com"][1])),
                     float(d["inertia"]), d["region"])
                for d in doc["links"]
            ),
            joints=tuple(
                Joint(d["name"], d["parent"], d["child"],
                      (float(d["attach"][0]), float(d["attach"][1])),
                      float(d["rest"]), int(d["axis"]),
                      (float(d["limit"][0]), float(d["limit"][1])),
                      float(d["vel_limit"]), float(d["torque_limit"]),
                      float(d["kp"]), float(d["kd"]), d["region"])
                for d in doc["joints"]
            ),
            keypoints=tuple(
                Keypoint(d["name"], d["link"], (float(d["offset"][0]), float(d["offset"][1])))
                for d in doc["keypoints"]
            ),
            foot_links=tuple(doc["foot_links"]),
            contact_points=tuple((link, (float(off[0]), float(off[1])))
                                 for link, off in doc["contact_points"]),
        )
    except (KeyError, TypeError, IndexError) as e:
        raise ModelError(f"malformed robot config {path}: missing or bad field {e}") from e
    validate(model)
    return model


def scale_model(model: RobotModel, mass_scale: float, kp_scale: float,
                kd_scale: float, friction_scale: float) -> RobotModel:
    """Return a copy with masses (and rotational inertias, density scaling at
    fixed geometry), PD gains and ground friction multiplied by the given
    factors. COM offsets and geometry are unchanged."""
    links = tuple(replace(l, mass=l.mass * mass_scale, inertia=l.inertia * mass_scale)
                  for l in model.links)
    joints = tuple(replace(j, kp=j.kp * kp_scale, kd=j.kd * kd_scale)
                   for j in model.joints)
    return replace(model, links=links, joints=joints,
                   friction=model.friction * friction_scale)
