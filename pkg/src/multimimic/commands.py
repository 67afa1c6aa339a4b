"""Unified command space: layouts, masks, presets, and goal vectors.

The command vector concatenates an upper-body block and a lower-body
block. Each block holds kinematic keypoint targets, joint-angle targets,
and (lower body only) root targets. A command mask carries one mode bit
per (region, family) pair and one sparsity bit per slot; a slot is active
only when both its mode bit and its sparsity bit are set. Masks are drawn
once per episode and stay fixed.

Conventions, since several frames are possible: kinematic targets are
expressed relative to the current root position (the planar model has no
heading angle to remove); joint-angle targets are absolute; root targets
are commanded forward velocity, height, and pitch. The mask bits are
appended to the student goal so the policy can tell a commanded zero from
an inactive slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .motion import ReferenceFrame, keypoints_from_bodies
from .robot import LOWER, REGIONS, UPPER, RobotModel

KINEMATIC = "kinematic"
JOINT = "joint"
ROOT = "root"
FAMILIES = (KINEMATIC, JOINT, ROOT)

ROOT_TARGETS = ("vel_x", "height", "pitch")


class CommandError(ValueError):
    pass


@dataclass(frozen=True)
class Slot:
    """One maskable unit of the command vector."""
    region: str
    family: str
    element: str    # keypoint name, joint name, or root target name
    width: int
    offset: int


@dataclass(frozen=True)
class CommandLayout:
    """Slot order and widths of the unified command vector."""
    slots: tuple[Slot, ...]
    modes: tuple[tuple[str, str], ...]   # (region, family) pairs, in order
    width: int

    @property
    def num_slots(self) -> int:
        return len(self.slots)

    @property
    def num_modes(self) -> int:
        return len(self.modes)

    @property
    def mask_width(self) -> int:
        return self.num_modes + self.num_slots

    def mode_index(self, region: str, family: str) -> int:
        try:
            return self.modes.index((region, family))
        except ValueError:
            raise CommandError(f"no ({region}, {family}) command family") from None

    def slot_indices(self, region: str | None = None, family: str | None = None,
                     element: str | None = None) -> list[int]:
        return [i for i, s in enumerate(self.slots)
                if (region is None or s.region == region)
                and (family is None or s.family == family)
                and (element is None or s.element == element)]

    def span(self, i: int) -> slice:
        s = self.slots[i]
        return slice(s.offset, s.offset + s.width)

    def validate(self) -> None:
        off = 0
        for s in self.slots:
            if s.offset != off:
                raise CommandError(f"slot {s.element!r} at offset {s.offset}, "
                                   f"expected {off}")
            if s.region not in REGIONS or s.family not in FAMILIES:
                raise CommandError(f"slot {s.element!r} has unknown tag")
            if s.family == ROOT and s.region != LOWER:
                raise CommandError("root commands belong to the lower body")
            off += s.width
        if off != self.width:
            raise CommandError(f"slot widths sum to {off}, layout says {self.width}")
        for region, family in self.modes:
            if not self.slot_indices(region, family):
                raise CommandError(f"mode ({region}, {family}) has no slots")
        seen = [(s.region, s.family, s.element) for s in self.slots]
        if len(seen) != len(set(seen)):
            raise CommandError("duplicate slot")


def command_layout(model: RobotModel) -> CommandLayout:
    """Build the unified layout for a model: per-keypoint kinematic slots,
    per-joint angle slots, and root velocity/height/pitch, upper block
    first to match the two-block mask composition."""
    slots = []
    off = 0

    def add(region, family, element, width):
        nonlocal off
        slots.append(Slot(region, family, element, width, off))
        off += width

    for region in (UPPER, LOWER):
        for i in model.keypoints_in_region(region):
            add(region, KINEMATIC, model.keypoints[i].name, 2)
        for i in model.joints_in_region(region):
            add(region, JOINT, model.joints[i].name, 1)
        if region == LOWER:
            for name in ROOT_TARGETS:
                add(region, ROOT, name, 1)

    modes = []
    for s in slots:
        if (s.region, s.family) not in modes:
            modes.append((s.region, s.family))
    layout = CommandLayout(slots=tuple(slots), modes=tuple(modes), width=off)
    layout.validate()
    return layout


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CommandMask:
    """Per-episode activation bits. Frozen: a mask never changes once the
    episode that drew it has started."""
    mode: tuple[int, ...]
    sparsity: tuple[int, ...]
    episode: int = 0


def slot_activation(layout: CommandLayout, mask: CommandMask) -> np.ndarray:
    """Effective per-slot bit: mode bit of the slot's family AND its own
    sparsity bit."""
    if len(mask.mode) != layout.num_modes or len(mask.sparsity) != layout.num_slots:
        raise CommandError(
            f"mask has {len(mask.mode)}+{len(mask.sparsity)} bits, layout "
            f"needs {layout.num_modes}+{layout.num_slots}")
    mode = np.asarray(mask.mode, dtype=bool)
    spars = np.asarray(mask.sparsity, dtype=bool)
    fam = np.array([layout.mode_index(s.region, s.family) for s in layout.slots])
    return mode[fam] & spars


def mask_vector(layout: CommandLayout, mask: CommandMask) -> np.ndarray:
    """Activation expanded to command-vector width as 0.0 / 1.0."""
    active = slot_activation(layout, mask)
    out = np.zeros(layout.width)
    for i, s in enumerate(layout.slots):
        out[layout.span(i)] = float(active[i])
    return out


def apply_mask(layout: CommandLayout, mask: CommandMask,
               command: np.ndarray) -> np.ndarray:
    """Zero the inactive slots of a (..., width) command vector."""
    command = np.asarray(command)
    if command.shape[-1] != layout.width:
        raise CommandError(f"command width {command.shape[-1]}, "
                           f"layout width {layout.width}")
    return command * mask_vector(layout, mask)


def mask_bits(layout: CommandLayout, mask: CommandMask) -> np.ndarray:
    """Mode bits then sparsity bits, as floats, for observation append."""
    if len(mask.mode) != layout.num_modes or len(mask.sparsity) != layout.num_slots:
        raise CommandError("mask does not match layout")
    return np.concatenate([np.asarray(mask.mode, dtype=np.float64),
                           np.asarray(mask.sparsity, dtype=np.float64)])


def full_mask(layout: CommandLayout, episode: int = 0) -> CommandMask:
    return CommandMask(mode=(1,) * layout.num_modes,
                       sparsity=(1,) * layout.num_slots, episode=episode)


def null_mask(layout: CommandLayout, episode: int = 0) -> CommandMask:
    return CommandMask(mode=(0,) * layout.num_modes,
                       sparsity=(0,) * layout.num_slots, episode=episode)


def sample_mask(layout: CommandLayout, seed: int | np.random.Generator,
                episode: int = 0) -> CommandMask:
    """Every mode and sparsity bit drawn independently Bernoulli(0.5).
    An integer seed gives a reproducible mask; pass a Generator to stream
    one mask per episode."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mode = (rng.random(layout.num_modes) < 0.5).astype(int)
    spars = (rng.random(layout.num_slots) < 0.5).astype(int)
    return CommandMask(mode=tuple(int(b) for b in mode),
                       sparsity=tuple(int(b) for b in spars), episode=episode)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def _named(layout: CommandLayout, active: list[int], episode: int) -> CommandMask:
    mode = [0] * layout.num_modes
    spars = [0] * layout.num_slots
    for i in active:
        s = layout.slots[i]
        mode[layout.mode_index(s.region, s.family)] = 1
        spars[i] = 1
    return CommandMask(mode=tuple(mode), sparsity=tuple(spars), episode=episode)


PRESET_NAMES = ("exbody", "h2o", "omnih2o", "humanplus",
                "left_hand", "right_hand", "two_hands", "head")


def preset(layout: CommandLayout, name: str, episode: int = 0) -> CommandMask:
    """Activation pattern of a named prior-work command configuration or
    single-keypoint teleop mode."""
    kin = layout.slot_indices(family=KINEMATIC)
    by_element = lambda names: [i for i in kin
                                if layout.slots[i].element in names]
    if name == "exbody":
        active = layout.slot_indices(UPPER, JOINT) + layout.slot_indices(LOWER, ROOT)
    elif name == "h2o":
        active = by_element(("l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
                             "l_hand", "r_hand", "l_ankle", "r_ankle"))
    elif name == "omnih2o":
        active = by_element(("head", "l_hand", "r_hand"))
    elif name == "humanplus":
        active = (layout.slot_indices(UPPER, JOINT)
                  + layout.slot_indices(LOWER, JOINT)
                  + layout.slot_indices(LOWER, ROOT))
    elif name == "left_hand":
        active = by_element(("l_hand",))
    elif name == "right_hand":
        active = by_element(("r_hand",))
    elif name == "two_hands":
        active = by_element(("l_hand", "r_hand"))
    elif name == "head":
        active = by_element(("head",))
    else:
        raise CommandError(f"unknown preset {name!r}; "
                           f"known: {', '.join(PRESET_NAMES)}")
    return _named(layout, active, episode)


# ---------------------------------------------------------------------------
# goal vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BodyState:
    """Current whole-body kinematic state, as the goal builders need it.
    Arrays may carry leading batch dimensions."""
    root_pos: np.ndarray        # (..., 2)
    root_rot: np.ndarray        # (...,)
    body_pos: np.ndarray        # (..., L, 2)
    body_rot: np.ndarray        # (..., L)
    body_vel: np.ndarray        # (..., L, 2)
    body_ang_vel: np.ndarray    # (..., L)


@dataclass(frozen=True)
class GoalState:
    kind: str                   # 'oracle' or 'student'
    vector: np.ndarray

    @property
    def width(self) -> int:
        return self.vector.shape[-1]


def wrap_angle(a: np.ndarray) -> np.ndarray:
    """Wrap to (-pi, pi]."""
    return np.pi + (np.asarray(a) - np.pi) % (-2.0 * np.pi)


def oracle_goal_width(model: RobotModel) -> int:
    return 9 * len(model.links)


def build_oracle_goal(frame_next: ReferenceFrame, frame_now: ReferenceFrame,
                      state: BodyState) -> GoalState:
    """Privileged tracking goal: next-frame reference minus current state
    for every link (orientation differences wrapped), then the current
    reference pose itself, its positions taken relative to the robot's
    root x so the vector is invariant to where the motion plays out."""
    L = state.body_pos.shape[-2]
    if frame_next.body_pos.shape[-2] != L or frame_now.body_pos.shape[-2] != L:
        raise CommandError("reference and state cover different body counts")
    rel = frame_now.body_pos.copy()
    rel[..., 0] -= state.root_pos[..., 0][..., None]
    parts = [
        wrap_angle(frame_next.body_rot - state.body_rot),
        (frame_next.body_pos - state.body_pos).reshape(*state.body_pos.shape[:-2], -1),
        (frame_next.body_vel - state.body_vel).reshape(*state.body_vel.shape[:-2], -1),
        frame_next.body_ang_vel - state.body_ang_vel,
        frame_now.body_rot,
        rel.reshape(*rel.shape[:-2], -1),
    ]
    return GoalState(kind="oracle", vector=np.concatenate(parts, axis=-1))


def build_command(layout: CommandLayout, model: RobotModel,
                  frame: ReferenceFrame, state: BodyState) -> np.ndarray:
    """Unmasked command vector for one reference frame: keypoint targets
    relative to the current root position, absolute joint-angle targets,
    and root velocity/height/pitch targets."""
    if frame.joint_pos.shape[-1] != model.num_joints:
        raise CommandError("reference joint count does not match model")
    kp = keypoints_from_bodies(model, frame.body_pos, frame.body_rot)
    kp_rel = kp - state.root_pos[..., None, :]
    batch = frame.joint_pos.shape[:-1]
    out = np.zeros(batch + (layout.width,))
    kp_names = [k.name for k in model.keypoints]
    joint_names = model.joint_names()
    for i, s in enumerate(layout.slots):
        span = layout.span(i)
        if s.family == KINEMATIC:
            out[..., span] = kp_rel[..., kp_names.index(s.element), :]
        elif s.family == JOINT:
            out[..., span] = frame.joint_pos[..., joint_names.index(s.element), None]
        elif s.element == "vel_x":
            out[..., span] = frame.root_vel[..., 0, None]
        elif s.element == "height":
            out[..., span] = frame.root_pos[..., 1, None]
        else:
            out[..., span] = np.asarray(frame.root_rot)[..., None]
    return out


def build_student_goal(layout: CommandLayout, model: RobotModel,
                       frame: ReferenceFrame, state: BodyState,
                       mask: CommandMask) -> GoalState:
    """Masked command vector with the mask bits appended: inactive slots
    are exactly zero, and the appended bits let the policy distinguish a
    commanded zero from an inactive slot."""
    cmd = apply_mask(layout, mask, build_command(layout, model, frame, state))
    bits = np.broadcast_to(mask_bits(layout, mask),
                           cmd.shape[:-1] + (layout.mask_width,))
    return GoalState(kind="student",
                     vector=np.concatenate([cmd, bits], axis=-1))
