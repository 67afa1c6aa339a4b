"""Per-step reward for motion tracking: a weighted sum of penalty,
regularization and task terms, returned with a full per-term breakdown.

Task terms score tracking accuracy through the kernel
``weight * exp(-||err||^2 / sigma^2)``, so each lives in [0, weight] and
saturates at perfect tracking. Penalty and regularization terms are
``weight * measured quantity``; the measured quantity for every term is
documented in :func:`compute_reward`. Gait bookkeeping (air time, swing
clearance, flight detection) is stateful across steps and lives in
:class:`GaitTracker`, which the environment updates once per control step.

Everything is batched over environments: array inputs lead with the
environment axis E. Reference-frame fields may be unbatched (a single
frame shared by all environments) since the arithmetic broadcasts.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .commands import BodyState, wrap_angle
from .motion import ReferenceFrame
from .robot import LOWER, UPPER, RobotModel

PENALTY = "penalty"
REGULARIZATION = "regularization"
TASK = "task"
GROUPS = (PENALTY, REGULARIZATION, TASK)


def _w(value: float, group: str):
    return field(default=value, metadata={"group": group})


@dataclass(frozen=True)
class RewardWeights:
    """One weight per reward term, tagged with its group.

    Field order is the breakdown order. Zeroing a weight removes its term
    from the total but keeps the (zero) entry in the breakdown.
    """

    # penalty
    torque_limits: float = _w(-2.0, PENALTY)
    dof_pos_limits: float = _w(-1.25e2, PENALTY)
    termination: float = _w(-2.5e2, PENALTY)
    dof_vel_limits: float = _w(-5e1, PENALTY)
    # regularization
    dof_acc: float = _w(-1.1e-5, REGULARIZATION)
    dof_vel: float = _w(-4e-3, REGULARIZATION)
    lower_action_rate: float = _w(-3.0, REGULARIZATION)
    upper_action_rate: float = _w(-6.25e-1, REGULARIZATION)
    torque: float = _w(-1e-4, REGULARIZATION)
    feet_orientation: float = _w(-6.25e1, REGULARIZATION)
    feet_air_time: float = _w(1e3, REGULARIZATION)
    feet_contact_force: float = _w(-7.5e-1, REGULARIZATION)
    stumble: float = _w(-1.25e3, REGULARIZATION)
    slippage: float = _w(-7.5e1, REGULARIZATION)
    in_the_air: float = _w(-2e2, REGULARIZATION)
    max_feet_height: float = _w(-3e3, REGULARIZATION)
    # task
    track_dof_pos: float = _w(3.2e1, TASK)
    track_dof_vel: float = _w(1.6e1, TASK)
    track_body_pos: float = _w(8e1, TASK)
    track_body_rot: float = _w(2e1, TASK)
    track_body_vel: float = _w(8.0, TASK)
    track_body_ang_vel: float = _w(8.0, TASK)
    track_root_vel: float = _w(1e2, TASK)
    track_root_rot: float = _w(2e1, TASK)


def term_groups() -> dict[str, str]:
    """Map every term name to its group tag."""
    return {f.name: f.metadata["group"] for f in dataclasses.fields(RewardWeights)}


def group_totals(breakdown: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Sum a breakdown into its three groups, in term order."""
    groups = term_groups()
    out: dict[str, np.ndarray] = {}
    for name, val in breakdown.items():
        g = groups[name]
        out[g] = out.get(g, 0.0) + val
    return out


@dataclass(frozen=True)
class RewardSigmas:
    """Kernel widths for the task terms, one per tracked quantity."""

    dof_pos: float = 0.7        # rad
    dof_vel: float = 1.0        # rad/s
    body_pos: float = 0.5       # m
    body_rot: float = 0.3       # rad
    body_vel: float = 1.0       # m/s
    body_ang_vel: float = 1.0   # rad/s
    root_vel: float = 0.5       # m/s
    root_rot: float = 0.3       # rad

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"sigma {f.name} must be positive")


@dataclass(frozen=True)
class GaitParams:
    """Thresholds for the gait bookkeeping terms."""

    air_time_baseline: float = 0.5     # s, swings shorter than this score negative
    swing_height_target: float = 0.05  # m, desired foot clearance per swing
    contact_force_limit: float = 400.0  # N, force magnitude above this is penalized
    stumble_ratio: float = 3.0         # tangential force > ratio * normal flags a stumble

    def __post_init__(self):
        if self.air_time_baseline < 0 or self.swing_height_target < 0:
            raise ValueError("gait baselines must be non-negative")
        if self.contact_force_limit < 0 or self.stumble_ratio <= 0:
            raise ValueError("force thresholds must be positive")


@dataclass(frozen=True)
class GaitEvents:
    """What the gait tracker observed on one control step."""

    first_contact: np.ndarray  # (E, F) bool, foot touched down after a swing
    air_time: np.ndarray       # (E, F) completed swing duration on touchdown, else 0
    swing_peak: np.ndarray     # (E, F) peak foot height of that swing, else 0
    in_air: np.ndarray         # (E,) bool, no foot in contact this step


class GaitTracker:
    """Stance/swing bookkeeping across control steps.

    Call :meth:`update` once per step with contact flags and ground-relative
    foot heights. Air time accumulates while a foot is off the ground; the
    step it touches down again reports the completed swing's duration (the
    landing step itself counts) and peak height, then both accumulators
    reset. Feet standing since :meth:`reset` never report a touchdown.
    """

    def __init__(self, num_envs: int, num_feet: int, dt: float):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.dt = dt
        self._air = np.zeros((num_envs, num_feet))
        self._peak = np.zeros((num_envs, num_feet))

    def reset(self, env_ids: np.ndarray | None = None) -> None:
        ids = slice(None) if env_ids is None else env_ids
        self._air[ids] = 0.0
        self._peak[ids] = 0.0

    def update(self, contact: np.ndarray, foot_height: np.ndarray) -> GaitEvents:
        contact = np.asarray(contact, dtype=bool)
        first = contact & (self._air > 0.0)
        self._air += self.dt
        self._peak = np.maximum(self._peak, foot_height)
        events = GaitEvents(
            first_contact=first,
            air_time=np.where(first, self._air, 0.0),
            swing_peak=np.where(first, self._peak, 0.0),
            in_air=~contact.any(axis=1),
        )
        self._air[contact] = 0.0
        self._peak[contact] = 0.0
        return events


@dataclass
class StepState:
    """Snapshot of one control step, batched over environments.

    ``torque`` and ``torque_excess`` are per-step means from the simulator;
    ``joint_acc`` is the control-rate finite difference of joint velocity.
    ``root_vel`` is the base origin velocity (not the base link COM).
    """

    model: RobotModel
    joint_pos: np.ndarray       # (E, J)
    joint_vel: np.ndarray       # (E, J)
    joint_acc: np.ndarray       # (E, J)
    root_vel: np.ndarray        # (E, 2)
    body: BodyState             # world-frame link kinematics, leading axis E
    torque: np.ndarray          # (E, J)
    torque_excess: np.ndarray   # (E, J)
    contact: np.ndarray         # (E, F) bool
    contact_force: np.ndarray   # (E, F, 2) (tangential, normal)
    foot_vel: np.ndarray        # (E, F, 2) contact point world velocity
    gait: GaitEvents
    terminated: np.ndarray      # (E,) bool


def foot_rest_angles(model: RobotModel) -> np.ndarray:
    """World angle of each foot link in the zero configuration.

    Chains mounting angles from the base out to the foot, so a foot is
    "flat" when its world angle matches this value (mod 2 pi).
    """
    by_child = {j.child: j for j in model.joints}
    out = []
    for name in model.foot_links:
        ang = model.base_mount
        cur = name
        while cur != model.base:
            j = by_child[cur]
            ang += j.rest
            cur = j.parent
        out.append(ang)
    return np.array(out, dtype=np.float64)


def compute_reward(
    weights: RewardWeights,
    state: StepState,
    action: np.ndarray,
    prev_action: np.ndarray,
    frame: ReferenceFrame,
    sigmas: RewardSigmas | None = None,
    gait: GaitParams | None = None,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Score one control step against a reference frame.

    Returns ``(total, breakdown)`` where breakdown maps every weight field
    to its weighted (E,) contribution and total is their sum in field
    order. Measured quantities, per term:

    penalty
      torque_limits     sum_j demanded torque beyond the motor limit
      dof_pos_limits    sum_j joint angle excursion past its limit
      termination       1.0 on the step the episode fails, else 0.0
      dof_vel_limits    sum_j |joint velocity| beyond its limit

    regularization
      dof_acc, dof_vel, torque   squared norm of the respective vector
      lower/upper_action_rate    ||a_t - a_{t-1}||^2 over that region's joints
      feet_orientation  sum_f contact * sin^2(foot tilt from rest); tilt is
                        gated by contact because a swinging point foot has
                        no orientation constraint
      feet_air_time     sum_f touchdown * (swing seconds - baseline); short
                        hops score negative, standing scores zero
      feet_contact_force  sum_f max(|force| - limit, 0)
      stumble           sum_f [|tangential| > ratio * |normal|]; with the
                        friction cone coefficient below the ratio this can
                        only fire on non-ground contact geometry
      slippage          sum_f contact * ||foot velocity||^2
      in_the_air        1.0 when no foot is in contact
      max_feet_height   sum_f touchdown * max(target - swing peak, 0), a
                        clearance deficit on each completed swing

    task, kernel weight * exp(-||err||^2 / sigma^2)
      track_dof_pos, track_dof_vel    joint angle / velocity vs the frame
      track_body_pos, track_body_rot, track_body_vel, track_body_ang_vel
                        per-link world kinematics vs the frame, rotations
                        wrapped, summed over links (and x, z)
      track_root_vel    base origin velocity error
      track_root_rot    base pitch error, wrapped
    """
    sigmas = sigmas or RewardSigmas()
    gait = gait or GaitParams()
    model = state.model
    if action.shape[-1] != model.num_joints:
        raise ValueError(
            f"action width {action.shape[-1]} != {model.num_joints} joints")
    terms: dict[str, np.ndarray] = {}

    # penalty
    limits = np.array([j.limit for j in model.joints])
    over = (np.maximum(state.joint_pos - limits[:, 1], 0.0)
            + np.maximum(limits[:, 0] - state.joint_pos, 0.0))
    vel_excess = np.maximum(
        np.abs(state.joint_vel) - model.joint_array("vel_limit"), 0.0)
    terms["torque_limits"] = weights.torque_limits * state.torque_excess.sum(-1)
    terms["dof_pos_limits"] = weights.dof_pos_limits * over.sum(-1)
    terms["termination"] = weights.termination * state.terminated.astype(np.float64)
    terms["dof_vel_limits"] = weights.dof_vel_limits * vel_excess.sum(-1)

    # regularization
    rate_sq = np.square(action - prev_action)
    lower = model.joints_in_region(LOWER)
    upper = model.joints_in_region(UPPER)
    terms["dof_acc"] = weights.dof_acc * np.square(state.joint_acc).sum(-1)
    terms["dof_vel"] = weights.dof_vel * np.square(state.joint_vel).sum(-1)
    terms["lower_action_rate"] = weights.lower_action_rate * rate_sq[..., lower].sum(-1)
    terms["upper_action_rate"] = weights.upper_action_rate * rate_sq[..., upper].sum(-1)
    terms["torque"] = weights.torque * np.square(state.torque).sum(-1)

    feet = [model.link_index(name) for name in model.foot_links]
    tilt = state.body.body_rot[..., feet] - foot_rest_angles(model)
    contact = state.contact.astype(np.float64)
    terms["feet_orientation"] = weights.feet_orientation * (
        np.square(np.sin(tilt)) * contact).sum(-1)

    ev = state.gait
    landed = ev.first_contact.astype(np.float64)
    force_mag = np.linalg.norm(state.contact_force, axis=-1)
    stumbling = (np.abs(state.contact_force[..., 0])
                 > gait.stumble_ratio * np.abs(state.contact_force[..., 1]))
    terms["feet_air_time"] = weights.feet_air_time * (
        (ev.air_time - gait.air_time_baseline) * landed).sum(-1)
    terms["feet_contact_force"] = weights.feet_contact_force * np.maximum(
        force_mag - gait.contact_force_limit, 0.0).sum(-1)
    terms["stumble"] = weights.stumble * stumbling.astype(np.float64).sum(-1)
    terms["slippage"] = weights.slippage * (
        np.square(state.foot_vel).sum(-1) * contact).sum(-1)
    terms["in_the_air"] = weights.in_the_air * ev.in_air.astype(np.float64)
    terms["max_feet_height"] = weights.max_feet_height * (
        np.maximum(gait.swing_height_target - ev.swing_peak, 0.0) * landed).sum(-1)

    # task
    def kernel(weight, err_sq, sigma):
        return weight * np.exp(-err_sq / sigma**2)

    body = state.body
    terms["track_dof_pos"] = kernel(
        weights.track_dof_pos,
        np.square(frame.joint_pos - state.joint_pos).sum(-1), sigmas.dof_pos)
    terms["track_dof_vel"] = kernel(
        weights.track_dof_vel,
        np.square(frame.joint_vel - state.joint_vel).sum(-1), sigmas.dof_vel)
    terms["track_body_pos"] = kernel(
        weights.track_body_pos,
        np.square(frame.body_pos - body.body_pos).sum((-2, -1)), sigmas.body_pos)
    terms["track_body_rot"] = kernel(
        weights.track_body_rot,
        np.square(wrap_angle(frame.body_rot - body.body_rot)).sum(-1),
        sigmas.body_rot)
    terms["track_body_vel"] = kernel(
        weights.track_body_vel,
        np.square(frame.body_vel - body.body_vel).sum((-2, -1)), sigmas.body_vel)
    terms["track_body_ang_vel"] = kernel(
        weights.track_body_ang_vel,
        np.square(frame.body_ang_vel - body.body_ang_vel).sum(-1),
        sigmas.body_ang_vel)
    terms["track_root_vel"] = kernel(
        weights.track_root_vel,
        np.square(frame.root_vel - state.root_vel).sum(-1), sigmas.root_vel)
    terms["track_root_rot"] = kernel(
        weights.track_root_rot,
        np.square(wrap_angle(frame.root_rot - body.root_rot)), sigmas.root_rot)

    total = np.zeros(np.shape(terms["termination"]))
    for val in terms.values():
        total = total + val
    return total, terms
