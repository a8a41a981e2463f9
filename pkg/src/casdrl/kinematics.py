"""Point-mass aircraft kinematics with slew-limited advisory response.

States travel through the simulator as ``(n, 7)`` float arrays whose columns
are given by the ``X ... TURN`` constants below; :class:`AircraftState` is the
scalar, validated view of one row.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .actions import CombinedAction

TWO_PI = 2.0 * math.pi

X, Y, ALT, HDG, SPD, VRATE, TURN = range(7)
STATE_WIDTH = 7

# 8-point Gauss-Legendre on [0, 1]; integrand is a smooth chirp over <= 1 s
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


class PropagationError(ValueError):
    """Raised when a state or step size is not finite/positive."""


@dataclass(frozen=True)
class Kinematics:
    """Advisory magnitudes, slew limits and NMAC thresholds."""

    turn_rate_cmd: float = math.radians(3.0)  # rad/s
    vertical_rate_cmd: float = 1500.0  # ft/min
    turn_accel: float = math.radians(1.0)  # rad/s^2
    vertical_accel: float = 500.0  # ft/min/s
    nmac_horizontal: float = 500.0  # ft
    nmac_vertical: float = 100.0  # ft

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"kinematics.{name} must be finite and > 0, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class AircraftState:
    """Truth state of one aircraft.

    x is north and y is east (ft); heading is measured clockwise from north
    in radians; vertical_rate is ft/min and turn_rate rad/s.
    """

    x: float
    y: float
    alt: float
    heading: float
    ground_speed: float
    vertical_rate: float = 0.0
    turn_rate: float = 0.0

    def __post_init__(self):
        values = (self.x, self.y, self.alt, self.heading, self.ground_speed,
                  self.vertical_rate, self.turn_rate)
        if not all(math.isfinite(v) for v in values):
            raise PropagationError(f"non-finite aircraft state: {values}")
        if self.ground_speed < 0:
            raise ValueError(f"ground_speed must be >= 0, got {self.ground_speed}")
        object.__setattr__(self, "heading", float(np.mod(self.heading, TWO_PI)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.alt, self.heading, self.ground_speed,
                         self.vertical_rate, self.turn_rate], dtype=np.float64)

    @classmethod
    def from_array(cls, row) -> "AircraftState":
        row = np.asarray(row, dtype=np.float64)
        return cls(*(float(v) for v in row[:STATE_WIDTH]))


def _ramp(current, target, accel, dt):
    """Slew-limited approach of ``current`` to ``target``.

    Returns (ramp duration within dt, signed slope, rate at end of step).
    """
    delta = target - current
    slope = np.sign(delta) * accel
    tau = np.minimum(np.abs(delta) / accel, dt)
    end = np.where(np.abs(delta) / accel <= dt, target, current + slope * dt)
    return tau, slope, end


def propagate_batch(states: np.ndarray, actions, dt: float, kin: Kinematics) -> np.ndarray:
    """Advance ``(n, 7)`` states by ``dt`` seconds under per-row advisories.

    Rates slew linearly toward the commanded values; heading and altitude are
    integrated exactly for that profile and the horizontal track is
    integrated by Gauss-Legendre quadrature on each smooth piece.
    """
    states = np.asarray(states, dtype=np.float64)
    if not dt > 0 or not math.isfinite(dt):
        raise PropagationError(f"dt must be finite and > 0, got {dt}")
    if not np.all(np.isfinite(states)):
        raise PropagationError("non-finite state passed to propagate")
    actions = np.asarray(actions, dtype=np.int64)
    v_ord = actions // 3
    h_ord = actions % 3
    w_target = (h_ord - 1) * kin.turn_rate_cmd
    vr_target = (1 - v_ord) * kin.vertical_rate_cmd

    h0 = states[:, HDG]
    w0 = states[:, TURN]
    vr0 = states[:, VRATE]
    speed = states[:, SPD]

    tau_w, slope_w, w_end = _ramp(w0, w_target, kin.turn_accel, dt)
    h_tau = h0 + w0 * tau_w + 0.5 * slope_w * tau_w**2
    rest = dt - tau_w

    # piece 1: quadratic heading over [0, tau_w]; piece 2: linear over [tau_w, dt]
    t1 = tau_w[:, None] * _GL_X[None, :]
    hd1 = h0[:, None] + w0[:, None] * t1 + 0.5 * slope_w[:, None] * t1**2
    t2 = rest[:, None] * _GL_X[None, :]
    hd2 = h_tau[:, None] + w_end[:, None] * t2
    # row-wise sums (not BLAS) keep results independent of batch size
    cos_int = tau_w * (np.cos(hd1) * _GL_W).sum(axis=1) + rest * (np.cos(hd2) * _GL_W).sum(axis=1)
    sin_int = tau_w * (np.sin(hd1) * _GL_W).sum(axis=1) + rest * (np.sin(hd2) * _GL_W).sum(axis=1)

    tau_v, slope_v, vr_end = _ramp(vr0, vr_target, kin.vertical_accel, dt)
    climb_ft = (vr0 * tau_v + 0.5 * slope_v * tau_v**2 + vr_end * (dt - tau_v)) / 60.0

    out = states.copy()
    out[:, X] = states[:, X] + speed * cos_int
    out[:, Y] = states[:, Y] + speed * sin_int
    out[:, ALT] = states[:, ALT] + climb_ft
    out[:, HDG] = np.mod(h_tau + w_end * rest, TWO_PI)
    out[:, VRATE] = vr_end
    out[:, TURN] = w_end
    return out


def propagate(state: AircraftState, action: CombinedAction | int, dt: float,
              kin: Kinematics | None = None) -> AircraftState:
    """Scalar wrapper around :func:`propagate_batch`."""
    kin = kin or Kinematics()
    index = action.index if isinstance(action, CombinedAction) else int(action)
    row = propagate_batch(state.as_array()[None, :], [index], dt, kin)[0]
    return AircraftState.from_array(row)


def nmac_batch(own: np.ndarray, intr: np.ndarray, kin: Kinematics) -> np.ndarray:
    dx = intr[:, X] - own[:, X]
    dy = intr[:, Y] - own[:, Y]
    horiz = np.hypot(dx, dy)
    vert = np.abs(intr[:, ALT] - own[:, ALT])
    return (horiz < kin.nmac_horizontal) & (vert < kin.nmac_vertical)


def detect_nmac(own: AircraftState, intr: AircraftState, kin: Kinematics | None = None) -> bool:
    """Strict cylinder test: horizontal < 500 ft and vertical < 100 ft by default."""
    kin = kin or Kinematics()
    return bool(nmac_batch(own.as_array()[None, :], intr.as_array()[None, :], kin)[0])
