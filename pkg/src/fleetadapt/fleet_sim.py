"""Parameterized ground-truth vehicle simulator and fleet data generation.

The dynamics are a planar dynamic bicycle model with a friction-limited yaw
response, a first-order speed loop whose time constant scales with chassis
mass, and critically damped roll/pitch/heave modes whose stiffness follows the
suspension scaling.  Transitions are recorded in a gravity-aligned body frame:
only yaw is removed, roll and pitch stay absolute.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

G = 9.81
WHEELBASE = 0.5  # m
MAX_STEER = 0.45  # rad at |steer| = 1
TAU_SPEED = 0.3  # s per unit mass ratio
TAU_YAW = 0.08  # s per unit mass ratio
ATTITUDE_FREQ = 9.0  # rad/s when alpha_s == alpha_m
ROLL_GAIN = 0.0075  # rad per m/s^2 per unit (alpha_m / alpha_s)
PITCH_GAIN = 0.006
HEAVE_GAIN = 0.004  # m per g^2 per unit (alpha_m / alpha_s)
GRIP_LOSS = 1.0  # fractional friction loss per rad of roll
MIN_GRIP = 0.5
SUBSTEP = 0.005  # s

ALPHA_M_RANGE = (0.5, 4.0)
MU_F_RANGE = (0.6, 0.9)
ALPHA_S_RANGE = (0.6, 1.8)
CONFIG_RANGES = (ALPHA_M_RANGE, MU_F_RANGE, ALPHA_S_RANGE)

STATE_DIM = 4
CONTROL_DIM = 2
NEXT_DIM = 6
TOKEN_DIM = STATE_DIM + CONTROL_DIM + NEXT_DIM


class SimulationError(ValueError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    return math.pi - ((math.pi - a) % (2.0 * math.pi))


@dataclass(frozen=True)
class VehicleConfig:
    id: str
    alpha_m: float
    mu_f: float
    alpha_s: float
    allow_out_of_range: bool = field(default=False, compare=False, repr=False)

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise ValueError(f"config {self.id!r}: parameters must be finite and positive")
        if not self.allow_out_of_range and not self.in_range():
            raise ValueError(
                f"config {self.id!r} = {vals.tolist()} outside the fleet ranges; "
                "pass allow_out_of_range=True for out-of-distribution test vehicles"
            )

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha_m, self.mu_f, self.alpha_s], dtype=float)

    def in_range(self) -> bool:
        return all(lo <= v <= hi for v, (lo, hi) in zip(self.as_array(), CONFIG_RANGES))

    @classmethod
    def from_values(cls, values: Sequence[float], id: str | None = None, **kw) -> "VehicleConfig":
        a_m, mu, a_s = (float(v) for v in values)
        return cls(id or config_id(a_m, mu, a_s), a_m, mu, a_s, **kw)


def config_id(alpha_m: float, mu_f: float, alpha_s: float) -> str:
    return f"m{alpha_m:g}_f{mu_f:g}_s{alpha_s:g}"


def default_fleet() -> list[VehicleConfig]:
    """The 2x2x2 corner grid of the configuration ranges."""
    return [
        VehicleConfig.from_values((a_m, mu, a_s))
        for a_m in ALPHA_M_RANGE
        for mu in MU_F_RANGE
        for a_s in ALPHA_S_RANGE
    ]


@dataclass(frozen=True)
class WorldState:
    """Full simulator state.

    roll_rate, pitch_rate and heave_rate are the hidden second-order mode
    velocities; they are not part of the recorded transitions.
    """

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    yaw_rate: float = 0.0
    speed: float = 0.0
    roll_rate: float = 0.0
    pitch_rate: float = 0.0
    heave_rate: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.__dataclass_fields__], dtype=float)

    def validate(self) -> None:
        if not np.all(np.isfinite(self.as_array())):
            raise SimulationError(f"non-finite state: {self}")
        if not (abs(self.roll) < math.pi / 2 and abs(self.pitch) < math.pi / 2):
            raise SimulationError(f"roll/pitch outside (-pi/2, pi/2): {self}")
        if self.speed < 0:
            raise SimulationError(f"negative speed: {self.speed}")

    def features(self) -> np.ndarray:
        """Current-state feature vector [roll, pitch, yaw_rate, speed]."""
        return np.array([self.roll, self.pitch, self.yaw_rate, self.speed])


@dataclass(frozen=True)
class Control:
    steer: float
    speed_cmd: float

    def __post_init__(self):
        if not (-1.0 <= self.steer <= 1.0) or not math.isfinite(self.steer):
            raise ValueError(f"steer {self.steer} outside [-1, 1]")
        if not (self.speed_cmd >= 0.0) or not math.isfinite(self.speed_cmd):
            raise ValueError(f"speed_cmd {self.speed_cmd} must be finite and >= 0")


@dataclass(frozen=True)
class Transition:
    s_cur: np.ndarray  # [roll, pitch, yaw_rate, speed]
    u: Control
    s_next: np.ndarray  # [dx, dy, dz, roll_next, pitch_next, d_yaw]

    def token(self) -> np.ndarray:
        return np.concatenate([self.s_cur, [self.u.steer, self.u.speed_cmd], self.s_next])


@dataclass
class Trajectory:
    """Fixed-rate body-frame transitions stored column-wise.

    s_cur: (H, 4), u: (H, 2), s_next: (H, 6).
    """

    vehicle_id: str
    dt: float
    s_cur: np.ndarray
    u: np.ndarray
    s_next: np.ndarray

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        n = len(self.s_cur)
        if self.s_cur.shape != (n, STATE_DIM) or self.u.shape != (n, CONTROL_DIM) or self.s_next.shape != (n, NEXT_DIM):
            raise ValueError(
                f"inconsistent trajectory shapes: s_cur {self.s_cur.shape}, u {self.u.shape}, s_next {self.s_next.shape}"
            )

    def __len__(self) -> int:
        return len(self.s_cur)

    @property
    def tokens(self) -> np.ndarray:
        """(H, 12) transition tokens [s_cur, u, s_next]."""
        return np.concatenate([self.s_cur, self.u, self.s_next], axis=1)

    @property
    def transitions(self) -> list[Transition]:
        return [
            Transition(self.s_cur[t].copy(), Control(*self.u[t]), self.s_next[t].copy())
            for t in range(len(self))
        ]


def _attitude(pos: float, rate: float, target: float, omega: float, h: float) -> tuple[float, float]:
    # critically damped second-order mode, semi-implicit Euler
    acc = omega * omega * (target - pos) - 2.0 * omega * rate
    rate = rate + acc * h
    return pos + rate * h, rate


def simulate_step(state: WorldState, u: Control, c: VehicleConfig, dt: float) -> WorldState:
    """Advance the simulator by dt seconds under a constant control."""
    if not 0.0 < dt <= 0.1:
        raise SimulationError(f"dt={dt} outside (0, 0.1]")
    state.validate()

    n_sub = max(1, math.ceil(dt / SUBSTEP - 1e-9))
    h = dt / n_sub
    x, y, z = state.x, state.y, state.z
    roll, pitch, yaw = state.roll, state.pitch, state.yaw
    r, v = state.yaw_rate, state.speed
    roll_rate, pitch_rate, heave_rate = state.roll_rate, state.pitch_rate, state.heave_rate

    tau_v = TAU_SPEED * c.alpha_m
    tau_r = TAU_YAW * c.alpha_m
    omega = ATTITUDE_FREQ * math.sqrt(c.alpha_s / c.alpha_m)
    compliance = c.alpha_m / c.alpha_s
    delta = u.steer * MAX_STEER

    for _ in range(n_sub):
        grip = c.mu_f * max(1.0 - GRIP_LOSS * abs(roll), MIN_GRIP) * G
        a_x = min(max((u.speed_cmd - v) / tau_v, -grip), grip)
        v = max(v + a_x * h, 0.0)

        r_target = v * math.tan(delta) / WHEELBASE
        if v > 0.0:
            r_max = grip / v
            r_target = min(max(r_target, -r_max), r_max)
        r = r + (r_target - r) * h / tau_r
        a_y = v * r

        roll, roll_rate = _attitude(roll, roll_rate, ROLL_GAIN * compliance * a_y, omega, h)
        pitch, pitch_rate = _attitude(pitch, pitch_rate, -PITCH_GAIN * compliance * a_x, omega, h)
        sag = -HEAVE_GAIN * compliance * (a_x * a_x + a_y * a_y) / (G * G)
        z, heave_rate = _attitude(z, heave_rate, sag, omega, h)

        yaw = yaw + r * h
        x = x + v * math.cos(yaw) * h
        y = y + v * math.sin(yaw) * h

    nxt = WorldState(x, y, z, roll, pitch, wrap_angle(yaw), r, v, roll_rate, pitch_rate, heave_rate)
    nxt.validate()
    return nxt


def speed_profile(v_min: float, v_max: float) -> tuple[float, float]:
    """Center speed and amplitude so that v_c +- A spans [v_min, v_max]."""
    return (v_min + v_max) / 2.0, (v_max - v_min) / 2.0


def excitation_controls(seed: int, duration: float, dt: float) -> list[Control]:
    """Sinusoidal steering and speed excitation sampled every dt.

    Frequencies are drawn in Hz; the speed command oscillates between a
    minimum drawn from U(3, 4) m/s and a maximum drawn from U(8, 10) m/s.
    """
    if duration < dt:
        raise ValueError("duration must be >= dt")
    rng = np.random.default_rng(seed)
    f_steer = rng.uniform(0.1, 0.5)
    f_speed = rng.uniform(0.1, 2.5)
    v_c, amp = speed_profile(rng.uniform(3.0, 4.0), rng.uniform(8.0, 10.0))
    n = int(round(duration / dt))
    t = np.arange(n) * dt
    steer = np.sin(2.0 * np.pi * f_steer * t)
    speed = v_c + amp * np.sin(2.0 * np.pi * f_speed * t)
    return [Control(float(s), float(v)) for s, v in zip(steer, speed)]


def to_body_frame(prev: WorldState, nxt: WorldState) -> np.ndarray:
    """[dx, dy, dz, roll_next, pitch_next, d_yaw] relative to prev's heading."""
    dxw, dyw = nxt.x - prev.x, nxt.y - prev.y
    cy, sy = math.cos(prev.yaw), math.sin(prev.yaw)
    return np.array([
        cy * dxw + sy * dyw,
        -sy * dxw + cy * dyw,
        nxt.z - prev.z,
        nxt.roll,
        nxt.pitch,
        wrap_angle(nxt.yaw - prev.yaw),
    ])


def simulate_trajectory(
    c: VehicleConfig, seed: int, H: int, dt: float, initial: WorldState | None = None
) -> tuple[Trajectory, list[WorldState]]:
    """Roll the simulator for H steps; returns the trajectory and all H+1 world states."""
    if H < 2:
        raise ValueError("H must be >= 2")
    controls = excitation_controls(seed, H * dt, dt)
    state = initial if initial is not None else WorldState(speed=controls[0].speed_cmd)
    states = [state]
    s_cur = np.empty((H, STATE_DIM))
    u = np.empty((H, CONTROL_DIM))
    s_next = np.empty((H, NEXT_DIM))
    for t, ctrl in enumerate(controls):
        nxt = simulate_step(state, ctrl, c, dt)
        s_cur[t] = state.features()
        u[t] = (ctrl.steer, ctrl.speed_cmd)
        s_next[t] = to_body_frame(state, nxt)
        if abs(s_next[t, 5]) >= math.pi:
            raise SimulationError("yaw change per step must stay below pi")
        state = nxt
        states.append(state)
    # chaining: recorded next-step attitude equals the following step's input
    if H > 1 and np.max(np.abs(s_next[:-1, 3:5] - s_cur[1:, 0:2])) > 1e-9:
        raise SimulationError("transition chain broken")
    if not (np.all(np.isfinite(s_cur)) and np.all(np.isfinite(s_next))):
        raise SimulationError("non-finite transition")
    return Trajectory(c.id, dt, s_cur, u, s_next), states


def generate_trajectory(c: VehicleConfig, seed: int, H: int = 100, dt: float = 0.05) -> Trajectory:
    return simulate_trajectory(c, seed, H, dt)[0]


def trajectory_seed(fleet_seed: int, vehicle_id: str, index: int) -> int:
    """Seed for trajectory `index` of a vehicle; depends on the id, not fleet order."""
    ss = np.random.SeedSequence(entropy=fleet_seed, spawn_key=(zlib.crc32(vehicle_id.encode()), index))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def generate_fleet(
    configs: Iterable[VehicleConfig],
    trajectories_per_vehicle: int,
    seed: int,
    H: int = 100,
    dt: float = 0.05,
) -> dict[str, list[Trajectory]]:
    configs = list(configs)
    if not configs:
        raise ValueError("fleet must contain at least one vehicle")
    ids = [c.id for c in configs]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate vehicle ids: {dup}")
    return {
        c.id: [generate_trajectory(c, trajectory_seed(seed, c.id, j), H, dt) for j in range(trajectories_per_vehicle)]
        for c in configs
    }
