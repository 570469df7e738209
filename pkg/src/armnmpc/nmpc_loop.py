"""Real-time NMPC execution pipeline and its UDP wire format.

Pipeline per 1 ms cycle: drain the freshest measurement datagram, sample
the reference window at the current time, shift the previous solution when
a node boundary has been crossed, run the solver for a small fixed number
of iterations from the warm start, and stream the stage-1 joint state as
the command for the low-level controller.

Datagrams are fixed 56-byte little-endian frames:

    magic(4) pad(4) seq(u64) timestamp_ns(u64) a1(f64) a2(f64) b1(f64) b2(f64)

with magic "MPC1" for measurements (payload theta, theta_dot) and "CMD1"
for commands (payload theta_cmd, theta_dot_cmd).
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import solver as sqp
from . import transcription as tx
from .model import JointState, ModelParams
from .reference import TrajectorySpec, sample_window

MEASUREMENT_MAGIC = b"MPC1"
COMMAND_MAGIC = b"CMD1"
DATAGRAM_SIZE = 56
_WIRE = struct.Struct("<4s4xQQ4d")

DEFAULT_MEASUREMENT_PORT = 47001
DEFAULT_COMMAND_PORT = 47002


class WireError(ValueError):
    """Datagram failed structural validation."""


class WatchdogError(RuntimeError):
    """Measurement stream lost for too many consecutive cycles."""


@dataclass(frozen=True)
class Measurement:
    seq: int
    timestamp_ns: int
    theta: np.ndarray
    theta_dot: np.ndarray


@dataclass(frozen=True)
class Command:
    seq: int
    timestamp_ns: int
    theta_cmd: np.ndarray
    theta_dot_cmd: np.ndarray


@dataclass
class LoopStats:
    """Per-cycle diagnostics of the online loop."""

    cycle_wall_s: list = field(default_factory=list)
    drained: list = field(default_factory=list)
    kkt: list = field(default_factory=list)
    solver_iterations: list = field(default_factory=list)
    stale_cycles: int = 0
    malformed_datagrams: int = 0
    deadline_misses: int = 0
    buffer_allocs: int = 0


# ------------------------------------------------------------------- wire

def _encode(magic: bytes, seq: int, timestamp_ns: int, a, b) -> bytes:
    return _WIRE.pack(magic, seq, timestamp_ns,
                      float(a[0]), float(a[1]), float(b[0]), float(b[1]))


def _decode(data: bytes, magic: bytes):
    if len(data) != DATAGRAM_SIZE:
        raise WireError(f"datagram length {len(data)} != {DATAGRAM_SIZE}")
    got, seq, ts, a1, a2, b1, b2 = _WIRE.unpack(data)
    if got != magic:
        raise WireError(f"bad magic {got!r}")
    if not all(map(math.isfinite, (a1, a2, b1, b2))):
        raise WireError("non-finite payload")
    return seq, ts, np.array([a1, a2]), np.array([b1, b2])


def encode_measurement(m: Measurement) -> bytes:
    return _encode(MEASUREMENT_MAGIC, m.seq, m.timestamp_ns, m.theta, m.theta_dot)


def decode_measurement(data: bytes) -> Measurement:
    seq, ts, theta, theta_dot = _decode(data, MEASUREMENT_MAGIC)
    return Measurement(seq=seq, timestamp_ns=ts, theta=theta, theta_dot=theta_dot)


def encode_command(c: Command) -> bytes:
    return _encode(COMMAND_MAGIC, c.seq, c.timestamp_ns, c.theta_cmd, c.theta_dot_cmd)


def decode_command(data: bytes) -> Command:
    seq, ts, theta, theta_dot = _decode(data, COMMAND_MAGIC)
    return Command(seq=seq, timestamp_ns=ts, theta_cmd=theta, theta_dot_cmd=theta_dot)


def drain_latest(sock, decoder=decode_measurement):
    """Read every pending datagram, keep the highest sequence number.

    Never blocks.  Returns (message_or_None, drained_count, malformed_count);
    malformed datagrams are skipped and counted.  The socket must raise
    BlockingIOError when empty (non-blocking UDP socket or loopback stub).
    """
    latest = None
    drained = 0
    malformed = 0
    while True:
        try:
            data = sock.recv(4096)
        except BlockingIOError:
            break
        drained += 1
        try:
            msg = decoder(data)
        except WireError:
            malformed += 1
            continue
        if latest is None or msg.seq >= latest.seq:
            latest = msg
    return latest, drained, malformed


class LoopbackSocket:
    """In-memory datagram queue with the non-blocking socket contract.

    Used by the deterministic virtual-clock mode; the real mode uses actual
    UDP sockets with the same recv semantics.
    """

    def __init__(self):
        self._queue: list[bytes] = []

    def sendto_peer(self, data: bytes):
        self._queue.append(bytes(data))

    def recv(self, _bufsize: int = 4096) -> bytes:
        if not self._queue:
            raise BlockingIOError
        return self._queue.pop(0)

    def pending(self) -> int:
        return len(self._queue)


# ------------------------------------------------------------------ shifting

class SolutionShifter:
    """Shifts the decision vector left one node per crossed node boundary.

    The 1 ms cycle is far shorter than the node spacing, so an elapsed-time
    accumulator decides when a shift actually happens; the final stage is
    duplicated to fill the tail.
    """

    def __init__(self, dt: float):
        if dt <= 0.0:
            raise ValueError("dt must be positive")
        self.dt = float(dt)
        self._accum = 0.0

    def shift_solution(self, z_prev: np.ndarray, elapsed: float) -> tuple[np.ndarray, int]:
        """Advance by `elapsed` seconds; returns (z_guess, node_shifts)."""
        if elapsed < 0.0:
            raise ValueError("elapsed must be >= 0")
        self._accum += float(elapsed)
        shifts = 0
        z = np.asarray(z_prev, dtype=float)
        while self._accum >= self.dt:
            self._accum -= self.dt
            z = shift_stages(z)
            shifts += 1
        return (z if shifts else z_prev), shifts


def shift_stages(z: np.ndarray) -> np.ndarray:
    """Move every stage one slot earlier and duplicate the final stage."""
    stages = np.asarray(z, dtype=float).reshape(-1, 6)
    out = np.empty_like(stages)
    out[:-1] = stages[1:]
    out[-1] = stages[-1]
    return out.reshape(-1)


def _shift_stage_vector(v: np.ndarray, width: int) -> np.ndarray:
    """Shift any per-stage-structured vector (multipliers, active sets)."""
    blocks = v.reshape(-1, width)
    out = np.empty_like(blocks)
    out[:-1] = blocks[1:]
    out[-1] = blocks[-1]
    return out.reshape(-1)


def _shift_warm_start(warm: sqp.WarmStart, horizon: int) -> sqp.WarmStart:
    """Stage-shift primal, multipliers and active sets; drop the BFGS matrix
    (a stage-permuted matrix with a duplicated tail block would not stay
    positive definite)."""
    n = horizon
    ineq = warm.ineq_mult.reshape(3, 2 * n)  # x rows, xd rows, thdd rows
    ineq_shifted = np.stack([_shift_stage_vector(r, 2) for r in ineq]).reshape(-1)
    rows = warm.active_rows
    if rows is not None:
        rows = np.stack([_shift_stage_vector(r, 2)
                         for r in rows.reshape(3, 2 * n)]).reshape(-1)
    bounds = warm.active_bounds
    if bounds is not None:
        bounds = _shift_stage_vector(bounds, 6)
    return sqp.WarmStart(
        z=shift_stages(warm.z),
        eq_mult=_shift_stage_vector(warm.eq_mult, 4),
        ineq_mult=ineq_shifted,
        bound_mult=_shift_stage_vector(warm.bound_mult, 6),
        bfgs=None,
        active_rows=rows,
        active_bounds=bounds)


# ------------------------------------------------------------ controller

@dataclass(frozen=True)
class ControllerConfig:
    """Everything the online loop needs to run."""

    params: ModelParams
    ocp: tx.OcpConfig
    trajectory: TrajectorySpec
    options: sqp.SolverOptions = field(
        default_factory=lambda: sqp.SolverOptions(max_iterations=1))
    init_options: sqp.SolverOptions = field(
        default_factory=lambda: sqp.SolverOptions(max_iterations=200,
                                                  kkt_tolerance=1e-6))
    interpolate_commands: bool = False
    watchdog_limit: int = 50
    cycle_dt: float = 1e-3


def initialize(config: ControllerConfig, first_measurement: Measurement,
               t0: float) -> sqp.SolveResult:
    """Offline warm-start preparation: seeded guess, tight long solve."""
    measured = JointState(first_measurement.theta, first_measurement.theta_dot)
    window = sample_window(config.trajectory, t0, config.ocp.horizon,
                           config.ocp.dt)
    nlp = tx.build_nlp(window, measured, config.ocp, config.params)
    z0 = tx.reference_seeded_guess(window, measured, config.ocp, config.params)
    result = sqp.solve(nlp, sqp.WarmStart.cold(nlp, z0), config.init_options)
    if result.status not in (sqp.SolveStatus.CONVERGED,
                             sqp.SolveStatus.ITERATION_LIMIT):
        raise RuntimeError(
            f"initialization solve failed with status {result.status.value}")
    return result


def online_step(warm: sqp.WarmStart, measurement: Measurement, t_now: float,
                config: ControllerConfig, shifter: SolutionShifter,
                elapsed: float):
    """One online NMPC cycle; returns (Command payload, WarmStart', SolveResult).

    The measurement is pinned as the stage-0 state, the reference window is
    sampled at t_now, the previous solution is used (shifted across node
    boundaries) as the primal guess, and the stage-1 state of the optimized
    plan becomes the command.
    """
    z_guess, shifts = shifter.shift_solution(warm.z, elapsed)
    if shifts:
        warm = _shift_warm_start(warm, config.ocp.horizon)
        warm.z = z_guess
    measured = JointState(np.asarray(measurement.theta, dtype=float),
                          np.asarray(measurement.theta_dot, dtype=float))
    window = sample_window(config.trajectory, t_now, config.ocp.horizon,
                           config.ocp.dt)
    nlp = tx.build_nlp(window, measured, config.ocp, config.params)
    result = sqp.solve(nlp, warm, config.options)

    controls, states = tx.unpack(result.z, config.ocp.horizon)
    theta_cmd = states[0, :2].copy()
    theta_dot_cmd = states[0, 2:].copy()
    if config.interpolate_commands:
        frac = min(1.0, shifter._accum / config.ocp.dt)
        theta_cmd = measured.theta + frac * (theta_cmd - measured.theta)
        theta_dot_cmd = measured.theta_dot + frac * (theta_dot_cmd
                                                     - measured.theta_dot)
    return (theta_cmd, theta_dot_cmd), result.to_warm_start(), result


class NmpcController:
    """Stateful wrapper around the online pipeline for loop plumbing.

    Strictly single-threaded: receive, solve, send within one cycle.  All
    persistent work buffers are acquired through a tracked registry so the
    per-cycle allocation counter can be asserted flat after warm-up.
    """

    def __init__(self, config: ControllerConfig):
        self.config = config
        self.stats = LoopStats()
        self.warm: sqp.WarmStart | None = None
        self.shifter = SolutionShifter(config.ocp.dt)
        self.last_measurement: Measurement | None = None
        self.last_command: Command | None = None
        self.last_result: sqp.SolveResult | None = None
        self._cmd_seq = 0
        self._stale_run = 0
        self._t_prev: float | None = None
        self._buffers: dict = {}

    def _buffer(self, name: str, shape) -> np.ndarray:
        buf = self._buffers.get(name)
        if buf is None or buf.shape != tuple(shape):
            buf = np.zeros(shape)
            self._buffers[name] = buf
            self.stats.buffer_allocs += 1
        return buf

    def start(self, first_measurement: Measurement, t0: float) -> Command:
        result = initialize(self.config, first_measurement, t0)
        self.warm = result.to_warm_start()
        self.last_result = result
        self.last_measurement = first_measurement
        self._t_prev = t0
        _, states = tx.unpack(result.z, self.config.ocp.horizon)
        cmd_buf = self._buffer("cmd", (4,))
        cmd_buf[:2] = states[0, :2]
        cmd_buf[2:] = states[0, 2:]
        self.stats.kkt.append(result.kkt.max)
        self.stats.solver_iterations.append(result.iterations)
        return self._emit(first_measurement.timestamp_ns)

    def cycle(self, meas_sock, cmd_sock, t_now: float,
              timestamp_ns: int) -> Command:
        """One full receive -> solve -> send cycle at time t_now."""
        t_wall = time.perf_counter()
        measurement, drained, malformed = drain_latest(meas_sock)
        self.stats.drained.append(drained)
        self.stats.malformed_datagrams += malformed
        if measurement is None:
            self._stale_run += 1
            self.stats.stale_cycles += 1
            if self._stale_run > self.config.watchdog_limit:
                raise WatchdogError(
                    f"no measurement for {self._stale_run} consecutive cycles")
            measurement = self.last_measurement
        else:
            # never act on a measurement older than one already consumed
            if self.last_measurement is not None \
                    and measurement.seq <= self.last_measurement.seq:
                measurement = self.last_measurement
            else:
                self.last_measurement = measurement
            self._stale_run = 0

        elapsed = 0.0 if self._t_prev is None else max(0.0, t_now - self._t_prev)
        self._t_prev = t_now
        (theta_cmd, theta_dot_cmd), self.warm, result = online_step(
            self.warm, measurement, t_now, self.config, self.shifter, elapsed)
        self.last_result = result
        cmd_buf = self._buffer("cmd", (4,))
        if result.status is not sqp.SolveStatus.QP_FAILURE:
            cmd_buf[:2] = theta_cmd
            cmd_buf[2:] = theta_dot_cmd
        # on QP failure the previous command is re-emitted (fail-operational)
        self.stats.kkt.append(result.kkt.max)
        self.stats.solver_iterations.append(result.iterations)

        command = self._emit(timestamp_ns)
        cmd_sock.sendto_peer(encode_command(command))
        wall = time.perf_counter() - t_wall
        self.stats.cycle_wall_s.append(wall)
        if wall > self.config.cycle_dt:
            self.stats.deadline_misses += 1
        return command

    def _emit(self, timestamp_ns: int) -> Command:
        cmd_buf = self._buffer("cmd", (4,))
        self._cmd_seq += 1
        self.last_command = Command(seq=self._cmd_seq,
                                    timestamp_ns=timestamp_ns,
                                    theta_cmd=cmd_buf[:2].copy(),
                                    theta_dot_cmd=cmd_buf[2:].copy())
        return self.last_command
