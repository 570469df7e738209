"""Simulated manipulator process with a joint-tracking low-level controller.

The plant integrates the true nonlinear dynamics with RK4 at 1 kHz and
tracks the streamed joint commands with a PD-plus-gravity-compensation law
(a stand-in for the hydraulic machine's robust low-level controller),
saturating the applied effort to the actuator box.  A deterministic
virtual-clock mode steps the plant in lockstep with the controller for
bit-reproducible experiments; wall-clock mode runs the same loop against
real UDP sockets in real time.
"""

from __future__ import annotations

import socket
import time
from dataclasses import dataclass, field

import numpy as np

from . import model
from .model import JointState, ModelParams
from .nmpc_loop import (
    Command, Measurement, decode_command, drain_latest, encode_measurement)
from .transcription import Bounds, step_from_effort, Integrator


class PlantDivergedError(RuntimeError):
    """Simulated state left the physically plausible envelope."""


@dataclass(frozen=True)
class LowLevelGains:
    """PD gains of the joint-tracking stand-in controller."""

    kp: np.ndarray = field(default_factory=lambda: np.array([2e5, 1e5]))
    kd: np.ndarray = field(default_factory=lambda: np.array([2e4, 1e4]))

    def __post_init__(self):
        object.__setattr__(self, "kp", np.asarray(self.kp, dtype=float))
        object.__setattr__(self, "kd", np.asarray(self.kd, dtype=float))
        if np.any(self.kp <= 0.0) or np.any(self.kd <= 0.0):
            raise ValueError("low-level gains must be strictly positive")


@dataclass
class PlantState:
    joints: JointState
    sim_time: float = 0.0
    applied_effort: np.ndarray = field(default_factory=lambda: np.zeros(2))


def low_level_control(state: JointState, command: Command,
                      gains: LowLevelGains, params: ModelParams,
                      f_min, f_max) -> np.ndarray:
    """PD + gravity compensation, saturated elementwise to the effort box."""
    f = gains.kp * (command.theta_cmd - state.theta) \
        + gains.kd * (command.theta_dot_cmd - state.theta_dot) \
        + model.gravity_vector(state.theta, params)
    return np.clip(f, f_min, f_max)


class Plant:
    """Manipulator simulation advanced at a fixed step with RK4.

    The effort from the low-level law is held constant across the RK4
    substeps of one simulation step.
    """

    def __init__(self, params: ModelParams, gains: LowLevelGains,
                 bounds: Bounds, initial: JointState, dt_sim: float = 1e-3,
                 velocity_limit: float = 100.0):
        if dt_sim <= 0.0:
            raise ValueError("dt_sim must be positive")
        self.params = params
        self.gains = gains
        self.f_min = bounds.f_min
        self.f_max = bounds.f_max
        self.dt_sim = float(dt_sim)
        self.velocity_limit = float(velocity_limit)
        self.state = PlantState(joints=initial)
        # until a first command arrives, hold the initial pose at zero rate
        self.current_command = Command(seq=0, timestamp_ns=0,
                                       theta_cmd=initial.theta.copy(),
                                       theta_dot_cmd=np.zeros(2))
        self.seq = 0
        self.malformed_commands = 0

    def apply(self, command: Command):
        self.current_command = command

    def step(self, dt: float | None = None):
        """Advance the true dynamics one simulation step under PD control."""
        dt = self.dt_sim if dt is None else float(dt)
        joints = self.state.joints
        f = low_level_control(joints, self.current_command, self.gains,
                              self.params, self.f_min, self.f_max)
        theta, theta_dot = step_from_effort(joints.theta, joints.theta_dot, f,
                                            dt, Integrator.RK4, self.params)
        if np.linalg.norm(theta_dot) > self.velocity_limit:
            raise PlantDivergedError(
                f"joint speed {np.linalg.norm(theta_dot):.1f} rad/s exceeds "
                f"{self.velocity_limit}")
        self.state = PlantState(joints=JointState(theta, theta_dot),
                                sim_time=self.state.sim_time + dt,
                                applied_effort=f)

    def measurement(self, timestamp_ns: int) -> Measurement:
        self.seq += 1
        joints = self.state.joints
        return Measurement(seq=self.seq, timestamp_ns=timestamp_ns,
                           theta=joints.theta.copy(),
                           theta_dot=joints.theta_dot.copy())

    def drain_commands(self, sock) -> int:
        """Adopt the freshest pending command datagram; count malformed."""
        latest, drained, malformed = drain_latest(sock, decoder=decode_command)
        self.malformed_commands += malformed
        if latest is not None and latest.seq > self.current_command.seq:
            self.apply(latest)
        return drained


def run_plant(params: ModelParams, gains: LowLevelGains, bounds: Bounds,
              initial: JointState, duration: float,
              measurement_addr=("127.0.0.1", 47001),
              command_port: int = 47002, dt_sim: float = 1e-3):
    """Wall-clock plant process: 1 kHz loop over real UDP sockets.

    Streams measurements to `measurement_addr` and listens for command
    datagrams on `command_port`.  Returns the trajectory it traversed as a
    list of (time, theta, theta_dot) rows.
    """
    out_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    in_sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    in_sock.bind(("127.0.0.1", command_port))
    in_sock.setblocking(False)

    class _UdpRecv:
        def recv(self, bufsize=4096):
            return in_sock.recv(bufsize)

    recv = _UdpRecv()
    history = []
    n_cycles = round(duration / dt_sim)
    t_start = time.perf_counter()
    try:
        plant = Plant(params, gains, bounds, initial, dt_sim=dt_sim)
        for k in range(n_cycles):
            stamp = time.time_ns()
            out_sock.sendto(encode_measurement(plant.measurement(stamp)),
                            measurement_addr)
            plant.drain_commands(recv)
            plant.step()
            joints = plant.state.joints
            history.append((plant.state.sim_time, joints.theta.copy(),
                            joints.theta_dot.copy()))
            target = t_start + (k + 1) * dt_sim
            delay = target - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
    finally:
        out_sock.close()
        in_sock.close()
    return history
