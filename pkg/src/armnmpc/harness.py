"""Experiment runner: configuration files, closed-loop runs, metrics, audit.

A run couples the NMPC controller and the simulated plant through the
datagram link, either in deterministic lockstep on a virtual 1 kHz clock
(bit-reproducible, used by CI and the acceptance suite) or against real UDP
sockets in real time with the plant in a child process.

Outputs per run directory: the resolved config, `log.csv` (one row per
cycle, full precision, deterministic), `metrics.json` (deterministic),
`timing.json` (wall-clock diagnostics, excluded from determinism checks)
and one CSV per figure of interest.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import model
from .model import JointState, ModelParams
from .nmpc_loop import (
    Command, ControllerConfig, LoopbackSocket, Measurement, NmpcController,
    DEFAULT_COMMAND_PORT, DEFAULT_MEASUREMENT_PORT, drain_latest,
    encode_command, encode_measurement, WatchdogError)
from .plant import LowLevelGains, Plant, PlantDivergedError
from .reference import TrajectoryKind, TrajectorySpec, evaluate
from .solver import SolveStatus, SolverOptions
from .transcription import Bounds, Integrator, OcpConfig

STATUS_CODE = {SolveStatus.CONVERGED: 0, SolveStatus.ITERATION_LIMIT: 1,
               SolveStatus.LINE_SEARCH_FAILURE: 2, SolveStatus.QP_FAILURE: 3}

EXIT_OK = 0
EXIT_AUDIT_FAILURE = 2
EXIT_DIVERGENCE = 3


@dataclass(frozen=True)
class ExperimentConfig:
    params: ModelParams = field(default_factory=ModelParams)
    ocp: OcpConfig = field(default_factory=OcpConfig)
    solver: SolverOptions = field(
        default_factory=lambda: SolverOptions(max_iterations=1))
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    gains: LowLevelGains = field(default_factory=LowLevelGains)
    mode: str = "virtual"
    duration: float = 60.0
    out_dir: str | None = None
    seed: int = 0
    theta0: np.ndarray | None = None       # None: IK of the trajectory start
    dt_sim: float = 1e-3
    noise_std: float = 0.0                 # measurement jitter, default off
    interpolate_commands: bool = False
    watchdog_limit: int = 50
    measurement_port: int = DEFAULT_MEASUREMENT_PORT
    command_port: int = DEFAULT_COMMAND_PORT

    def __post_init__(self):
        if self.duration <= 0.0:
            raise ValueError("duration must be positive")
        if self.mode not in ("virtual", "wall"):
            raise ValueError("mode must be 'virtual' or 'wall'")

    def initial_joints(self) -> JointState:
        if self.theta0 is not None:
            return JointState(np.asarray(self.theta0, dtype=float), np.zeros(2))
        x0, _ = evaluate(self.trajectory, 0.0)
        return JointState(model.inverse_kinematics(x0, self.params), np.zeros(2))

    def controller_config(self) -> ControllerConfig:
        return ControllerConfig(
            params=self.params, ocp=self.ocp, trajectory=self.trajectory,
            options=self.solver,
            interpolate_commands=self.interpolate_commands,
            watchdog_limit=self.watchdog_limit)


# ------------------------------------------------------------- config file

_CONFIG_KEYS = {
    "mode": str, "duration": float, "seed": int, "out_dir": str,
    "noise.std": float,
    "model.l1": float, "model.l2": float, "model.m1": float, "model.m2": float,
    "model.lc1": float, "model.lc2": float, "model.i1": float,
    "model.i2": float, "model.g": float, "model.b1": float, "model.b2": float,
    "ocp.horizon": int, "ocp.dt": float, "ocp.integrator": str,
    "ocp.qx": "vec", "ocp.qxd": "vec", "ocp.qx_n": "vec", "ocp.qxd_n": "vec",
    "ocp.r": "vec",
    "bounds.x_min": "vec", "bounds.x_max": "vec", "bounds.xd_min": "vec",
    "bounds.xd_max": "vec", "bounds.th_min": "vec", "bounds.th_max": "vec",
    "bounds.thd_min": "vec", "bounds.thd_max": "vec", "bounds.thdd_min": "vec",
    "bounds.thdd_max": "vec", "bounds.f_min": "vec", "bounds.f_max": "vec",
    "solver.max_iterations": int, "solver.kkt_tolerance": float,
    "trajectory.kind": str, "trajectory.center": "vec",
    "trajectory.radius": float, "trajectory.speed": float,
    "trajectory.growth": float, "trajectory.accel": float,
    "trajectory.t_offset": float,
    "plant.kp": "vec", "plant.kd": "vec", "plant.dt_sim": float,
    "loop.interpolate_commands": int, "loop.watchdog_limit": int,
    "initial.theta": "vec",
    "net.measurement_port": int, "net.command_port": int,
}


def _fmt(value) -> str:
    if isinstance(value, (np.ndarray, list, tuple)):
        return " ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(config: ExperimentConfig) -> str:
    """Flat key-value text with dotted section prefixes."""
    p, o, b, t = config.params, config.ocp, config.ocp.bounds, config.trajectory
    pairs = [
        ("mode", config.mode), ("duration", config.duration),
        ("seed", config.seed), ("noise.std", config.noise_std),
        ("model.l1", p.l1), ("model.l2", p.l2), ("model.m1", p.m1),
        ("model.m2", p.m2), ("model.lc1", p.lc1), ("model.lc2", p.lc2),
        ("model.i1", p.i1), ("model.i2", p.i2), ("model.g", p.g),
        ("model.b1", p.b1), ("model.b2", p.b2),
        ("ocp.horizon", o.horizon), ("ocp.dt", o.dt),
        ("ocp.integrator", o.integrator.value),
        ("ocp.qx", o.qx), ("ocp.qxd", o.qxd), ("ocp.qx_n", o.qx_n),
        ("ocp.qxd_n", o.qxd_n), ("ocp.r", o.r),
        ("bounds.x_min", b.x_min), ("bounds.x_max", b.x_max),
        ("bounds.xd_min", b.xd_min), ("bounds.xd_max", b.xd_max),
        ("bounds.th_min", b.th_min), ("bounds.th_max", b.th_max),
        ("bounds.thd_min", b.thd_min), ("bounds.thd_max", b.thd_max),
        ("bounds.thdd_min", b.thdd_min), ("bounds.thdd_max", b.thdd_max),
        ("bounds.f_min", b.f_min), ("bounds.f_max", b.f_max),
        ("solver.max_iterations", config.solver.max_iterations),
        ("solver.kkt_tolerance", config.solver.kkt_tolerance),
        ("trajectory.kind", t.kind.value), ("trajectory.center", t.center),
        ("trajectory.radius", t.radius), ("trajectory.speed", t.speed),
        ("trajectory.growth", t.growth), ("trajectory.accel", t.accel),
        ("trajectory.t_offset", t.t_offset),
        ("plant.kp", config.gains.kp), ("plant.kd", config.gains.kd),
        ("plant.dt_sim", config.dt_sim),
        ("loop.interpolate_commands", int(config.interpolate_commands)),
        ("loop.watchdog_limit", config.watchdog_limit),
        ("net.measurement_port", config.measurement_port),
        ("net.command_port", config.command_port),
    ]
    if config.out_dir is not None:
        pairs.insert(3, ("out_dir", config.out_dir))
    if config.theta0 is not None:
        pairs.append(("initial.theta", config.theta0))
    return "\n".join(f"{k} = {_fmt(v)}" for k, v in pairs) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    """Parse the flat key-value format produced by serialize_config."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        kind = _CONFIG_KEYS.get(key)
        if kind is None:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if kind == "vec":
            values[key] = np.array([float(v) for v in val.split()])
        elif kind is str:
            values[key] = val
        else:
            values[key] = kind(float(val)) if kind is int else kind(val)

    def get(key, default=None):
        return values.get(key, default)

    params_kwargs = {name: get(f"model.{name}")
                     for name in ("l1", "l2", "m1", "m2", "lc1", "lc2",
                                  "i1", "i2", "g", "b1", "b2")
                     if get(f"model.{name}") is not None}
    params = ModelParams(**params_kwargs)
    bounds_kwargs = {name: get(f"bounds.{name}")
                     for name in ("x_min", "x_max", "xd_min", "xd_max",
                                  "th_min", "th_max", "thd_min", "thd_max",
                                  "thdd_min", "thdd_max", "f_min", "f_max")
                     if get(f"bounds.{name}") is not None}
    ocp_kwargs = {}
    if get("ocp.horizon") is not None:
        ocp_kwargs["horizon"] = get("ocp.horizon")
    if get("ocp.dt") is not None:
        ocp_kwargs["dt"] = get("ocp.dt")
    if get("ocp.integrator") is not None:
        ocp_kwargs["integrator"] = Integrator(get("ocp.integrator"))
    for w in ("qx", "qxd", "qx_n", "qxd_n", "r"):
        if get(f"ocp.{w}") is not None:
            ocp_kwargs[w] = get(f"ocp.{w}")
    ocp = OcpConfig(bounds=Bounds(**bounds_kwargs), **ocp_kwargs)

    solver_kwargs = {}
    if get("solver.max_iterations") is not None:
        solver_kwargs["max_iterations"] = get("solver.max_iterations")
    if get("solver.kkt_tolerance") is not None:
        solver_kwargs["kkt_tolerance"] = get("solver.kkt_tolerance")
    traj_kwargs = {}
    if get("trajectory.kind") is not None:
        traj_kwargs["kind"] = TrajectoryKind(get("trajectory.kind"))
    for name, key in (("center", "trajectory.center"),
                      ("radius", "trajectory.radius"),
                      ("speed", "trajectory.speed"),
                      ("growth", "trajectory.growth"),
                      ("accel", "trajectory.accel"),
                      ("t_offset", "trajectory.t_offset")):
        if get(key) is not None:
            traj_kwargs[name] = get(key)
    gains_kwargs = {}
    if get("plant.kp") is not None:
        gains_kwargs["kp"] = get("plant.kp")
    if get("plant.kd") is not None:
        gains_kwargs["kd"] = get("plant.kd")

    return ExperimentConfig(
        params=params, ocp=ocp,
        solver=SolverOptions(**solver_kwargs),
        trajectory=TrajectorySpec(**traj_kwargs),
        gains=LowLevelGains(**gains_kwargs),
        mode=get("mode", "virtual"),
        duration=get("duration", 60.0),
        out_dir=get("out_dir"),
        seed=get("seed", 0),
        theta0=get("initial.theta"),
        dt_sim=get("plant.dt_sim", 1e-3),
        noise_std=get("noise.std", 0.0),
        interpolate_commands=bool(get("loop.interpolate_commands", 0)),
        watchdog_limit=get("loop.watchdog_limit", 50),
        measurement_port=get("net.measurement_port", DEFAULT_MEASUREMENT_PORT),
        command_port=get("net.command_port", DEFAULT_COMMAND_PORT))


def load_config(path: str) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


# ------------------------------------------------------------------ RunLog

LOG_COLUMNS = [
    "t", "meas_seq",
    "meas_th1", "meas_th2", "meas_thd1", "meas_thd2",
    "cmd_th1", "cmd_th2", "cmd_thd1", "cmd_thd2",
    "ref_x", "ref_y", "ref_xd", "ref_yd",           # stage-1 reference (t+dt)
    "refnow_radius",                                # |ref(t) - center|
    "plan_x", "plan_y", "plan_xd", "plan_yd",       # FK/twist of the command
    "plan2_th1", "plan2_th2", "plan2_thd1", "plan2_thd2",
    "plan2_x", "plan2_y", "plan2_xd", "plan2_yd",   # stage-2 decided node
    "f0_1", "f0_2", "thdd0_1", "thdd0_2",           # stage-0 effort/accel
    "kkt", "solver_iters", "solver_status", "drained",
    "true_th1", "true_th2", "true_thd1", "true_thd2",
    "true_x", "true_y", "true_radius",
]


@dataclass
class RunLog:
    """Per-cycle experiment rows, strictly time ordered."""

    data: np.ndarray            # (n_cycles, len(LOG_COLUMNS))
    columns: tuple = tuple(LOG_COLUMNS)

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != len(self.columns):
            raise ValueError("log shape does not match the column list")
        t = self.col("t")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("log rows must be strictly time ordered")

    def col(self, name: str) -> np.ndarray:
        return self.data[:, self.columns.index(name)]

    def cols(self, *names) -> np.ndarray:
        idx = [self.columns.index(n) for n in names]
        return self.data[:, idx]

    def __len__(self):
        return self.data.shape[0]

    def to_csv(self, path: str):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(self.columns) + "\n")
            for row in self.data:
                fh.write(",".join("%.17g" % v for v in row) + "\n")

    @classmethod
    def from_csv(cls, path: str) -> "RunLog":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2)
        return cls(data=data, columns=tuple(header))


# ------------------------------------------------------------------- runs

def _log_row(t, measurement, command, window_ref, refnow_radius, plan,
             result, drained, true_joints, true_xy, center):
    theta_cmd, theta_dot_cmd = command.theta_cmd, command.theta_dot_cmd
    plan_x = model.forward_kinematics(theta_cmd, plan["params"])
    plan_xd = model.tcp_twist(theta_cmd, theta_dot_cmd, plan["params"])
    return [
        t, measurement.seq,
        measurement.theta[0], measurement.theta[1],
        measurement.theta_dot[0], measurement.theta_dot[1],
        theta_cmd[0], theta_cmd[1], theta_dot_cmd[0], theta_dot_cmd[1],
        window_ref[0][0], window_ref[0][1], window_ref[1][0], window_ref[1][1],
        refnow_radius,
        plan_x[0], plan_x[1], plan_xd[0], plan_xd[1],
        plan["th2"][0], plan["th2"][1], plan["thd2"][0], plan["thd2"][1],
        plan["x2"][0], plan["x2"][1], plan["xd2"][0], plan["xd2"][1],
        plan["f0"][0], plan["f0"][1], plan["thdd0"][0], plan["thdd0"][1],
        result.kkt.max, result.iterations, STATUS_CODE[result.status], drained,
        true_joints.theta[0], true_joints.theta[1],
        true_joints.theta_dot[0], true_joints.theta_dot[1],
        true_xy[0], true_xy[1], float(np.linalg.norm(true_xy - center)),
    ]


def _plan_quantities(result_z, measurement, config: ExperimentConfig) -> dict:
    n = config.ocp.horizon
    stages = result_z.reshape(n, 6)
    f0 = stages[0, :2]
    thdd0 = model.forward_dynamics(measurement.theta, measurement.theta_dot,
                                   f0, config.params)
    th2 = stages[1, 2:4]
    thd2 = stages[1, 4:6]
    return {
        "params": config.params,
        "f0": f0, "thdd0": thdd0, "th2": th2, "thd2": thd2,
        "x2": model.forward_kinematics(th2, config.params),
        "xd2": model.tcp_twist(th2, thd2, config.params),
    }


def run_virtual(config: ExperimentConfig):
    """Deterministic lockstep run; returns (RunLog, ctrl stats, plant)."""
    rng = np.random.default_rng(config.seed)
    initial = config.initial_joints()
    plant = Plant(config.params, config.gains, config.ocp.bounds, initial,
                  dt_sim=config.dt_sim)
    ctrl = NmpcController(config.controller_config())
    meas_sock = LoopbackSocket()
    cmd_sock = LoopbackSocket()
    center = config.trajectory.center
    n_cycles = round(config.duration / config.dt_sim)
    rows = np.empty((n_cycles, len(LOG_COLUMNS)))

    for k in range(n_cycles):
        t = k * config.dt_sim
        ts = k * 1_000_000
        m = plant.measurement(ts)
        if config.noise_std > 0.0:
            m = Measurement(seq=m.seq, timestamp_ns=m.timestamp_ns,
                            theta=m.theta + rng.normal(0, config.noise_std, 2),
                            theta_dot=m.theta_dot
                            + rng.normal(0, config.noise_std, 2))
        meas_sock.sendto_peer(encode_measurement(m))
        if k == 0:
            drained_m, drained, _ = drain_latest(meas_sock)
            command = ctrl.start(drained_m, t0=t)
            cmd_sock.sendto_peer(encode_command(command))
            result = ctrl.last_result
            used_meas = drained_m
        else:
            command = ctrl.cycle(meas_sock, cmd_sock, t, ts)
            result = ctrl.last_result
            drained = ctrl.stats.drained[-1]
            used_meas = ctrl.last_measurement

        plant.drain_commands(cmd_sock)
        plant.step()

        x_ref1, xd_ref1 = evaluate(config.trajectory, t + config.ocp.dt)
        x_refnow, _ = evaluate(config.trajectory, t)
        plan = _plan_quantities(result.z, used_meas, config)
        joints = plant.state.joints
        true_xy = model.forward_kinematics(joints.theta, config.params)
        rows[k] = _log_row(t, used_meas, command, (x_ref1, xd_ref1),
                           float(np.linalg.norm(x_refnow - center)), plan,
                           result, drained, joints, true_xy, center)

    return RunLog(data=rows), ctrl, plant


def _plant_process_main(config_text: str, history_path: str):
    from .plant import run_plant

    config = parse_config(config_text)
    initial = config.initial_joints()
    history = run_plant(config.params, config.gains, config.ocp.bounds,
                        initial, config.duration,
                        measurement_addr=("127.0.0.1", config.measurement_port),
                        command_port=config.command_port,
                        dt_sim=config.dt_sim)
    arr = np.array([[t, th[0], th[1], td[0], td[1]] for t, th, td in history])
    np.save(history_path, arr)


def run_wall(config: ExperimentConfig):
    """Real-time run over UDP sockets with the plant in a child process.

    Controller-side log only; the plant writes its own trajectory next to
    the run outputs.  True-state columns are NaN in wall mode.
    """
    import multiprocessing as mp
    import socket as socket_mod
    import tempfile
    import time as time_mod

    from .nmpc_loop import encode_command

    history_path = os.path.join(tempfile.mkdtemp(prefix="armnmpc_"),
                                "plant_history.npy")
    proc = mp.Process(target=_plant_process_main,
                      args=(serialize_config(config), history_path))

    meas_sock = socket_mod.socket(socket_mod.AF_INET, socket_mod.SOCK_DGRAM)
    meas_sock.bind(("127.0.0.1", config.measurement_port))
    meas_sock.setblocking(False)
    cmd_out = socket_mod.socket(socket_mod.AF_INET, socket_mod.SOCK_DGRAM)

    class _CmdSender:
        def sendto_peer(self, data):
            cmd_out.sendto(data, ("127.0.0.1", config.command_port))

    ctrl = NmpcController(config.controller_config())
    center = config.trajectory.center
    n_cycles = round(config.duration / config.dt_sim)
    rows = []
    proc.start()
    try:
        # wait for the first measurement
        from .nmpc_loop import drain_latest
        first = None
        deadline = time_mod.time() + 5.0
        while first is None and time_mod.time() < deadline:
            first, _, _ = drain_latest(meas_sock)
        if first is None:
            raise WatchdogError("plant never started streaming")
        command = ctrl.start(first, t0=0.0)
        _CmdSender().sendto_peer(encode_command(command))
        t_start = time_mod.perf_counter()
        sender = _CmdSender()
        for k in range(1, n_cycles):
            t = k * config.dt_sim
            command = ctrl.cycle(meas_sock, sender, t, time_mod.time_ns())
            result = ctrl.last_result
            x_ref1, xd_ref1 = evaluate(config.trajectory, t + config.ocp.dt)
            x_refnow, _ = evaluate(config.trajectory, t)
            plan = _plan_quantities(result.z, ctrl.last_measurement, config)
            nanj = JointState(np.zeros(2), np.zeros(2))
            row = _log_row(t, ctrl.last_measurement, command,
                           (x_ref1, xd_ref1),
                           float(np.linalg.norm(x_refnow - center)), plan,
                           result, ctrl.stats.drained[-1], nanj,
                           np.array([np.nan, np.nan]), center)
            for i in range(len(LOG_COLUMNS) - 7, len(LOG_COLUMNS)):
                row[i] = np.nan
            rows.append(row)
            target = t_start + (k + 1) * config.dt_sim
            delay = target - time_mod.perf_counter()
            if delay > 0:
                time_mod.sleep(delay)
    finally:
        proc.join(timeout=config.duration + 10.0)
        if proc.is_alive():
            proc.terminate()
        meas_sock.close()
        cmd_out.close()
    return RunLog(data=np.array(rows)), ctrl, history_path


def run_experiment(config: ExperimentConfig):
    """Run per config.mode, write all artifacts, return (log, metrics)."""
    if config.mode == "virtual":
        log, ctrl, _plant = run_virtual(config)
        plant_history = None
    else:
        log, ctrl, plant_history = run_wall(config)

    metrics = compute_rms_metrics(log)
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        with open(os.path.join(config.out_dir, "config.cfg"), "w",
                  encoding="utf-8") as fh:
            fh.write(serialize_config(config))
        log.to_csv(os.path.join(config.out_dir, "log.csv"))
        with open(os.path.join(config.out_dir, "metrics.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(metrics, fh, indent=2, sort_keys=True)
            fh.write("\n")
        timing = {
            "cycle_wall_mean_s": float(np.mean(ctrl.stats.cycle_wall_s))
            if ctrl.stats.cycle_wall_s else 0.0,
            "cycle_wall_max_s": float(np.max(ctrl.stats.cycle_wall_s))
            if ctrl.stats.cycle_wall_s else 0.0,
            "deadline_misses": ctrl.stats.deadline_misses,
            "stale_cycles": ctrl.stats.stale_cycles,
            "malformed_datagrams": ctrl.stats.malformed_datagrams,
        }
        with open(os.path.join(config.out_dir, "timing.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(timing, fh, indent=2, sort_keys=True)
            fh.write("\n")
        emit_plot_data(log, config.out_dir)
        if plant_history is not None and os.path.exists(plant_history):
            arr = np.load(plant_history)
            np.savetxt(os.path.join(config.out_dir, "plant_log.csv"), arr,
                       delimiter=",", fmt="%.17g",
                       header="t,th1,th2,thd1,thd2", comments="")
    return log, metrics


# ----------------------------------------------------------------- metrics

def compute_rms_metrics(log: RunLog) -> dict:
    """The paper's six tracking statistics plus radial low-level tracking.

    Cartesian errors compare the NMPC plan (FK of the streamed command)
    against the reference sample it was optimized toward; joint errors
    compare the plant state with the command stream at equal time.
    """
    if len(log) == 0:
        raise ValueError("empty log")
    e_pos = log.cols("plan_x", "plan_y") - log.cols("ref_x", "ref_y")
    e_vel = log.cols("plan_xd", "plan_yd") - log.cols("ref_xd", "ref_yd")
    e_jp = log.cols("true_th1", "true_th2") - log.cols("cmd_th1", "cmd_th2")
    e_jv = log.cols("true_thd1", "true_thd2") - log.cols("cmd_thd1", "cmd_thd2")
    radial = np.abs(log.col("true_radius") - log.col("refnow_radius"))

    def rms(e):
        return float(np.sqrt(np.mean(np.sum(e ** 2, axis=1))))

    def rms_per_joint(e):
        return [float(v) for v in np.sqrt(np.mean(e ** 2, axis=0))]

    return {
        "cartesian_position_rms_m": rms(e_pos),
        "cartesian_velocity_rms_mps": rms(e_vel),
        "joint_position_rms_rad": rms_per_joint(e_jp),
        "joint_velocity_rms_radps": rms_per_joint(e_jv),
        "radial_tracking_error_mean_m": float(np.mean(radial)),
        "radial_tracking_error_max_m": float(np.max(radial)),
        "cycles": len(log),
    }


# ------------------------------------------------------------------- audit

AUDIT_FAMILIES = (
    ("x", ("plan2_x", "plan2_y"), ("x_min", "x_max")),
    ("xd", ("plan2_xd", "plan2_yd"), ("xd_min", "xd_max")),
    ("th", ("plan2_th1", "plan2_th2"), ("th_min", "th_max")),
    ("thd", ("plan2_thd1", "plan2_thd2"), ("thd_min", "thd_max")),
    ("thdd", ("thdd0_1", "thdd0_2"), ("thdd_min", "thdd_max")),
    ("f", ("f0_1", "f0_2"), ("f_min", "f_max")),
)


@dataclass(frozen=True)
class AuditRow:
    family: str
    axis: int
    side: str                   # "min" | "max"
    bound: float
    max_violation: float        # > 0 means the bound was exceeded
    near_count: int             # samples within 1e-3 of the bound
    first_touch: float | None   # time of the first near-bound sample


@dataclass(frozen=True)
class AuditReport:
    rows: tuple
    padding: float

    @property
    def max_violation(self) -> float:
        return max((r.max_violation for r in self.rows), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_violation <= self.padding

    def near_counts(self, family: str, side: str | None = None) -> int:
        return sum(r.near_count for r in self.rows
                   if r.family == family and (side is None or r.side == side))

    def row(self, family: str, axis: int, side: str) -> AuditRow:
        for r in self.rows:
            if (r.family, r.axis, r.side) == (family, axis, side):
                return r
        raise KeyError((family, axis, side))


def audit_constraints(log: RunLog, bounds: Bounds, padding: float = 1e-6,
                      near: float = 1e-3) -> AuditReport:
    """Per-bound violation/boundary-riding report over the optimized plan.

    The audited quantities are the earliest controllable plan values per
    family: the stage-2 decided state (and its Cartesian image) and the
    stage-0 effort and acceleration.
    """
    t = log.col("t")
    rows = []
    for family, cols, (lo_name, hi_name) in AUDIT_FAMILIES:
        lo = getattr(bounds, lo_name)
        hi = getattr(bounds, hi_name)
        for axis in range(2):
            v = log.col(cols[axis])
            for side, bound, dist in (("min", lo[axis], v - lo[axis]),
                                      ("max", hi[axis], hi[axis] - v)):
                if not np.isfinite(bound):
                    rows.append(AuditRow(family, axis, side, float(bound),
                                         0.0, 0, None))
                    continue
                near_mask = dist <= near
                first = float(t[np.argmax(near_mask)]) if near_mask.any() else None
                rows.append(AuditRow(
                    family=family, axis=axis, side=side, bound=float(bound),
                    max_violation=float(max(0.0, -dist.min())),
                    near_count=int(near_mask.sum()), first_touch=first))
    return AuditReport(rows=tuple(rows), padding=padding)


# ------------------------------------------------------------- plot export

def emit_plot_data(log: RunLog, out_dir: str) -> list[str]:
    """One plottable CSV per figure of interest; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)

    def write(name, columns):
        path = os.path.join(out_dir, name)
        data = np.column_stack([log.col(c) for c in columns])
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(columns) + "\n")
            for row in data:
                fh.write(",".join("%.17g" % v for v in row) + "\n")
        return path

    paths = [
        write("fig_trajectory_xy.csv",
              ["t", "ref_x", "ref_y", "plan_x", "plan_y", "true_x", "true_y"]),
        write("fig_radial.csv",
              ["t", "refnow_radius", "true_radius"]),
        write("fig_radial_velocity.csv",
              ["t", "ref_xd", "ref_yd", "plan_xd", "plan_yd"]),
        write("fig_joint_refs.csv",
              ["t", "cmd_th1", "cmd_th2", "cmd_thd1", "cmd_thd2",
               "true_th1", "true_th2", "true_thd1", "true_thd2"]),
        write("fig_limits.csv",
              ["t", "plan2_x", "plan2_y", "plan2_th1", "plan2_th2",
               "plan2_thd1", "plan2_thd2", "thdd0_1", "thdd0_2",
               "f0_1", "f0_2"]),
    ]
    return paths
