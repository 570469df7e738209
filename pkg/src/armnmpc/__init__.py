"""Receding-horizon NMPC for a planar 2-link heavy-duty arm.

Subsystems: `model` (rigid-body dynamics), `reference` (trajectory
generators), `transcription` (multiple-shooting NLP), `solver` (SQP with
damped BFGS), `nmpc_loop` (1 kHz control loop + UDP wire format), `plant`
(simulated manipulator) and `harness` (experiments, metrics, audit, CLI).
"""

from .model import ModelParams, JointState, JointEffort, TcpState

__all__ = ["ModelParams", "JointState", "JointEffort", "TcpState"]
__version__ = "0.1.0"
