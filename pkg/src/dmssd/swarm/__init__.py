"""Distributed deployment: per-robot processes and a model server."""
from .orchestrate import RunReport, orchestrate
from .protocol import GetModel, ModelAnnouncement, ProtocolError, StateMessage, decode, encode
from .robot import RobotConfig, RobotReport, robot_loop
from .server import ModelClient, ModelServer

__all__ = [
    "GetModel",
    "ModelAnnouncement",
    "ModelClient",
    "ModelServer",
    "ProtocolError",
    "RobotConfig",
    "RobotReport",
    "RunReport",
    "StateMessage",
    "decode",
    "encode",
    "orchestrate",
    "robot_loop",
]
