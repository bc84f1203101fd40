"""Simulation of secure broadcast ranging with cryptographic sequences."""

from .channel import ChannelConfig, Position
from .protocol import InitiatorNode, NodeClock, RangingConfig, ReflectorNode, run_session, run_sync
from .scenarios import ScenarioConfig, run_scenario, sweep
from .sequences import SharedKey

__all__ = [
    "ChannelConfig", "InitiatorNode", "NodeClock", "Position", "RangingConfig", "ReflectorNode",
    "ScenarioConfig", "SharedKey", "run_scenario", "run_session", "run_sync", "sweep",
]
