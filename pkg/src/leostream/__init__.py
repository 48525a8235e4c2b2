"""Trace-driven simulation of video streaming over high-variance satellite links."""

from .abr import AbrDecision, AbrParams, BitrateLadder, select_bitrate, synthetic_ladder
from .congestion import PathModel, simulate_transfer
from .link_model import SyntheticLinkConfig, ThroughputTrace, generate_corpus, preset
from .qoe import ks_one_sided, mann_whitney_u, qoe_report, quantile_ratio
from .session import PlayerConfig, SessionResult, simulate_session

__version__ = "0.1.0"

__all__ = [
    "AbrDecision", "AbrParams", "BitrateLadder", "PathModel", "PlayerConfig", "SessionResult",
    "SyntheticLinkConfig", "ThroughputTrace", "generate_corpus", "ks_one_sided", "mann_whitney_u",
    "preset", "qoe_report", "quantile_ratio", "select_bitrate", "simulate_session",
    "simulate_transfer", "synthetic_ladder",
]
