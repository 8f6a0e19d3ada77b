"""Desk-scale laboratory for multi-metric ad auctions.

Implements the GSP allocate/price framework with pluggable rank scores
(classic squashed GSP, utility-based uGSP, and a learned bid-multiplier
network), a synthetic market simulator, a single-step actor-critic
trainer, and an economic-property audit suite.
"""

from gsplab.auction import (
    AdCandidate,
    AuctionOutcome,
    AuctionRequest,
    DeepGspMechanism,
    FixedScoreMechanism,
    GspMechanism,
    RankedEntry,
    UgspMechanism,
    allocate,
    fixed_rank_score,
    gsp_rank_score,
    price_by_multiplier,
    price_exact_binary_search,
    run_auction,
    ugsp_rank_score,
)
from gsplab.simulator import MetricsRecord, World, WorldConfig, scalarize
from gsplab.trainer import TrainConfig, train

__all__ = [
    "AdCandidate",
    "AuctionOutcome",
    "AuctionRequest",
    "DeepGspMechanism",
    "FixedScoreMechanism",
    "GspMechanism",
    "MetricsRecord",
    "RankedEntry",
    "TrainConfig",
    "UgspMechanism",
    "World",
    "WorldConfig",
    "allocate",
    "fixed_rank_score",
    "gsp_rank_score",
    "price_by_multiplier",
    "price_exact_binary_search",
    "run_auction",
    "scalarize",
    "train",
    "ugsp_rank_score",
]
