"""Federated round protocol: normalization, coordination, personalization."""

from .client import ClientSim, PersonalizationState
from .coordination import (
    CoordinationResult,
    compose_coordinated_update,
    coordinate,
    project_simplex,
    solve_conflict_weights,
)
from .fedbn import FedBNState, fed_average, fedbn_normalize
from ..keys import SharedKey
from .server import (
    STRATEGY_IDS,
    DeltaSet,
    FederationServer,
    RoundSnapshot,
    ServerDirective,
    StrategyPlan,
    compute_deltas,
    resolve_strategy,
    upload_keys,
)
from .snapshot import read_snapshot, write_snapshot

__all__ = [
    "STRATEGY_IDS",
    "ClientSim",
    "CoordinationResult",
    "DeltaSet",
    "FedBNState",
    "FederationServer",
    "PersonalizationState",
    "RoundSnapshot",
    "ServerDirective",
    "SharedKey",
    "StrategyPlan",
    "compose_coordinated_update",
    "compute_deltas",
    "coordinate",
    "fed_average",
    "fedbn_normalize",
    "project_simplex",
    "read_snapshot",
    "resolve_strategy",
    "solve_conflict_weights",
    "upload_keys",
    "write_snapshot",
]
