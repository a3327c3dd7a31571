"""Server-side round protocol and aggregation strategies.

Strategy table (expert scenario-weight set / tower set):

    main    coordinated / coordinated   the full pipeline
    a1      plain       / plain         plain averaging of both sets
    a2      plain       / coordinated   plain mean over ALL expert params
    a3      coordinated / coordinated   identical configuration to main
    a4      none        / plain         experts untouched
    fedavg  plain       / plain         plain mean over every parameter
    local   none        / none          no aggregation at all

"coordinated" means: normalize the uploads server-side as one batch,
average them, difference consecutive rounds per upload, solve the simplex
weighting, and ship the mean increment plus the coordinated update for
personalized application on each client. "plain" is the per-key mean over
clients. The server sees nothing but keyed tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .coordination import CoordinationResult, compose_coordinated_update, solve_conflict_weights
from .fedbn import DEFAULT_EPS, fed_average, fedbn_normalize
from ..keys import SharedKey

__all__ = [
    "StrategyPlan",
    "resolve_strategy",
    "upload_keys",
    "RoundSnapshot",
    "DeltaSet",
    "compute_deltas",
    "ServerDirective",
    "FederationServer",
    "STRATEGY_IDS",
]

STRATEGY_IDS = ("main", "a1", "a2", "a3", "a4", "fedavg", "local")

COORDINATED, PLAIN, NONE = "coordinated", "plain", "none"


@dataclass(frozen=True)
class StrategyPlan:
    name: str
    expert_mode: str
    tower_mode: str
    widen_expert_local: bool = False
    widen_all_local: bool = False

    @property
    def uses_fedbn(self) -> bool:
        return COORDINATED in (self.expert_mode, self.tower_mode)

    @property
    def uses_server(self) -> bool:
        return not (self.expert_mode == NONE and self.tower_mode == NONE)


def resolve_strategy(name: str) -> StrategyPlan:
    table = {
        "main": StrategyPlan("main", COORDINATED, COORDINATED),
        "a1": StrategyPlan("a1", PLAIN, PLAIN),
        "a2": StrategyPlan("a2", PLAIN, COORDINATED, widen_expert_local=True),
        "a3": StrategyPlan("a3", COORDINATED, COORDINATED),
        "a4": StrategyPlan("a4", NONE, PLAIN),
        "fedavg": StrategyPlan("fedavg", PLAIN, PLAIN, widen_expert_local=True, widen_all_local=True),
        "local": StrategyPlan("local", NONE, NONE),
    }
    if name not in table:
        raise ValueError(f"unknown strategy {name!r}; expected one of {STRATEGY_IDS}")
    return table[name]


def upload_keys(plan: StrategyPlan, model) -> list[SharedKey]:
    """The declared upload set for a strategy, in canonical order."""
    keys: list[SharedKey] = []
    if plan.expert_mode != NONE:
        keys.extend(model.scenario_shared())
    if plan.tower_mode != NONE:
        keys.extend(model.tower_shared())
    if plan.widen_expert_local:
        keys.extend(model.expert_local())
    if plan.widen_all_local:
        keys.extend(model.other_local())
    return sorted(keys)


@dataclass
class RoundSnapshot:
    """Per-(key, client) normalized uploads for a round and its predecessor."""

    round_index: int
    current: dict[SharedKey, dict[int, np.ndarray]]
    previous: Optional[dict[SharedKey, dict[int, np.ndarray]]]

    def __post_init__(self):
        if self.round_index < 1:
            raise ValueError("round index starts at 1")


@dataclass
class DeltaSet:
    per_upload: dict[tuple[SharedKey, int], np.ndarray]
    per_key_mean: dict[SharedKey, np.ndarray]
    group_mean: dict[tuple, np.ndarray]
    group_members: dict[tuple, list[tuple[SharedKey, int]]]


def compute_deltas(snapshot: RoundSnapshot) -> Optional[DeltaSet]:
    """Difference consecutive rounds per upload; None signals "skip coordination".

    Deltas are grouped by each key's coordination pool, and the pool mean is
    duplicated onto every key it covers.
    """
    if snapshot.round_index < 2 or snapshot.previous is None:
        return None
    per_upload: dict[tuple[SharedKey, int], np.ndarray] = {}
    group_members: dict[tuple, list[tuple[SharedKey, int]]] = {}
    for key in sorted(snapshot.current):
        if key not in snapshot.previous:
            raise KeyError(f"no round {snapshot.round_index - 1} history for {key}")
        group = key.group()
        for client in sorted(snapshot.current[key]):
            if client not in snapshot.previous[key]:
                raise KeyError(f"client {client} missing from round {snapshot.round_index - 1} for {key}")
            per_upload[(key, client)] = snapshot.current[key][client] - snapshot.previous[key][client]
            group_members.setdefault(group, []).append((key, client))

    group_mean = {
        group: np.mean(np.stack([per_upload[m] for m in members]), axis=0)
        for group, members in group_members.items()
    }
    per_key_mean = {}
    for group, members in group_members.items():
        for key, _ in members:
            per_key_mean[key] = group_mean[group]
    return DeltaSet(
        per_upload=per_upload,
        per_key_mean=per_key_mean,
        group_mean=group_mean,
        group_members=group_members,
    )


@dataclass
class ServerDirective:
    """Broadcast payload: identical for every client; personalization is local."""

    round_index: int
    strategy: str
    replace: dict[SharedKey, np.ndarray] = field(default_factory=dict)
    mean_increment: dict[SharedKey, np.ndarray] = field(default_factory=dict)
    coordinated: dict[SharedKey, np.ndarray] = field(default_factory=dict)
    refs: dict[SharedKey, np.ndarray] = field(default_factory=dict)
    fedbn_residual: float = 0.0
    coordination: dict[tuple, CoordinationResult] = field(default_factory=dict)


class FederationServer:
    """Aggregates keyed uploads; never sees features, labels, or local params."""

    def __init__(
        self,
        plan: StrategyPlan,
        c: float = 0.4,
        fedbn_eps: float = DEFAULT_EPS,
        allow_single_client: bool = False,
        audit_hook: Optional[Callable[[int, SharedKey, np.ndarray], None]] = None,
    ):
        if not 0.0 <= c < 1.0:
            raise ValueError(f"c must be in [0, 1), got {c}")
        self.plan = plan
        self.c = float(c)
        self.fedbn_eps = float(fedbn_eps)
        self.allow_single_client = allow_single_client
        self.audit_hook = audit_hook
        self.prev_normalized: Optional[dict[SharedKey, dict[int, np.ndarray]]] = None
        self.refs: dict[SharedKey, np.ndarray] = {}
        self.last_snapshot_entries: dict[str, np.ndarray] = {}

    # -- key bookkeeping ----------------------------------------------------------

    def _coordinated_kinds(self) -> set[str]:
        kinds = set()
        if self.plan.expert_mode == COORDINATED:
            kinds.add("expert_scenario")
        if self.plan.tower_mode == COORDINATED:
            kinds.add("tower")
        return kinds

    # -- aggregation --------------------------------------------------------------

    def aggregate(self, uploads: dict[int, dict[SharedKey, np.ndarray]], round_index: int) -> ServerDirective:
        if not self.plan.uses_server:
            raise RuntimeError(f"strategy {self.plan.name!r} performs no aggregation")
        clients = sorted(uploads)
        if not clients:
            raise ValueError("no uploads")
        if self.plan.uses_fedbn and len(clients) < 2 and not self.allow_single_client:
            raise ValueError(
                f"strategy {self.plan.name!r} needs >= 2 clients (got {len(clients)}); "
                "pass allow_single_client to force the degenerate mode"
            )
        key_set = sorted(uploads[clients[0]])
        for j in clients:
            if sorted(uploads[j]) != key_set:
                raise ValueError(f"client {j} uploaded a different key set")
            if self.audit_hook is not None:
                for key in sorted(uploads[j]):
                    self.audit_hook(j, key, uploads[j][key])

        directive = ServerDirective(round_index=round_index, strategy=self.plan.name)
        coordinated_kinds = self._coordinated_kinds()
        coordinated_keys = [k for k in key_set if k.kind in coordinated_kinds]
        plain_keys = [k for k in key_set if k.kind not in coordinated_kinds]

        for key in plain_keys:
            value = fed_average([uploads[j][key] for j in clients])
            directive.replace[key] = value
            directive.refs[key] = value

        current: dict[SharedKey, dict[int, np.ndarray]] = {}
        if coordinated_keys:
            self._aggregate_coordinated(uploads, clients, coordinated_keys, current, directive)

        delta_set = compute_deltas(RoundSnapshot(round_index, current, self.prev_normalized)) if current else None
        if delta_set is not None:
            for group, members in sorted(delta_set.group_members.items()):
                flat = [delta_set.per_upload[m].ravel() for m in members]
                mean_flat = delta_set.group_mean[group].ravel()
                result = solve_conflict_weights(flat, mean_flat, self.c)
                u_star = compose_coordinated_update(result)
                directive.coordination[group] = result
                shape = delta_set.group_mean[group].shape
                for key, _ in members:
                    directive.mean_increment[key] = delta_set.group_mean[group]
                    directive.coordinated[key] = u_star.reshape(shape)
            # coordinated keys now update via increments, not replacement
            for key in directive.mean_increment:
                directive.replace.pop(key, None)

        if current:
            self.prev_normalized = current
        self.refs = {k: v.copy() for k, v in directive.refs.items()}
        self.last_snapshot_entries = self._snapshot_entries(directive, current)
        return directive

    def _aggregate_coordinated(
        self,
        uploads: dict[int, dict[SharedKey, np.ndarray]],
        clients: Sequence[int],
        keys: Sequence[SharedKey],
        current: dict[SharedKey, dict[int, np.ndarray]],
        directive: ServerDirective,
    ) -> None:
        groups: dict[tuple, list[SharedKey]] = {}
        for key in keys:
            groups.setdefault(key.group(), []).append(key)

        residual = directive.fedbn_residual
        for group in sorted(groups):
            gkeys = sorted(groups[group])
            members = [(key, j) for j in clients for key in gkeys]
            members.sort(key=lambda m: (m[1], m[0]))
            batch = [uploads[j][key] for key, j in members]
            # Affine restore terms come from the clients' own uploads: one
            # (gamma=1, beta=mean of own tensors) pair per client, so the
            # averaged beta recovers the plain pooled mean and the batch
            # normalization only reshapes the spread around it.
            betas = [np.mean(np.stack([uploads[j][key] for key in gkeys]), axis=0) for j in clients]
            gammas = [np.ones_like(betas[0]) for _ in clients]
            if len(batch) >= 2:
                normalized, state = fedbn_normalize(batch, gammas, betas, eps=self.fedbn_eps)
            else:
                # forced single-upload degenerate mode: zero variance collapse
                state_beta = betas[0]
                normalized = [state_beta.copy()]
                state = None
            wbar = fed_average(normalized)
            if state is not None:
                residual = max(residual, float(np.abs(wbar - state.beta).max()))
            for (key, j), norm in zip(members, normalized):
                current.setdefault(key, {})[j] = norm
            for key in gkeys:
                directive.replace[key] = wbar
                directive.refs[key] = wbar
        directive.fedbn_residual = residual

    # -- persistence --------------------------------------------------------------

    def _snapshot_entries(
        self, directive: ServerDirective, current: dict[SharedKey, dict[int, np.ndarray]]
    ) -> dict[str, np.ndarray]:
        entries: dict[str, np.ndarray] = {}
        for key, per_client in current.items():
            for client, arr in per_client.items():
                entries[f"norm/{key.label()}/c{client}"] = arr
        for key, arr in directive.refs.items():
            entries[f"ref/{key.label()}"] = arr
        for key, arr in directive.replace.items():
            entries[f"set/{key.label()}"] = arr
        for key, arr in directive.mean_increment.items():
            entries[f"dmean/{key.label()}"] = arr
        for key, arr in directive.coordinated.items():
            entries[f"ustar/{key.label()}"] = arr
        return entries
