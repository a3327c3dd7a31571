"""One client's mixture-of-experts model with decoupled expert weights.

Each expert layer owns three same-shape weight factors: a local private
weight, a task weight regenerated every forward pass by a small template
network from the task embedding, and a materialized scenario weight that is
the unit of federated sharing. The effective layer weight is their
element-wise product. Per-task softmax gates mix expert outputs; per-task
tower MLPs with a sigmoid head produce probabilities.

The scenario weight is initialized once from a scenario template applied to
the client's scenario embedding and is afterwards trained directly; the
additive server update needs it to be a concrete leaf tensor. Initialization
uses one shared seed so every client starts from the same blueprint except
for the scenario-dependent weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .diffcore import (
    Adam,
    BNState,
    Parameter,
    Tensor,
    add_n,
    affine,
    batchnorm,
    bce,
    dropout,
    elementwise_mul,
    embedding_row,
    mix_experts,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sum_sq_diff,
)
from .keys import SharedKey

__all__ = ["ModelSpec", "TemplateNet", "ExpertLayer", "Expert", "Tower", "ClientModel", "TrainStats"]


@dataclass(frozen=True)
class ModelSpec:
    scenario: int
    n_scenarios: int
    n_tasks: int
    n_experts: int
    d_feat: int
    expert_widths: tuple[int, ...] = (32, 16)
    tower_widths: tuple[int, ...] = (16, 8)
    d_emb: int = 16
    dropout: float = 0.2

    def __post_init__(self):
        if not 0 <= self.scenario < self.n_scenarios:
            raise ValueError(f"scenario {self.scenario} out of range")
        if self.n_experts < 1 or self.n_tasks < 1 or self.d_feat < 1 or self.d_emb < 1:
            raise ValueError("model extents must be positive")
        if not self.expert_widths:
            raise ValueError("expert needs at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


def _he_init(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))


def _head_init(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))


class TemplateNet:
    """Two-layer perceptron mapping an embedding row to a flat weight block.

    The output head starts at bias one with small weights, so generated
    factors begin near the multiplicative identity.
    """

    def __init__(self, rng: np.random.Generator, d_emb: int, out_len: int, prefix: str):
        self.out_len = out_len
        self.w1 = Parameter(_he_init(rng, d_emb, d_emb), f"{prefix}.w1")
        self.b1 = Parameter(np.zeros(d_emb), f"{prefix}.b1")
        self.w2 = Parameter(rng.normal(0.0, 0.05 / np.sqrt(d_emb), size=(d_emb, out_len)), f"{prefix}.w2")
        self.b2 = Parameter(np.ones(out_len), f"{prefix}.b2")

    def generate(self, emb_row: Tensor) -> Tensor:
        h = relu(affine(emb_row, self.w1, self.b1))
        return affine(h, self.w2, self.b2)

    def parameters(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


class ExpertLayer:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, d_emb: int, expert: int, layer: int):
        self.d_in, self.d_out = d_in, d_out
        prefix = f"expert{expert}.l{layer}"
        self.w_loc = Parameter(_he_init(rng, d_in, d_out), f"{prefix}.w_loc")
        self.w_s = Parameter(np.ones((d_in, d_out)), f"{prefix}.w_s")
        self.bias = Parameter(np.zeros(d_out), f"{prefix}.bias")
        self.template = TemplateNet(rng, d_emb, d_in * d_out, f"{prefix}.tmpl")
        self.key = SharedKey(kind="expert_scenario", index=expert, layer=layer, part="w_s")

    def task_weight(self, task_emb_row: Tensor) -> Tensor:
        """Generate this layer's task weight from the task embedding."""
        flat = self.template.generate(task_emb_row)
        if flat.size != self.d_in * self.d_out:
            raise ValueError(f"template output {flat.size} != {self.d_in}x{self.d_out}")
        return reshape(flat, (self.d_in, self.d_out))

    def forward(self, h: Tensor, task_emb_row: Tensor, train: bool, rate: float, rng) -> Tensor:
        effective = elementwise_mul(self.w_loc, self.task_weight(task_emb_row), self.w_s)
        h = relu(affine(h, effective, self.bias))
        return dropout(h, rate, train, rng)

    def parameters(self) -> list[Parameter]:
        return [self.w_loc, self.w_s, self.bias, *self.template.parameters()]


class Expert:
    def __init__(self, rng: np.random.Generator, dims: Sequence[int], d_emb: int, index: int):
        self.index = index
        self.layers = [
            ExpertLayer(rng, dims[i], dims[i + 1], d_emb, index, i) for i in range(len(dims) - 1)
        ]

    def forward(self, x: Tensor, task_emb_row: Tensor, train: bool, rate: float, rng) -> Tensor:
        h = x
        for layer in self.layers:
            h = layer.forward(h, task_emb_row, train, rate, rng)
        return h

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


class Tower:
    """Per-task prediction head: ReLU hidden layers, sigmoid scalar output."""

    def __init__(self, rng: np.random.Generator, d_in: int, widths: Sequence[int], task: int):
        self.task = task
        dims = [d_in, *widths]
        self.hidden = []
        for i in range(len(dims) - 1):
            w = Parameter(_he_init(rng, dims[i], dims[i + 1]), f"tower{task}.l{i}.w")
            b = Parameter(np.zeros(dims[i + 1]), f"tower{task}.l{i}.b")
            self.hidden.append((w, b))
        k = len(dims) - 1
        self.w_out = Parameter(_head_init(rng, dims[-1], 1), f"tower{task}.l{k}.w")
        self.b_out = Parameter(np.zeros(1), f"tower{task}.l{k}.b")

    def forward(self, h: Tensor, train: bool, rate: float, rng) -> Tensor:
        for w, b in self.hidden:
            h = dropout(relu(affine(h, w, b)), rate, train, rng)
        out = sigmoid(affine(h, self.w_out, self.b_out))
        return reshape(out, (out.shape[0],))

    def parameters(self) -> list[Parameter]:
        flat = [p for wb in self.hidden for p in wb]
        return [*flat, self.w_out, self.b_out]

    def shared_keys(self) -> dict[SharedKey, Parameter]:
        keys = {}
        for i, (w, b) in enumerate(self.hidden):
            keys[SharedKey(kind="tower", index=self.task, layer=i, part="w")] = w
            keys[SharedKey(kind="tower", index=self.task, layer=i, part="b")] = b
        k = len(self.hidden)
        keys[SharedKey(kind="tower", index=self.task, layer=k, part="w")] = self.w_out
        keys[SharedKey(kind="tower", index=self.task, layer=k, part="b")] = self.b_out
        return keys


@dataclass
class TrainStats:
    mean_loss: float
    per_task_bce: tuple[float, ...]
    n_batches: int
    n_samples: int


class ClientModel:
    def __init__(self, spec: ModelSpec, init_seed: int):
        self.spec = spec
        self.training = True
        self.dropout = spec.dropout  # mutable so harness passes can silence it
        rng = np.random.default_rng([init_seed, 0xD0DE])

        self.emb_task = Parameter(rng.normal(0.0, 1.0, size=(spec.n_tasks, spec.d_emb)), "emb.task")
        # Scenario embeddings seed the scenario weights and are frozen afterwards.
        self.emb_scenario = rng.normal(0.0, 1.0, size=(spec.n_scenarios, spec.d_emb))

        self.bn_in = BNState.build(spec.d_feat, "bn_in")

        dims = [spec.d_feat, *spec.expert_widths]
        self.experts = [Expert(rng, dims, spec.d_emb, n) for n in range(spec.n_experts)]

        self.gates = []
        for i in range(spec.n_tasks):
            w = Parameter(rng.normal(0.0, 0.1, size=(spec.d_feat, spec.n_experts)), f"gate{i}.w")
            b = Parameter(np.zeros(spec.n_experts), f"gate{i}.b")
            self.gates.append((w, b))

        self.towers = [Tower(rng, dims[-1], spec.tower_widths, i) for i in range(spec.n_tasks)]

        self._materialize_scenario_weights(rng)
        self.rng = np.random.default_rng([init_seed, 0xD60, spec.scenario])
        self._registry = self._build_registry()

    def _materialize_scenario_weights(self, rng: np.random.Generator) -> None:
        # The scenario templates consume identical rng draws on every client,
        # so clients differ only through their scenario embedding row.
        row = Tensor(self.emb_scenario[self.spec.scenario : self.spec.scenario + 1])
        with no_grad():
            for expert in self.experts:
                for layer in expert.layers:
                    template = TemplateNet(rng, self.spec.d_emb, layer.d_in * layer.d_out, "scenario.tmp")
                    generated = template.generate(row)
                    layer.w_s.data[...] = generated.data.reshape(layer.d_in, layer.d_out)

    def _build_registry(self) -> dict[str, Parameter]:
        params: list[Parameter] = [self.emb_task, self.bn_in.gamma, self.bn_in.beta]
        for expert in self.experts:
            params.extend(expert.parameters())
        for w, b in self.gates:
            params.extend((w, b))
        for tower in self.towers:
            params.extend(tower.parameters())
        registry = {}
        for p in params:
            if p.name in registry:
                raise ValueError(f"duplicate parameter name {p.name}")
            registry[p.name] = p
        return registry

    # -- mode and parameter access ------------------------------------------------

    def train(self) -> None:
        self.training = True

    def eval(self) -> None:
        self.training = False

    def parameters(self) -> list[Parameter]:
        return list(self._registry.values())

    def registry(self) -> dict[str, Parameter]:
        return dict(self._registry)

    def zero_grad(self) -> None:
        for p in self._registry.values():
            p.zero_grad()

    def scenario_shared(self) -> dict[SharedKey, Parameter]:
        """The scenario-weight set, the default unit of federated sharing."""
        out = {}
        for expert in self.experts:
            for layer in expert.layers:
                out[layer.key] = layer.w_s
        return out

    def tower_shared(self) -> dict[SharedKey, Parameter]:
        out = {}
        for tower in self.towers:
            out.update(tower.shared_keys())
        return out

    def expert_local(self) -> dict[SharedKey, Parameter]:
        """Expert parameters outside the scenario set (widened sharing variants)."""
        out = {}
        for expert in self.experts:
            for li, layer in enumerate(expert.layers):
                for p in layer.parameters():
                    if p is layer.w_s:
                        continue
                    suffix = p.name.split(".", 2)[-1]  # e.g. "w_loc", "tmpl.w2"
                    out[SharedKey(kind="expert_local", index=expert.index, layer=li, part=suffix)] = p
        return out

    def other_local(self) -> dict[SharedKey, Parameter]:
        """Everything else: embeddings, input BN, gates."""
        claimed = set()
        for group in (self.scenario_shared(), self.tower_shared(), self.expert_local()):
            claimed.update(p.name for p in group.values())
        out = {}
        for name, p in self._registry.items():
            if name not in claimed:
                out[SharedKey(kind="local", index=-1, layer=-1, part=name)] = p
        return out

    def key_map(self) -> dict[SharedKey, Parameter]:
        """Total, disjoint keying of every trainable parameter."""
        out: dict[SharedKey, Parameter] = {}
        for group in (self.scenario_shared(), self.tower_shared(), self.expert_local(), self.other_local()):
            for key, p in group.items():
                if key in out:
                    raise ValueError(f"duplicate shared key {key}")
                out[key] = p
        if len(out) != len(self._registry):
            raise ValueError("key map does not cover the parameter registry")
        return out

    # -- forward and loss ----------------------------------------------------------

    def forward(self, x: np.ndarray) -> list[Tensor]:
        """Per-task probability vectors for a feature batch (K, d_feat)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.d_feat:
            raise ValueError(f"expected features (K, {self.spec.d_feat}), got {x.shape}")
        xt = Tensor(x)
        xhat = batchnorm(xt, self.bn_in, train=self.training)
        rate = self.dropout
        preds = []
        for i in range(self.spec.n_tasks):
            t_row = embedding_row(self.emb_task, i)
            outputs = [e.forward(xhat, t_row, self.training, rate, self.rng) for e in self.experts]
            gate_w, gate_b = self.gates[i]
            gate = softmax(affine(xhat, gate_w, gate_b))
            mixed = mix_experts(gate, outputs)
            preds.append(self.towers[i].forward(mixed, self.training, rate, self.rng))
        return preds

    def local_loss(
        self,
        x: np.ndarray,
        y: np.ndarray,
        refs: Optional[dict[SharedKey, np.ndarray]] = None,
        lam: float = 0.5,
    ) -> tuple[Tensor, tuple[float, ...]]:
        """Multi-task BCE plus the proximal pull of scenario weights toward
        the latest aggregates (zero references before the first round)."""
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != self.spec.n_tasks:
            raise ValueError(f"expected labels (K, {self.spec.n_tasks}), got {y.shape}")
        preds = self.forward(x)
        task_losses = [bce(preds[i], y[:, i]) for i in range(self.spec.n_tasks)]
        loss = add_n(task_losses)
        if lam > 0.0:
            penalties = []
            for key, param in self.scenario_shared().items():
                ref = refs.get(key) if refs else None
                if ref is None:
                    ref = np.zeros_like(param.data)
                penalties.append(sum_sq_diff(param, ref))
            loss = add_n([loss, scale(add_n(penalties), lam)])
        return loss, tuple(t.item() for t in task_losses)

    def train_epoch(
        self,
        records: data_mod.RecordSet,
        batch_cfg: data_mod.BatchConfig,
        optimizer: Adam,
        refs: Optional[dict[SharedKey, np.ndarray]] = None,
        lam: float = 0.5,
        max_batches: Optional[int] = None,
    ) -> TrainStats:
        """One pass over the shard: loss, backward, Adam step per batch."""
        if len(records) == 0:
            raise data_mod.DataError("cannot train on an empty shard")
        if not self.training:
            raise RuntimeError("train_epoch requires train mode")
        loss_sum = 0.0
        task_sums = np.zeros(self.spec.n_tasks)
        n_batches = 0
        n_samples = 0
        for bx, by in data_mod.batch_iter(records, batch_cfg):
            loss, per_task = self.local_loss(bx, by, refs=refs, lam=lam)
            loss.require_finite("training loss")
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            k = bx.shape[0]
            loss_sum += loss.item() * k
            task_sums += np.array(per_task) * k
            n_batches += 1
            n_samples += k
            if max_batches is not None and n_batches >= max_batches:
                break
        if n_batches == 0:
            raise data_mod.DataError("shard produced no batches of size >= 2")
        return TrainStats(
            mean_loss=loss_sum / n_samples,
            per_task_bce=tuple(task_sums / n_samples),
            n_batches=n_batches,
            n_samples=n_samples,
        )
