import numpy as np
import pytest

from fedmoe.config import ExperimentConfig
from fedmoe.data import SyntheticSpec, generate_synthetic
from fedmoe.federation.client import ClientSim
from fedmoe.federation.server import (
    FederationServer,
    RoundSnapshot,
    ServerDirective,
    compute_deltas,
    resolve_strategy,
    upload_keys,
)
from fedmoe.harness import build_clients, run_experiment
from fedmoe.keys import SharedKey
from fedmoe.model import ClientModel, ModelSpec


def key(kind="expert_scenario", index=0, layer=0, part="w_s"):
    return SharedKey(kind=kind, index=index, layer=layer, part=part)


def shards(s=2, seed=0, n=300, d=4, t=2):
    return generate_synthetic(SyntheticSpec(n_scenarios=s, n_tasks=t, d_feat=d, samples_per_scenario=n, seed=seed))


def make_clients(s=2, n_experts=2, seed=0, lam=0.5, dropout=0.0, widths=(6, 3)):
    config = ExperimentConfig(
        scenarios=s, tasks=2, experts=n_experts, d_feat=4, expert_widths=widths,
        tower_widths=(4,), dropout=dropout, samples_per_scenario=300,
        batch_size=32, lambda_reg=lam, seed=seed,
    )
    return build_clients(config, shards(s=s, seed=seed)), config


class TestComputeDeltas:
    def test_round_one_signals_skip(self):
        snap = RoundSnapshot(1, {key(): {0: np.ones(2)}}, None)
        assert compute_deltas(snap) is None

    def test_identical_rounds_give_zero(self):
        state = {key(): {0: np.ones(3), 1: np.full(3, 2.0)}}
        ds = compute_deltas(RoundSnapshot(2, state, {k: dict(v) for k, v in state.items()}))
        for d in ds.per_upload.values():
            assert np.array_equal(d, np.zeros(3))

    def test_single_pair_delta(self):
        prev = {key(): {0: np.array([1.0])}}
        cur = {key(): {0: np.array([3.0])}}
        ds = compute_deltas(RoundSnapshot(2, cur, prev))
        assert ds.per_upload[(key(), 0)][0] == 2.0
        assert ds.per_key_mean[key()][0] == 2.0

    def test_group_mean_pools_expert_layer(self):
        k0, k1 = key(index=0), key(index=1)
        prev = {k0: {0: np.zeros(2)}, k1: {0: np.zeros(2)}}
        cur = {k0: {0: np.full(2, 1.0)}, k1: {0: np.full(2, 3.0)}}
        ds = compute_deltas(RoundSnapshot(2, cur, prev))
        assert np.array_equal(ds.per_key_mean[k0], np.full(2, 2.0))
        assert ds.per_key_mean[k0] is ds.per_key_mean[k1]

    def test_missing_history_is_an_error(self):
        prev = {key(): {0: np.zeros(2)}}
        cur = {key(): {0: np.zeros(2), 1: np.zeros(2)}}
        with pytest.raises(KeyError):
            compute_deltas(RoundSnapshot(2, cur, prev))


class TestPersonalizedApply:
    def test_scalar_update_arithmetic(self):
        clients, _ = make_clients(s=2, n_experts=1, widths=(6,))
        client = clients[0]
        k = next(iter(client.model.scenario_shared()))
        shape = client.model.scenario_shared()[k].shape
        client.model.scenario_shared()[k].data[...] = 1.0
        client.begin_round([k])
        client.psi.expert[k] = 2.0
        directive = ServerDirective(
            round_index=2, strategy="main",
            mean_increment={k: np.full(shape, 0.5)},
            coordinated={k: np.full(shape, 0.25)},
        )
        client.apply_directive(directive)
        assert np.allclose(client.model.scenario_shared()[k].data, 2.0)

    def test_zero_psi_zero_increment_is_identity(self):
        clients, _ = make_clients(s=2, n_experts=1, widths=(6,))
        client = clients[0]
        k = next(iter(client.model.scenario_shared()))
        start = client.model.scenario_shared()[k].data.copy()
        client.begin_round([k])
        directive = ServerDirective(
            round_index=2, strategy="main",
            mean_increment={k: np.zeros(start.shape)},
            coordinated={k: np.full(start.shape, 9.0)},
        )
        client.apply_directive(directive)  # psi defaults to 0
        assert np.array_equal(client.model.scenario_shared()[k].data, start)

    def test_replace_path(self):
        clients, _ = make_clients(s=2)
        client = clients[0]
        k = next(iter(client.model.scenario_shared()))
        value = np.full(client.model.scenario_shared()[k].shape, 7.0)
        client.begin_round([k])
        client.apply_directive(ServerDirective(round_index=1, strategy="main", replace={k: value}))
        assert np.array_equal(client.model.scenario_shared()[k].data, value)


class TestPsiMetaUpdate:
    def build_client(self):
        clients, _ = make_clients(s=2, n_experts=1, widths=(6,))
        return clients[0]

    def test_zero_update_leaves_psi(self):
        client = self.build_client()
        k = next(iter(client.model.scenario_shared()))
        directive = ServerDirective(
            round_index=2, strategy="main",
            coordinated={k: np.zeros(client.model.scenario_shared()[k].shape)},
        )
        client.meta_update_psi(directive)
        assert client.psi.expert.get(k, 0.0) == 0.0

    def test_descending_direction_raises_psi(self):
        client = self.build_client()
        k = next(iter(client.model.scenario_shared()))
        grads = client._held_out_grads(
            ServerDirective(round_index=2, strategy="main",
                            coordinated={k: np.zeros(client.model.scenario_shared()[k].shape)})
        )
        directive = ServerDirective(round_index=2, strategy="main", coordinated={k: -grads[k]})
        client.meta_update_psi(directive)
        assert client.psi.expert[k] > 0.0

    def test_directional_derivative_matches_finite_difference(self):
        client = self.build_client()
        model = client.model
        k = next(iter(model.scenario_shared()))
        rng = np.random.default_rng(0)
        u_star = rng.normal(0, 0.1, model.scenario_shared()[k].shape)
        directive = ServerDirective(round_index=2, strategy="main", coordinated={k: u_star})
        grads = client._held_out_grads(directive)
        analytic = float(np.sum(grads[k] * u_star))

        x, y = client.held_out
        param = model.scenario_shared()[k]
        saved_dropout = model.dropout
        model.dropout = 0.0
        eps = 1e-6

        def loss_at(offset):
            param.data += offset * u_star
            value, _ = model.local_loss(x, y, refs=client.refs, lam=client.lam)
            param.data -= offset * u_star
            return value.item()

        numeric = (loss_at(eps) - loss_at(-eps)) / (2 * eps)
        model.dropout = saved_dropout
        assert analytic == pytest.approx(numeric, rel=1e-3)

    def test_psi_clamped(self):
        client = self.build_client()
        client.psi.eta = 1e9
        k = next(iter(client.model.scenario_shared()))
        u = np.full(client.model.scenario_shared()[k].shape, 1.0)
        directive = ServerDirective(round_index=2, strategy="main", coordinated={k: u})
        client.meta_update_psi(directive)
        assert abs(client.psi.expert[k]) <= 2.0


class TestStrategies:
    def test_a3_is_main_configuration(self):
        a3 = resolve_strategy("a3")
        main = resolve_strategy("main")
        assert (a3.expert_mode, a3.tower_mode) == (main.expert_mode, main.tower_mode)

    def test_upload_key_sets(self):
        clients, _ = make_clients(s=2)
        model = clients[0].model
        main_keys = set(upload_keys(resolve_strategy("main"), model))
        a1_keys = set(upload_keys(resolve_strategy("a1"), model))
        a2_keys = set(upload_keys(resolve_strategy("a2"), model))
        a4_keys = set(upload_keys(resolve_strategy("a4"), model))
        fedavg_keys = set(upload_keys(resolve_strategy("fedavg"), model))
        local_keys = set(upload_keys(resolve_strategy("local"), model))

        scenario = set(model.scenario_shared())
        tower = set(model.tower_shared())
        expert_local = set(model.expert_local())
        other = set(model.other_local())

        assert main_keys == scenario | tower
        assert a1_keys == main_keys
        assert a2_keys == scenario | tower | expert_local
        assert a4_keys == tower
        assert fedavg_keys == scenario | tower | expert_local | other
        assert local_keys == set()
        # the baseline differs from a1 exactly by the local-private sets
        assert fedavg_keys - a1_keys == expert_local | other

    def test_a4_towers_take_plain_mean_and_experts_untouched(self):
        clients, config = make_clients(s=2)
        plan = resolve_strategy("a4")
        keys = upload_keys(plan, clients[0].model)
        server = FederationServer(plan, c=config.c)
        expert_before = [
            {k: p.data.copy() for k, p in c.model.scenario_shared().items()} for c in clients
        ]
        tower_uploads = {c.index: c.build_upload(keys) for c in clients}
        for c in clients:
            c.begin_round(keys)
        directive = server.aggregate(tower_uploads, 1)
        for c in clients:
            c.apply_directive(directive)
        for k in clients[0].model.tower_shared():
            expected = np.mean(np.stack([tower_uploads[c.index][k] for c in clients]), axis=0)
            for c in clients:
                assert np.allclose(c.model.tower_shared()[k].data, expected)
        for c, before in zip(clients, expert_before):
            for k, p in c.model.scenario_shared().items():
                assert np.array_equal(p.data, before[k])

    def test_round_one_towers_replaced_not_incremented(self):
        clients, config = make_clients(s=2)
        plan = resolve_strategy("main")
        keys = upload_keys(plan, clients[0].model)
        server = FederationServer(plan, c=config.c)
        uploads = {c.index: c.build_upload(keys) for c in clients}
        directive = server.aggregate(uploads, 1)
        assert directive.mean_increment == {}
        assert set(directive.replace) == set(keys)

    def test_identical_tower_uploads_fixed_point(self):
        clients, config = make_clients(s=2)
        source = clients[0].model
        for c in clients[1:]:
            for k, p in c.model.tower_shared().items():
                p.data[...] = source.tower_shared()[k].data
        plan = resolve_strategy("a4")
        keys = upload_keys(plan, clients[0].model)
        server = FederationServer(plan, c=config.c)
        before = {k: p.data.copy() for k, p in source.tower_shared().items()}
        for c in clients:
            c.begin_round(keys)
        directive = server.aggregate({c.index: c.build_upload(keys) for c in clients}, 1)
        for c in clients:
            c.apply_directive(directive)
        for k, p in source.tower_shared().items():
            assert np.allclose(p.data, before[k], atol=1e-12)

    def test_single_client_rejected_unless_forced(self):
        clients, config = make_clients(s=2)
        plan = resolve_strategy("main")
        keys = upload_keys(plan, clients[0].model)
        uploads = {0: clients[0].build_upload(keys)}
        with pytest.raises(ValueError, match="2 clients"):
            FederationServer(plan, c=config.c).aggregate(uploads, 1)
        forced = FederationServer(plan, c=config.c, allow_single_client=True)
        directive = forced.aggregate(uploads, 1)
        assert set(directive.replace) == set(keys)


class TestRoundProtocol:
    def test_five_round_smoke_emits_metrics(self, tmp_path):
        config = ExperimentConfig(
            strategy="main", rounds=5, scenarios=2, tasks=2, experts=2, d_feat=4,
            expert_widths=(6, 3), tower_widths=(4,), samples_per_scenario=200,
            batch_size=32, seed=3, out_dir=str(tmp_path / "run"),
        )
        artifacts = run_experiment(config)
        assert len(artifacts.test_auc) == 5 * 2 * 2
        assert len(artifacts.train_loss) == 5 * 2
        lines = artifacts.metrics_path.read_text().strip().splitlines()
        assert len(lines) == 1 + 5 * 2 * 2

    def test_refs_reach_clients_after_round(self, tmp_path):
        clients, config = make_clients(s=2)
        plan = resolve_strategy("main")
        keys = upload_keys(plan, clients[0].model)
        server = FederationServer(plan, c=config.c)
        for c in clients:
            c.begin_round(keys)
        directive = server.aggregate({c.index: c.build_upload(keys) for c in clients}, 1)
        for c in clients:
            c.apply_directive(directive)
        for c in clients:
            assert set(c.refs) == set(c.model.scenario_shared())

    def test_expert_layer_pool_shares_aggregate(self):
        clients, config = make_clients(s=2, n_experts=3)
        plan = resolve_strategy("main")
        keys = upload_keys(plan, clients[0].model)
        server = FederationServer(plan, c=config.c)
        directive = server.aggregate({c.index: c.build_upload(keys) for c in clients}, 1)
        layer0 = [k for k in clients[0].model.scenario_shared() if k.layer == 0]
        values = [directive.replace[k] for k in layer0]
        for v in values[1:]:
            assert np.array_equal(values[0], v)


class TestPrivacyAudit:
    @pytest.mark.parametrize("strategy", ["main", "a1", "a2", "a4", "fedavg"])
    def test_server_sees_only_declared_keys(self, strategy, tmp_path):
        received: list[tuple[int, SharedKey, np.ndarray]] = []

        def audit(client, k, tensor):
            received.append((client, k, tensor))

        config = ExperimentConfig(
            strategy=strategy, rounds=2, scenarios=2, tasks=2, experts=2, d_feat=4,
            expert_widths=(6, 3), tower_widths=(4,), samples_per_scenario=200,
            batch_size=32, seed=4, out_dir=str(tmp_path / strategy),
        )
        artifacts = run_experiment(config, audit_hook=audit)
        assert artifacts.metrics_path.exists()
        assert received, "audit hook never fired"

        reference = build_clients(config, shards(s=2, seed=4))[0].model
        declared = set(upload_keys(resolve_strategy(strategy), reference))
        seen = {k for _, k, _ in received}
        assert seen == declared

        # uploads are value copies of parameter tensors: parameter-shaped,
        # finite, and never aliased to client memory
        shapes = {k: p.shape for k, p in reference.key_map().items()}
        data_arrays = [a for c in build_clients(config, shards(s=2, seed=4))
                       for a in (c.shard.train.features, c.shard.train.labels)]
        for _, k, tensor in received:
            assert tensor.shape == shapes[k]
            assert np.isfinite(tensor).all()
            for arr in data_arrays:
                assert not np.shares_memory(tensor, arr)

    def test_uploads_are_copies(self):
        clients, _ = make_clients(s=2)
        client = clients[0]
        keys = upload_keys(resolve_strategy("main"), client.model)
        upload = client.build_upload(keys)
        key_map = client.model.key_map()
        for k, tensor in upload.items():
            assert not np.shares_memory(tensor, key_map[k].data)
