"""Gradient fidelity of every primitive and the composed model graphs."""

import numpy as np

from fedmoe.diffcore import (
    Parameter,
    Tensor,
    add_n,
    affine,
    batchnorm,
    bce,
    BNState,
    elementwise_mul,
    embedding_row,
    grad_check,
    mix_experts,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sum_sq_diff,
    grad_check as _gc,
)
from fedmoe.model import ClientModel, ModelSpec

TOL = 1e-4


def small_model(dropout=0.0, n_experts=2, seed=11):
    spec = ModelSpec(
        scenario=0, n_scenarios=2, n_tasks=2, n_experts=n_experts,
        d_feat=4, expert_widths=(5, 3), tower_widths=(4,), d_emb=6, dropout=dropout,
    )
    return ClientModel(spec, init_seed=seed)


class TestPrimitiveGradients:
    def test_affine_relu_bce_chain(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1, (6, 4))
        w = Parameter(rng.normal(0, 1, (4, 3)), "w")
        b = Parameter(rng.normal(0, 0.2, 3), "b")
        w2 = Parameter(rng.normal(0, 1, (3, 1)), "w2")
        b2 = Parameter(np.zeros(1), "b2")
        y = (rng.random(6) < 0.5).astype(float)

        def f():
            h = relu(affine(Tensor(x), w, b))
            return bce(sigmoid(affine(h, w2, b2)), y)

        assert grad_check(f, [w, b, w2, b2], rng=np.random.default_rng(1)) < TOL

    def test_elementwise_and_softmax_mix(self):
        rng = np.random.default_rng(2)
        a = Parameter(rng.normal(0, 1, (3, 2)), "a")
        b = Parameter(rng.normal(0, 1, (3, 2)), "b")
        c = Parameter(rng.normal(0, 1, (3, 2)), "c")
        gates = Parameter(rng.normal(0, 1, (3, 2)), "g")
        target = rng.normal(0, 1, (3, 2))

        def f():
            prod = elementwise_mul(a, b, c)
            mixed = mix_experts(softmax(gates), [prod, relu(prod)])
            return sum_sq_diff(mixed, target)

        assert grad_check(f, [a, b, c, gates], rng=np.random.default_rng(3)) < TOL

    def test_embedding_and_reshape(self):
        rng = np.random.default_rng(4)
        table = Parameter(rng.normal(0, 1, (3, 4)), "t")
        target = rng.normal(0, 1, (2, 2))

        def f():
            row = embedding_row(table, 1)
            return scale(sum_sq_diff(reshape(row, (2, 2)), target), 0.5)

        assert grad_check(f, [table], rng=np.random.default_rng(5)) < TOL

    def test_batchnorm_train_chain(self):
        rng = np.random.default_rng(6)
        x = rng.normal(1, 2, (8, 3))
        state = BNState.build(3, "bn")
        w = Parameter(rng.normal(0, 1, (3, 1)), "w")
        y = (rng.random(8) < 0.5).astype(float)

        def f():
            h = batchnorm(Tensor(x), state, train=True)
            return bce(sigmoid(affine(h, w, Parameter(np.zeros(1), "b0"))), y)

        assert grad_check(f, [state.gamma, state.beta, w], rng=np.random.default_rng(7)) < TOL


class TestComposedGradients:
    def test_expert_layer_composition(self):
        model = small_model()
        layer = model.experts[0].layers[0]
        rng = np.random.default_rng(8)
        x = rng.normal(0, 1, (5, 4))
        target = rng.normal(0, 1, (5, 5))
        params = [layer.w_loc, layer.w_s, layer.bias, *layer.template.parameters(), model.emb_task]

        def f():
            t_row = embedding_row(model.emb_task, 0)
            h = layer.forward(Tensor(x), t_row, train=False, rate=0.0, rng=None)
            return sum_sq_diff(h, target)

        assert grad_check(f, params, rng=np.random.default_rng(9)) < TOL

    def test_full_local_loss_graph(self):
        model = small_model(dropout=0.0)
        rng = np.random.default_rng(10)
        x = rng.normal(0, 1, (6, 4))
        y = (rng.random((6, 2)) < 0.5).astype(float)
        refs = {k: rng.normal(0, 1, p.shape) for k, p in model.scenario_shared().items()}

        def f():
            loss, _ = model.local_loss(x, y, refs=refs, lam=0.5)
            return loss

        params = model.parameters()
        assert grad_check(f, params, max_coords_per_param=3, rng=np.random.default_rng(11)) < TOL
