import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from layerpos.adapters import Backbone, GatedLoRALayer, apply_selection, collect_params, init_adapter
from layerpos.diffcore import Tape


def random_layer(rng, d_in=16, d_out=16, rank=8, seed=0):
    return init_adapter(rng.standard_normal((d_out, d_in)), rng.standard_normal(d_out),
                        rank=rank, gamma=2.0, seed=seed)


def run_layer(layer, x):
    t = Tape()
    return layer.forward(t, t.leaf(x)).value


def mlp(width=128, layers=6, d=16, seed=0):
    rng = np.random.default_rng(seed)
    dims = [d] + [width] * (layers - 1) + [d]
    Ws = [rng.standard_normal((dims[i + 1], dims[i])) / np.sqrt(dims[i]) for i in range(layers)]
    bs = [rng.standard_normal(dims[i + 1]) * 0.1 for i in range(layers)]
    return Backbone.from_weights(Ws, bs, rank=8, gamma=2.0, seed=seed)


# ---------------------------------------------------------------- forward

def test_zero_b_gives_frozen_output_for_any_gate():
    rng = np.random.default_rng(0)
    layer = random_layer(rng)
    x = rng.standard_normal(16)
    frozen = layer.W0 @ x + layer.bias
    for g in (-5.0, 0.0, 3.0):
        layer.gate_raw[...] = g
        out = run_layer(layer, x)
        np.testing.assert_allclose(out, frozen, atol=1e-13, rtol=0)
        assert out.tobytes() == layer.frozen_output(x).tobytes()


def test_gate_zero_with_gamma_two_adds_the_full_increment():
    rng = np.random.default_rng(1)
    layer = random_layer(rng)
    layer.B[...] = rng.standard_normal(layer.B.shape)
    x = rng.standard_normal(16)
    u = layer.B @ (layer.A @ x)
    np.testing.assert_allclose(run_layer(layer, x), layer.W0 @ x + layer.bias + 1.0 * u, atol=1e-12)


def test_increment_norm_matches_dense_oracle():
    rng = np.random.default_rng(2)
    layer = random_layer(rng)
    layer.B[...] = rng.standard_normal(layer.B.shape)
    x = rng.standard_normal(16)
    dense = np.zeros((16, 16))
    for i in range(16):
        for j in range(16):
            dense[i, j] = sum(layer.B[i, q] * layer.A[q, j] for q in range(8))
    expected = 0.5 * 2.0 * np.linalg.norm(dense @ x)
    got = np.linalg.norm(run_layer(layer, x) - layer.frozen_output(x))
    assert got == pytest.approx(expected, rel=1e-12)


def test_forward_rejects_wrong_width():
    layer = random_layer(np.random.default_rng(3))
    with pytest.raises(ValueError):
        run_layer(layer, np.ones(15))


def test_gradients_reach_adapters_and_gate_but_not_frozen_weights():
    rng = np.random.default_rng(4)
    net = mlp(width=32)
    for layer in net.layers:
        layer.B[...] = 0.1 * rng.standard_normal(layer.B.shape)
    t = Tape()
    out, bound = net.forward(t, t.leaf(rng.standard_normal((5, 16))), train=("lora", "gates"))
    grads = t.backward(t.sum(t.mul(out, out)))
    assert len(bound.params) == 18
    assert all(np.any(grads[leaf] != 0) for leaf in bound.leaves)
    frozen_ids = {id(p) for p in collect_params(net, "frozen")}
    assert not frozen_ids & {id(p) for p in bound.params}


# ---------------------------------------------------------------- init

def test_fresh_adapter_state():
    rng = np.random.default_rng(5)
    layer = random_layer(rng, d_in=20, d_out=12, rank=4)
    assert layer.A.shape == (4, 20) and layer.B.shape == (12, 4)
    assert np.all(layer.B == 0) and float(layer.gate_raw) == 0.0
    assert layer.gate() == 0.5
    assert np.all(np.abs(layer.A) <= 1 / np.sqrt(20))


def test_equal_seeds_give_identical_adapters():
    W = np.ones((10, 12))
    a = init_adapter(W, np.zeros(10), rank=3, gamma=2.0, seed=9)
    b = init_adapter(W, np.zeros(10), rank=3, gamma=2.0, seed=9)
    assert a.A.tobytes() == b.A.tobytes()


def test_rank_must_be_below_both_dimensions():
    with pytest.raises(ValueError):
        init_adapter(np.ones((8, 16)), np.zeros(8), rank=8, gamma=2.0, seed=0)
    with pytest.raises(ValueError):
        init_adapter(np.ones((8, 16)), np.zeros(8), rank=0, gamma=2.0, seed=0)


def test_frozen_weights_are_read_only():
    layer = random_layer(np.random.default_rng(6))
    with pytest.raises(ValueError):
        layer.W0[0, 0] = 1.0


# ---------------------------------------------------------------- parameter sets

def test_collect_params_counts_and_partition():
    net = mlp()
    lora, gates, frozen = (collect_params(net, w) for w in ("lora", "gates", "frozen"))
    assert len(lora) == 12 and len(gates) == 6 and len(frozen) == 12
    ids = [id(p) for p in lora + gates + frozen]
    assert len(ids) == len(set(ids))
    assert collect_params(net, "lora")[0] is lora[0]
    with pytest.raises(ValueError):
        collect_params(net, "everything")


def test_parameter_counts_at_reference_width():
    net = mlp(width=128)
    theta = 16 * 128 + 128 + 4 * (128 * 128 + 128) + 128 * 16 + 16
    assert net.count("frozen") == theta == 70288
    apply_selection(net, {1, 2, 3})
    trainable = net.trainable_count()
    assert trainable == 3 * (8 * 128 + 128 * 8) == 6144
    assert trainable / theta < 0.10


def test_parameter_count_at_width_64_is_above_ten_percent():
    net = mlp(width=64)
    apply_selection(net, {0, 5, 1})
    assert net.trainable_count() / net.count("frozen") > 0.10


# ---------------------------------------------------------------- selection

def test_select_all_sets_every_gate_to_one():
    net = mlp(width=32)
    apply_selection(net, range(6))
    assert [layer.gate() for layer in net.layers] == [1.0] * 6
    assert len(net.trainable_params()) == 12


def test_select_none_reproduces_pretrained_output():
    rng = np.random.default_rng(7)
    net = mlp(width=32)
    X = rng.standard_normal((4, 16))
    before = net.predict(X)
    for layer in net.layers:
        layer.B[...] = rng.standard_normal(layer.B.shape)
    apply_selection(net, set())
    assert net.predict(X).tobytes() == before.tobytes()
    assert net.trainable_params() == []


def test_selection_freezes_gates_and_unselected_adapters():
    net = mlp(width=32)
    apply_selection(net, {0, 2})
    assert [layer.gate() for layer in net.layers] == [1.0, 0.0, 1.0, 0.0, 0.0, 0.0]
    t = Tape()
    _, bound = net.forward(t, t.leaf(np.ones((2, 16))), train=("lora", "gates"))
    expected = [net.layers[0].A, net.layers[0].B, net.layers[2].A, net.layers[2].B]
    assert [id(p) for p in bound.params] == [id(p) for p in expected]
    assert net.selection == (0, 2)


def test_selection_rejects_bad_index():
    with pytest.raises(IndexError):
        apply_selection(mlp(width=32), {6})


# ---------------------------------------------------------------- checkpoint

def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(8)
    net = mlp(width=32)
    for layer in net.layers:
        layer.B[...] = rng.standard_normal(layer.B.shape)
        layer.gate_raw[...] = rng.standard_normal()
    apply_selection(net, {1, 4, 5})
    path = tmp_path / "ckpt.json"
    net.save(path)
    back = Backbone.load(path)
    for a, b in zip(net.all_params(), back.all_params()):
        assert a.shape == b.shape and a.tobytes() == b.tobytes()
    assert back.selection == (1, 4, 5) and back.gamma == 2.0 and back.rank == 8
    X = rng.standard_normal((3, 16))
    assert back.predict(X).tobytes() == net.predict(X).tobytes()


def test_corrupt_checkpoint_is_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"layers": [{"W0": {"shape": [2, 2], "data": [1.0]}}]}')
    with pytest.raises(ValueError):
        Backbone.load(path)


# ---------------------------------------------------------------- properties

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-6, 6), st.floats(0.01, 3))
def test_increment_grows_strictly_with_gate(seed, g, dg):
    rng = np.random.default_rng(seed)
    layer = random_layer(rng, d_in=6, d_out=5, rank=2)
    layer.B[...] = rng.standard_normal(layer.B.shape)
    x = rng.standard_normal(6)
    if np.linalg.norm(layer.B @ (layer.A @ x)) < 1e-6:
        return
    norms = []
    for value in (g, g + dg):
        layer.gate_raw[...] = value
        norms.append(np.linalg.norm(run_layer(layer, x) - layer.frozen_output(x)))
    assert norms[1] > norms[0]
