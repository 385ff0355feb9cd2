import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshsim.model import Minibatch, MlpModel, QuadraticModel, build_model, even_offsets
from meshsim.numerics import ConfigError, Rng


def reference_mlp_loss(params, dims, x, y, act=np.tanh):
    """Layer-by-layer forward pass written out with explicit loops over units."""
    pos, h = 0, [list(row) for row in x]
    for k in range(len(dims) - 1):
        n_in, n_out = dims[k], dims[k + 1]
        W = [[params[pos + o * n_in + i] for i in range(n_in)] for o in range(n_out)]
        pos += n_out * n_in
        b = [params[pos + o] for o in range(n_out)]
        pos += n_out
        last = k == len(dims) - 2
        out = []
        for row in h:
            z = [sum(W[o][i] * row[i] for i in range(n_in)) + b[o] for o in range(n_out)]
            out.append(z if last else [float(act(v)) for v in z])
        h = out
    sq = sum((h[n][o] - y[n][o]) ** 2 for n in range(len(h)) for o in range(dims[-1]))
    return 0.5 * sq / len(h)


def central_difference(fn, w, h=1e-6):
    g = np.empty_like(w)
    for k in range(w.size):
        e = np.zeros_like(w)
        e[k] = h
        g[k] = (fn(w + e) - fn(w - e)) / (2 * h)
    return g


# ---------------------------------------------------------------- quadratic

def test_quadratic_examples():
    q = QuadraticModel(np.ones(2), [[1.0, -1.0]])
    b = Minibatch(0, 0)
    assert q.loss(np.array([1.0, -1.0]), b) == 0.0
    assert q.loss(np.array([2.0, -1.0]), b) == 0.5
    assert q.gradient(np.array([3.0, -2.0]), b).tolist() == [2.0, -1.0]
    assert np.all(q.gradient(q.centers[0], b) == 0)


def test_dimension_mismatch():
    q = QuadraticModel(np.ones(2), [[0.0, 0.0]])
    with pytest.raises(ConfigError):
        q.loss(np.zeros(3), Minibatch(0, 0))
    with pytest.raises(ConfigError):
        q.stage_gradient(np.zeros(2), Minibatch(0, 0), stage=1)


@pytest.mark.parametrize("diagonal", [True, False])
def test_lipschitz_is_top_eigenvalue(diagonal):
    q = QuadraticModel.random(12, 3, seed=4, condition=25.0, diagonal=diagonal)
    A = np.diag(q.curvature) if diagonal else q.curvature
    assert abs(q.lipschitz - np.linalg.eigvalsh(A).max()) < 1e-9
    g = np.random.default_rng(0)
    for _ in range(100):
        x, y = g.normal(size=12), g.normal(size=12)
        gx, gy = q.gradient(x, Minibatch(1, 0)), q.gradient(y, Minibatch(1, 0))
        assert np.linalg.norm(gx - gy) <= q.lipschitz * np.linalg.norm(x - y) + 1e-9


def test_non_positive_curvature_rejected():
    with pytest.raises(ConfigError):
        QuadraticModel(np.array([1.0, 0.0]), [[0.0, 0.0]])


def test_quadratic_noise_unbiased_bounded():
    q = QuadraticModel.random(8, 1, seed=2, noise_std=0.1)
    w = np.full(8, 0.5)
    exact = QuadraticModel(q.curvature, q.centers).gradient(w, Minibatch(0, 0))
    draws = np.array([q.gradient(w, Minibatch(0, k, seed=9)) for k in range(10_000)])
    assert np.all(np.abs(draws.mean(axis=0) - exact) < 3 * 0.1 / 100)
    assert ((draws - exact) ** 2).sum(axis=1).mean() <= 1.1 * 0.1 ** 2 * 8
    # the same (seed, replica, step) always gives the same draw
    assert np.array_equal(q.gradient(w, Minibatch(0, 5, 9)), q.gradient(w, Minibatch(0, 5, 9)))


def test_quadratic_stage_blocks_concatenate_bitwise():
    q = QuadraticModel.random(10, 2, seed=0, num_stages=2)
    w, b = np.linspace(-1, 1, 10), Minibatch(1, 3)
    assert np.array_equal(np.concatenate([q.stage_gradient(w, b, j) for j in range(2)]), q.gradient(w, b))
    q1 = QuadraticModel.random(10, 2, seed=0, num_stages=1)
    assert np.array_equal(q1.stage_gradient(w, b, 0), q1.gradient(w, b))


# ---------------------------------------------------------------- mlp

def small_mlp(**kw):
    opts = dict(layer_dims=(3, 5, 4, 2), num_replicas=3, samples_per_replica=40, val_samples=20,
                batch_size=8, seed=1)
    opts.update(kw)
    return MlpModel(**opts)


def test_mlp_parameter_count():
    m = small_mlp()
    assert m.dim == sum((i + 1) * o for i, o in zip((3, 5, 4), (5, 4, 2)))
    assert list(small_mlp(num_stages=2).stage_offsets) == [0, 20 + 24, m.dim]


def test_shards_partition_data():
    m = small_mlp()
    shards = [set(s.tolist()) for s in m.shard_index]
    assert all(len(a & b) == 0 for i, a in enumerate(shards) for b in shards[i + 1:])
    val = set(range(len(m.data_x))) - set().union(*shards)
    assert len(val) == 20 and len(set().union(*shards)) + len(val) == len(m.data_x)


def test_batches_come_from_own_shard_and_repeat():
    m = small_mlp()
    b1, b2 = m.batch(2, 7), m.batch(2, 7)
    assert np.array_equal(b1.x, b2.x)
    shard_rows = {tuple(r) for r in m.data_x[m.shard_index[2]]}
    assert all(tuple(r) in shard_rows for r in b1.x)


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_mlp_loss_matches_reference(activation):
    m = small_mlp(activation=activation)
    w = m.init_params(3) + 0.1
    b = m.batch(0, 0)
    act = np.tanh if activation == "tanh" else (lambda v: max(v, 0.0))
    ref = reference_mlp_loss(w.tolist(), m.layer_dims, b.x[:8].tolist(), b.y[:8].tolist(), act)
    assert abs(m.loss(w, b) - ref) < 1e-12 * max(1.0, abs(ref))


def test_mlp_gradient_finite_differences():
    m = small_mlp()
    b = m.batch(1, 4)
    g = np.random.default_rng(5)
    for _ in range(10):
        w = g.normal(size=m.dim)
        analytic = m.gradient(w, b)
        numeric = central_difference(lambda v: m.loss(v, b), w)
        assert np.linalg.norm(analytic - numeric) / np.linalg.norm(analytic) < 1e-5


@pytest.mark.parametrize("stages", [1, 2, 3])
def test_mlp_stage_gradients_compose_exactly(stages):
    m = small_mlp(num_stages=stages)
    w, b = m.init_params(0), m.batch(0, 1)
    full = m.gradient(w, b)
    assert np.array_equal(np.concatenate([m.stage_gradient(w, b, j) for j in range(stages)]), full)
    # stage blocks are whole layers
    assert set(m.stage_offsets.tolist()) <= set(m.layer_offsets.tolist())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=8), st.integers(1, 8))
def test_even_offsets_cover_every_block_once(sizes, stages):
    if stages > len(sizes):
        with pytest.raises(ConfigError):
            even_offsets(sizes, stages)
        return
    off = even_offsets(sizes, stages)
    assert off[0] == 0 and off[-1] == sum(sizes) and np.all(np.diff(off) > 0)
    bounds = set(np.cumsum([0] + sizes).tolist())
    assert set(off.tolist()) <= bounds


def test_build_model():
    assert isinstance(build_model({"kind": "quadratic", "dim": 6}, 2, 2, 0), QuadraticModel)
    assert isinstance(build_model({"kind": "mlp", "layer_dims": [2, 3, 1]}, 2, 2, 0), MlpModel)
    with pytest.raises(ConfigError):
        build_model({"kind": "transformer"}, 2, 1, 0)


def test_quadratic_noise_stream_is_rng_driven():
    q = QuadraticModel.random(4, 1, seed=0, noise_std=1.0)
    w = np.zeros(4)
    a = q.gradient(w, Minibatch(0, 0), Rng(1, 2))
    b = q.gradient(w, Minibatch(0, 0), Rng(1, 2))
    c = q.gradient(w, Minibatch(0, 0), Rng(1, 3))
    assert np.array_equal(a, b) and not np.array_equal(a, c)
