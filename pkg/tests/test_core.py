import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochsens.core import (BrownianEnsemble, ItoTriple, MCEstimate, RunningStats, TimeGrid, inner_product_I,
                            integration_by_parts_residual, isometry_gap, ito_evaluate, sample_brownian)
from stochsens.errors import InvalidArgumentError


def test_grid_basics():
    g = TimeGrid(2.0, 8)
    assert g.dt == 0.25
    assert g.times[-1] == 2.0 and g.times.shape == (9,)
    assert g.refine(2).steps == 16
    for bad in ((0.0, 4), (1.0, 0), (np.nan, 3)):
        with pytest.raises(InvalidArgumentError):
            TimeGrid(*bad)


def test_estimate_from_samples():
    x = np.arange(10.0)
    est = MCEstimate.from_samples(x)
    assert est.mean == 4.5
    assert est.stderr == pytest.approx(np.std(x, ddof=1) / np.sqrt(10))
    assert est.within(4.5 + 3.9 * est.stderr)
    assert not est.within(4.5 + 4.1 * est.stderr)


def test_running_stats_matches_batch(rng):
    x = rng.normal(size=(1000, 3))
    rs = RunningStats((3,))
    for part in np.array_split(x, 7):
        rs.add(part)
    np.testing.assert_allclose(rs.mean, x.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(rs.stderr, x.std(axis=0, ddof=1) / np.sqrt(1000), rtol=1e-10)


def test_ensemble_chunks_are_consistent():
    W = sample_brownian(TimeGrid(1.0, 20), 50, 2, 9)
    full = W.increments
    np.testing.assert_array_equal(W.chunk(10, 30), full[10:30])
    np.testing.assert_array_equal(np.concatenate([c for _, _, c in W.chunks(16)]), full)
    np.testing.assert_array_equal(W.with_paths(20).increments, full[:20])
    np.testing.assert_allclose(W.terminal(), full.sum(axis=1))


def test_coarsening_shares_noise():
    W = BrownianEnsemble(TimeGrid(1.0, 8), 5, 1, 3, substeps=1)
    fine = BrownianEnsemble(TimeGrid(1.0, 8), 5, 1, 3, substeps=2)
    coarse = fine.coarsen(2)
    np.testing.assert_allclose(coarse.terminal(), fine.terminal(), atol=1e-13)
    np.testing.assert_allclose(coarse.increments, fine.increments.reshape(5, 4, 2, 1).sum(axis=2), atol=1e-13)
    assert W.increments.shape == (5, 8, 1)


def test_brownian_variance():
    W = sample_brownian(TimeGrid(2.0, 10), 40000, 1, 1)
    wT = W.terminal()[:, 0]
    se = np.sqrt(2.0 * 4.0 / wT.size)
    assert abs(wT.var() - 2.0) < 5 * se


def test_ito_evaluate_constant_triple():
    W = sample_brownian(TimeGrid(1.0, 10), 30, 1, 4)
    tri = ItoTriple.constant([1.0], [2.0], [[3.0]], 10)
    x = ito_evaluate(tri, W)
    np.testing.assert_allclose(x[:, -1, 0], 1.0 + 2.0 + 3.0 * W.terminal()[:, 0], atol=1e-12)


def test_triple_validation():
    with pytest.raises(InvalidArgumentError):
        ItoTriple([0.0], np.zeros((1, 3, 2)), np.zeros((1, 3, 1, 1)))
    with pytest.raises(InvalidArgumentError):
        ItoTriple([np.nan], np.zeros((1, 3, 1)), np.zeros((1, 3, 1, 1)))


def test_by_parts_constant_triple_reduces_to_mean_check():
    W = sample_brownian(TimeGrid(1.0, 50), 20000, 1, 8)
    a = ItoTriple.constant([0.5], [1.0], [[0.7]], 50)
    one = ItoTriple.constant([1.0], [0.0], [[0.0]], 50)
    est = integration_by_parts_residual(a, one, W)
    x = ito_evaluate(a, W)
    direct = MCEstimate.from_samples(x[:, -1, 0] - 0.5 - 1.0)
    assert est.mean == pytest.approx(direct.mean, abs=1e-12)
    assert est.within(0.0)


def _random_triples(rng, K, n, d, paths=1):
    def one():
        return ItoTriple(rng.normal(size=n), rng.normal(size=(paths, K, n)), rng.normal(size=(paths, K, n, d)))
    return one(), one(), one()


def _lin(alpha, a, beta, c):
    return ItoTriple(alpha * a.x0 + beta * c.x0, alpha * a.drift + beta * c.drift,
                     alpha * a.diffusion + beta * c.diffusion)


@given(seed=st.integers(0, 10**6), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
def test_inner_product_is_symmetric_bilinear(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    W = sample_brownian(TimeGrid(1.0, 6), 5, 2, seed)
    a, b, c = _random_triples(rng, 6, 2, 2)
    ab, cb = inner_product_I(a, b, W), inner_product_I(c, b, W)
    assert ab == pytest.approx(inner_product_I(b, a, W), rel=1e-12, abs=1e-12)
    lhs = inner_product_I(_lin(alpha, a, beta, c), b, W)
    assert lhs == pytest.approx(alpha * ab + beta * cb, rel=1e-9, abs=1e-9)
    aa, bb = inner_product_I(a, a, W), inner_product_I(b, b, W)
    assert aa >= 0
    assert ab * ab <= aa * bb * (1 + 1e-12)


def test_isometry_and_by_parts_random(rng):
    K = 200
    W = sample_brownian(TimeGrid(1.0, K), 10000, 2, 77)
    t = W.grid.times[:-1]
    diff = np.stack([np.stack([np.sin(t), np.cos(t)], -1), np.stack([t, 1 + 0 * t], -1)], axis=1)[None]
    iso = isometry_gap(ItoTriple(np.zeros(2), np.zeros((1, K, 2)), diff), W)
    assert iso.within(0.0)
    a = ItoTriple([1.0, -1.0], np.stack([t, -t], -1)[None], diff)
    b = ItoTriple([0.5, 2.0], np.ones((1, K, 2)), 0.5 * diff)
    bias = W.grid.dt ** 2 * float((a.drift * b.drift).sum())
    assert integration_by_parts_residual(a, b, W).within(bias)
