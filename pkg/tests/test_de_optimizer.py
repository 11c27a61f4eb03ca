import numpy as np
import pytest

from geoclo.de_optimizer import (DeConfig, Population, better, crossover, initialize, mutate,
                                 reflect, run, sample_indices, select)


def sphere(X):
    return np.sum(np.atleast_2d(X)**2, axis=1)


def rosen(x):
    return (1 - x[0])**2 + 100 * (x[1] - x[0]**2)**2


def _cfg(d=3, **kw):
    return DeConfig(-np.ones(d), np.ones(d), **kw)


def test_sphere_reaches_tolerance():
    res = run(DeConfig(-5 * np.ones(10), 5 * np.ones(10), n_ind=50, g_max=200, seed=1),
              sphere, vectorized=True)
    assert res.best_f < 1e-6
    best = [r["best"] for r in res.trace]
    assert all(b2 <= b1 for b1, b2 in zip(best, best[1:]))
    assert res.n_evals == 50 * 201


def test_rosenbrock_scalar_fitness():
    res = run(DeConfig([-2, -2], [2, 2], n_ind=50, g_max=1000, seed=3), rosen)
    assert res.best_f < 1e-4
    np.testing.assert_allclose(res.best_x, [1, 1], atol=1e-2)


@pytest.mark.parametrize("strategy", ["rand1", "best1", "target1"])
def test_strategies_improve(strategy):
    res = run(_cfg(4, n_ind=20, g_max=60, strategy=strategy, seed=2), sphere, vectorized=True)
    assert res.best_f < res.trace[0]["best"]


def test_reflect_oracle():
    lo, hi = np.zeros(4), np.ones(4)
    v = np.array([-0.25, 1.25, 2.5, 0.5])
    # -0.25 -> 0.25, 1.25 -> 0.75, 2.5 -> 0.5 (two folds), 0.5 unchanged
    np.testing.assert_allclose(reflect(v, lo, hi), [0.25, 0.75, 0.5, 0.5])
    # degenerate bounds pin to the bound
    assert reflect(np.array([3.0]), np.array([2.0]), np.array([2.0]))[0] == 2.0


def test_sample_indices_exclude_target(rng):
    for i in range(6):
        r = sample_indices(rng, 6, i, 3)
        assert i not in r and len(set(r.tolist())) == 3


def test_crossover_takes_at_least_one_mutant_gene(rng):
    cfg = _cfg(5, Cr=1e-12)
    t, m = np.zeros(5), np.ones(5)
    for _ in range(20):
        assert crossover(t, m, cfg, rng).sum() == 1
    assert np.all(crossover(t, m, _cfg(5, Cr=1.0), rng) == 1)


def test_mutation_formula(rng):
    cfg = _cfg(2, F=0.5)
    X = np.array([[0.0, 0.0], [0.2, 0.2], [0.4, -0.2], [-0.4, 0.6]])
    pop = Population(X, np.arange(4.0), np.zeros(4))
    v, r = mutate(pop, cfg, 0, rng, return_indices=True)
    np.testing.assert_allclose(v, reflect(X[r[0]] + 0.5 * (X[r[1]] - X[r[2]]), cfg.lower,
                                          cfg.upper))


def test_feasibility_rule():
    assert better(5.0, 0.0, 1.0, 0.1)          # feasible beats infeasible
    assert not better(1.0, 0.1, 5.0, 0.0)
    assert better(9.0, 0.1, 1.0, 0.2)          # smaller violation wins
    assert better(1.0, 0.0, 1.0, 0.0)          # tie goes to the challenger
    assert not better(1.0, 0.0, 1.0, 0.0, strict=True)
    assert better(1.0, 0.01, 2.0, 0.0, rule="penalty", weight=1.0)


def test_select_nan_is_worse():
    cfg = _cfg(1)
    x, f, _ = select(np.zeros(1), np.ones(1), 3.0, np.nan, cfg)
    assert f == 3.0 and x[0] == 0.0


def test_nan_fitness_becomes_inf():
    pop = initialize(_cfg(2, n_ind=5), lambda X: np.full(len(X), np.nan), vectorized=True)
    assert np.all(np.isinf(pop.fitness))


def test_constrained_problem_prefers_feasible():
    # minimize x0 + x1 subject to x0 + x1 >= 1
    def fit(X):
        s = X.sum(axis=1)
        return s, np.maximum(0, 1 - s)

    res = run(DeConfig([0, 0], [2, 2], n_ind=20, g_max=100, seed=0), fit, vectorized=True)
    assert res.best_violation == 0
    assert res.best_f == pytest.approx(1.0, abs=1e-3)


def test_seeded_initial_individual():
    init = np.array([[0.0, 0.0, 0.0]])
    res = run(_cfg(3, n_ind=10, g_max=0), sphere, vectorized=True, init=init)
    assert res.best_f == 0.0


def test_reproducible_and_trace_file(tmp_path):
    a = run(_cfg(3, n_ind=10, g_max=20, seed=5), sphere, vectorized=True)
    b = run(_cfg(3, n_ind=10, g_max=20, seed=5), sphere, vectorized=True)
    assert np.array_equal(a.best_x, b.best_x)
    a.write_trace_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "generation,best,mean,worst,feasible_fraction,best_violation"
    assert len(lines) == 22


def test_config_validation():
    with pytest.raises(ValueError):
        DeConfig([1.0], [0.0])
    with pytest.raises(ValueError):
        _cfg(2, Cr=0.0)
    with pytest.raises(ValueError):
        _cfg(2, n_ind=3)
    with pytest.raises(ValueError):
        _cfg(2, strategy="rand2")
