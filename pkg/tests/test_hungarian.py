import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from langdet import matching
from langdet.matching import InfeasibleAssignment, hungarian

from helpers import brute_force_assignment

BACKENDS = ["python"] + (["compiled"] if matching.BACKEND == "compiled" else [])


@pytest.mark.parametrize("backend", BACKENDS)
class TestHungarian:
    def test_small_fixture(self, backend):
        a = hungarian([[4, 1, 3], [2, 0, 5]], backend=backend)
        assert a.pairs == [(0, 1), (1, 0)]
        assert a.total_cost == 3.0

    def test_against_brute_force(self, backend):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 6))
            m = int(rng.integers(n, 7))
            c = rng.normal(size=(n, m)) * rng.choice([1.0, 100.0])
            a = hungarian(c, backend=backend)
            assert a.total_cost == pytest.approx(brute_force_assignment(c), abs=1e-9)
            assert len({j for _, j in a.pairs}) == n

    def test_against_scipy(self, backend):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(1, 30))
            m = int(rng.integers(n, 40))
            c = rng.random((n, m))
            r, cidx = linear_sum_assignment(c)
            assert hungarian(c, backend=backend).total_cost == pytest.approx(c[r, cidx].sum(), abs=1e-9)

    def test_ties_deterministic(self, backend):
        c = np.ones((3, 4))
        a1 = hungarian(c, backend=backend)
        a2 = hungarian(c.copy(), backend=backend)
        assert a1.pairs == a2.pairs
        assert a1.total_cost == 3.0

    def test_empty(self, backend):
        a = hungarian(np.zeros((0, 3)), backend=backend)
        assert a.pairs == [] and a.total_cost == 0.0

    def test_infeasible(self, backend):
        with pytest.raises(InfeasibleAssignment):
            hungarian(np.zeros((3, 2)), backend=backend)

    def test_nan(self, backend):
        with pytest.raises(ValueError, match="NaN"):
            hungarian([[0.0, np.nan]], backend=backend)

    def test_inf(self, backend):
        with pytest.raises(ValueError):
            hungarian([[0.0, np.inf]], backend=backend)

    def test_negative_and_large_costs(self, backend):
        c = np.array([[-1e6, 2.0], [3.0, 1e6]])
        a = hungarian(c, backend=backend)
        assert a.pairs == [(0, 0), (1, 1)]


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled extension not built")
    rng = np.random.default_rng(5)
    for n, m in itertools.product([1, 3, 8, 20], [20, 25]):
        c = rng.random((n, m))
        assert hungarian(c, backend="python").pairs == hungarian(c, backend="compiled").pairs


def test_selected_backend_reported():
    assert matching.BACKEND in ("compiled", "python")
