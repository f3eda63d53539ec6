import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from randimpulse import ClassicalImpulseSolver, RandomizedImpulseSolver, TDImpulseRegressor
from randimpulse.sde_sim import SimConfig, UniformInit


@pytest.fixture(scope="module")
def fitted():
    return RandomizedImpulseSolver(n_nodes=401).fit()


def test_params_round_trip():
    est = RandomizedImpulseSolver(lambda1=0.1, n_nodes=401)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(lambda2=0.3).lambda2 == 0.3


def test_predict_shapes(fitted):
    x = np.linspace(-3, 3, 7)
    flat = fitted.predict(x)
    assert flat.shape == (7,)
    np.testing.assert_array_equal(fitted.predict(x[:, None]), flat)
    np.testing.assert_allclose(flat, fitted.result_.psi(x))
    assert np.all(fitted.intensity(x) >= 0)
    assert fitted.n_iter_ == fitted.result_.outer_iters


def test_rejects_multifeature_input(fitted):
    with pytest.raises(ValueError):
        fitted.predict(np.zeros((3, 2)))


def test_not_fitted():
    for est in (RandomizedImpulseSolver(), ClassicalImpulseSolver(), TDImpulseRegressor()):
        with pytest.raises(NotFittedError):
            est.predict([0.0])


def test_classical_band(fitted):
    est = ClassicalImpulseSolver(n_nodes=401).fit()
    cont = est.in_continuation([-3.0, 0.0, 3.0])
    np.testing.assert_array_equal(cont, [False, True, False])
    assert np.all(est.predict([-3.0, 0.0, 3.0]) <= fitted.predict([-3.0, 0.0, 3.0]) + 0.5 / 0.1)


def test_td_regressor_small_run():
    est = TDImpulseRegressor(n_outer=1, n_inner=3, batch=2, mc_jump_samples=8, random_state=4)
    est.fit()
    out = est.predict(np.array([[0.0], [1.0]]))
    assert out.shape == (2,) and np.all(out >= 0)
    assert len(est.history_.mean_loss) == 1
