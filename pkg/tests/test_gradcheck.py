import numpy as np
import pytest

from ffl import gradcheck as G
from ffl.nn import CASE1, CASE2


@pytest.mark.parametrize("name", list(G.OP_CHECKS))
def test_op_backward_matches_finite_differences(name):
    report = G.run_gradcheck([name], seed=11, instances=5)
    assert report[name][0] < G.TOLERANCE


@pytest.mark.parametrize("mode", [CASE1, CASE2])
def test_micro_network_loss(mode):
    assert G.micro_loss_error(np.random.default_rng(5), mode) < G.TOLERANCE


def test_same_seed_same_report():
    a = G.run_gradcheck(["kl_divergence", "conv2d"], seed=3, instances=3)
    b = G.run_gradcheck(["kl_divergence"], seed=3, instances=3)
    assert a["kl_divergence"][0] == b["kl_divergence"][0]


def test_unknown_op():
    with pytest.raises(KeyError):
        G.run_gradcheck(["softmaxx"])


def test_detects_a_wrong_gradient():
    from ffl import tensor as T

    def bad_square(x):
        return T._make(x.data ** 2, (x,), lambda g: (g * 3 * x.data,), "bad")

    rng = np.random.default_rng(0)
    x = T.Tensor(rng.uniform(1, 2, (3,)), requires_grad=True)
    assert G.projection_error(bad_square, [x], rng) > 0.1
