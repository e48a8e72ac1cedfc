"""Analytic-vs-finite-difference checks for every differentiable op.

A fast spot suite (a few trials per op); the full 100-trial sweep lives in
the acceptance module.
"""

import numpy as np
import pytest

from gradcheck import check_gradients, op_registry

OPS = op_registry()


@pytest.mark.parametrize("name,make_inputs,forward", OPS,
                         ids=[o[0] for o in OPS])
def test_gradient_matches_finite_differences(name, make_inputs, forward):
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(5):
        check_gradients(make_inputs, forward, rng)


def test_tape_linearity():
    # backward of a sum of losses equals the sum of separate backwards
    rng = np.random.default_rng(0)
    from cycleid.tensor import Tensor, mse, sum_all, mul

    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 3))

    x = Tensor(a.copy(), requires_grad=True)
    l1 = mse(x, Tensor(b))
    l2 = sum_all(mul(x, x))
    (l1 + l2).backward()
    combined = x.grad.copy()

    x1 = Tensor(a.copy(), requires_grad=True)
    mse(x1, Tensor(b)).backward()
    x2 = Tensor(a.copy(), requires_grad=True)
    sum_all(mul(x2, x2)).backward()
    np.testing.assert_allclose(combined, x1.grad + x2.grad, rtol=1e-6)


def test_fanout_gradients_accumulate():
    from cycleid.tensor import Tensor, sum_all, mul

    w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    loss = sum_all(mul(w, w))
    loss.backward()
    np.testing.assert_allclose(w.grad, [2.0, 4.0, 6.0], rtol=1e-6)


def test_no_dependence_means_no_grad():
    from cycleid.tensor import Tensor, sum_all, mul

    w = Tensor(np.ones(3), requires_grad=True)
    u = Tensor(np.ones(3), requires_grad=True)
    sum_all(mul(u, u)).backward()
    assert w.grad is None
