import math

import numpy as np
import pytest

from prefixmm import autodiff as ad
from prefixmm.nn import Linear, Module, Parameter, causal_mask
from prefixmm.optim import MissingGradError, OptimizerState, adamw_step, clip_grad_norm


def adamw_reference(p, g, lr, step=1, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    mhat, vhat = m / (1 - b1 ** step), v / (1 - b2 ** step)
    return p * (1 - lr * wd) - lr * mhat / (math.sqrt(vhat) + eps)


def test_single_scalar_adamw_step_matches_formula():
    p = Parameter(np.array(0.5), name="w", dtype=np.float64)
    p.grad = np.array(0.2)
    adamw_step([p], OptimizerState(), lr=1e-3)
    assert float(p.data) == pytest.approx(adamw_reference(0.5, 0.2, 1e-3), rel=1e-12)


def test_frozen_parameters_untouched():
    a = Parameter(np.ones(3), name="a", frozen=True)
    before = a.data.copy()
    adamw_step([a], OptimizerState(), lr=1.0)
    np.testing.assert_array_equal(a.data, before)
    assert not a.requires_grad


def test_zero_lr_no_decay_is_noop():
    p = Parameter(np.array([1.0, -2.0]), name="p", dtype=np.float64)
    p.grad = np.array([0.3, 0.1])
    adamw_step([p], OptimizerState(weight_decay=0.0), lr=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_missing_grad_names_parameter():
    p = Parameter(np.ones(2), name="decoder.adapters.0.up.weight")
    with pytest.raises(MissingGradError, match="adapters.0.up"):
        adamw_step([p], OptimizerState(), lr=1e-3)


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(2), name="a"), Parameter(np.zeros(1), name="b")
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    norm = math.sqrt(float((a.grad ** 2).sum() + (b.grad ** 2).sum()))
    assert norm == pytest.approx(1.0)


class Toy(Module):
    def __init__(self):
        rng = np.random.default_rng(0)
        self.lin = Linear(rng, 3, 2)
        self.extra = [Linear(rng, 2, 2, bias=False)]


def test_module_names_and_state_roundtrip():
    m = Toy()
    m.assign_names()
    names = [n for n, _ in m.named_parameters()]
    assert names == ["lin.weight", "lin.bias", "extra.0.weight"]
    state = m.state_dict()
    m2 = Toy()
    for p in m2.parameters():
        p.data[...] = 0
    m2.load_state_dict(state)
    for (_, p), (_, q) in zip(m.named_parameters(), m2.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    with pytest.raises(ValueError):
        m2.load_state_dict({**state, "lin.weight": np.zeros((9, 9))})


def test_freeze_toggles_gradient_tracking():
    m = Toy()
    m.freeze()
    assert all(p.frozen and not p.requires_grad for p in m.parameters())
    m.freeze(False)
    assert all(p.requires_grad for p in m.parameters())


def test_causal_mask():
    mk = causal_mask(4)
    assert mk[2, 3] == False and mk[3, 0] == True  # noqa: E712
    pm = causal_mask(4, prefix=2)
    assert pm[0, 1] and not pm[1, 2]


def test_linear_forward():
    lin = Linear(np.random.default_rng(0), 3, 2, dtype=np.float64)
    x = ad.Tensor(np.ones((5, 3)))
    np.testing.assert_allclose(lin(x).data, np.ones((5, 3)) @ lin.weight.data + lin.bias.data)


def test_adamw_needs_unique_names():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(1))
    a.grad, b.grad = np.ones(2), np.ones(1)
    with pytest.raises(ValueError, match="unique"):
        adamw_step([a, b], OptimizerState(), 0.1)
    a.name, b.name = "x", "x"
    with pytest.raises(ValueError, match="unique"):
        adamw_step([a, b], OptimizerState(), 0.1)
