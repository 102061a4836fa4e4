import math

import pytest
import torch

from gridrl import tensor as T
from gridrl.gradcheck import op_checks
from gridrl.tensor import GradCheckError, ParamStore, ShapeError, backward, finite_diff_check, float64_mode


def test_softmax_uniform():
    y = T.softmax(torch.zeros(7, dtype=torch.float64))
    assert torch.allclose(y, torch.full((7,), 1 / 7, dtype=torch.float64), atol=1e-15)


def test_cross_entropy_uniform_is_log_v():
    V = 13
    loss = T.cross_entropy(torch.zeros(5, V, dtype=torch.float64), torch.arange(5))
    assert abs(float(loss) - math.log(V)) < 1e-12


def test_cross_entropy_ignore_index():
    logits = torch.randn(3, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    full = T.cross_entropy(logits[:2], torch.tensor([1, 2]))
    masked = T.cross_entropy(logits, torch.tensor([1, 2, -1]), ignore_index=-1)
    assert torch.equal(full, masked)


def test_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(torch.zeros(2, 3), torch.zeros(4, 5))
    with pytest.raises(ShapeError):
        T.add(torch.zeros(2, 3), torch.zeros(4))
    with pytest.raises(ShapeError):
        T.embedding(torch.zeros(3, 2), torch.tensor([3]))
    with pytest.raises(ShapeError):
        T.reshape(torch.zeros(6), (4, 2))
    with pytest.raises(ShapeError):
        T.layer_norm(torch.zeros(2, 3), torch.zeros(4), torch.zeros(4))


def test_every_op_matches_finite_differences_50_points():
    with float64_mode():
        for seed in range(50):
            for name, f, x in op_checks(torch.Generator().manual_seed(seed)):
                err = finite_diff_check(f, x, 1e-6)
                assert err < 1e-4, (name, seed, err)


def _store(x):
    return ParamStore({"p": x})


def test_backward_sum_is_ones():
    ps = _store(torch.randn(3, 2, dtype=torch.float64))
    backward(T.reduce_sum(ps["p"]), ps)
    assert torch.equal(ps.grads["p"], torch.ones(3, 2, dtype=torch.float64))


def test_backward_half_square_is_identity():
    ps = _store(torch.randn(4, dtype=torch.float64))
    backward(0.5 * (ps["p"] ** 2).sum(), ps)
    assert torch.allclose(ps.grads["p"], ps["p"].detach())


def test_backward_unreachable_gets_zero_and_scalar_required():
    ps = ParamStore({"a": torch.ones(2), "b": torch.ones(3)})
    backward(ps["a"].sum(), ps)
    assert torch.equal(ps.grads["b"], torch.zeros(3))
    with pytest.raises(ShapeError):
        backward(ps["a"] * 2, ps)


def test_two_layer_network_gradient():
    g = torch.Generator().manual_seed(1)
    with float64_mode():
        x = torch.randn(5, 3, generator=g)
        w2 = torch.randn(4, 2, generator=g)
        y = torch.tensor([0, 1, 1, 0, 1])

        def f(w1):
            return T.cross_entropy(T.matmul(T.gelu(T.matmul(x, w1)), w2), y)

        assert finite_diff_check(f, torch.randn(3, 4, generator=g)) < 1e-4


def test_fd_sum_exact():
    x = torch.randn(6, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    # linear function: only roundoff remains
    assert finite_diff_check(lambda t: t.sum(), x) < 1e-8


def test_fd_softmax_pick():
    g = torch.Generator().manual_seed(2)
    x = torch.randn(6, dtype=torch.float64, generator=g)
    assert finite_diff_check(lambda t: T.softmax(t)[2], x, epsilon=1e-4) < 1e-5


class _WrongSin(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.sin()

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        return grad * 2 * x.cos()


def test_fd_detects_wrong_rule():
    x = torch.linspace(0.1, 1.0, 5, dtype=torch.float64)
    assert finite_diff_check(lambda t: _WrongSin.apply(t).sum(), x) > 1e-2


def test_fd_non_finite_raises():
    with pytest.raises(GradCheckError):
        finite_diff_check(lambda t: torch.log(t).sum(), torch.tensor([0.0, 1.0], dtype=torch.float64))


def test_param_store_digest_and_clone():
    ps = ParamStore({"a": torch.arange(4.0)})
    c = ps.clone()
    assert c.digest() == ps.digest()
    with torch.no_grad():
        c["a"].add_(1)
    assert c.digest() != ps.digest()
    with pytest.raises(KeyError):
        ps.add("a", torch.zeros(1))
