import pytest
import torch

from avsync.gradcheck import check_gradients, module_tensors, numerical_grad, relative_error


def test_numerical_grad_of_polynomial():
    x = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
    g = numerical_grad(lambda: (x ** 3).sum(), x)
    assert torch.allclose(g, 3 * x ** 2, atol=1e-8)
    assert x.tolist() == [1.0, -2.0, 0.5]  # restored after perturbation


def test_relative_error():
    a = torch.tensor([1.0, 0.0])
    assert relative_error(a, a) == 0.0
    assert relative_error(torch.zeros(2), torch.zeros(2)) == 0.0
    assert relative_error(a, torch.tensor([0.0, 1.0])) == pytest.approx(2 ** 0.5)


def test_check_gradients_detects_wrong_backward():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            return g  # should be 2 x g

    x = torch.tensor([1.5, -0.7], dtype=torch.float64, requires_grad=True)
    assert check_gradients(lambda: Wrong.apply(x).sum(), {"x": x})["x"] > 0.1
    assert check_gradients(lambda: (x ** 2).sum(), {"x": x})["x"] < 1e-8


def test_check_gradients_requires_float64():
    lin = torch.nn.Linear(2, 2)
    with pytest.raises(TypeError):
        check_gradients(lambda: lin(torch.ones(2)).sum(), module_tensors(lin))
    lin = lin.double()
    errs = check_gradients(lambda: lin(torch.ones(2, dtype=torch.float64)).pow(2).sum(), module_tensors(lin, ["weight"]))
    assert set(errs) == {"weight"} and errs["weight"] < 1e-8
