import numpy as np
import pytest

from fedltp.model import MaskedModel, mlp_layers


def central_difference_grad(model, x, y, h=1e-5):
    """Finite-difference gradient of the mean cross-entropy, written without
    reusing the analytic backward pass."""
    def loss_at(params):
        a = x
        offset = 0
        layers = model.layers
        for layer in layers:
            if layer.kind == "dense":
                nw = layer.in_dim * layer.out_dim
                W = params[offset:offset + nw].reshape(layer.in_dim, layer.out_dim)
                b = params[offset + nw:offset + nw + layer.out_dim]
                offset += nw + layer.out_dim
                a = a @ W + b
            elif layer.kind == "relu":
                a = np.maximum(a, 0)
        m = a.max(axis=1, keepdims=True)
        lse = (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]
        return float(np.mean(lse - a[np.arange(len(y)), y]))

    grad = np.zeros(model.d)
    for j in range(model.d):
        up = model.params.copy()
        dn = model.params.copy()
        up[j] += h
        dn[j] -= h
        grad[j] = (loss_at(up) - loss_at(dn)) / (2 * h)
    return grad


def random_mlp(rng, max_params=200):
    """Random small MLP with at most ``max_params`` parameters."""
    while True:
        depth = rng.integers(1, 4)
        sizes = [int(rng.integers(2, 7)) for _ in range(depth + 1)]
        layers = mlp_layers(sizes)
        model = MaskedModel.create(layers, rng)
        if model.d <= max_params:
            return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def report_acceptance(number, passed, detail):
    line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
