"""
Reverse-mode gradients and how they are checked
===============================================

Every layer is built from a small immutable ``Tensor`` that records a
backward closure. ``backward`` walks the graph once in reverse topological
order, then frees it. Here we check a five-step LSTM against central
differences, the same way the test suite does.
"""

import numpy as np

from eegtext.encoder import GATES, lstm_sequence
from eegtext.tensor import Tensor, backward, finite_diff, relative_error

rng = np.random.default_rng(0)
units, inputs = 4, 3

x = rng.standard_normal((2, 5, inputs))
weights = {f"W_{g}": 0.4 * rng.standard_normal((units + inputs, units)) for g in GATES}
biases = {f"b_{g}": 0.1 * rng.standard_normal(units) for g in GATES}
project = rng.standard_normal((2, 5, units))


def loss(x, params):
    hs = lstm_sequence(x, [params])[-1]
    return (hs * project).sum()


###############################################################################
# Analytic gradients from one backward pass

params = {k: Tensor(v, requires_grad=True) for k, v in {**weights, **biases}.items()}
xt = Tensor(x, requires_grad=True)
backward(loss(xt, params))

###############################################################################
# Central differences, one coordinate at a time

fd_x = finite_diff(lambda v: loss(Tensor(v), {k: Tensor(p.data) for k, p in params.items()}).item(), x)
print("input          rel err %.2e" % relative_error(xt.grad, fd_x))

for name in sorted(params):
    def f(v, name=name):
        ps = {k: Tensor(v if k == name else p.data) for k, p in params.items()}
        return loss(Tensor(x), ps).item()
    err = relative_error(params[name].grad, finite_diff(f, params[name].data))
    print(f"{name:<14s} rel err {err:.2e}")

###############################################################################
# Non-finite values never propagate silently.

try:
    Tensor([800.0]).exp()
except FloatingPointError as exc:
    print("caught:", exc)
