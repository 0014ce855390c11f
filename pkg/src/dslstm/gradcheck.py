"""Central finite-difference checks of every differentiable op, in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .model import DsLstmLayer, DsLstmState, LstmLayer, ModelConfig, align_time, ds_lstm_cell, lstm_cell
from .tensor import Tensor

TOLERANCE = 1e-4
INSTANCES = 5


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= TOLERANCE


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def numeric_gradients(fn: Callable[[], Tensor], leaves: list[Tensor], h: float = 1e-6) -> list[np.ndarray]:
    out = []
    for t in leaves:
        g = np.zeros_like(t.data)
        flat, gflat = t.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def check_gradients(fn: Callable[[], Tensor], leaves: list[Tensor], rng: np.random.Generator) -> float:
    """Max relative error between autodiff and finite differences of a random projection of ``fn``."""
    probe = rng.standard_normal(fn().shape)

    def scalar():
        out = fn()
        return tn.sum(tn.mul(out, Tensor(probe))) if out.ndim else out

    for t in leaves:
        t.zero_grad()
    scalar().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves]
    numeric = numeric_gradients(scalar, leaves)
    # one vector over all leaves: a bias feeding a training-mode batch norm has an
    # exactly-zero gradient, and a per-leaf ratio would just compare rounding noise
    return relative_error(np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric]))


def _leaf(rng, *shape, low=None, high=None):
    data = rng.uniform(low, high, size=shape) if low is not None else rng.standard_normal(shape)
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def _cast(module, dtype=np.float64):
    for p in module.named_parameters().values():
        p.data = p.data.astype(dtype)
    return module


def _primitive_cases():
    """Each entry builds (fn, leaves) from an rng."""

    def binary(op, bias=False):
        def make(rng):
            m, n = rng.integers(1, 5, size=2)
            a = _leaf(rng, m, n)
            b = _leaf(rng, n) if bias else _leaf(rng, m, n)
            return (lambda: op(a, b)), [a, b]
        return make

    def unary(op, shape=(3, 4)):
        def make(rng):
            a = _leaf(rng, *shape)
            return (lambda: op(a)), [a]
        return make

    def matmul(rng):
        m, k, n = rng.integers(1, 5, size=3)
        a, b = _leaf(rng, m, k), _leaf(rng, k, n)
        return (lambda: tn.matmul(a, b)), [a, b]

    def concat(rng):
        a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
        return (lambda: tn.concat([a, b], axis=1)), [a, b]

    def stack(rng):
        a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 3)
        return (lambda: tn.stack([a, b], axis=0)), [a, b]

    def getitem(rng):
        a = _leaf(rng, 5, 4)
        return (lambda: tn.add(a[1:4:2], a[0:2])), [a]

    def conv_im2col(rng):
        x, k = _leaf(rng, 2, 1, 6, 6), _leaf(rng, 8, 1, 4, 4)
        return (lambda: tn.conv2d(x, k)), [x, k]

    def conv_shifted(rng):
        x, k = _leaf(rng, 1, 5, 6, 7), _leaf(rng, 2, 5, 4, 4)
        return (lambda: tn.conv2d(x, k)), [x, k]

    def maxpool(rng):
        x = _leaf(rng, 2, 2, 5, 6)
        return (lambda: tn.maxpool2d(x)), [x]

    def bn_train(rng):
        x, g, b = _leaf(rng, 5, 3), _leaf(rng, 3), _leaf(rng, 3)
        stats = tn.RunningStats.fresh(3, np.float64)
        return (lambda: tn.batchnorm(x, g, b, stats, training=True)), [x, g, b]

    def bn_eval(rng):
        x, g, b = _leaf(rng, 4, 3), _leaf(rng, 3), _leaf(rng, 3)
        stats = tn.RunningStats(rng.standard_normal(3), rng.uniform(0.5, 2, 3))
        return (lambda: tn.batchnorm(x, g, b, stats, training=False)), [x, g, b]

    def cross_entropy(rng):
        z = _leaf(rng, 5, 4)
        labels = rng.integers(0, 4, size=5)
        return (lambda: tn.cross_entropy(z, labels)), [z]

    def mean_axis(rng):
        a = _leaf(rng, 3, 4, 2)
        return (lambda: tn.mean(a, axis=1)), [a]

    def align(rng):
        xs, ys = _leaf(rng, 7, 2, 3), _leaf(rng, 3, 2, 2)
        return (lambda: tn.concat([tn.reshape(t, (-1,)) for t in align_time(xs, ys)], axis=0)), [xs, ys]

    return {
        "add": binary(tn.add),
        "add_bias": binary(tn.add, bias=True),
        "sub": binary(tn.sub),
        "mul": binary(tn.mul),
        "scale": unary(lambda a: tn.scale(a, -1.7)),
        "sigmoid": unary(tn.sigmoid),
        "tanh": unary(tn.tanh),
        "matmul": matmul,
        "transpose": unary(tn.transpose),
        "reshape": unary(lambda a: tn.reshape(a, (2, 6))),
        "permute": unary(lambda a: tn.permute(a, (2, 0, 1)), (2, 3, 4)),
        "getitem": getitem,
        "concat": concat,
        "stack": stack,
        "sum": unary(tn.sum),
        "mean_over_axis": mean_axis,
        "softmax": unary(tn.softmax),
        "log_softmax": unary(tn.log_softmax),
        "cross_entropy": cross_entropy,
        "conv2d_im2col": conv_im2col,
        "conv2d_shifted": conv_shifted,
        "maxpool2d": maxpool,
        "batchnorm_train": bn_train,
        "batchnorm_eval": bn_eval,
        "align_time": align,
    }


def _lstm_case(rng):
    layer = _cast(LstmLayer(3, 4, int(rng.integers(1 << 30)), "gc"))
    x, h, c = _leaf(rng, 2, 3), _leaf(rng, 2, 4), _leaf(rng, 2, 4)
    leaves = [x, h, c, *layer.named_parameters().values()]

    def fn():
        h2, c2 = lstm_cell(x, h, c, layer)
        return tn.concat([h2, c2], axis=1)

    return fn, leaves


def _ds_case(position: str):
    def make(rng):
        cfg = ModelConfig(rbn_position=position)
        layer = _cast(DsLstmLayer(3, 2, 4, int(rng.integers(1 << 30)), "gc", cfg))
        for g in DsLstmLayer.NORMED:
            rbn = getattr(layer, f"rbn_{g}")
            rbn.gamma.data = rng.uniform(0.5, 1.5, 4)
            rbn.beta.data = rng.standard_normal(4) * 0.1
        x, y = _leaf(rng, 3, 3), _leaf(rng, 3, 2)
        prev = DsLstmState(_leaf(rng, 3, 4), _leaf(rng, 3, 4))
        params = [p for k, p in layer.named_parameters().items() if not k.startswith("out_bn")]
        leaves = [x, y, prev.h, prev.C, *params]

        def fn():
            s = ds_lstm_cell(x, y, prev, layer, t=0)
            return tn.concat([s.h, s.C], axis=1)

        return fn, leaves

    return make


def _ds_sequence_case(rng):
    layer = _cast(DsLstmLayer(3, 2, 4, int(rng.integers(1 << 30)), "gc", ModelConfig()))
    xs, ys = _leaf(rng, 3, 3, 3), _leaf(rng, 3, 3, 2)
    return (lambda: layer.forward(xs, ys)), [xs, ys, *layer.named_parameters().values()]


SCOPES = {
    "primitives": lambda: _primitive_cases(),
    "lstm": lambda: {"lstm_cell": _lstm_case},
    "dslstm": lambda: {
        "ds_lstm_cell": _ds_case("post_sigmoid"),
        "ds_lstm_cell_pre_sigmoid": _ds_case("pre_sigmoid"),
        "ds_lstm_layer_sequence": _ds_sequence_case,
    },
}


def run_gradcheck(scope: str = "all", instances: int = INSTANCES, seed: int = 0) -> list[CheckResult]:
    if scope == "all":
        cases = {}
        for make in SCOPES.values():
            cases.update(make())
    elif scope in SCOPES:
        cases = SCOPES[scope]()
    else:
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected all, {', '.join(SCOPES)}")
    results = []
    for name, make in cases.items():
        rng = np.random.default_rng([seed, len(name), *name.encode()])
        worst = 0.0
        for _ in range(instances):
            fn, leaves = make(rng)
            worst = max(worst, check_gradients(fn, leaves, rng))
        results.append(CheckResult(name, worst, instances))
    return results
