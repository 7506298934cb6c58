"""Finite-difference gradient suite over every differentiable primitive and
two small end-to-end pipelines.

Each case builds a random scalar objective from fresh inputs; ``run_suite``
repeats every case over several seeds in 64-bit precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, check_gradients, ops, precision
from .tensor.nn import Parameter

PRIMITIVE_TOL = 1e-4
END_TO_END_TOL = 1e-3


def _leaf(rng, *shape, low=None, high=None) -> Tensor:
    data = rng.uniform(low, high, size=shape) if low is not None else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


def _weights(rng, shape) -> np.ndarray:
    return rng.standard_normal(shape)


def _scalar(out: Tensor, w: np.ndarray) -> Tensor:
    return ops.sum(out * w)


def _unary(op, low=None, high=None):
    def case(rng):
        x = _leaf(rng, 3, 4, low=low, high=high)
        w = _weights(rng, (3, 4))
        return (lambda: _scalar(op(x), w)), [x]
    return case


def _binary(op, positive_b=False):
    def case(rng):
        a = _leaf(rng, 3, 4)
        b = _leaf(rng, 1, 4, low=0.5, high=2.0) if positive_b else _leaf(rng, 1, 4)
        w = _weights(rng, (3, 4))
        return (lambda: _scalar(op(a, b), w)), [a, b]
    return case


def _clamp(rng):
    # keep entries away from the kink
    x = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    w = _weights(rng, (3, 4))
    return (lambda: _scalar(ops.clamp_min(x, 0.0), w)), [x]


def _relu(rng):
    x = Tensor(rng.choice([-1, 1], size=(3, 4)) * rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
    w = _weights(rng, (3, 4))
    return (lambda: _scalar(ops.relu(x), w)), [x]


def _reduce(op):
    def case(rng):
        x = _leaf(rng, 2, 3, 4)
        w = _weights(rng, (2, 4))
        return (lambda: _scalar(op(x, axis=1), w)), [x]
    return case


def _reshape(rng):
    x = _leaf(rng, 2, 6)
    w = _weights(rng, (3, 4))
    return (lambda: _scalar(ops.reshape(x, (3, 4)), w)), [x]


def _transpose(rng):
    x = _leaf(rng, 2, 3, 4)
    w = _weights(rng, (4, 2, 3))
    return (lambda: _scalar(ops.transpose(x, (2, 0, 1)), w)), [x]


def _swapaxes(rng):
    x = _leaf(rng, 2, 3, 4)
    w = _weights(rng, (2, 4, 3))
    return (lambda: _scalar(ops.swapaxes(x, -1, -2), w)), [x]


def _concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 2)
    w = _weights(rng, (2, 5))
    return (lambda: _scalar(ops.concat([a, b], axis=1), w)), [a, b]


def _getitem(rng):
    x = _leaf(rng, 4, 5)
    w = _weights(rng, (3, 2))
    return (lambda: _scalar(x[1:4, ::2][:, :2], w)), [x]


def _take_rows(rng):
    table = _leaf(rng, 5, 3)
    idx = rng.integers(0, 5, size=7)
    w = _weights(rng, (7, 3))
    return (lambda: _scalar(ops.take_rows(table, idx), w)), [table]


def _matmul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    w = _weights(rng, (2, 3, 5))
    return (lambda: _scalar(ops.matmul(a, b), w)), [a, b]


def _softmax(rng):
    x = _leaf(rng, 3, 5)
    w = _weights(rng, (3, 5))
    return (lambda: _scalar(ops.softmax_lastdim(x), w)), [x]


def _log_softmax(rng):
    x = _leaf(rng, 3, 5)
    w = _weights(rng, (3, 5))
    return (lambda: _scalar(ops.log_softmax_lastdim(x), w)), [x]


def _layer_norm(rng):
    x = _leaf(rng, 3, 6)
    w = _weights(rng, (3, 6))
    return (lambda: _scalar(ops.layer_norm(x), w)), [x]


def _cross_entropy(rng):
    logits = _leaf(rng, 6, 4)
    labels = rng.integers(0, 4, size=6)
    labels[0] = -1
    weights = rng.uniform(0.5, 2.0, size=4)
    return (lambda: ops.cross_entropy(logits, labels, class_weights=weights, ignore_label=-1)), [logits]


def _bilinear(rng):
    plane = _leaf(rng, 2, 4, 3, 2)
    uv = rng.uniform(0.05, 0.95, size=(6, 2))
    w = _weights(rng, (2, 6, 2))
    return (lambda: _scalar(ops.bilinear_sample_2d(plane, uv), w)), [plane]


def _conv(stride):
    def case(rng):
        x = _leaf(rng, 1, 4, 4, 2, 2)
        k = _leaf(rng, 3, 3, 3, 2, 3)
        b = _leaf(rng, 3)
        out = ops.conv3d(x, k, b, stride=stride)
        w = _weights(rng, out.shape)
        return (lambda: _scalar(ops.conv3d(x, k, b, stride=stride), w)), [x, k, b]
    return case


def _stop_gradient(rng):
    x = _leaf(rng, 3, 4)
    w = _weights(rng, (3, 4))
    return (lambda: _scalar(x * x + ops.stop_gradient(x) * 0.0, w)), [x]


PRIMITIVES: dict[str, Callable] = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, positive_b=True),
    "neg": _unary(ops.neg),
    "power": _unary(lambda x: ops.power(x, 1.7), low=0.3, high=2.0),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, low=0.3, high=3.0),
    "sqrt": _unary(ops.sqrt, low=0.3, high=3.0),
    "tanh": _unary(ops.tanh),
    "sigmoid": _unary(ops.sigmoid),
    "silu": _unary(ops.silu),
    "gelu": _unary(ops.gelu),
    "relu": _relu,
    "clamp_min": _clamp,
    "sum": _reduce(ops.sum),
    "mean": _reduce(ops.mean),
    "reshape": _reshape,
    "transpose": _transpose,
    "swapaxes": _swapaxes,
    "concat": _concat,
    "getitem": _getitem,
    "take_rows": _take_rows,
    "stop_gradient": _stop_gradient,
    "matmul": _matmul,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "layer_norm": _layer_norm,
    "cross_entropy": _cross_entropy,
    "bilinear_sample_2d": _bilinear,
    "conv3d_stride1": _conv(1),
    "conv3d_stride2": _conv(2),
}


def _randomise(module, rng, scale=0.3) -> None:
    # zero-initialised gates and heads would hide most of the graph
    for p in module.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def micro_dit_case(rng):
    from .dit import DiT, DiTConfig
    from .triplane import TriplaneLayout

    cfg = DiTConfig(TriplaneLayout(4, 4, 2, 2), patch=2, embed=8, depth=1, heads=2, mlp_ratio=2, time_bands=2)
    net = DiT(cfg, rng)
    _randomise(net, rng)
    p = cfg.layout.n_tokens
    h = Tensor(rng.standard_normal((2, p, 2)), requires_grad=True)
    cond = rng.standard_normal((2, p, 2))
    t, d = rng.random(2), rng.random(2) * 0.5
    w = _weights(rng, (2, p, 2))
    params = net.parameters()
    picks = [params[i] for i in sorted(rng.choice(len(params), size=4, replace=False))]
    return (lambda: _scalar(net(h, cond, t, d), w)), [h, *picks]


def micro_codec_case(rng):
    """Decoder pipeline on a 4 x 4 x 2 grid, gradient with respect to the triplane."""
    from .codec import CodecConfig, TriplaneCodec, codec_loss
    from .triplane import TriplaneLayout

    cfg = CodecConfig(dims=(4, 4, 2), num_classes=3, layout=TriplaneLayout(2, 2, 1, 4), heads=2, width=8,
                      self_attn_layers=1, fourier_bands=2, decoder_hidden=8, conv_hidden=4)
    codec = TriplaneCodec(cfg, rng)
    _randomise(codec.decoder, rng)
    gt = rng.integers(0, 3, size=(1, 4, 4, 2))
    lat = Parameter(rng.standard_normal((1, cfg.layout.n_tokens, 4)))
    return (lambda: codec_loss(codec.decode_grid(lat), gt)[0]), [lat]


END_TO_END: dict[str, Callable] = {"micro_dit": micro_dit_case, "micro_codec": micro_codec_case}


@dataclass
class GradResult:
    name: str
    seed: int
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def run_suite(trials_per_case: int = 3, seed: int = 0, step: float = 1e-5) -> list[GradResult]:
    results = []
    with precision(np.float64):
        for group, tol in ((PRIMITIVES, PRIMITIVE_TOL), (END_TO_END, END_TO_END_TOL)):
            for name, case in group.items():
                for trial in range(trials_per_case):
                    s = seed * 100_003 + trial
                    fn, inputs = case(np.random.default_rng([s, len(name)]))
                    results.append(GradResult(name, s, check_gradients(fn, inputs, step), tol))
    return results
