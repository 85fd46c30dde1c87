"""Randomized finite-difference checks for every differentiable building block.

``unit_suite`` covers the layers and losses one at a time; ``model_check``
differentiates the whole network's training objective on a small input.
Both run in float64. Ops are looked up on their modules at call time so a
test can swap one out and watch the suite catch it.
"""

from dataclasses import dataclass

import numpy as np

from . import layers, losses, tensor
from .gradcheck import grad_check
from .losses import ObjectiveConfig, combined_objective
from .model import DonetConfig, build, forward
from .tensor import Tensor, hadamard, make_rng, sum_all

F64 = np.float64


@dataclass
class CaseResult:
    name: str
    report: object

    @property
    def passed(self):
        return self.report.passed


def _leaf(rng, shape, scale=1.0, low=None, high=None):
    if low is not None:
        data = rng.uniform(low, high, shape)
    else:
        data = scale * rng.standard_normal(shape)
    return Tensor(data.astype(F64), requires_grad=True)


def _projector(rng, shape):
    """Fixed random weights turning a tensor into a scalar with a rich gradient."""
    return Tensor(rng.standard_normal(shape))


def _project(out, weights):
    return sum_all(hadamard(out, weights))


def _conv_cases(rng):
    for dilation in (1, 2, 4, 8):
        for j in range(6):
            k = 3 if j < 5 else 1
            stride = 2 if j == 4 else 1
            padding = [dilation, 0, dilation * (k - 1) // 2 + 1, dilation, 0, 0][j]
            cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            size = dilation * (k - 1) + int(rng.integers(2, 6))
            x = _leaf(rng, (2, cin, size, size))
            w = _leaf(rng, (cout, cin, k, k), 0.5)
            b = _leaf(rng, (1, cout, 1, 1))
            ho = layers.conv_output_size(size, k, stride, padding, dilation)
            proj = _projector(rng, (2, cout, ho, ho))
            name = f"conv2d[d={dilation},k={k},s={stride},p={padding}]"
            yield name, (lambda x=x, w=w, b=b, s=stride, p=padding, d=dilation, proj=proj:
                         _project(layers.conv2d(x, w, b, s, p, d), proj)), [x, w, b]


def _tconv_cases(rng):
    for j in range(10):
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        size = int(rng.integers(2, 5))
        k, stride, padding = [(2, 2, 0), (3, 2, 1), (3, 1, 1), (4, 2, 1), (2, 1, 0)][j % 5]
        x = _leaf(rng, (2, cin, size, size))
        w = _leaf(rng, (cin, cout, k, k), 0.5)
        b = _leaf(rng, (1, cout, 1, 1))
        ho = stride * (size - 1) + k - 2 * padding
        proj = _projector(rng, (2, cout, ho, ho))
        yield (f"conv_transpose2d[k={k},s={stride},p={padding}]",
               lambda x=x, w=w, b=b, s=stride, p=padding, proj=proj:
               _project(layers.conv_transpose2d(x, w, b, s, p), proj), [x, w, b])


def _pool_cases(rng):
    for j in range(10):
        c, size = int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
        # A permutation keeps every value distinct, so no window has a tie.
        x = Tensor(rng.permutation(2 * c * size * size).reshape(2, c, size, size) / 7.0,
                   requires_grad=True)
        proj = _projector(rng, (2, c, size // 2, size // 2))
        yield "maxpool2x2", (lambda x=x, proj=proj: _project(layers.maxpool2x2(x), proj)), [x]
    for _ in range(5):
        c, size = int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))
        x = _leaf(rng, (2, c, size, size))
        proj = _projector(rng, (2, c, size // 2, size // 2))
        yield "avgpool2x2", (lambda x=x, proj=proj: _project(layers.avgpool2x2(x), proj)), [x]


def _batchnorm_cases(rng):
    for _ in range(10):
        n, c, size = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = _leaf(rng, (n, c, size, size), 2.0)
        scale = _leaf(rng, (1, c, 1, 1), low=0.5, high=1.5)
        shift = _leaf(rng, (1, c, 1, 1))
        mean, var = np.zeros((1, c, 1, 1)), np.ones((1, c, 1, 1))
        proj = _projector(rng, (n, c, size, size))
        yield ("batchnorm[train]",
               lambda x=x, s=scale, b=shift, m=mean, v=var, proj=proj:
               _project(layers.batchnorm(x, s, b, m.copy(), v.copy(), True), proj),
               [x, scale, shift])


def _convlstm_cases(rng):
    for j in range(10):
        cin, hid, size = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 5))
        cell = layers.ConvLSTMCell(cin, hid, rng=rng, dtype=F64)
        for t in (cell.W_ci, cell.W_cf, cell.W_co):
            t.data[...] = rng.standard_normal(t.shape) * 0.5
        F = _leaf(rng, (2, cin, size, size))
        if j < 8:
            H = _leaf(rng, (2, hid, size, size), 0.5)
            C = _leaf(rng, (2, hid, size, size), 0.5)
            extra = [H, C]
        else:
            H, C = cell.zero_state(F)
            extra = []
        proj_h = _projector(rng, (2, hid, size, size))
        proj_c = _projector(rng, (2, hid, size, size))

        def fn(cell=cell, F=F, H=H, C=C, ph=proj_h, pc=proj_c):
            h_t, c_t = layers.convlstm_step(cell, F, H, C)
            return _project(h_t, ph) + _project(c_t, pc)

        name = "convlstm_step" + ("[zero state]" if not extra else "")
        yield name, fn, [F] + extra + cell.parameters()


def _attention_cases(rng):
    for _ in range(10):
        skip, gate, size = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 5))
        g = layers.AttentionGate(skip, gate, rng=rng, dtype=F64)
        for t in g.parameters():
            t.data[...] = rng.standard_normal(t.shape) * 0.7
        H = _leaf(rng, (2, skip, size, size))
        R = _leaf(rng, (2, gate, size, size))
        proj = _projector(rng, (2, skip, size, size))
        yield ("attention_gate", lambda g=g, H=H, R=R, proj=proj:
               _project(layers.attention_gate(g, H, R), proj), [H, R] + g.parameters())


def _loss_cases(rng):
    params = losses.LossParams()
    for _ in range(10):
        shape = (int(rng.integers(1, 3)), 1, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        yhat = _leaf(rng, shape, low=0.05, high=0.95)
        y = Tensor((rng.random(shape) < 0.5).astype(F64))
        yield "dice_loss", (lambda p=yhat, y=y: losses.dice_loss(p, y, params.epsilon)), [yhat]
    for _ in range(10):
        shape = (int(rng.integers(1, 3)), 1, int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        yhat = _leaf(rng, shape, low=0.05, high=0.95)
        y = Tensor((rng.random(shape) < 0.5).astype(F64))
        yield ("focal_tversky_loss",
               lambda p=yhat, y=y: losses.focal_tversky_loss(p, y, params), [yhat])


def _elementwise_cases(rng):
    for op in ("sigmoid", "tanh", "relu", "hadamard", "div"):
        for _ in range(2):
            shape = (2, 2, 3, 3)
            a = _leaf(rng, shape)
            b = _leaf(rng, shape, low=0.5, high=2.0)
            proj = _projector(rng, shape)
            inputs = [a, b] if op in ("hadamard", "div") else [a]
            yield (op, lambda op=op, a=a, b=b, proj=proj:
                   _project(tensor.elementwise(op, a, b if op in ("hadamard", "div") else None),
                            proj), inputs)


FAMILIES = {
    "conv2d": _conv_cases,
    "conv_transpose2d": _tconv_cases,
    "pool": _pool_cases,
    "batchnorm": _batchnorm_cases,
    "convlstm": _convlstm_cases,
    "attention": _attention_cases,
    "losses": _loss_cases,
    "elementwise": _elementwise_cases,
}


def unit_suite(seed=0, tol=1e-4, samples=60, only=None):
    """Run every randomized layer/loss case; returns a list of CaseResult."""
    results = []
    for family, make in FAMILIES.items():
        if only is not None and family not in only:
            continue
        rng = make_rng(seed, len(results))
        for name, fn, inputs in make(rng):
            report = grad_check(fn, inputs, tol=tol, samples=samples, seed=len(results))
            results.append(CaseResult(name, report))
    return results


def model_check(seed=0, tol=1e-3, samples=200, size=16, base=4, stages=4):
    """Finite-difference check of the full training objective w.r.t. all parameters."""
    cfg = DonetConfig(input_size=(size, size), base_channels=base, stages=stages)
    model = build(cfg, seed=seed, dtype=F64)
    rng = make_rng(seed, 99)
    image = Tensor(rng.random((2, cfg.input_channels, size, size)))
    target = Tensor((rng.random((2, 1, size, size)) < 0.4).astype(F64))
    objective = ObjectiveConfig()
    buffers = [(t, t.data.copy()) for _, t in model.named_buffers()]

    def fn():
        # Batchnorm updates its running statistics on every call; keep them fixed.
        for t, saved in buffers:
            t.data[...] = saved
        return combined_objective(objective, forward(model, image, train=True), target).total

    report = grad_check(fn, model.parameters(), tol=tol, samples=samples, seed=seed)
    return CaseResult(f"donet[{size}x{size},base={base},T={len(cfg.dilation_rates)}]", report)
