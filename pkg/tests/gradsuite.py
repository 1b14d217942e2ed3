"""Finite-difference gradient checks, one function per differentiable operation.

Each check returns the worst relative error over the checked inputs for one seed.
Inputs are kept away from kinks (relu at 0, smooth-L1 at |d| = beta, bilinear
sampling at integer coordinates) so central differences are valid.
"""
from __future__ import annotations

import numpy as np

from cdecnet.autograd import Tensor, add, matmul, mul, relu, sigmoid, tsum
from cdecnet.backbone import FeaturePyramid
from cdecnet.deform import bilinear_sample, conv2d, deform_conv2d
from cdecnet.detector import CascadeConfig, DetectorModel, cascade_losses, roi_align
from cdecnet.losses import sigmoid_binary_cross_entropy, smooth_l1, softmax_cross_entropy
from oracles import numeric_grad, rel_err


def _away_from_zero(rng, shape, margin=0.05):
    v = rng.uniform(margin, 1.0, shape)
    return v * rng.choice([-1.0, 1.0], shape)


def _fractional(rng, shape, lo, hi, margin=0.05):
    """Uniform values whose fractional part stays at least ``margin`` from an integer."""
    base = rng.integers(lo, hi, shape).astype(np.float64)
    return base + rng.uniform(margin, 1 - margin, shape)


def check(fn, arrays: list[np.ndarray], seed: int, scalar: bool = False) -> float:
    """Worst rel-err of d(sum(R * fn(...)))/d(input) over every entry of every input."""
    rng = np.random.default_rng(seed + 10_000)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*tensors)
    r = np.ones(()) if scalar else rng.normal(size=out.shape)
    loss = out if scalar else tsum(mul(out, Tensor(r)))
    loss.backward()

    def f():
        o = fn(*tensors).data
        return float(o) if scalar else float(np.sum(o * r))

    worst = 0.0
    for t in tensors:
        grad = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        worst = max(worst, rel_err(grad, numeric_grad(f, t.data)))
    return worst


# -- elementwise, matmul, losses ---------------------------------------------------------------
def elementwise(seed: int) -> float:
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    e1 = check(lambda x, y: add(x, y), [a, b], seed)
    e2 = check(lambda x, y: mul(x, y), [a, b], seed)
    e3 = check(lambda x: relu(x), [_away_from_zero(rng, (3, 4))], seed)
    e4 = check(lambda x: sigmoid(x), [rng.normal(scale=3.0, size=(3, 4))], seed)
    return max(e1, e2, e3, e4)


def matmul_grad(seed: int) -> float:
    rng = np.random.default_rng(seed)
    return check(matmul, [rng.normal(size=(3, 5)), rng.normal(size=(5, 2))], seed)


def losses(seed: int) -> float:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, 6)
    e1 = check(lambda z: softmax_cross_entropy(z, labels), [rng.normal(size=(6, 3))], seed, scalar=True)
    targets = rng.integers(0, 2, 7).astype(np.float64)
    e2 = check(lambda z: sigmoid_binary_cross_entropy(z, targets), [rng.normal(scale=2, size=7)], seed,
               scalar=True)
    target = rng.normal(size=(5, 4))
    diff = _away_from_zero(rng, (5, 4), 0.05) * 2.0
    diff[np.abs(np.abs(diff) - 1.0) < 0.05] += 0.2
    e3 = check(lambda p: smooth_l1(p, target, 1.0), [target + diff], seed, scalar=True)
    return max(e1, e2, e3)


# -- convolutions and sampling ---------------------------------------------------------------
def conv(seed: int) -> float:
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    x = rng.normal(size=(2, 7, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    return check(lambda x_, w_, b_: conv2d(x_, w_, b_, stride, pad), [x, w, b], seed)


def bilinear(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 5, 6))
    pts = np.stack([_fractional(rng, 9, -1, 5), _fractional(rng, 9, -1, 6)], axis=1)
    return check(lambda x_, p_: bilinear_sample(x_, p_), [x, pts], seed)


def deform(seed: int) -> float:
    rng = np.random.default_rng(seed)
    stride = int(rng.integers(1, 3))
    x = rng.normal(size=(2, 6, 5))
    w = rng.normal(size=(2, 2, 3, 3))
    b = rng.normal(size=2)
    oh, ow = (6 + 2 - 3) // stride + 1, (5 + 2 - 3) // stride + 1
    off = _fractional(rng, (18, oh, ow), -2, 2)
    return check(lambda x_, w_, b_, o_: deform_conv2d(x_, w_, b_, o_, stride, 1), [x, w, b, off], seed)


def roi(seed: int) -> float:
    rng = np.random.default_rng(seed)
    levels = [rng.normal(size=(3, 8, 8)), rng.normal(size=(3, 4, 4))]
    x1 = rng.uniform(0, 14, 5)
    y1 = rng.uniform(0, 14, 5)
    side = rng.uniform(6, 18, (5, 2))
    rois = np.stack([x1, y1, x1 + side[:, 0], y1 + side[:, 1]], axis=1)
    lv = rng.integers(0, 2, 5)

    def fn(l0, l1):
        return roi_align(FeaturePyramid([l0, l1], [4, 8]), rois, 2, levels=lv)

    return check(fn, levels, seed)


# -- full model --------------------------------------------------------------------------------------
MICRO_SIZE = 32


def micro_config() -> CascadeConfig:
    """Two backbone stages (the second deformable), two cascade stages, 32x32 input."""
    return CascadeConfig(stage_ious=(0.5, 0.6), stage_stds=((0.1, 0.1, 0.2, 0.2), (0.05, 0.05, 0.1, 0.1)),
                         channels=(4, 6), deformable_from=1, stem_channels=3, fpn_width=4, head_hidden=6,
                         roi_out=2, anchor_scale=4.0, rpn_batch=32, rpn_pre_nms=40, rpn_post_nms=12,
                         roi_batch=8, roi_finest_scale=16.0)


def micro_model(seed: int) -> tuple[DetectorModel, np.ndarray, np.ndarray]:
    """Model with every zero-initialised tensor randomised, plus a page and its GT boxes."""
    rng = np.random.default_rng(seed)
    model = DetectorModel(micro_config(), seed=seed)
    for name, p in model.named_parameters():
        if not np.any(p.data):
            scale = 0.05 if "offset" in name else 0.2
            p.data = rng.normal(0.0, scale, p.shape)
    page = np.ones((MICRO_SIZE, MICRO_SIZE))
    page[6:26:3, 5:28] = 0.2
    page[6:26, 5:28:4] = 0.3
    page += rng.uniform(-0.05, 0.05, page.shape)
    gts = np.array([[5.0, 6.0, 28.0, 26.0]])
    return model, np.clip(page, 0, 1), gts


def full_model(seed: int, coords_per_param: int = 1) -> float:
    """Worst per-parameter rel-err over ``coords_per_param`` random entries of every tensor."""
    model, page, gts = micro_model(seed)
    base = cascade_losses(model, page, gts, [1], np.random.default_rng(seed))
    base.total.backward()
    replay = base.stages

    def f():
        return float(cascade_losses(model, page, gts, [1], np.random.default_rng(seed), replay).total.data)

    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for _, p in model.named_parameters():
        grad = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).copy()
        coords = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
        worst = max(worst, rel_err(grad[coords], numeric_grad(f, p.data, coords)))
        p.grad = None
    return worst


OPS = {
    "elementwise": elementwise,
    "matmul": matmul_grad,
    "losses": losses,
    "conv2d": conv,
    "bilinear_sample": bilinear,
    "deform_conv2d": deform,
    "roi_align": roi,
}
