"""Regular and deformable 2-D convolution over single images laid out C x H x W.

Both convolutions share one accumulation routine that sums, per output
element, ``bias + w[0]x[0] + w[1]x[1] + ...`` in (in_channel, kernel point)
row-major order. Sampling at integer points with bilinear weights (1, 0, 0, 0)
reproduces the regular gather bit for bit, so a deformable convolution with an
all-zero offset field returns exactly what the regular one does.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .autograd import ShapeError, Tensor, make_result
from .module import Module, he_normal, param_zeros


@dataclass(frozen=True)
class KernelGeometry:
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kh % 2 == 0 or self.kw % 2 == 0:
            raise ValueError(f"kernel dims must be odd, got {self.kh}x{self.kw}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def num_points(self) -> int:
        return self.kh * self.kw

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        """Floor-mode output size; trailing rows/cols a stride cannot reach are skipped."""
        oh = (h + 2 * self.padding - self.kh) // self.stride + 1
        ow = (w + 2 * self.padding - self.kw) // self.stride + 1
        if oh < 1 or ow < 1 or h + 2 * self.padding < self.kh or w + 2 * self.padding < self.kw:
            raise ShapeError(
                f"input {h}x{w} with kernel {self.kh}x{self.kw}, stride {self.stride}, "
                f"padding {self.padding} gives an empty output")
        return oh, ow

    def grid(self, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        """Integer sampling rows/cols of the regular grid, each shaped (K, Ho*Wo)."""
        oh, ow = self.output_size(h, w)
        py = np.arange(oh) * self.stride - self.padding
        px = np.arange(ow) * self.stride - self.padding
        ky, kx = np.meshgrid(np.arange(self.kh), np.arange(self.kw), indexing="ij")
        ys = ky.reshape(-1, 1, 1) + py.reshape(1, -1, 1)
        xs = kx.reshape(-1, 1, 1) + px.reshape(1, 1, -1)
        ys, xs = np.broadcast_arrays(ys, xs)
        k = self.num_points
        return ys.reshape(k, -1), xs.reshape(k, -1)


# -- shared accumulation ----------------------------------------------------------
@njit(cache=True)
def _accumulate_kernel(cols, w, b):
    o_n, c_n, k_n = w.shape
    p_n = cols.shape[2]
    y = np.empty((o_n, p_n))
    for o in range(o_n):
        for p in range(p_n):
            y[o, p] = b[o]
    for c in range(c_n):
        for k in range(k_n):
            for o in range(o_n):
                wv = w[o, c, k]
                for p in range(p_n):
                    y[o, p] += wv * cols[c, k, p]
    return y


def accumulate(cols: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    """y[o, p] = b[o] + sum_{c, k} w[o, c, k] * cols[c, k, p], summed in (c, k) order.

    Each product is rounded before it is added (no fused multiply-add), so the
    result matches a scalar loop in the same order exactly.
    """
    if b is None:
        b = np.zeros(w.shape[0])
    return _accumulate_kernel(np.ascontiguousarray(cols), np.ascontiguousarray(w),
                              np.ascontiguousarray(b, dtype=np.float64))


def im2col(x: np.ndarray, geom: KernelGeometry) -> np.ndarray:
    c, h, w = x.shape
    oh, ow = geom.output_size(h, w)
    pad = geom.padding
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    s = geom.stride
    cols = np.empty((c, geom.num_points, oh * ow))
    k = 0
    for i in range(geom.kh):
        for j in range(geom.kw):
            cols[:, k] = xp[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s].reshape(c, -1)
            k += 1
    return cols


def col2im(dcols: np.ndarray, shape: tuple[int, int, int], geom: KernelGeometry) -> np.ndarray:
    c, h, w = shape
    oh, ow = geom.output_size(h, w)
    pad = geom.padding
    s = geom.stride
    dxp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    k = 0
    for i in range(geom.kh):
        for j in range(geom.kw):
            dxp[:, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += dcols[:, k].reshape(c, oh, ow)
            k += 1
    return dxp[:, pad:pad + h, pad:pad + w] if pad else dxp


def _check_conv_inputs(x: Tensor, weight: Tensor, bias: Tensor | None) -> None:
    if x.ndim != 3:
        raise ShapeError(f"conv input must be C x H x W, got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv weight must be O x C x kh x kw, got {weight.shape}")
    if weight.shape[1] != x.shape[0]:
        raise ShapeError(f"input has {x.shape[0]} channels, kernel expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} outputs")


def _conv_weight_backward(g2: np.ndarray, cols: np.ndarray, weight: Tensor, bias: Tensor | None):
    o = g2.shape[0]
    if weight.requires_grad:
        weight.accumulate((g2 @ cols.reshape(-1, cols.shape[2]).T).reshape(weight.shape))
    if bias is not None and bias.requires_grad:
        bias.accumulate(g2.sum(axis=1).reshape(o))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation over the regular kh x kw grid."""
    _check_conv_inputs(x, weight, bias)
    o, c, kh, kw = weight.shape
    geom = KernelGeometry(kh, kw, stride, padding)
    oh, ow = geom.output_size(x.shape[1], x.shape[2])
    cols = im2col(x.data, geom)
    w3 = weight.data.reshape(o, c, kh * kw)
    y = accumulate(cols, w3, None if bias is None else bias.data)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def _bw(g):
        g2 = g.reshape(o, -1)
        _conv_weight_backward(g2, cols, weight, bias)
        if x.requires_grad:
            dcols = (w3.reshape(o, -1).T @ g2).reshape(cols.shape)
            x.accumulate(col2im(dcols, x.shape, geom))

    return make_result(y.reshape(o, oh, ow), parents, "conv2d", _bw)


# -- bilinear sampling ------------------------------------------------------------
class _Bilinear:
    """Corner indices and weights for sampling a C x H x W map at float points.

    Corners outside the map are phantom zeros: their weight is kept for the
    coordinate derivative but the gathered value is 0.
    """

    def __init__(self, h: int, w: int, ys: np.ndarray, xs: np.ndarray):
        self.h, self.w = h, w
        y0 = np.floor(ys)
        x0 = np.floor(xs)
        ly = ys - y0
        lx = xs - x0
        hy, hx = 1.0 - ly, 1.0 - lx
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        cy = (y0, y0, y0 + 1, y0 + 1)
        cx = (x0, x0 + 1, x0, x0 + 1)
        self.weights = (hy * hx, hy * lx, ly * hx, ly * lx)
        # d weight / d y and d weight / d x per corner
        self.dwy = (-hx, -lx, hx, lx)
        self.dwx = (-hy, hy, -ly, ly)
        self.valid = tuple((yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) for yy, xx in zip(cy, cx))
        self.index = tuple(np.where(v, np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1), 0)
                           for v, yy, xx in zip(self.valid, cy, cx))

    def corner_values(self, flat: np.ndarray, n: int) -> np.ndarray:
        """Value of corner ``n`` for every channel, zero when outside the map."""
        v = flat[:, self.index[n]]
        return np.where(self.valid[n], v, 0.0)

    def gather(self, x: np.ndarray) -> np.ndarray:
        flat = x.reshape(x.shape[0], -1)
        out = self.corner_values(flat, 0) * self.weights[0]
        for n in range(1, 4):
            out += self.corner_values(flat, n) * self.weights[n]
        return out

    def scatter(self, g: np.ndarray, c: int) -> np.ndarray:
        """Adjoint of ``gather``: route ``g`` (C x ...) back onto a C x H x W map."""
        hw = self.h * self.w
        base = (np.arange(c) * hw).reshape((c,) + (1,) * (g.ndim - 1))
        total = np.zeros(c * hw)
        for n in range(4):
            wv = np.where(self.valid[n], self.weights[n], 0.0)
            idx = (base + self.index[n]).reshape(-1)
            total += np.bincount(idx, weights=(g * wv).reshape(-1), minlength=c * hw)
        return total.reshape(c, self.h, self.w)

    def coord_grads(self, x: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """d(sum g * sample)/d(ys), d/d(xs), summed over channels."""
        flat = x.reshape(x.shape[0], -1)
        gy = np.zeros(g.shape[1:])
        gx = np.zeros(g.shape[1:])
        for n in range(4):
            v = (self.corner_values(flat, n) * g).sum(axis=0)
            gy += v * self.dwy[n]
            gx += v * self.dwx[n]
        return gy, gx


def bilinear_sample(x: Tensor, points) -> Tensor:
    """Sample ``x`` (C x H x W) at float (y, x) points; returns C x len(points).

    ``points`` may be a Tensor of shape (N, 2), in which case gradients also
    flow into the coordinates.
    """
    pts = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float64)
    pts = pts.reshape(-1, 2)
    c, h, w = x.shape
    bl = _Bilinear(h, w, pts[:, 0], pts[:, 1])
    out = bl.gather(x.data)
    parents = (x, points) if isinstance(points, Tensor) else (x,)

    def _bw(g):
        if x.requires_grad:
            x.accumulate(bl.scatter(g, c))
        if isinstance(points, Tensor) and points.requires_grad:
            gy, gx = bl.coord_grads(x.data, g)
            points.accumulate(np.stack([gy, gx], axis=1).reshape(points.shape))

    return make_result(out, parents, "bilinear_sample", _bw)


# -- deformable convolution ---------------------------------------------------------
def deform_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, offsets: Tensor,
                  stride: int = 1, padding: int = 0) -> Tensor:
    """Convolution whose kernel points are displaced by per-location learned offsets.

    ``offsets`` is 2K x Ho x Wo ordered (dy_1, dx_1, ..., dy_K, dx_K); a single
    offset group is shared across input channels.
    """
    _check_conv_inputs(x, weight, bias)
    o, c, kh, kw = weight.shape
    geom = KernelGeometry(kh, kw, stride, padding)
    h, w = x.shape[1:]
    oh, ow = geom.output_size(h, w)
    k = geom.num_points
    if offsets.shape != (2 * k, oh, ow):
        raise ShapeError(f"offset field must be {(2 * k, oh, ow)} for this kernel, got {offsets.shape}")
    base_y, base_x = geom.grid(h, w)
    off = offsets.data.reshape(k, 2, oh * ow)
    bl = _Bilinear(h, w, base_y + off[:, 0], base_x + off[:, 1])
    cols = bl.gather(x.data)  # C x K x P
    w3 = weight.data.reshape(o, c, k)
    y = accumulate(cols, w3, None if bias is None else bias.data)
    parents = [x, weight, offsets] + ([] if bias is None else [bias])

    def _bw(g):
        g2 = g.reshape(o, -1)
        _conv_weight_backward(g2, cols, weight, bias)
        if x.requires_grad or offsets.requires_grad:
            dcols = (w3.reshape(o, -1).T @ g2).reshape(cols.shape)
            if x.requires_grad:
                x.accumulate(bl.scatter(dcols, c))
            if offsets.requires_grad:
                gy, gx = bl.coord_grads(x.data, dcols)
                offsets.accumulate(np.stack([gy, gx], axis=1).reshape(offsets.shape))

    return make_result(y.reshape(o, oh, ow), parents, "deform_conv2d", _bw)


# -- layers -------------------------------------------------------------------------
class ConvKernel(Module):
    """Weights ``O x C x kh x kw`` plus bias, with stride and zero padding."""

    def __init__(self, in_ch: int, out_ch: int, size: int = 3, stride: int = 1,
                 padding: int | None = None, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        self.geometry = KernelGeometry(size, size, stride, size // 2 if padding is None else padding)
        if zero_init or rng is None:
            self.weight = param_zeros(out_ch, in_ch, size, size)
        else:
            self.weight = he_normal(rng, (out_ch, in_ch, size, size), in_ch * size * size)
        self.bias = param_zeros(out_ch)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        g = self.geometry
        return conv2d(x, self.weight, self.bias, g.stride, g.padding)


def offset_head(in_ch: int, geometry: KernelGeometry) -> ConvKernel:
    """Zero-initialised regular conv producing the 2K-channel offset field for ``geometry``."""
    head = ConvKernel(in_ch, 2 * geometry.num_points, geometry.kh, geometry.stride,
                      geometry.padding, zero_init=True)
    return head


class DeformConv(Module):
    """A ConvKernel whose sampling grid is displaced by its own offset head."""

    def __init__(self, in_ch: int, out_ch: int, size: int = 3, stride: int = 1,
                 padding: int | None = None, rng: np.random.Generator | None = None):
        self.kernel = ConvKernel(in_ch, out_ch, size, stride, padding, rng=rng)
        self.offset = offset_head(in_ch, self.kernel.geometry)

    @property
    def geometry(self) -> KernelGeometry:
        return self.kernel.geometry

    def offsets(self, x: Tensor) -> Tensor:
        return self.offset(x)

    def __call__(self, x: Tensor) -> Tensor:
        g = self.kernel.geometry
        return deform_conv2d(x, self.kernel.weight, self.kernel.bias, self.offset(x),
                             g.stride, g.padding)
