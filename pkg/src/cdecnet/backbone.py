"""Dual composite backbone (assistant + lead) with deformable top stages and an FPN head.

A conventional stage maps the previous stage output through its own
transformation. In the composite arrangement the lead backbone's stage ``l``
instead consumes its own previous output plus a projection of the assistant's
stage-``l`` output, brought to the right width by a 1x1 conv and to the right
resolution by nearest-neighbour upsampling.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autograd import ShapeError, Tensor, add, relu, upsample_nearest
from .deform import ConvKernel, DeformConv
from .module import Module


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    num_blocks: int = 1
    downsample: bool = True
    deformable: bool = False

    def __post_init__(self):
        if self.out_channels <= 0 or self.num_blocks < 1:
            raise ValueError(f"invalid stage spec {self}")


def default_stages(channels: Sequence[int] = (16, 32, 64, 128),
                   deformable_from: int | None = 2) -> tuple[StageSpec, ...]:
    """One block per stage, every stage halves resolution, deformable from index ``deformable_from``."""
    return tuple(StageSpec(c, 1, True, deformable_from is not None and i >= deformable_from)
                 for i, c in enumerate(channels))


class ResidualBlock(Module):
    """relu(conv2(relu(conv1(x))) + shortcut(x)); conv2 is deformable when requested."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, deformable: bool,
                 rng: np.random.Generator):
        self.conv1 = ConvKernel(in_ch, out_ch, 3, stride, rng=rng)
        self.conv2 = DeformConv(out_ch, out_ch, 3, 1, rng=rng) if deformable \
            else ConvKernel(out_ch, out_ch, 3, 1, rng=rng)
        self.shortcut = ConvKernel(in_ch, out_ch, 1, stride, rng=rng) \
            if (stride != 1 or in_ch != out_ch) else None

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.conv1(x))
        h = self.conv2(h)
        skip = x if self.shortcut is None else self.shortcut(x)
        return relu(add(h, skip))


class Stage(Module):
    def __init__(self, in_ch: int, spec: StageSpec, rng: np.random.Generator):
        self.spec = spec
        self.in_channels = in_ch
        blocks = []
        for i in range(spec.num_blocks):
            stride = 2 if (spec.downsample and i == 0) else 1
            blocks.append(ResidualBlock(in_ch if i == 0 else spec.out_channels,
                                        spec.out_channels, stride, spec.deformable, rng))
        self.blocks = blocks

    def __call__(self, x: Tensor) -> Tensor:
        return stage_forward(x, self)


def stage_forward(x: Tensor, stage: Stage) -> Tensor:
    if x.shape[0] != stage.in_channels:
        raise ShapeError(f"stage expects {stage.in_channels} input channels, got {x.shape[0]}")
    for block in stage.blocks:
        x = block(x)
    return x


class Backbone(Module):
    """Stride-2 stem followed by a stack of stages."""

    def __init__(self, in_ch: int, stem_ch: int, specs: Sequence[StageSpec],
                 rng: np.random.Generator):
        self.stem = ConvKernel(in_ch, stem_ch, 3, 2, rng=rng)
        stages, c = [], stem_ch
        for spec in specs:
            stages.append(Stage(c, spec, rng))
            c = spec.out_channels
        self.stages = stages

    @property
    def strides(self) -> list[int]:
        s, out = 2, []
        for st in self.stages:
            s *= 2 if st.spec.downsample else 1
            out.append(s)
        return out

    def stem_forward(self, x: Tensor) -> Tensor:
        return relu(self.stem(x))

    def __call__(self, x: Tensor) -> list[Tensor]:
        h = self.stem_forward(x)
        outs = []
        for st in self.stages:
            h = st(h)
            outs.append(h)
        return outs


def _resize_factor(src: tuple[int, ...], dst: tuple[int, ...]) -> int:
    fy, ry = divmod(dst[-2], src[-2])
    fx, rx = divmod(dst[-1], src[-1])
    if ry or rx or fy != fx or fy < 1:
        raise ShapeError(f"cannot resize {src[-2:]} onto {dst[-2:]} with an integer factor")
    return fy


class CompositeBackbone(Module):
    """Assistant and lead backbones of identical geometry joined by projections ``g``.

    ``g[l]`` (for stage index l >= 1) maps assistant stage-l output channels to the
    lead's stage-l input channels. The projections start at zero, so an untrained
    composite backbone computes exactly what the lead alone would.
    """

    def __init__(self, specs: Sequence[StageSpec], in_ch: int = 1, stem_ch: int = 8,
                 enabled: bool = True, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.specs = tuple(specs)
        self.enabled = enabled
        self.lead = Backbone(in_ch, stem_ch, specs, rng)
        if enabled:
            self.assistant = Backbone(in_ch, stem_ch, specs, rng)
            self.g = [ConvKernel(specs[l].out_channels, self.lead.stages[l].in_channels, 1, 1,
                                 zero_init=True) for l in range(1, len(specs))]
        else:
            self.assistant = None
            self.g = []

    @property
    def strides(self) -> list[int]:
        return self.lead.strides

    @property
    def out_channels(self) -> list[int]:
        return [s.out_channels for s in self.specs]

    def __call__(self, x: Tensor) -> list[Tensor]:
        return composite_forward(x, self)


def composite_forward(x: Tensor, cb: CompositeBackbone) -> list[Tensor]:
    """Per-stage lead outputs; the lead runs alone when the composite is disabled."""
    if not cb.enabled:
        return cb.lead(x)
    assist = cb.assistant(x)
    h = cb.lead.stem_forward(x)
    outs = []
    for l, stage in enumerate(cb.lead.stages):
        if l >= 1:
            proj = cb.g[l - 1](assist[l])
            h = add(h, upsample_nearest(proj, _resize_factor(proj.shape, h.shape)))
        h = stage(h)
        outs.append(h)
    return outs


@dataclass
class FeaturePyramid:
    levels: list[Tensor]
    strides: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.levels) != len(self.strides):
            raise ValueError("one stride per pyramid level required")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"pyramid strides must increase strictly, got {self.strides}")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[0]


class FPN(Module):
    """Lateral 1x1 convs, top-down nearest upsampling with addition, 3x3 smoothing."""

    def __init__(self, in_channels: Sequence[int], width: int, rng: np.random.Generator):
        if len(in_channels) < 2:
            raise ValueError("an FPN needs at least two input levels")
        self.width = width
        self.lateral = [ConvKernel(c, width, 1, 1, rng=rng) for c in in_channels]
        self.smooth = [ConvKernel(width, width, 3, 1, rng=rng) for _ in in_channels]

    def __call__(self, stage_outputs: Sequence[Tensor], strides: Sequence[int]) -> FeaturePyramid:
        return fpn_forward(stage_outputs, self, strides)


def fpn_forward(stage_outputs: Sequence[Tensor], fpn: FPN, strides: Sequence[int]) -> FeaturePyramid:
    if len(stage_outputs) < 2:
        raise ValueError("fpn_forward needs at least two stage outputs")
    if len(stage_outputs) != len(fpn.lateral):
        raise ShapeError(f"FPN built for {len(fpn.lateral)} levels, got {len(stage_outputs)}")
    lats = [lat(x) for lat, x in zip(fpn.lateral, stage_outputs)]
    merged = [lats[-1]]
    for lat in reversed(lats[:-1]):
        top = merged[-1]
        merged.append(add(lat, upsample_nearest(top, _resize_factor(top.shape, lat.shape))))
    merged.reverse()
    return FeaturePyramid([sm(m) for sm, m in zip(fpn.smooth, merged)], list(strides))
