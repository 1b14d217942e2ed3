"""Deterministic synthetic document pages with ruled tables and line-heavy distractors.

Each page is a pure function of ``(seed, index)``: the generator is NumPy's
PCG64 bit generator seeded through ``SeedSequence([seed, index])``. Placement
only draws integers, so the layout is platform independent; noise draws
floats and the final image is quantised to 1/255 steps so it survives a
round-trip through an 8-bit PGM file unchanged.

Images are single-channel floats in [0, 1] with a white background at 1.0.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
import json

import numpy as np

from .geometry import BBox

TABLE_CLASS = 1
SEPARATION = 8


@dataclass(frozen=True)
class PageSpec:
    height: int = 256
    width: int = 192
    tables: tuple[int, int] = (0, 3)
    rows: tuple[int, int] = (2, 6)
    cols: tuple[int, int] = (2, 5)
    table_width: tuple[int, int] = (64, 176)
    table_height: tuple[int, int] = (36, 100)
    ruling_prob: float = 0.6
    figures: tuple[int, int] = (0, 2)
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        for name in ("tables", "rows", "cols", "table_width", "table_height", "figures"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo}..{hi} is empty or negative")
        if not 0.0 <= self.ruling_prob <= 1.0:
            raise ValueError("ruling_prob must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DocumentSample:
    image: np.ndarray
    gt_boxes: list[BBox]
    gt_classes: list[int]
    id: str

    def __post_init__(self):
        if len(self.gt_boxes) != len(self.gt_classes):
            raise ValueError("one class per ground-truth box required")

    def gt_array(self) -> np.ndarray:
        if not self.gt_boxes:
            return np.zeros((0, 4))
        return np.array([b.as_array() for b in self.gt_boxes])

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


def page_id(index: int) -> str:
    return f"page_{index:05d}"


def page_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _draw(rng: np.random.Generator, lo_hi: tuple[int, int]) -> int:
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def _separated(box: tuple[int, int, int, int], others: list[tuple[int, int, int, int]], gap: int) -> bool:
    x1, y1, x2, y2 = box
    for a1, b1, a2, b2 in others:
        if x1 < a2 + gap and a1 < x2 + gap and y1 < b2 + gap and b1 < y2 + gap:
            return False
    return True


def _place(rng, spec: PageSpec, w: int, h: int, taken, margin: int = 6, tries: int = 60):
    if w > spec.width - 2 * margin or h > spec.height - 2 * margin:
        return None
    for _ in range(tries):
        x = int(rng.integers(margin, spec.width - margin - w + 1))
        y = int(rng.integers(margin, spec.height - margin - h + 1))
        box = (x, y, x + w, y + h)
        if _separated(box, taken, SEPARATION):
            return box
    return None


# -- rendering primitives ------------------------------------------------------------------
def _hline(img, y, x1, x2, ink):
    img[y, x1:x2] = np.minimum(img[y, x1:x2], ink)


def _vline(img, x, y1, y2, ink):
    img[y1:y2, x] = np.minimum(img[y1:y2, x], ink)


def _words(img, rng, x1, x2, y, height, ink):
    """A run of word-like dashes between x1 and x2 on baseline row y."""
    x = x1
    while x < x2:
        wlen = int(rng.integers(3, 13))
        end = min(x + wlen, x2)
        if end - x >= 2:
            img[y:y + height, x:end] = np.minimum(img[y:y + height, x:end], ink)
        x = end + int(rng.integers(2, 5))


def _render_table(img, rng, box, spec: PageSpec):
    x1, y1, x2, y2 = box
    ink = 0.05 * int(rng.integers(0, 4))
    n_rows = _draw(rng, spec.rows)
    n_cols = _draw(rng, spec.cols)
    h, w = y2 - y1, x2 - x1
    row_edges = [y1 + (h * i) // n_rows for i in range(n_rows + 1)]
    col_edges = [x1 + (w * j) // n_cols for j in range(n_cols + 1)]
    row_edges[-1] = y2 - 1
    col_edges[-1] = x2 - 1
    verticals = rng.random() < spec.ruling_prob
    _hline(img, y1, x1, x2, ink)
    _hline(img, y2 - 1, x1, x2, ink)
    for i, ry in enumerate(row_edges[1:-1], 1):
        if i == 1 or rng.random() < spec.ruling_prob:
            _hline(img, ry, x1, x2, ink)
    if verticals:
        for cx in col_edges:
            _vline(img, cx, y1, y2, ink)
    for r0, r1 in zip(row_edges[:-1], row_edges[1:]):
        for c0, c1 in zip(col_edges[:-1], col_edges[1:]):
            if r1 - r0 < 6 or c1 - c0 < 7:
                continue
            cy = (r0 + r1) // 2 - 1
            pad = 2
            right = c0 + pad + int(rng.integers(3, max(4, c1 - c0 - 2 * pad)))
            _words(img, rng, c0 + pad + 1, min(right, c1 - pad), cy, 2, ink)


def _render_figure(img, rng, box):
    """Line-dense non-table content: chart, hatching, or a small flowchart."""
    x1, y1, x2, y2 = box
    ink = 0.1
    kind = int(rng.integers(0, 4))
    if kind == 0:  # line chart with axes
        _vline(img, x1, y1, y2, ink)
        _hline(img, y2 - 1, x1, x2, ink)
        for _ in range(int(rng.integers(1, 4))):
            xs = np.linspace(x1 + 1, x2 - 1, 8).astype(int)
            ys = rng.integers(y1 + 1, y2 - 1, size=8)
            for (xa, ya), (xb, yb) in zip(zip(xs[:-1], ys[:-1]), zip(xs[1:], ys[1:])):
                n = max(abs(xb - xa), abs(yb - ya), 1)
                t = np.linspace(0.0, 1.0, 2 * n)
                px = np.round(xa + t * (xb - xa)).astype(int)
                py = np.round(ya + t * (yb - ya)).astype(int)
                img[py, px] = np.minimum(img[py, px], ink)
    elif kind == 1:  # bar chart
        _vline(img, x1, y1, y2, ink)
        _hline(img, y2 - 1, x1, x2, ink)
        n = int(rng.integers(3, 8))
        bw = max((x2 - x1 - 2) // (2 * n), 2)
        for i in range(n):
            bx = x1 + 2 + 2 * i * bw
            top = int(rng.integers(y1 + 1, y2 - 3))
            img[top:y2 - 1, bx:min(bx + bw, x2)] = 0.4
    elif kind == 2:  # diagonal hatching inside a frame
        _hline(img, y1, x1, x2, ink)
        _hline(img, y2 - 1, x1, x2, ink)
        _vline(img, x1, y1, y2, ink)
        _vline(img, x2 - 1, y1, y2, ink)
        step = int(rng.integers(4, 8))
        yy, xx = np.mgrid[y1:y2, x1:x2]
        mask = ((xx + yy) % step) == 0
        img[y1:y2, x1:x2][mask] = ink
    else:  # flowchart: small boxes joined by connectors
        n = int(rng.integers(2, 5))
        cx = (x1 + x2) // 2
        bh = max((y2 - y1) // (2 * n), 4)
        bw = max((x2 - x1) // 2, 8)
        prev = None
        for i in range(n):
            by = y1 + i * 2 * bh
            bx = cx - bw // 2 + int(rng.integers(-4, 5))
            bx = int(np.clip(bx, x1, x2 - bw))
            _hline(img, by, bx, bx + bw, ink)
            _hline(img, min(by + bh, y2 - 1), bx, bx + bw, ink)
            _vline(img, bx, by, min(by + bh, y2), ink)
            _vline(img, bx + bw - 1, by, min(by + bh, y2), ink)
            if prev is not None:
                _vline(img, cx, prev, by, ink)
            prev = min(by + bh, y2 - 1)


def _render_text(img, rng, occupied, spec: PageSpec):
    margin = 6
    y = margin
    while y < spec.height - margin - 3:
        if rng.random() < 0.15:
            y += 7
            continue
        line_end = spec.width - margin - int(rng.integers(0, 40))
        x = margin
        while x < line_end:
            seg_end = line_end
            blocked = False
            for bx1, by1, bx2, by2 in occupied:
                if by1 - 4 <= y + 3 and y <= by2 + 4 and bx2 + 4 > x:
                    if bx1 - 4 <= x:
                        blocked = True
                        x = bx2 + 4
                        break
                    seg_end = min(seg_end, bx1 - 4)
            if blocked:
                continue
            _words(img, rng, x, seg_end, y, 3, 0.15)
            x = seg_end + 1
            if seg_end == line_end:
                break
        y += 7


def generate_page(spec: PageSpec, index: int) -> DocumentSample:
    rng = page_rng(spec.seed, index)
    img = np.ones((spec.height, spec.width))
    tables: list[tuple[int, int, int, int]] = []
    for _ in range(_draw(rng, spec.tables)):
        w = _draw(rng, (spec.table_width[0], min(spec.table_width[1], spec.width - 12)))
        h = _draw(rng, (spec.table_height[0], min(spec.table_height[1], spec.height - 12)))
        box = _place(rng, spec, w, h, tables)
        if box is not None:
            tables.append(box)
    figures: list[tuple[int, int, int, int]] = []
    for _ in range(_draw(rng, spec.figures)):
        w = int(rng.integers(40, 91))
        h = int(rng.integers(36, 81))
        box = _place(rng, spec, w, h, tables + figures)
        if box is not None:
            figures.append(box)
    for box in tables:
        _render_table(img, rng, box, spec)
    for box in figures:
        _render_figure(img, rng, box)
    _render_text(img, rng, tables + figures, spec)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    boxes = [BBox(float(x1), float(y1), float(x2), float(y2)) for x1, y1, x2, y2 in tables]
    return DocumentSample(img, boxes, [TABLE_CLASS] * len(boxes), page_id(index))


def blank_page(spec: PageSpec, index: int = 0) -> DocumentSample:
    """Page with no content at all (noise only), the detector's negative control."""
    rng = page_rng(spec.seed, 10**9 + index)
    img = np.ones((spec.height, spec.width))
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return DocumentSample(img, [], [], f"blank_{index:05d}")


# -- splits --------------------------------------------------------------------------------------
@dataclass
class Split:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def all_ids(self) -> list[str]:
        return self.train + self.val + self.test

    def indices(self, name: str) -> list[int]:
        return [int(i.split("_")[1]) for i in getattr(self, name)]


def make_split(spec: PageSpec, n_train: int, n_val: int, n_test: int) -> Split:
    """Consecutive, disjoint index ranges: train first, then val, then test."""
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split sizes must be non-negative")
    ids = [page_id(i) for i in range(n_train + n_val + n_test)]
    return Split(ids[:n_train], ids[n_train:n_train + n_val], ids[n_train + n_val:])


def write_manifests(split: Split, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train", "val", "test"):
        (out / f"{name}.json").write_text(json.dumps(getattr(split, name), indent=1) + "\n", encoding="utf-8")


def read_manifests(out_dir: str | Path) -> Split:
    out = Path(out_dir)
    return Split(*(json.loads((out / f"{n}.json").read_text(encoding="utf-8")) for n in ("train", "val", "test")))
