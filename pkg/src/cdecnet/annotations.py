"""COCO-style annotation / prediction files and binary PGM images."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .geometry import BBox, Detection
from .synth import TABLE_CLASS, DocumentSample

CATEGORIES = [{"id": TABLE_CLASS, "name": "table"}]


class AnnotationError(ValueError):
    pass


# -- PGM ----------------------------------------------------------------------------------------
def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary P5, maxval 255; ``image`` holds floats in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise AnnotationError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise AnnotationError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise AnnotationError(f"{path}: only maxval 255 is supported, got {maxval}")
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise AnnotationError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# -- annotations ----------------------------------------------------------------------------------
def corners_to_xywh(b: BBox) -> list[float]:
    return [b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1]


def xywh_to_corners(v: Sequence[float]) -> BBox:
    x, y, w, h = (float(t) for t in v)
    return BBox(x, y, x + w, y + h)


def annotation_record(samples: Sequence[DocumentSample]) -> dict:
    images, anns = [], []
    for img_id, s in enumerate(samples, 1):
        images.append({"id": img_id, "file_name": f"{s.id}.pgm", "width": s.width, "height": s.height})
        for b, c in zip(s.gt_boxes, s.gt_classes):
            anns.append({"id": len(anns) + 1, "image_id": img_id, "category_id": int(c),
                         "bbox": corners_to_xywh(b)})
    return {"images": images, "annotations": anns, "categories": CATEGORIES}


def write_annotations(samples: Sequence[DocumentSample], path: str | Path) -> None:
    Path(path).write_text(json.dumps(annotation_record(samples), indent=1) + "\n", encoding="utf-8")


def _load_json(path: str | Path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


def _require(cond: bool, where: str, msg: str) -> None:
    if not cond:
        raise AnnotationError(f"{where}: {msg}")


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _check_bbox(v, where: str) -> None:
    _require(isinstance(v, list) and len(v) == 4 and all(_is_num(t) for t in v),
             where, "bbox must be a list of 4 finite numbers")
    _require(v[2] > 0 and v[3] > 0, where, "bbox width and height must be positive")


class GroundTruth:
    """Ground truth of one annotated image."""

    def __init__(self, image_id: int, file_name: str, width: int, height: int,
                 boxes: list[BBox], classes: list[int]):
        self.image_id = image_id
        self.file_name = file_name
        self.width = width
        self.height = height
        self.boxes = boxes
        self.classes = classes

    @property
    def sample_id(self) -> str:
        return Path(self.file_name).stem


def parse_annotations(data, where: str = "annotations") -> list[GroundTruth]:
    _require(isinstance(data, dict), where, "top level must be an object")
    for key in ("images", "annotations", "categories"):
        _require(isinstance(data.get(key), list), where, f"missing list field {key!r}")
    out: dict[int, GroundTruth] = {}
    for i, im in enumerate(data["images"]):
        w = f"{where}: images[{i}]"
        _require(isinstance(im, dict), w, "must be an object")
        for key in ("id", "file_name", "width", "height"):
            _require(key in im, w, f"missing field {key!r}")
        _require(isinstance(im["id"], int), f"{w}.id", "must be an integer")
        _require(isinstance(im["file_name"], str), f"{w}.file_name", "must be a string")
        _require(im["id"] not in out, f"{w}.id", f"duplicate image id {im['id']}")
        out[im["id"]] = GroundTruth(im["id"], im["file_name"], int(im["width"]), int(im["height"]), [], [])
    for i, a in enumerate(data["annotations"]):
        w = f"{where}: annotations[{i}]"
        _require(isinstance(a, dict), w, "must be an object")
        for key in ("id", "image_id", "category_id", "bbox"):
            _require(key in a, w, f"missing field {key!r}")
        _require(a["image_id"] in out, f"{w}.image_id", f"unknown image id {a['image_id']!r}")
        _require(isinstance(a["category_id"], int), f"{w}.category_id", "must be an integer")
        _check_bbox(a["bbox"], f"{w}.bbox")
        gt = out[a["image_id"]]
        gt.boxes.append(xywh_to_corners(a["bbox"]))
        gt.classes.append(a["category_id"])
    return list(out.values())


def read_annotations(path: str | Path) -> list[GroundTruth]:
    return parse_annotations(_load_json(path), str(path))


# -- predictions ----------------------------------------------------------------------------------
def prediction_records(dets_per_image: Mapping[int, Sequence[Detection]]) -> list[dict]:
    recs = []
    for image_id, dets in dets_per_image.items():
        for d in dets:
            if not 0.0 <= d.score <= 1.0:
                raise ValueError(f"score {d.score} outside [0, 1]")
            recs.append({"image_id": int(image_id), "category_id": int(d.class_id),
                         "bbox": corners_to_xywh(d.box), "score": float(d.score)})
    recs.sort(key=lambda r: (r["image_id"], -r["score"]))
    return recs


def write_predictions(dets_per_image: Mapping[int, Sequence[Detection]], path: str | Path) -> None:
    Path(path).write_text(json.dumps(prediction_records(dets_per_image), indent=1) + "\n", encoding="utf-8")


def parse_predictions(data, where: str = "predictions") -> dict[int, list[Detection]]:
    _require(isinstance(data, list), where, "top level must be an array")
    out: dict[int, list[Detection]] = {}
    for i, r in enumerate(data):
        w = f"{where}: [{i}]"
        _require(isinstance(r, dict), w, "must be an object")
        for key in ("image_id", "category_id", "bbox", "score"):
            _require(key in r, w, f"missing field {key!r}")
        _require(isinstance(r["image_id"], int), f"{w}.image_id", "must be an integer")
        _require(_is_num(r["score"]) and 0.0 <= r["score"] <= 1.0, f"{w}.score", "must be a number in [0, 1]")
        _check_bbox(r["bbox"], f"{w}.bbox")
        out.setdefault(r["image_id"], []).append(
            Detection(xywh_to_corners(r["bbox"]), float(r["score"]), int(r["category_id"])))
    return out


def read_predictions(path: str | Path) -> dict[int, list[Detection]]:
    return parse_predictions(_load_json(path), str(path))
