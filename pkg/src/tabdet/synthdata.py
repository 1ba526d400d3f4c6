"""Synthetic document pages with table ground truth, splits and file I/O.

Pages are grayscale arrays in [0, 1] (1 = white).  Tables are ruled grids;
some lose their outer frame to mimic borderless layouts.  Body text is drawn
as dark horizontal strips that act as distractors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import is_valid_box, iou


class ParseError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class GenConfig:
    size: int = 128
    min_tables: int = 1
    max_tables: int = 3
    margin: int | None = None  # pixels; defaults to size/20


@dataclass
class AnnotatedImage:
    image: np.ndarray
    boxes: np.ndarray  # (n, 4) normalized cx, cy, w, h
    id: int = 0

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass
class DatasetSplit:
    labeled: list[int]
    unlabeled: list[int]
    validation: list[int]
    fraction: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "labeled": self.labeled,
            "unlabeled": self.unlabeled,
            "validation": self.validation,
            "fraction": self.fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(list(d["labeled"]), list(d["unlabeled"]), list(d["validation"]),
                   float(d["fraction"]), int(d["seed"]))


# -- generator ----------------------------------------------------------------------

def _overlaps(rect, others, pad) -> bool:
    x0, y0, x1, y1 = rect
    for a0, b0, a1, b1 in others:
        if x0 < a1 + pad and a0 < x1 + pad and y0 < b1 + pad and b0 < y1 + pad:
            return True
    return False


def _draw_table(img: np.ndarray, rect, rng: np.random.Generator) -> None:
    x0, y0, x1, y1 = rect
    rows = int(rng.integers(2, 7))
    cols = int(rng.integers(2, 7))
    t = int(rng.integers(1, 3))
    ink = rng.uniform(0.0, 0.25)
    borderless = rng.random() < 0.25
    ys = np.round(np.linspace(y0, y1 - t, rows + 1)).astype(int)
    xs = np.round(np.linspace(x0, x1 - t, cols + 1)).astype(int)
    if rng.random() < 0.5:
        img[ys[0] : ys[1], x0:x1] = np.minimum(img[ys[0] : ys[1], x0:x1], rng.uniform(0.75, 0.9))
    # cell text
    for r in range(rows):
        for c in range(cols):
            cy0, cy1 = ys[r] + t + 1, ys[r + 1] - 1
            cx0, cx1 = xs[c] + t + 2, xs[c + 1] - 2
            if cy1 - cy0 >= 2 and cx1 - cx0 >= 3 and rng.random() < 0.8:
                ly = (cy0 + cy1) // 2
                lw = int(rng.integers(max(1, (cx1 - cx0) // 3), cx1 - cx0 + 1))
                img[ly : ly + 1, cx0 : cx0 + lw] = rng.uniform(0.2, 0.5)
    inner_r = range(1, rows) if borderless else range(rows + 1)
    inner_c = range(1, cols) if borderless else range(cols + 1)
    for r in inner_r:
        img[ys[r] : ys[r] + t, x0:x1] = ink
    for c in inner_c:
        img[y0:y1, xs[c] : xs[c] + t] = ink
    if borderless:
        # header rule and bottom rule still span the grid extent
        img[y0 : y0 + t, x0:x1] = ink
        img[y1 - t : y1, x0:x1] = ink


def _draw_text(img: np.ndarray, tables, rng: np.random.Generator, margin: int) -> None:
    H, W = img.shape
    y = margin + int(rng.integers(0, 4))
    while y < H - margin - 2:
        thick = int(rng.integers(1, 3))
        if rng.random() < 0.85:
            x0 = margin + int(rng.integers(0, 6))
            x1 = W - margin - int(rng.integers(0, W // 3))
            span = np.ones(W, dtype=bool)
            span[:x0] = False
            span[x1:] = False
            for a0, b0, a1, b1 in tables:
                if y < b1 + 2 and b0 - 2 < y + thick:
                    span[max(0, a0 - 3) : min(W, a1 + 3)] = False
            # word gaps
            pos = x0
            while pos < x1:
                gap = int(rng.integers(4, 14))
                span[pos + gap : pos + gap + 2] = False
                pos += gap + 2
            img[y : y + thick, span] = np.minimum(img[y : y + thick, span], rng.uniform(0.25, 0.55))
        y += thick + int(rng.integers(3, 7))


def generate_document(seed: int, cfg: GenConfig | None = None) -> AnnotatedImage:
    cfg = cfg or GenConfig()
    rng = np.random.default_rng(seed)
    S = cfg.size
    margin = cfg.margin if cfg.margin is not None else max(2, S // 20)
    img = np.full((S, S), 1.0) - rng.uniform(0.0, 0.06)
    n_tables = int(rng.integers(cfg.min_tables, cfg.max_tables + 1))
    rects: list[tuple[int, int, int, int]] = []
    for _ in range(200):
        if len(rects) == n_tables:
            break
        w = min(int(rng.uniform(0.3, 0.85) * S), S - 2 * margin)
        h = min(int(rng.uniform(0.14, 0.4) * S), S - 2 * margin)
        x0 = int(rng.integers(margin, S - margin - w + 1))
        y0 = int(rng.integers(margin, S - margin - h + 1))
        rect = (x0, y0, x0 + w, y0 + h)
        if not _overlaps(rect, rects, 4):
            rects.append(rect)
    rects.sort(key=lambda r: (r[1], r[0]))
    _draw_text(img, rects, rng, margin)
    for rect in rects:
        _draw_table(img, rect, rng)
    img += rng.normal(0.0, 0.02, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    boxes = np.array(
        [[(x0 + x1) / 2 / S, (y0 + y1) / 2 / S, (x1 - x0) / S, (y1 - y0) / S] for x0, y0, x1, y1 in rects]
    ).reshape(-1, 4)
    return AnnotatedImage(img, boxes, id=seed)


def generate_dataset(count: int, seed: int, cfg: GenConfig | None = None) -> list[AnnotatedImage]:
    base = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in base.spawn(count)]
    out = []
    for i, s in enumerate(seeds):
        doc = generate_document(s, cfg)
        doc.id = i
        out.append(doc)
    return out


def make_splits(n: int, fraction: float, seed: int, n_val: int | None = None) -> DatasetSplit:
    """Partition training ids ``0..n-1`` into labeled/unlabeled by seeded shuffle.

    Validation ids are drawn separately as ``n..n+n_val-1``; by default
    ``n_val = n/4``, i.e. 20% of the whole corpus.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"label fraction must lie in (0, 1), got {fraction}")
    if n < 1:
        raise ConfigError("need at least one training image")
    n_val = int(round(n / 4)) if n_val is None else n_val
    rng = np.random.default_rng(seed)
    order = [int(i) for i in rng.permutation(n)]
    n_lab = max(1, int(round(n * fraction)))
    return DatasetSplit(sorted(order[:n_lab]), sorted(order[n_lab:]), list(range(n, n + n_val)), fraction, seed)


# -- PGM ----------------------------------------------------------------------------

def write_image(path: str | Path, image: np.ndarray) -> None:
    q = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise ParseError(f"{path}: byte 0: expected P5 magic")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: byte {pos}: expected header integer")
        fields.append(int(raw[start:pos]))
    w, h, maxval = fields
    if not raw[pos : pos + 1].isspace():
        raise ParseError(f"{path}: byte {pos}: expected whitespace after header")
    pos += 1
    if maxval != 255:
        raise ParseError(f"{path}: byte {pos}: unsupported maxval {maxval}")
    if w <= 0 or h <= 0:
        raise ParseError(f"{path}: byte {pos}: bad dimensions {w}x{h}")
    need = w * h
    body = raw[pos : pos + need]
    if len(body) < need:
        raise ParseError(f"{path}: byte {pos + len(body)}: truncated pixel data ({len(body)} of {need})")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# -- annotation JSON ----------------------------------------------------------------

@dataclass
class Annotation:
    image_id: int
    bbox: np.ndarray
    score: float | None = None


@dataclass
class AnnotationFile:
    images: list[dict] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)

    def boxes_by_image(self) -> dict[int, np.ndarray]:
        out = {int(im["id"]): [] for im in self.images}
        for a in self.annotations:
            out.setdefault(a.image_id, []).append(a.bbox)
        return {k: np.array(v, dtype=np.float64).reshape(-1, 4) for k, v in out.items()}

    def scores_by_image(self) -> dict[int, np.ndarray]:
        out = {int(im["id"]): [] for im in self.images}
        for a in self.annotations:
            out.setdefault(a.image_id, []).append(1.0 if a.score is None else a.score)
        return {k: np.array(v, dtype=np.float64) for k, v in out.items()}


def write_annotations(path: str | Path, ann: AnnotationFile) -> None:
    doc = {
        "images": [dict(im) for im in ann.images],
        "annotations": [],
    }
    for a in ann.annotations:
        rec = {"image_id": int(a.image_id), "bbox": [float(v) for v in a.bbox], "category": "table"}
        if a.score is not None:
            rec["score"] = float(a.score)
        doc["annotations"].append(rec)
    Path(path).write_text(json.dumps(doc, indent=1))


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ParseError(f"{where}: missing field '{key}'")
    return obj[key]


def read_annotations(path: str | Path) -> AnnotationFile:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    out = AnnotationFile()
    for i, im in enumerate(_require(doc, "images", str(path))):
        where = f"{path}: images[{i}]"
        out.images.append({
            "id": int(_require(im, "id", where)),
            "file": str(_require(im, "file", where)),
            "width": int(_require(im, "width", where)),
            "height": int(_require(im, "height", where)),
        })
    for i, a in enumerate(_require(doc, "annotations", str(path))):
        where = f"{path}: annotations[{i}]"
        image_id = int(_require(a, "image_id", where))
        bbox = _require(a, "bbox", where)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise ParseError(f"{where}: field 'bbox' must be a list of 4 numbers")
        bbox = np.array([float(v) for v in bbox])
        if not is_valid_box(bbox) or not all(0.0 <= v <= 1.0 for v in bbox):
            raise ParseError(f"{where}: field 'bbox' out of range [0,1]: {bbox.tolist()}")
        if _require(a, "category", where) != "table":
            raise ParseError(f"{where}: field 'category' must be 'table'")
        score = a.get("score")
        if score is not None:
            score = float(score)
            if not 0.0 <= score <= 1.0:
                raise ParseError(f"{where}: field 'score' outside [0,1]")
        out.annotations.append(Annotation(image_id, bbox, score))
    return out


def annotation_file(docs: list[AnnotatedImage], file_fmt: str = "images/{:05d}.pgm") -> AnnotationFile:
    ann = AnnotationFile()
    for d in docs:
        ann.images.append({"id": d.id, "file": file_fmt.format(d.id), "width": d.width, "height": d.height})
        for b in d.boxes:
            ann.annotations.append(Annotation(d.id, np.asarray(b, dtype=np.float64)))
    return ann


# -- dataset directories ------------------------------------------------------------

def write_dataset(root: str | Path, docs: list[AnnotatedImage], split: DatasetSplit) -> None:
    """Layout: ``images/NNNNN.pgm``, ``labels/all.json``, ``split.json``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for d in docs:
        write_image(root / "images" / f"{d.id:05d}.pgm", d.image)
    write_annotations(root / "labels" / "all.json", annotation_file(docs))
    (root / "split.json").write_text(json.dumps(split.to_dict(), indent=1))


def read_dataset(root: str | Path) -> tuple[list[AnnotatedImage], DatasetSplit]:
    root = Path(root)
    ann = read_annotations(root / "labels" / "all.json")
    split = DatasetSplit.from_dict(json.loads((root / "split.json").read_text()))
    boxes = ann.boxes_by_image()
    docs = []
    for im in sorted(ann.images, key=lambda r: r["id"]):
        img = read_image(root / im["file"])
        if img.shape != (im["height"], im["width"]):
            raise ParseError(f"{im['file']}: dimensions {img.shape} disagree with annotation")
        docs.append(AnnotatedImage(img, boxes[im["id"]], id=im["id"]))
    return docs, split


def max_pairwise_iou(boxes: np.ndarray) -> float:
    best = 0.0
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            best = max(best, iou(boxes[i], boxes[j]))
    return best

