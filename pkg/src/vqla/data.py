"""Annotations, question vocabulary, synthetic scenes and batching."""

from __future__ import annotations

import json
import string
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .boxes import enclosing_box, xyxy_to_cxcywh

PAD, UNK = 0, 1
DEFAULT_MAX_LEN = 25
FEATURE_MAGIC = b"VQLF"


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class VqlaSample:
    frame_id: str
    question: str
    answer: str
    answer_class: int
    target_box: tuple[float, float, float, float]  # pixel xyxy
    frame_size: tuple[int, int]  # (width, height)
    image: np.ndarray | None = None  # H x W x 3 uint8
    features: np.ndarray | None = None  # P x D_in float32

    @property
    def visual_kind(self) -> str:
        return "image" if self.image is not None else "features"

    @property
    def visual(self) -> np.ndarray:
        return self.image if self.image is not None else self.features

    def normalized_box(self) -> np.ndarray:
        w, h = self.frame_size
        return np.asarray(self.target_box, dtype=np.float64) / np.array([w, h, w, h])


def validate_sample(s: VqlaSample, num_classes: int | None = None) -> None:
    x0, y0, x1, y1 = s.target_box
    w, h = s.frame_size
    if not 0 <= x0:
        raise DataError(f"x_min {x0} is negative")
    if not x0 < x1:
        raise DataError(f"x_min {x0} must be below x_max {x1}")
    if not x1 <= w:
        raise DataError(f"x_max {x1} exceeds frame width {w}")
    if not 0 <= y0:
        raise DataError(f"y_min {y0} is negative")
    if not y0 < y1:
        raise DataError(f"y_min {y0} must be below y_max {y1}")
    if not y1 <= h:
        raise DataError(f"y_max {y1} exceeds frame height {h}")
    if num_classes is not None and not 0 <= s.answer_class < num_classes:
        raise DataError(f"answer_class {s.answer_class} outside [0, {num_classes})")
    if s.image is None and s.features is None:
        raise DataError(f"sample {s.frame_id!r} has no visual input")


class ClassMap:
    """Answer label to class index, interned in first-seen order."""

    def __init__(self, labels: Iterable[str] = ()):
        self.labels: list[str] = []
        self.index: dict[str, int] = {}
        self.frozen = False
        for label in labels:
            self.intern(label)

    def intern(self, label: str) -> int:
        if label in self.index:
            return self.index[label]
        if self.frozen:
            raise DataError(f"answer label {label!r} is not in the frozen class map")
        self.index[label] = len(self.labels)
        self.labels.append(label)
        return self.index[label]

    def freeze(self) -> "ClassMap":
        self.frozen = True
        return self

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> str:
        return self.labels[i]


# -- file formats -------------------------------------------------------------

def write_features(path, features: np.ndarray) -> None:
    f = np.asarray(features, dtype="<f4")
    if f.ndim != 2:
        raise ValueError("features must be a P x D_in matrix")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<II", *f.shape) + f.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC or len(raw) < 12:
        raise DataError(f"{path}: not a VQLF feature file")
    p, d = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * p * d:
        raise DataError(f"{path}: expected {p}x{d} reals, payload has {len(raw) - 12} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(p, d).astype(np.float32)


def write_ppm(path, image: np.ndarray) -> None:
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DataError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1:pos + 1 + w * h * 3]
    if len(data) != w * h * 3:
        raise DataError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:
        raise DataError(f"{path}: reading {path.suffix} images needs Pillow") from None
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def parse_record(record: dict, root: Path, class_map: ClassMap) -> VqlaSample:
    for key in ("frame_id", "width", "height", "question", "answer", "bbox"):
        if key not in record:
            raise DataError(f"missing field {key!r}")
    bbox = record["bbox"]
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise DataError("bbox must be an array of 4 numbers")
    image = features = None
    if record.get("image"):
        image = read_image(root / record["image"])
    elif record.get("features"):
        features = read_features(root / record["features"])
    else:
        raise DataError("record needs an 'image' or 'features' path")
    s = VqlaSample(
        frame_id=str(record["frame_id"]),
        question=str(record["question"]),
        answer=str(record["answer"]),
        answer_class=-1,
        target_box=tuple(float(v) for v in bbox),
        frame_size=(int(record["width"]), int(record["height"])),
        image=image,
        features=features,
    )
    validate_sample(s)
    s.answer_class = class_map.intern(s.answer)
    return s


def load_annotations(path, class_map: ClassMap | None = None, root=None) -> list[VqlaSample]:
    """Read a line-delimited JSON annotation file.

    Relative image/feature paths resolve against ``root`` (default: the
    directory holding the annotation file).  Labels are interned into
    ``class_map``; a frozen map rejects unseen labels.
    """
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    class_map = class_map if class_map is not None else ClassMap()
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(record, dict):
                raise DataError(f"{path}:{lineno}: record is not an object")
            try:
                samples.append(parse_record(record, root, class_map))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return samples


def write_annotations(path, samples: Sequence[VqlaSample], image_dir: str = "images") -> None:
    """Write samples as JSON lines, exporting images as PPM or features as VQLF."""
    path = Path(path)
    (path.parent / image_dir).mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {"frame_id": s.frame_id, "width": s.frame_size[0], "height": s.frame_size[1],
                   "question": s.question, "answer": s.answer, "bbox": list(s.target_box)}
            if s.image is not None:
                rel = f"{image_dir}/{s.frame_id}.ppm"
                write_ppm(path.parent / rel, s.image)
                rec["image"] = rel
            else:
                rel = f"{image_dir}/{s.frame_id}.vqlf"
                write_features(path.parent / rel, s.features)
                rec["features"] = rel
            fh.write(json.dumps(rec) + "\n")


# -- tokenizer ----------------------------------------------------------------

_STRIP = str.maketrans("", "", string.punctuation)


def words(text: str) -> list[str]:
    return text.lower().translate(_STRIP).split()


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        self.itos = ["<pad>", "<unk>", *tokens]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, i: int) -> str:
        return self.itos[i]

    def to_json(self) -> list[str]:
        return self.itos[2:]


def build_vocab(questions: Iterable[str]) -> Vocabulary:
    """Word vocabulary ordered by descending frequency, ties broken lexicographically."""
    counts = Counter(w for q in questions for w in words(q))
    return Vocabulary(sorted(counts, key=lambda w: (-counts[w], w)))


def tokenize(question: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    ids = [vocab.id(w) for w in words(question)][:max_len]
    return ids + [PAD] * (max_len - len(ids))


def combined_target_box(organ, tool) -> tuple[float, float, float, float]:
    """Target for interaction questions: the box enclosing both objects."""
    return tuple(enclosing_box(organ, tool).tolist())


# -- synthetic scenes ---------------------------------------------------------

COLORS = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 90, 240),
    "yellow": (240, 220, 40),
}
LOCATIONS = ("left", "right", "top", "bottom")
RELATIONS = ("left-of", "right-of", "above", "below")


@dataclass
class SyntheticTaskConfig:
    canvas: int = 64
    shapes: tuple[str, ...] = ("square", "circle", "triangle", "diamond")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow")
    num_classes: int = 12
    n_train: int = 256
    n_val: int = 64
    min_size: int = 16
    max_size: int = 28
    seed: int = 0
    max_tries: int = 200

    def answer_labels(self) -> list[str]:
        return [*self.shapes, *LOCATIONS, *RELATIONS]

    def validate(self) -> None:
        n = len(set(self.answer_labels()))
        if n != self.num_classes:
            raise ValueError(f"num_classes={self.num_classes} but the templates emit {n} labels")
        if len(self.shapes) < 2 or len(self.colors) < 2:
            raise ValueError("need at least two shapes and two colors")
        unknown = set(self.colors) - set(COLORS)
        if unknown:
            raise ValueError(f"unknown colors {sorted(unknown)}")
        if not 1 <= self.min_size <= self.max_size:
            raise ValueError("need 1 <= min_size <= max_size")
        if self.max_size > self.canvas:
            raise ValueError(f"max_size {self.max_size} does not fit canvas {self.canvas}")


def displacement_bucket(dx: float, dy: float, labels=LOCATIONS) -> str:
    """Dominant direction of a displacement; ties go left > right > top > bottom."""
    scores = (-dx, dx, -dy, dy)
    return labels[int(np.argmax(scores))]  # argmax keeps the first maximum


def location_answer(box, canvas_w: int, canvas_h: int) -> str:
    cx = (box[0] + box[2]) / 2
    cy = (box[1] + box[3]) / 2
    return displacement_bucket(cx - canvas_w / 2, cy - canvas_h / 2)


def relation_answer(first, second) -> str:
    """Where ``first`` sits relative to ``second``."""
    dx = (first[0] + first[2] - second[0] - second[2]) / 2
    dy = (first[1] + first[3] - second[1] - second[3]) / 2
    return displacement_bucket(dx, dy, RELATIONS)


def draw_shape(canvas: np.ndarray, shape: str, box, color) -> None:
    x0, y0, x1, y1 = (int(v) for v in box)
    h, w = y1 - y0, x1 - x0
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w  # cell centers in [0, 1]
    v = (yy + 0.5) / h
    if shape == "square":
        mask = np.ones((h, w), bool)
    elif shape == "circle":
        mask = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    elif shape == "triangle":
        mask = np.abs(u - 0.5) <= v / 2
    elif shape == "diamond":
        mask = np.abs(u - 0.5) + np.abs(v - 0.5) <= 0.5
    else:
        raise ValueError(f"unknown shape {shape!r}")
    canvas[y0:y1, x0:x1][mask] = color


def _disjoint(a, b) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def _place(rng, cfg: SyntheticTaskConfig, n: int) -> list[tuple[int, int, int, int]]:
    boxes: list[tuple[int, int, int, int]] = []
    for _ in range(cfg.max_tries):
        w, h = rng.integers(cfg.min_size, cfg.max_size + 1, size=2)
        x0 = int(rng.integers(0, cfg.canvas - w + 1))
        y0 = int(rng.integers(0, cfg.canvas - h + 1))
        box = (x0, y0, x0 + int(w), y0 + int(h))
        if all(_disjoint(box, b) for b in boxes):
            boxes.append(box)
            if len(boxes) == n:
                return boxes
    raise ValueError(f"could not place {n} non-overlapping shapes of size "
                     f"{cfg.min_size}..{cfg.max_size} on a {cfg.canvas}px canvas")


def _synthetic_sample(rng, cfg: SyntheticTaskConfig, frame_id: str, class_map: ClassMap) -> VqlaSample:
    kind = ("identity", "location", "interaction")[int(rng.integers(3))]
    n = 2 if kind == "interaction" else int(rng.integers(1, 3))
    shapes = [cfg.shapes[i] for i in rng.choice(len(cfg.shapes), size=n, replace=False)]
    colors = [cfg.colors[i] for i in rng.choice(len(cfg.colors), size=n, replace=False)]
    boxes = _place(rng, cfg, n)
    image = np.zeros((cfg.canvas, cfg.canvas, 3), np.uint8)
    for s, c, b in zip(shapes, colors, boxes):
        draw_shape(image, s, b, COLORS[c])
    k = int(rng.integers(n))
    if kind == "identity":
        question = f"what is the {colors[k]} object"
        answer, box = shapes[k], boxes[k]
    elif kind == "location":
        question = f"where is the {shapes[k]}"
        answer, box = location_answer(boxes[k], cfg.canvas, cfg.canvas), boxes[k]
    else:
        j = 1 - k
        question = (f"where is the {colors[k]} {shapes[k]} relative to "
                    f"the {colors[j]} {shapes[j]}")
        answer = relation_answer(boxes[k], boxes[j])
        box = combined_target_box(boxes[k], boxes[j])
    return VqlaSample(frame_id=frame_id, question=question, answer=answer,
                      answer_class=class_map.intern(answer),
                      target_box=tuple(float(v) for v in box),
                      frame_size=(cfg.canvas, cfg.canvas), image=image)


def generate_synthetic_dataset(cfg: SyntheticTaskConfig) -> tuple[list[VqlaSample], list[VqlaSample], ClassMap]:
    """Deterministic (train, val, class map) for a config.

    The class map lists every label the templates can emit, in template
    order, so class indices do not depend on which labels a draw happens to
    produce.
    """
    cfg.validate()
    class_map = ClassMap(cfg.answer_labels()).freeze()
    rng = np.random.default_rng(cfg.seed)
    train = [_synthetic_sample(rng, cfg, f"train_{i:05d}", class_map) for i in range(cfg.n_train)]
    val = [_synthetic_sample(rng, cfg, f"val_{i:05d}", class_map) for i in range(cfg.n_val)]
    return train, val, class_map


# -- batching -----------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray  # [B, L] int64
    visual: np.ndarray  # [B, H, W, 3] float in [0, 1], or [B, P, D_in]
    visual_kind: str
    classes: np.ndarray  # [B] int64
    boxes_px: np.ndarray  # [B, 4] pixel xyxy
    frame_sizes: np.ndarray  # [B, 2] (width, height)
    samples: list = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.classes)

    def boxes_xyxy(self) -> np.ndarray:
        """Ground-truth boxes normalized by frame size."""
        wh = np.tile(self.frame_sizes, 2).astype(np.float64)
        return self.boxes_px / wh

    def boxes_cxcywh(self) -> np.ndarray:
        return xyxy_to_cxcywh(self.boxes_xyxy())


def _signature(s: VqlaSample):
    return s.visual_kind, s.visual.shape


def make_batches(samples: Sequence[VqlaSample], batch_size: int = 64,
                 shuffle_seed: int | None = None) -> list[list[VqlaSample]]:
    """Split into batches; the last partial batch is kept."""
    if not samples:
        raise DataError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    sig = _signature(samples[0])
    for s in samples:
        if _signature(s) != sig:
            raise DataError(f"heterogeneous visual inputs: {sig} vs {_signature(s)} ({s.frame_id})")
    order = np.arange(len(samples))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(samples))
    return [[samples[i] for i in order[k:k + batch_size]] for k in range(0, len(samples), batch_size)]


def collate(samples: Sequence[VqlaSample], vocab: Vocabulary, max_len: int) -> Batch:
    kind = samples[0].visual_kind
    if kind == "image":
        visual = np.stack([s.image for s in samples]).astype(np.float64) / 255.0
    else:
        visual = np.stack([s.features for s in samples]).astype(np.float64)
    return Batch(
        tokens=np.array([tokenize(s.question, vocab, max_len) for s in samples], dtype=np.int64),
        visual=visual,
        visual_kind=kind,
        classes=np.array([s.answer_class for s in samples], dtype=np.int64),
        boxes_px=np.array([s.target_box for s in samples], dtype=np.float64),
        frame_sizes=np.array([s.frame_size for s in samples], dtype=np.int64),
        samples=list(samples),
    )
