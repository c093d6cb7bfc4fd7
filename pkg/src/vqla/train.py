"""Joint loss, training loop, metrics, gradient checking and checkpoints."""

from __future__ import annotations

import dataclasses
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .boxes import cxcywh_to_xyxy, giou_loss, iou, l1_box_loss
from .data import (Batch, ClassMap, DataError, SyntheticTaskConfig, VqlaSample, Vocabulary,
                   build_vocab, collate, generate_synthetic_dataset, load_annotations, make_batches)
from .model import GvleLvitParams, ModelConfig, forward_batch, init_params, model_forward, param_shapes
from .tensor import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VQLA1"


class NumericalError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


# -- configuration ----------------------------------------------------------------

@dataclass
class LossWeights:
    ce: float = 1.0
    giou: float = 1.0
    l1: float = 1.0


@dataclass
class TrainSettings:
    epochs: int = 80
    batch_size: int = 64
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    max_steps: int = 0  # 0 means no cap
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 disables


@dataclass
class DataSettings:
    train: str = ""  # annotation file; empty selects the synthetic task
    val: str = ""
    root: str = ""
    synthetic: SyntheticTaskConfig = field(default_factory=SyntheticTaskConfig)


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataSettings = field(default_factory=DataSettings)
    checkpoint: str = ""

    def validate(self) -> None:
        self.model.validate()
        t = self.train
        if t.epochs < 0 or t.max_steps < 0 or t.checkpoint_every < 0:
            raise ValueError("train.epochs, train.max_steps and train.checkpoint_every must be >= 0")
        if t.batch_size < 1:
            raise ValueError(f"train.batch_size must be positive, got {t.batch_size}")
        if not t.lr > 0:
            raise ValueError(f"train.lr must be positive, got {t.lr}")
        if not (0 <= t.beta1 < 1 and 0 <= t.beta2 < 1 and t.eps > 0):
            raise ValueError("Adam betas must lie in [0, 1) and eps must be positive")
        if t.grad_clip < 0:
            raise ValueError("train.grad_clip must be >= 0")
        for k in ("ce", "giou", "l1"):
            if getattr(self.loss, k) < 0:
                raise ValueError(f"loss.{k} must be >= 0")


# -- loss ---------------------------------------------------------------------------

def loss_terms(logits: Tensor, pred_boxes: Tensor, classes, gt_boxes) -> dict[str, Tensor]:
    """Unweighted, batch-averaged CE, GIoU and L1 terms.

    ``pred_boxes`` and ``gt_boxes`` are normalized (cx, cy, w, h).
    """
    gt = Tensor(np.asarray(gt_boxes), dtype=pred_boxes.dtype)
    return {
        "ce": T.cross_entropy(logits, classes),
        "giou": giou_loss(pred_boxes, gt),
        "l1": l1_box_loss(pred_boxes, gt),
    }


def combine(terms: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    total = None
    for k in ("ce", "giou", "l1"):
        w = getattr(weights, k)
        if w == 0:
            continue
        term = terms[k] if w == 1 else terms[k] * w
        total = term if total is None else total + term
    if total is None:
        return terms["ce"] * 0.0
    return total


def total_loss(logits: Tensor, pred_boxes: Tensor, classes, gt_boxes,
               weights: LossWeights | None = None) -> Tensor:
    """``ce * CE + giou * (1 - GIoU) + l1 * L1``; zero-weighted terms are left out of the graph."""
    return combine(loss_terms(logits, pred_boxes, classes, gt_boxes), weights or LossWeights())


def batch_loss(batch: Batch, params: GvleLvitParams, weights: LossWeights) -> tuple[Tensor, dict[str, Tensor]]:
    pred = forward_batch(batch, params)
    terms = loss_terms(pred.logits, pred.boxes, batch.classes, batch.boxes_cxcywh())
    return combine(terms, weights), terms


# -- training -------------------------------------------------------------------------

@dataclass
class StepLog:
    step: int
    epoch: int
    total: float
    ce: float
    giou: float
    l1: float

    def tsv(self) -> str:
        return f"{self.step}\t{self.epoch}\t{self.total:.6g}\t{self.ce:.6g}\t{self.giou:.6g}\t{self.l1:.6g}"


@dataclass
class TrainResult:
    params: GvleLvitParams
    vocab: Vocabulary
    class_map: ClassMap
    history: list[StepLog]
    strategy: str

    def losses(self) -> list[float]:
        return [s.total for s in self.history]


def load_datasets(config: TrainConfig) -> tuple[list[VqlaSample], list[VqlaSample], ClassMap]:
    """Train/val samples and the frozen class map the config points at."""
    d = config.data
    if not d.train:
        return generate_synthetic_dataset(d.synthetic)
    class_map = ClassMap()
    root = d.root or None
    train = load_annotations(d.train, class_map, root=root)
    class_map.freeze()
    val = load_annotations(d.val, class_map, root=root) if d.val else []
    return train, val, class_map


def _clip_gradients(params: Mapping[str, Tensor], max_norm: float) -> None:
    norm = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            p.grad = (p.grad * scale).astype(p.dtype)


def train(config: TrainConfig, samples: Sequence[VqlaSample], class_map: ClassMap,
          vocab: Vocabulary | None = None, log_path=None,
          on_epoch: Callable[[int, GvleLvitParams], None] | None = None) -> TrainResult:
    """Adam training of the joint loss; deterministic given ``config.train.seed``."""
    config.validate()
    if not samples:
        raise DataError("training set is empty")
    vocab = vocab or build_vocab(s.question for s in samples)
    mcfg = config.model
    if len(class_map) > mcfg.num_classes:
        raise DataError(f"data has {len(class_map)} answer classes, model.num_classes is {mcfg.num_classes}")
    for s in samples:
        if not 0 <= s.answer_class < mcfg.num_classes:
            raise DataError(f"{s.frame_id}: answer class {s.answer_class} outside the class map")
    mcfg.vocab_size = max(mcfg.vocab_size, len(vocab))
    t = config.train
    params = init_params(mcfg, seed=t.seed)
    trainable = params.trainable()
    state = T.AdamState(lr=t.lr, beta1=t.beta1, beta2=t.beta2, eps=t.eps)
    history: list[StepLog] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    step = 0
    try:
        for epoch in range(t.epochs):
            for group in make_batches(samples, t.batch_size, shuffle_seed=t.seed * 100003 + epoch):
                if t.max_steps and step >= t.max_steps:
                    break
                batch = collate(group, vocab, mcfg.text_len)
                loss, terms = batch_loss(batch, params, config.loss)
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericalError(f"non-finite loss {value} at step {step}")
                T.zero_grads(trainable.values())
                loss.backward()
                for name, p in trainable.items():
                    if p.grad is None:
                        p.grad = np.zeros_like(p.data)
                if t.grad_clip:
                    _clip_gradients(trainable, t.grad_clip)
                T.adam_step(trainable, state)
                entry = StepLog(step, epoch, value, terms["ce"].item(), terms["giou"].item(), terms["l1"].item())
                history.append(entry)
                if log_fh:
                    log_fh.write(entry.tsv() + "\n")
                step += 1
            if on_epoch is not None:
                on_epoch(epoch, params)
            if t.max_steps and step >= t.max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    T.zero_grads(trainable.values())
    return TrainResult(params, vocab, class_map, history, mcfg.fusion)


# -- evaluation -------------------------------------------------------------------------

@dataclass
class ClassScore:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    accuracy: float
    f_score: float
    miou: float
    count: int
    per_class: dict[str, ClassScore] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy, "f_score": self.f_score, "miou": self.miou, "count": self.count,
            "per_class": {k: vars(v) for k, v in self.per_class.items()},
        }


def compute_metrics(pred_classes, true_classes, pred_boxes, true_boxes,
                    labels: Sequence[str] | None = None) -> EvalReport:
    """Accuracy, macro F1 over classes present in the ground truth, and mean IoU.

    Boxes are normalized corner boxes; predictions are clipped to [0, 1].
    """
    pred_classes = np.asarray(pred_classes, dtype=np.int64)
    true_classes = np.asarray(true_classes, dtype=np.int64)
    n = len(true_classes)
    if n == 0:
        raise ValueError("cannot evaluate an empty dataset")
    correct = int((pred_classes == true_classes).sum())
    per_class = {}
    f1s = []
    for c in sorted(set(true_classes.tolist()) | set(pred_classes.tolist())):
        tp = int(((pred_classes == c) & (true_classes == c)).sum())
        fp = int(((pred_classes == c) & (true_classes != c)).sum())
        fn = int(((pred_classes != c) & (true_classes == c)).sum())
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        support = tp + fn
        if support:
            f1s.append(f1)
        name = labels[c] if labels is not None and c < len(labels) else str(c)
        per_class[name] = ClassScore(prec, rec, f1, support)
    ious = iou(np.clip(np.asarray(pred_boxes, dtype=np.float64), 0, 1), np.asarray(true_boxes, dtype=np.float64))
    return EvalReport(accuracy=correct / n, f_score=float(np.mean(f1s)),
                      miou=float(np.mean(ious)), count=n, per_class=per_class)


def predict(params: GvleLvitParams, samples: Sequence[VqlaSample], vocab: Vocabulary,
            batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class indices and normalized corner boxes."""
    classes, boxes = [], []
    with T.no_grad():
        for group in make_batches(samples, batch_size):
            batch = collate(group, vocab, params.config.text_len)
            pred = forward_batch(batch, params)
            classes.append(pred.logits.data.argmax(axis=-1))
            boxes.append(cxcywh_to_xyxy(pred.boxes.data))
    return np.concatenate(classes), np.concatenate(boxes)


def evaluate(params: GvleLvitParams, samples: Sequence[VqlaSample], vocab: Vocabulary,
             class_map: ClassMap | None = None, batch_size: int = 64) -> EvalReport:
    pred_classes, pred_boxes = predict(params, samples, vocab, batch_size)
    true_boxes = np.array([s.normalized_box() for s in samples])
    labels = class_map.labels if class_map is not None else None
    return compute_metrics(pred_classes, [s.answer_class for s in samples], pred_boxes, true_boxes, labels)


# -- gradient check ----------------------------------------------------------------------

def tiny_config(**overrides) -> ModelConfig:
    base = dict(dim=8, depth=1, heads=2, mlp_ratio=4, text_len=4, num_classes=3, vocab_size=10,
                visual="image", image_size=8, patch_grid=2, dtype="float64")
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    threshold: float

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if not v < self.threshold}

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(config: ModelConfig | None = None, seed: int = 0, batch: int = 3, h: float = 1e-6,
               threshold: float | None = None, weights: LossWeights | None = None,
               frozen: Sequence[str] = (), floor: float = 1e-3) -> GradCheckReport:
    """Compare backprop against central differences for every trainable parameter.

    Backprop runs at ``config.dtype``; the central differences always run on a
    float64 copy of the same parameter values, so a float32 check measures
    the error of the float32 gradients.  The default threshold is 1e-5 for
    float64 and 1e-3 for float32.

    The error of a parameter group is ``max|analytic - numeric|`` divided by
    ``max(max|analytic|, max|numeric|, floor)``.  The floor keeps groups whose
    true gradient vanishes (e.g. attention key biases, which softmax cancels)
    from dividing difference noise by zero.  Parameters listed in ``frozen``
    get ``requires_grad=False`` and are left out of the report.
    """
    config = config or tiny_config()
    if threshold is None:
        threshold = 1e-5 if config.dtype == "float64" else 1e-3
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)
    params = init_params(config, seed=seed)
    # larger weights than the training init, so every path carries signal
    for name, p in params.items():
        p.data[...] = rng.normal(0.0, 0.5, size=p.shape)
        if name in frozen:
            p.requires_grad = False
    twin = GvleLvitParams(dataclasses.replace(config, dtype="float64"),
                          {k: Tensor(v.data, dtype=np.float64) for k, v in params.items()})
    tokens = rng.integers(0, config.vocab_size, size=(batch, config.text_len))
    if config.visual == "image":
        visual = rng.uniform(0, 1, size=(batch, config.image_size, config.image_size, 3))
    else:
        visual = rng.normal(size=(batch, config.feature_len, config.feature_dim))
    classes = rng.integers(0, config.num_classes, size=batch)
    gt = np.column_stack([rng.uniform(0.3, 0.7, size=(batch, 2)), rng.uniform(0.2, 0.5, size=(batch, 2))])

    def loss_fn(p: GvleLvitParams) -> Tensor:
        pred = model_forward(tokens, visual, p)
        return total_loss(pred.logits, pred.boxes, classes, gt, weights)

    loss = loss_fn(params)
    T.zero_grads(params.tensors.values())
    loss.backward()
    errors = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = T.finite_difference_gradient(lambda _: loss_fn(twin), twin[name], h)
        errors[name] = T.relative_error(analytic, numeric.data, floor)
    return GradCheckReport(errors, threshold)


# -- checkpoints ---------------------------------------------------------------------------

def save_checkpoint(params, path) -> None:
    """Write named tensors as little-endian float32 in the VQLA1 layout."""
    tensors = params.tensors if isinstance(params, GvleLvitParams) else params
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            data = t.data if isinstance(t, Tensor) else np.asarray(t)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_checkpoint(path, expected: Mapping[str, tuple[int, ...]] | None = None) -> dict[str, np.ndarray]:
    """Read a VQLA1 file; ``expected`` (name -> shape) is checked when given."""
    raw = Path(path).read_bytes()
    if raw[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a VQLA1 checkpoint")
    pos = 5

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        out = raw[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for i in range(count):
        (nlen,) = struct.unpack("<H", take(2, f"name length of tensor #{i}"))
        name = take(nlen, f"name of tensor #{i}").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of tensor {name!r}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"shape of tensor {name!r}"))
        size = int(np.prod(shape, dtype=np.int64))
        payload = take(4 * size, f"payload of tensor {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if expected is not None:
        for name, shape in expected.items():
            if name not in out:
                raise CheckpointError(f"{path}: missing tensor {name!r}")
            if tuple(out[name].shape) != tuple(shape):
                raise CheckpointError(f"{path}: tensor {name!r} has shape {out[name].shape}, "
                                      f"config expects {tuple(shape)}")
        extra = set(out) - set(expected)
        if extra:
            raise CheckpointError(f"{path}: unexpected tensor {sorted(extra)[0]!r}")
    return out


def load_params(path, config: ModelConfig) -> GvleLvitParams:
    arrays = load_checkpoint(path, param_shapes(config))
    return GvleLvitParams(config, {k: Tensor(v, requires_grad=True, dtype=config.dtype, name=k)
                                   for k, v in arrays.items()})
