"""Gated vision-language embedding with a transformer encoder and two heads.

Pipeline: text and visual embeddings (each a sum of content, segment and
position terms), fused either by the learned gate or by concatenation, a
prepended CLS token, pre-LN transformer blocks with a final layer norm, and
classification / box heads reading the CLS row.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

FUSIONS = ("gated", "concat")


@dataclass
class ModelConfig:
    dim: int = 64
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 4
    text_len: int = 16
    num_classes: int = 18
    vocab_size: int = 64
    visual: str = "image"  # or "features"
    image_size: int = 64
    patch_grid: int = 4
    feature_len: int = 16
    feature_dim: int = 512
    activation: str = "gelu"
    fusion: str = "gated"
    ln_eps: float = 1e-6
    init_std: float = 0.02
    dtype: str = "float32"

    @property
    def visual_len(self) -> int:
        return self.patch_grid ** 2 if self.visual == "image" else self.feature_len

    @property
    def visual_in(self) -> int:
        if self.visual == "image":
            return (self.image_size // self.patch_grid) ** 2 * 3
        return self.feature_dim

    @property
    def seq_len(self) -> int:
        """Encoder sequence length, CLS included."""
        fused = self.visual_len if self.fusion == "gated" else self.text_len + self.visual_len
        return fused + 1

    def validate(self) -> None:
        for key in ("dim", "depth", "heads", "mlp_ratio", "text_len", "num_classes",
                    "vocab_size", "image_size", "patch_grid", "feature_len", "feature_dim"):
            if getattr(self, key) < 1:
                raise ValueError(f"model.{key} must be positive, got {getattr(self, key)}")
        if self.dim % self.heads:
            raise ValueError(f"model.heads={self.heads} does not divide model.dim={self.dim}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"model.fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.visual not in ("image", "features"):
            raise ValueError(f"model.visual must be 'image' or 'features', got {self.visual!r}")
        if self.activation not in ("gelu", "relu"):
            raise ValueError(f"model.activation must be 'gelu' or 'relu', got {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"model.dtype must be float32 or float64, got {self.dtype!r}")
        if self.visual == "image" and self.image_size % self.patch_grid:
            raise ValueError(f"image_size {self.image_size} is not divisible by patch_grid {self.patch_grid}")
        if self.fusion == "gated" and self.text_len != self.visual_len:
            raise ValueError(f"gated fusion needs text_len == visual_len, got {self.text_len} and {self.visual_len}")


class GvleLvitParams:
    """Named parameters of the model plus the config that shapes them."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if v.requires_grad}

    def copy(self) -> "GvleLvitParams":
        return GvleLvitParams(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                            for k, v in self.tensors.items()})

    def to_dict(self) -> dict:
        return asdict(self.config)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, c = cfg.dim, cfg.num_classes
    shapes: dict[str, tuple[int, ...]] = {
        "text.token": (cfg.vocab_size, d),
        "text.position": (cfg.text_len, d),
        "segment": (2, d),
        "visual.proj.w": (cfg.visual_in, d),
        "visual.proj.b": (d,),
        "visual.position": (cfg.visual_len, d),
    }
    if cfg.fusion == "gated":
        shapes.update({
            "gate.w": (2 * d, d), "gate.b": (d,),
            "gate.visual.w": (d, d), "gate.visual.b": (d,),
            "gate.text.w": (d, d), "gate.text.b": (d,),
        })
    shapes["cls"] = (d,)
    hidden = cfg.mlp_ratio * d
    for i in range(cfg.depth):
        p = f"block{i}."
        shapes.update({p + "ln1.g": (d,), p + "ln1.b": (d,)})
        for m in "qkvo":
            shapes.update({p + f"attn.{m}.w": (d, d), p + f"attn.{m}.b": (d,)})
        shapes.update({
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.fc1.w": (d, hidden), p + "mlp.fc1.b": (hidden,),
            p + "mlp.fc2.w": (hidden, d), p + "mlp.fc2.b": (d,),
        })
    shapes.update({
        "final_ln.g": (d,), "final_ln.b": (d,),
        "head.cls.w": (d, c), "head.cls.b": (c,),
        "head.box.fc1.w": (d, d), "head.box.fc1.b": (d,),
        "head.box.fc2.w": (d, d), "head.box.fc2.b": (d,),
        "head.box.fc3.w": (d, 4), "head.box.fc3.b": (4,),
    })
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> GvleLvitParams:
    """Weights and embeddings ~ N(0, init_std), biases 0, layer-norm scales 1."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, cfg.init_std, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, dtype=cfg.dtype, name=name)
    return GvleLvitParams(cfg, tensors)


# -- embeddings -----------------------------------------------------------------

def embed_text(token_ids, params: GvleLvitParams) -> Tensor:
    """``[B, L]`` ids -> token + segment(0) + position embeddings, ``[B, L, D]``."""
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    L = ids.shape[1]
    if L > params["text.position"].shape[0]:
        raise ValueError(f"question length {L} exceeds text_len {params['text.position'].shape[0]}")
    tok = T.take_rows(params["text.token"], ids)
    pos = params["text.position"] if L == params.config.text_len else params["text.position"][:L]
    return tok + (params["segment"][0] + pos)


def patchify(images: np.ndarray, grid: int) -> np.ndarray:
    """``[B, H, W, C]`` -> ``[B, grid*grid, ph*pw*C]`` non-overlapping patches, row-major."""
    b, h, w, c = images.shape
    if h % grid or w % grid:
        raise ValueError(f"image {h}x{w} cannot be cut into a {grid}x{grid} patch grid")
    ph, pw = h // grid, w // grid
    x = images.reshape(b, grid, ph, grid, pw, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, grid * grid, ph * pw * c)


def embed_visual(visual, params: GvleLvitParams, kind: str | None = None) -> Tensor:
    """Patch or feature projection + segment(1) + position embeddings, ``[B, P, D]``."""
    cfg = params.config
    kind = kind or cfg.visual
    visual = np.asarray(visual)
    if kind == "image":
        if visual.ndim == 3:
            visual = visual[None]
        x = patchify(visual, cfg.patch_grid)
    else:
        if visual.ndim == 2:
            visual = visual[None]
        x = visual
    if x.shape[1] != cfg.visual_len or x.shape[2] != cfg.visual_in:
        raise ValueError(f"visual input gives {x.shape[1]}x{x.shape[2]} tokens, "
                         f"model expects {cfg.visual_len}x{cfg.visual_in}")
    x = Tensor(x, dtype=cfg.dtype)
    f_v = x @ params["visual.proj.w"] + params["visual.proj.b"]
    return f_v + (params["segment"][1] + params["visual.position"])


# -- fusion ---------------------------------------------------------------------

def gate_values(f: Tensor, e: Tensor, params: GvleLvitParams) -> Tensor:
    if f.shape[:-1] != e.shape[:-1]:
        raise ValueError(f"gated fusion needs aligned sequences, got {f.shape} and {e.shape}")
    return T.sigmoid(T.concat([f, e], axis=-1) @ params["gate.w"] + params["gate.b"])


def gvle_fuse(f: Tensor, e: Tensor, params: GvleLvitParams) -> Tensor:
    """Per position: ``w * tanh(Wf f) + (1 - w) * tanh(We e)``, ``w = sigmoid(Ww [f || e])``."""
    w = gate_values(f, e, params)
    vis = T.tanh(f @ params["gate.visual.w"] + params["gate.visual.b"])
    txt = T.tanh(e @ params["gate.text.w"] + params["gate.text.b"])
    return w * vis + (1.0 - w) * txt


def concat_fuse(f: Tensor, e: Tensor) -> Tensor:
    """Text rows followed by visual rows."""
    if f.shape[-1] != e.shape[-1]:
        raise ValueError(f"concat fusion needs equal widths, got {e.shape[-1]} and {f.shape[-1]}")
    return T.concat([e, f], axis=-2)


# -- encoder --------------------------------------------------------------------

def _linear(x: Tensor, params: GvleLvitParams, name: str) -> Tensor:
    return x @ params[name + ".w"] + params[name + ".b"]


def attention(x: Tensor, params: GvleLvitParams, prefix: str) -> Tensor:
    b, s, d = x.shape
    h = params.config.heads
    dh = d // h

    def split(t: Tensor) -> Tensor:
        return t.reshape(b, s, h, dh).transpose(0, 2, 1, 3).reshape(b * h, s, dh)

    q = split(_linear(x, params, prefix + "q"))
    k = split(_linear(x, params, prefix + "k"))
    v = split(_linear(x, params, prefix + "v"))
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
    out = T.softmax_last_dim(scores) @ v
    out = out.reshape(b, h, s, dh).transpose(0, 2, 1, 3).reshape(b, s, d)
    return _linear(out, params, prefix + "o")


def encoder_forward(seq: Tensor, params: GvleLvitParams) -> Tensor:
    cfg = params.config
    if cfg.dim % cfg.heads:
        raise ValueError(f"{cfg.heads} heads do not divide dim {cfg.dim}")
    act = T.gelu if cfg.activation == "gelu" else T.relu
    x = seq if seq.ndim == 3 else seq.reshape(1, *seq.shape)
    for i in range(cfg.depth):
        p = f"block{i}."
        h = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], cfg.ln_eps)
        x = x + attention(h, params, p + "attn.")
        h = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], cfg.ln_eps)
        x = x + _linear(act(_linear(h, params, p + "mlp.fc1")), params, p + "mlp.fc2")
    x = T.layer_norm(x, params["final_ln.g"], params["final_ln.b"], cfg.ln_eps)
    return x if seq.ndim == 3 else x.reshape(seq.shape)


# -- heads ----------------------------------------------------------------------

def class_logits(cls_repr: Tensor, params: GvleLvitParams) -> Tensor:
    return _linear(cls_repr, params, "head.cls")


def classify_head(cls_repr: Tensor, params: GvleLvitParams) -> Tensor:
    return T.softmax_last_dim(class_logits(cls_repr, params))


def localize_head(cls_repr: Tensor, params: GvleLvitParams) -> Tensor:
    """Normalized (cx, cy, w, h) in [0, 1] from a ReLU FFN."""
    h = T.relu(_linear(cls_repr, params, "head.box.fc1"))
    h = T.relu(_linear(h, params, "head.box.fc2"))
    return T.sigmoid(_linear(h, params, "head.box.fc3"))


class Prediction(NamedTuple):
    logits: Tensor  # [B, C]
    probs: Tensor  # [B, C]
    boxes: Tensor  # [B, 4] normalized cxcywh


def fuse(f: Tensor, e: Tensor, params: GvleLvitParams, strategy: str) -> Tensor:
    if strategy == "gated":
        return gvle_fuse(f, e, params)
    if strategy == "concat":
        return concat_fuse(f, e)
    raise ValueError(f"unknown fusion strategy {strategy!r}")


def model_forward(tokens, visual, params: GvleLvitParams, strategy: str | None = None,
                  visual_kind: str | None = None) -> Prediction:
    cfg = params.config
    strategy = strategy or cfg.fusion
    e = embed_text(tokens, params)
    f = embed_visual(visual, params, visual_kind)
    fused = fuse(f, e, params, strategy)
    b = fused.shape[0]
    cls = T.concat([params["cls"].reshape(1, 1, cfg.dim)] * b, axis=0)
    x = encoder_forward(T.concat([cls, fused], axis=1), params)
    cls_repr = x[:, 0, :]
    logits = class_logits(cls_repr, params)
    return Prediction(logits, T.softmax_last_dim(logits), localize_head(cls_repr, params))


def forward_batch(batch, params: GvleLvitParams, strategy: str | None = None) -> Prediction:
    return model_forward(batch.tokens, batch.visual, params, strategy, batch.visual_kind)
