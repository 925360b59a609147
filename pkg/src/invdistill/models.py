"""Tiny bidirectional transformer denoisers.

Three output parameterizations share one trunk:

* ``score``   -- strictly positive ratios ``exp(logits)``;
* ``x0-subs`` -- clean-token distribution with the mask logit removed and
  unmasked inputs copied through exactly;
* ``x0-duo``  -- clean-token distribution over the whole vocabulary, accepting
  token ids or rows of the simplex (the latter via a soft embedding lookup).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, InputKindError, ShapeError

PARAMETERIZATIONS = ("score", "x0-subs", "x0-duo")
INIT_STD = 0.02
N_FREQ = 8


@dataclass(frozen=True)
class ModelConfig:
    n: int
    length: int
    d: int = 64
    blocks: int = 2
    heads: int = 2
    dropout: float = 0.0
    time_conditioning: bool = True
    temperature: float = 1.0
    mask_index: int | None = None

    def __post_init__(self):
        if self.d < 1 or self.blocks < 1 or self.length < 1:
            raise ConfigError("d, blocks and length must all be >= 1")
        if self.n < 2:
            raise ConfigError("vocabulary must hold at least two tokens")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.dropout != 0.0:
            raise ConfigError("dropout is not supported at this scale")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


class DenoiserParams:
    """Named weight tensors plus the static description needed to run them."""

    def __init__(self, config: ModelConfig, parameterization: str, arrays: dict):
        if parameterization not in PARAMETERIZATIONS:
            raise ConfigError(f"unknown parameterization {parameterization!r}")
        if parameterization == "x0-subs" and config.mask_index is None:
            raise ConfigError("x0-subs needs a mask index in the model config")
        self.config = config
        self.parameterization = parameterization
        self.tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}

    @property
    def time_independent(self) -> bool:
        return not self.config.time_conditioning

    def set_requires_grad(self, flag: bool) -> "DenoiserParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def names(self):
        return list(self.tensors)

    def params(self):
        return list(self.tensors.values())

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __call__(self, x, t):
        return denoiser_forward(self, x, t)


def _param_shapes(config: ModelConfig):
    d, n = config.d, config.n
    shapes = {"tok_emb": (n, d), "pos_emb": (config.length, d)}
    if config.time_conditioning:
        shapes["time_w"] = (2 * N_FREQ, d)
        shapes["time_b"] = (d,)
    for b in range(config.blocks):
        p = f"block{b}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "qkv_w": (d, 3 * d), p + "qkv_b": (3 * d,),
            p + "out_w": (d, d), p + "out_b": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "mlp1_w": (d, 4 * d), p + "mlp1_b": (4 * d,),
            p + "mlp2_w": (4 * d, d), p + "mlp2_b": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "head_w": (d, n), "head_b": (n,)})
    return shapes


def init_denoiser(config: ModelConfig, parameterization: str,
                  rng: np.random.Generator) -> DenoiserParams:
    arrays = {}
    for name, shape in _param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            arrays[name] = np.ones(shape)
        elif leaf.endswith("_b"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(0.0, INIT_STD, size=shape)
    return DenoiserParams(config, parameterization, arrays)


def time_features(t, batch: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), N_FREQ))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _attention(h: Tensor, params: DenoiserParams, prefix: str) -> Tensor:
    cfg = params.config
    bsz, length, d = h.shape
    dh = d // cfg.heads
    qkv = h @ params[prefix + "qkv_w"] + params[prefix + "qkv_b"]
    qkv = ad.transpose(qkv.reshape(bsz, length, 3, cfg.heads, dh), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = ad.softmax((q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh)), axis=-1)
    out = ad.transpose(att @ v, (0, 2, 1, 3)).reshape(bsz, length, d)
    return out @ params[prefix + "out_w"] + params[prefix + "out_b"]


def _norm(h, params, prefix):
    return ad.layer_norm(h) * params[prefix + "_g"] + params[prefix + "_b"]


def _embed(params: DenoiserParams, x):
    """Returns (embedding, token ids or None, batched flag)."""
    cfg = params.config
    if isinstance(x, Tensor) or (isinstance(x, np.ndarray) and x.dtype.kind == "f"):
        if params.parameterization != "x0-duo":
            raise InputKindError(f"{params.parameterization} models take token ids, not simplex rows")
        xs = x if isinstance(x, Tensor) else Tensor(x)
        if xs.shape[-1] != cfg.n:
            raise ShapeError(f"simplex rows must have {cfg.n} entries")
        batched = xs.ndim == 3
        if not batched:
            xs = xs.reshape(1, *xs.shape)
        return xs @ params["tok_emb"], None, batched
    tokens = np.asarray(x)
    if tokens.dtype.kind not in "iu":
        raise InputKindError("token input must be an integer array")
    batched = tokens.ndim == 2
    if not batched:
        tokens = tokens[None]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.n):
        raise ShapeError("token id out of range")
    return ad.gather(params["tok_emb"], tokens), tokens, batched


def denoiser_logits(params: DenoiserParams, x, t):
    cfg = params.config
    h, tokens, batched = _embed(params, x)
    bsz, length, _ = h.shape
    if length != cfg.length:
        raise ShapeError(f"expected sequences of length {cfg.length}, got {length}")
    h = h + params["pos_emb"]
    if cfg.time_conditioning:
        temb = Tensor(time_features(t, bsz)) @ params["time_w"] + params["time_b"]
        h = h + temb.reshape(bsz, 1, cfg.d)
    for b in range(cfg.blocks):
        p = f"block{b}."
        h = h + _attention(_norm(h, params, p + "ln1"), params, p)
        z = _norm(h, params, p + "ln2")
        z = ad.gelu(z @ params[p + "mlp1_w"] + params[p + "mlp1_b"])
        h = h + z @ params[p + "mlp2_w"] + params[p + "mlp2_b"]
    h = _norm(h, params, "lnf")
    return h @ params["head_w"] + params["head_b"], tokens, batched


def denoiser_forward(params: DenoiserParams, x, t) -> Tensor:
    """Per-position output of shape ``(batch, L, N)`` (batch dim dropped if absent)."""
    cfg = params.config
    logits, tokens, batched = denoiser_logits(params, x, t)
    kind = params.parameterization
    if kind == "score":
        out = ad.exp(logits)
    elif kind == "x0-subs":
        m = cfg.mask_index
        allowed = np.ones(cfg.n, dtype=bool)
        allowed[m] = False
        probs = ad.softmax(logits * (1.0 / cfg.temperature), axis=-1,
                           where=np.broadcast_to(allowed, logits.shape))
        masked = (tokens == m)[..., None]
        onehot = np.eye(cfg.n)[tokens]
        out = ad.where(np.broadcast_to(masked, logits.shape), probs, onehot)
    else:
        out = ad.softmax(logits * (1.0 / cfg.temperature), axis=-1)
    if not batched:
        out = out[0]
    return out


def score_to_simplex(score, tokens, mask_index: int):
    """Turn absorbing-process ratios into clean-token distributions.

    Masked positions normalize the ratios over non-mask tokens (which is the
    posterior); unmasked positions are copied through as one-hot rows.
    """
    n = score.shape[-1]
    keep = np.ones(n)
    keep[mask_index] = 0.0
    ratios = score * keep
    probs = ratios / ratios.sum(axis=-1, keepdims=True)
    tokens = np.asarray(tokens)
    onehot = np.eye(n)[tokens]
    masked = np.broadcast_to((tokens == mask_index)[..., None], onehot.shape)
    if isinstance(probs, Tensor):
        return ad.where(masked, probs, onehot)
    return np.where(masked, probs, onehot)


def copy_params(src: DenoiserParams) -> DenoiserParams:
    return DenoiserParams(src.config, src.parameterization,
                          {k: v.copy() for k, v in src.arrays().items()})


def ema_update(shadow: DenoiserParams, live: DenoiserParams, decay: float) -> DenoiserParams:
    if not 0.0 <= decay < 1.0:
        raise ConfigError(f"EMA decay must lie in [0, 1), got {decay}")
    if shadow.names() != live.names():
        raise ShapeError("EMA shadow and live models have different layouts")
    for name, tensor in shadow.tensors.items():
        src = live.tensors[name].data
        if tensor.shape != src.shape:
            raise ShapeError(f"shape mismatch for {name}")
        tensor.data = decay * tensor.data + (1.0 - decay) * src
    return shadow
