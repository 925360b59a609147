"""Checkpoints, toy-distribution specs and corpus ingestion.

Checkpoints are JSON envelopes; every weight array is stored as base64 of
its little-endian float64 bytes so a save/load/save cycle is byte-identical.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointParseError, DataError, IncompatibleCheckpoint, SpecError
from .metrics import atomic_write
from .models import DenoiserParams, ModelConfig
from .optim import AdamState
from .oracle import ToyDistribution

FORMAT_VERSION = 1
STATE_FORMAT_VERSION = 1
SPEC_SUM_TOL = 1e-9


def encode_array(arr) -> dict:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(arr.shape), "data": base64.b64encode(arr.tobytes()).decode("ascii")}


def decode_array(blob) -> np.ndarray:
    try:
        raw = base64.b64decode(blob["data"], validate=True)
        shape = tuple(int(s) for s in blob["shape"])
    except (binascii.Error, KeyError, TypeError, ValueError) as exc:
        raise CheckpointParseError(f"corrupt array payload: {exc}") from None
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != 8 * count:
        raise CheckpointParseError(f"array payload holds {len(raw)} bytes, expected {8 * count}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def rng_state(rng: np.random.Generator | None):
    return None if rng is None else rng.bit_generator.state


def restore_rng(state) -> np.random.Generator:
    if state is None:
        raise CheckpointParseError("checkpoint carries no rng state")
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def params_envelope(params: DenoiserParams, rng=None, meta=None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "model_config": params.config.to_dict(),
        "parameterization": params.parameterization,
        "rng_state": rng_state(rng),
        "arrays": {k: encode_array(v) for k, v in params.arrays().items()},
        "meta": meta or {},
    }


def params_from_envelope(env: dict, n: int | None = None) -> DenoiserParams:
    if not isinstance(env, dict):
        raise CheckpointParseError("checkpoint is not a JSON object")
    if env.get("format_version") != FORMAT_VERSION:
        raise IncompatibleCheckpoint(
            f"checkpoint format {env.get('format_version')!r}, expected {FORMAT_VERSION}")
    try:
        config = ModelConfig.from_dict(env["model_config"])
        arrays = {k: decode_array(v) for k, v in env["arrays"].items()}
        kind = env["parameterization"]
    except (KeyError, TypeError) as exc:
        raise CheckpointParseError(f"checkpoint is missing a field: {exc}") from None
    if n is not None and config.n != n:
        raise IncompatibleCheckpoint(f"checkpoint vocabulary is {config.n}, expected {n}")
    return DenoiserParams(config, kind, arrays)


def save_checkpoint(params: DenoiserParams, path: str, rng=None, meta=None):
    atomic_write(path, _dumps(params_envelope(params, rng, meta)))


def read_envelope(path: str) -> dict:
    if not os.path.exists(path):
        raise DataError(f"checkpoint {path} does not exist")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointParseError(f"{path}: {exc}") from None


def load_checkpoint(path: str, n: int | None = None) -> DenoiserParams:
    return params_from_envelope(read_envelope(path), n)


def checkpoint_meta(path: str) -> dict:
    return read_envelope(path).get("meta", {})


def _adam_to_json(state: AdamState) -> dict:
    return {"step": state.step,
            "m": {k: encode_array(v) for k, v in state.m.items()},
            "v": {k: encode_array(v) for k, v in state.v.items()}}


def _adam_from_json(blob) -> AdamState:
    return AdamState(m={k: decode_array(v) for k, v in blob["m"].items()},
                     v={k: decode_array(v) for k, v in blob["v"].items()},
                     step=int(blob["step"]))


def save_distill_state(state, path: str, rng: np.random.Generator, meta=None):
    """Everything needed to continue a distillation run bit-exactly."""
    env = {
        "format_version": STATE_FORMAT_VERSION,
        "step": state.step,
        "rng_state": rng_state(rng),
        "models": {name: params_envelope(getattr(state, name))
                   for name in ("teacher", "fake", "student", "ema")},
        "fake_opt": _adam_to_json(state.fake_opt),
        "student_opt": _adam_to_json(state.student_opt),
        "meta": meta or {},
    }
    atomic_write(path, _dumps(env))


def load_distill_state(path: str):
    """Returns ``(DistillState, rng, meta)``."""
    from .distill import DistillState

    env = read_envelope(path)
    if env.get("format_version") != STATE_FORMAT_VERSION or "models" not in env:
        raise IncompatibleCheckpoint(f"{path} is not a distillation state file")
    try:
        models = {k: params_from_envelope(v) for k, v in env["models"].items()}
        state = DistillState(teacher=models["teacher"].set_requires_grad(False),
                             fake=models["fake"], student=models["student"],
                             ema=models["ema"].set_requires_grad(False),
                             fake_opt=_adam_from_json(env["fake_opt"]),
                             student_opt=_adam_from_json(env["student_opt"]),
                             step=int(env["step"]))
    except (KeyError, TypeError) as exc:
        raise CheckpointParseError(f"state file is missing a field: {exc}") from None
    return state, restore_rng(env["rng_state"]), env.get("meta", {})


def load_toy_spec(path: str) -> ToyDistribution:
    """Read ``{"n_tokens", "length", "probs"}`` with probs in enumeration order."""
    try:
        with open(path, encoding="utf-8") as fh:
            spec = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise SpecError(f"cannot read toy spec {path}: {exc}") from None
    return toy_from_dict(spec)


def toy_from_dict(spec) -> ToyDistribution:
    try:
        n_tokens, length = int(spec["n_tokens"]), int(spec["length"])
        probs = np.asarray(spec["probs"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise SpecError(f"malformed toy spec: {exc}") from None
    if n_tokens < 1 or length < 1:
        raise SpecError("n_tokens and length must be positive")
    if probs.ndim != 1 or probs.size != n_tokens ** length:
        raise SpecError(f"expected {n_tokens ** length} probabilities, got {probs.size}")
    if not np.all(np.isfinite(probs)) or np.any(probs < 0):
        raise SpecError("probabilities must be finite and non-negative")
    if abs(probs.sum() - 1.0) > SPEC_SUM_TOL:
        raise SpecError(f"probabilities sum to {probs.sum():.12g}, not 1")
    return ToyDistribution(n_tokens, length, probs)


def save_toy_spec(p: ToyDistribution, path: str):
    atomic_write(path, _dumps({"n_tokens": p.n_tokens, "length": p.length,
                               "probs": [float(v) for v in p.probs]}))


@dataclass
class CorpusDataset:
    """Fixed-length windows over a tokenized corpus.

    Data tokens are ``0..n_tokens-1`` where the last one is the separator;
    an absorbing process adds the mask at ``n_tokens``.
    """

    windows: np.ndarray
    vocab: list
    mode: str

    @property
    def n_tokens(self) -> int:
        return len(self.vocab) + 1

    @property
    def separator(self) -> int:
        return len(self.vocab)

    @property
    def length(self) -> int:
        return self.windows.shape[1]

    @property
    def size(self) -> int:
        return self.windows.shape[0]

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return self.windows[rng.integers(0, self.size, size=count)]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.mode.encode())
        h.update(json.dumps(self.vocab).encode())
        h.update(json.dumps(list(self.windows.shape)).encode())
        h.update(np.ascontiguousarray(self.windows, dtype="<i8").tobytes())
        return h.hexdigest()

    def decode(self, seq, mask_index: int | None = None) -> str:
        return decode_tokens(seq, self.vocab, self.mode, mask_index)


def decode_tokens(seq, vocab, mode: str, mask_index: int | None = None) -> str:
    """Readable text; the separator shows as a newline escape, the mask as ``_``."""
    parts = []
    for tok in np.asarray(seq, dtype=np.int64).tolist():
        if tok < len(vocab):
            parts.append(vocab[tok] if mode == "char" else chr(vocab[tok]))
        elif tok == len(vocab):
            parts.append("\\n")
        else:
            parts.append("_")
    text = "".join(parts)
    if mode == "byte":
        text = text.encode("latin-1", "replace").decode("utf-8", "replace")
    return text


def ingest_corpus(path: str, mode: str, length: int) -> CorpusDataset:
    """Tokenize a text file line by line, join with a separator and cut length-``length`` windows.

    ``char`` mode uses the sorted set of observed characters as vocabulary;
    ``byte`` mode always uses all 256 byte values. A trailing partial window
    is dropped.
    """
    if mode not in ("char", "byte"):
        raise DataError(f"unknown corpus mode {mode!r}")
    if length < 1:
        raise DataError("window length must be >= 1")
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from None
    if mode == "char":
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataError(f"corpus is not valid UTF-8: {exc}") from None
        lines = [ln for ln in text.splitlines() if ln]
        vocab = sorted(set("".join(lines)))
        lookup = {c: i for i, c in enumerate(vocab)}
        encoded = [[lookup[c] for c in ln] for ln in lines]
    else:
        lines = [ln for ln in raw.splitlines() if ln]
        vocab = list(range(256))
        encoded = [list(ln) for ln in lines]
    if not lines:
        raise DataError(f"corpus {path} is empty")
    sep = len(vocab)
    stream = np.asarray([tok for ln in encoded for tok in ln + [sep]], dtype=np.int64)
    count = stream.size // length
    if count == 0:
        raise DataError(f"corpus yields {stream.size} tokens, fewer than one window of {length}")
    return CorpusDataset(stream[: count * length].reshape(count, length), vocab, mode)
