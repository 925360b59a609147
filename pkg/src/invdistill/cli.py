"""Command-line workbench: train-teacher, distill, sample, eval, oracle-check.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from . import io as cio
from .distill import METRIC_COLUMNS, DistillConfig, init_state, run_distillation
from .errors import ConfigError, DataError, NumericError, RemoteUnavailable, WorkbenchError
from .losses import LOSS_KINDS, LOSS_PARAMETERIZATION, LossConfig, check_compatible, sequence_loss
from .metrics import MetricsLog, atomic_write, empirical_distribution, mean_entropy, render_csv
from .models import ModelConfig, init_denoiser, score_to_simplex
from .optim import AdamState, OptimizerConfig
from .oracle import (
    OracleModel,
    dirichlet_distribution,
    exact_idlm_loss,
    exact_kl,
    exact_sampler_distribution,
    total_variation,
)
from .plots import plot_bars, plot_curves, plot_scatter_diagonal
from .process import SCHEDULE_KINDS, NoiseSchedule, make_process, sample_xt
from .remote import endpoint_from_env, gen_ppl, remote_score
from .sampling import SAMPLER_KINDS, SamplerConfig, clean_rows, generate
from .training import onehot_batch, teacher_step

TEACHER_COLUMNS = ("step", "loss", "grad_norm", "oracle_tv", "wall_time_ms")
ORACLE_COLUMNS = ("process", "loss", "trial", "idlm_loss", "exact_kl", "gap", "ok")
DEFAULT_SAMPLER = {("absorbing", "x0"): "ancestral-absorbing", ("uniform", "x0"): "ancestral-uniform",
                   ("absorbing", "score"): "euler-score", ("uniform", "score"): "euler-score"}
ORACLE_CASES = (("absorbing", "mdlm"), ("absorbing", "sedd"), ("uniform", "udlm"))


@dataclass
class RunConfig:
    """Everything a command needs, validated as a whole before any work starts."""

    command: str
    process: str = "absorbing"
    loss: str = "mdlm"
    schedule: str = "log-linear"
    eps: float = 1e-3
    tau: float = 0.05
    d: int = 32
    blocks: int = 1
    heads: int = 2
    time_conditioning: bool | None = None
    temperature: float = 1.0
    sampler: str | None = None
    sampler_steps: int = 64
    steps: int = 1000
    batch: int = 32
    lr_teacher: float = 1e-3
    lr_fake: float = 1e-4
    lr_student: float = 1e-4
    warmup: int = 100
    weight_decay: float = 0.0
    ema_decay: float = 0.999
    fake_per_student: int = 1
    seed: int = 0
    toy_spec: str | None = None
    corpus: str | None = None
    corpus_mode: str = "char"
    length: int = 16
    teacher: str | None = None
    checkpoint: str | None = None
    samples: str | None = None
    out: str | None = None
    metrics: str | None = None
    state: str | None = None
    resume: bool = False
    checkpoint_every: int = 0
    log_every: int = 1
    eval_every: int = 0
    count: int = 16
    nll_draws: int = 8
    trials: int = 20
    export: str = "ema"
    timed: bool = False

    @property
    def parameterization(self) -> str:
        return LOSS_PARAMETERIZATION[self.loss]

    @property
    def conditions_on_time(self) -> bool:
        # the absorbing clean-data posterior does not depend on t
        if self.time_conditioning is None:
            return self.process != "absorbing"
        return self.time_conditioning

    @property
    def toy_mode(self) -> bool:
        return self.toy_spec is not None

    def validate(self):
        if self.process not in ("absorbing", "uniform"):
            raise ConfigError(f"unknown process {self.process!r}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.schedule not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.command in ("train-teacher", "distill"):
            check_compatible(self.loss, self.process, self.parameterization)
        if self.command == "distill" and self.loss == "sedd" and self.process != "absorbing":
            raise ConfigError("sedd distillation is only supported on the absorbing process")
        if self.sampler is not None:
            if self.sampler not in SAMPLER_KINDS:
                raise ConfigError(f"unknown sampler {self.sampler!r}")
            if self.sampler == "ancestral-absorbing" and self.process != "absorbing":
                raise ConfigError("ancestral-absorbing needs the absorbing process")
            if self.sampler in ("ancestral-uniform", "greedy-tail") and self.process != "uniform":
                raise ConfigError(f"{self.sampler} needs the uniform process")
        for name in ("steps", "checkpoint_every", "eval_every", "count", "trials"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch", "sampler_steps", "log_every", "nll_draws", "length", "fake_per_student"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.corpus_mode not in ("char", "byte"):
            raise ConfigError(f"unknown corpus mode {self.corpus_mode!r}")
        if self.export not in ("ema", "live"):
            raise ConfigError("export must be 'ema' or 'live'")
        if self.command == "train-teacher":
            if (self.toy_spec is None) == (self.corpus is None):
                raise ConfigError("give exactly one of --toy-spec or --corpus")
            if self.out is None:
                raise ConfigError("--out is required")
        if self.command == "distill":
            if self.teacher is None and not self.resume:
                raise ConfigError("--teacher is required")
            if self.resume and self.state is None:
                raise ConfigError("--resume needs --state")
            if self.out is None:
                raise ConfigError("--out is required")
        if self.command == "sample" and (self.checkpoint is None or self.out is None):
            raise ConfigError("sample needs --checkpoint and --out")
        if self.command == "eval" and self.samples is None:
            raise ConfigError("eval needs --samples")
        OptimizerConfig(lr_fake=self.lr_fake, lr_student=self.lr_student, lr_teacher=self.lr_teacher,
                        warmup=self.warmup, weight_decay=self.weight_decay, ema_decay=self.ema_decay)
        LossConfig(self.loss, tau=self.tau)
        return self

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr_fake=self.lr_fake, lr_student=self.lr_student,
                               lr_teacher=self.lr_teacher, warmup=self.warmup,
                               weight_decay=self.weight_decay, ema_decay=self.ema_decay)

    def loss_config(self) -> LossConfig:
        return LossConfig(self.loss, tau=self.tau)

    @classmethod
    def from_namespace(cls, ns) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in vars(ns).items() if k in known})


# ---------------------------------------------------------------- helpers

def _process_from_meta(meta: dict, n: int):
    schedule = NoiseSchedule(meta.get("schedule", "log-linear"), float(meta.get("eps", 1e-3)))
    return make_process(meta["process"], n, schedule)


def _process_size(kind: str, n_tokens: int) -> int:
    return n_tokens + 1 if kind == "absorbing" else n_tokens


def _load_data(cfg: RunConfig):
    """Returns ``(dataset, data meta)``; the dataset has ``sample``, ``n_tokens``, ``length``."""
    if cfg.toy_spec is not None:
        p = cio.load_toy_spec(cfg.toy_spec)
        return p, {"kind": "toy", "n_tokens": p.n_tokens, "length": p.length}
    if cfg.corpus is None:
        return None, None
    data = cio.ingest_corpus(cfg.corpus, cfg.corpus_mode, cfg.length)
    return data, {"kind": "corpus", "mode": data.mode, "vocab": data.vocab,
                  "n_tokens": data.n_tokens, "length": data.length, "digest": data.digest()}


def _check_data_matches(meta: dict, data_meta: dict | None):
    if data_meta is None:
        return
    stored = meta.get("data", {})
    for key in ("n_tokens", "length"):
        if key in stored and stored[key] != data_meta[key]:
            raise ConfigError(f"data {key}={data_meta[key]} does not match the checkpoint ({stored[key]})")


def _png_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".png"


def _model_rows(model, x_t, t, process):
    """Clean-token distributions predicted by ``model`` (mask column removed)."""
    out = model(x_t, t)
    vals = np.asarray(getattr(out, "data", out))
    if model.parameterization == "score":
        if process.kind != "absorbing":
            return None
        vals = score_to_simplex(vals, x_t, process.mask_index)
    return clean_rows(vals, process)


def oracle_posterior_tv(model, p, process, rng, count: int = 256, times=(0.25, 0.5, 0.75)) -> float:
    """Mean TV between the model's and the exact posterior over noisy positions.

    Absorbing: masked positions against the Bayes posterior. Uniform: every
    position against the leave-one-out posterior.
    """
    oracle = OracleModel(p, process, "mdlm" if process.kind == "absorbing" else "udlm")
    total, weight = 0.0, 0
    for t in times:
        x0 = p.sample(count, rng)
        tt = np.full(count, t)
        x_t = sample_xt(process, tt[:, None], x0, rng)
        rows = _model_rows(model, x_t, tt, process)
        if rows is None:
            return float("nan")
        ref = clean_rows(oracle(x_t, tt), process)
        tv = 0.5 * np.abs(rows - ref).sum(axis=-1)
        sel = x_t == process.mask_index if process.kind == "absorbing" else np.ones_like(x_t, bool)
        total += float(tv[sel].sum())
        weight += int(sel.sum())
    return total / weight if weight else 0.0


def mc_nll(model, seqs, process, loss_kind: str, draws: int, rng) -> np.ndarray:
    """Monte Carlo negative ELBO (nats) of every sequence under ``model``."""
    kind = "udlm" if loss_kind == "duo" else loss_kind
    cfg = LossConfig(kind, include_constant=(kind == "sedd"))
    out = np.empty(len(seqs))
    for i, seq in enumerate(np.asarray(seqs, dtype=np.int64)):
        x0 = onehot_batch(np.repeat(seq[None], draws, axis=0), process.n)
        times = (np.arange(draws) + rng.random()) / draws
        value = sequence_loss(cfg, model, x0, process, rng, times[:, None])
        out[i] = float(getattr(value, "data", value))
    return out


def _say(msg: str):
    print(msg, flush=True)


# ---------------------------------------------------------------- commands

def cmd_train_teacher(cfg: RunConfig) -> int:
    data, data_meta = _load_data(cfg)
    if getattr(data, "size", 1) == 0:
        raise DataError("dataset is empty")
    n = _process_size(cfg.process, data_meta["n_tokens"])
    process = make_process(cfg.process, n, NoiseSchedule(cfg.schedule, cfg.eps))
    rng = np.random.default_rng(cfg.seed)
    model_cfg = ModelConfig(n=n, length=data_meta["length"], d=cfg.d, blocks=cfg.blocks, heads=cfg.heads,
                            time_conditioning=cfg.conditions_on_time, temperature=cfg.temperature,
                            mask_index=process.mask_index)
    model = init_denoiser(model_cfg, cfg.parameterization, rng)
    loss_cfg, opt = cfg.loss_config(), cfg.optimizer()
    log = MetricsLog(cfg.metrics, TEACHER_COLUMNS)
    eval_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    for step in range(1, cfg.steps + 1):
        start = time.perf_counter()
        loss, gnorm = teacher_step(model, data.sample(cfg.batch, rng), process, loss_cfg, state, opt, rng)
        if step % cfg.log_every and step != cfg.steps:
            continue
        tv = oracle_posterior_tv(model, data, process, eval_rng) if cfg.toy_mode else float("nan")
        log.append({"step": step, "loss": loss, "grad_norm": gnorm, "oracle_tv": tv,
                    "wall_time_ms": (time.perf_counter() - start) * 1e3 if cfg.timed else 0.0})
    meta = {"process": cfg.process, "schedule": cfg.schedule, "eps": cfg.eps, "loss": cfg.loss,
            "tau": cfg.tau, "data": data_meta, "role": "teacher"}
    cio.save_checkpoint(model, cfg.out, rng, meta)
    if cfg.metrics:
        log.flush()
        plot_curves(log.rows, "step", TEACHER_COLUMNS[1:4], _png_path(cfg.metrics), "teacher training")
    last = log.rows[-1] if log.rows else {}
    _say(f"teacher saved to {cfg.out} after {cfg.steps} steps; final loss {last.get('loss', float('nan')):.6g}"
         + (f", oracle TV {last['oracle_tv']:.4g}" if cfg.toy_mode and last else ""))
    return 0


def _exact_kl_of(model, process, sampler, steps, p) -> float:
    law = exact_sampler_distribution(model, process, SamplerConfig(sampler, steps), p.length)
    return exact_kl(law, p)


def cmd_distill(cfg: RunConfig) -> int:
    if cfg.resume:
        state, rng, run_meta = cio.load_distill_state(cfg.state)
        meta = run_meta["teacher_meta"]
    else:
        meta = cio.checkpoint_meta(cfg.teacher)
        teacher = cio.load_checkpoint(cfg.teacher)
        if meta.get("process") is None:
            raise ConfigError("teacher checkpoint does not record its process")
        check_compatible(meta["loss"], meta["process"], teacher.parameterization)
        state = init_state(teacher)
        rng = np.random.default_rng(cfg.seed)
    if meta["process"] == "uniform" and meta["loss"] == "sedd":
        raise ConfigError("sedd distillation is only supported on the absorbing process")
    data, data_meta = _load_data(cfg)
    if data is None:
        raise ConfigError("distill needs --toy-spec or --corpus for the conditioning data")
    _check_data_matches(meta, data_meta)
    process = _process_from_meta(meta, state.teacher.config.n)
    loss_cfg = LossConfig(meta["loss"], tau=float(meta.get("tau", 0.05)))
    kind = "score" if state.teacher.parameterization == "score" else "x0"
    sampler = cfg.sampler or DEFAULT_SAMPLER[(process.kind, kind)]
    eval_steps = cfg.sampler_steps
    dcfg = DistillConfig(loss_cfg, cfg.optimizer(), steps=cfg.steps, batch=cfg.batch,
                         fake_per_student=cfg.fake_per_student, seed=cfg.seed)
    log = MetricsLog(cfg.metrics, METRIC_COLUMNS)
    if cfg.resume:
        log.load()
        log.rows = [r for r in log.rows if r["step"] <= state.step]

    def exported(st):
        return st.ema if cfg.export == "ema" else st.student

    def evaluate(st):
        if not cfg.eval_every or st.step % cfg.eval_every:
            return {}
        erng = np.random.default_rng([cfg.seed, 2, st.step])
        model = exported(st)
        seqs, stats = generate(model, process, SamplerConfig(sampler, eval_steps), 32, model.config.length, erng)
        extra = {"clip_rate": stats["clip_rate"],
                 "nll": float(mc_nll(st.teacher, seqs, process, loss_cfg.kind, cfg.nll_draws, erng).mean())}
        if cfg.toy_mode and sampler != "euler-score":
            extra["exact_kl"] = _exact_kl_of(model, process, sampler, eval_steps, data)
        return extra

    def on_step(row):
        if not cfg.timed:
            row["wall_time_ms"] = 0.0
        log.append(row)
        if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            _checkpoint()

    def _checkpoint():
        log.flush()
        if cfg.state:
            cio.save_distill_state(state, cfg.state, rng, {"teacher_meta": meta})

    run_distillation(state, data, process, dcfg, rng, on_step=on_step, evaluate=evaluate, timed=cfg.timed)
    _checkpoint()
    cio.save_checkpoint(exported(state), cfg.out, rng, dict(meta, role="student", distill_steps=state.step))
    if cfg.metrics:
        plot_curves(log.rows, "step", ("loss_fake", "loss_student", "grad_norm_student", "entropy", "exact_kl"),
                    _png_path(cfg.metrics), "distillation")
    _say(f"student saved to {cfg.out} after {state.step} steps")
    return 0


def _write_samples(path, seqs, decode=None):
    lines = []
    for seq in seqs:
        lines.append(" ".join(str(int(t)) for t in seq))
        if decode is not None:
            lines.append("# " + decode(seq))
    atomic_write(path, "\n".join(lines) + ("\n" if lines else ""))


def read_samples(path: str) -> np.ndarray:
    """Parse a samples file: one line of space-separated ids per sample, ``#`` lines ignored."""
    if not os.path.exists(path):
        raise DataError(f"samples file {path} does not exist")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for num, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rows.append([int(tok) for tok in line.split()])
            except ValueError:
                raise DataError(f"{path}:{num}: not a list of integer token ids") from None
    if not rows:
        raise DataError(f"{path} holds no samples")
    if len({len(r) for r in rows}) != 1:
        raise DataError(f"{path}: samples have different lengths")
    arr = np.asarray(rows, dtype=np.int64)
    if arr.min() < 0:
        raise DataError(f"{path}: negative token id")
    return arr


def _decoder(meta, process):
    data = meta.get("data", {})
    if data.get("kind") != "corpus":
        return None
    mask = process.mask_index if process.kind == "absorbing" else None
    return lambda seq: cio.decode_tokens(seq, data["vocab"], data["mode"], mask)


def cmd_sample(cfg: RunConfig) -> int:
    meta = cio.checkpoint_meta(cfg.checkpoint)
    model = cio.load_checkpoint(cfg.checkpoint)
    process = _process_from_meta(meta, model.config.n)
    kind = "score" if model.parameterization == "score" else "x0"
    sampler = SamplerConfig(cfg.sampler or DEFAULT_SAMPLER[(process.kind, kind)], cfg.sampler_steps, cfg.seed)
    seqs, stats = generate(model, process, sampler, cfg.count, model.config.length,
                           np.random.default_rng(cfg.seed))
    _write_samples(cfg.out, seqs, _decoder(meta, process))
    _say(f"wrote {len(seqs)} samples to {cfg.out} ({sampler.kind}, {sampler.steps} steps, "
         f"clip rate {stats['clip_rate']:.4g})")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    seqs = read_samples(cfg.samples)
    report = {"count": len(seqs), "entropy": mean_entropy(seqs)}
    p = cio.load_toy_spec(cfg.toy_spec) if cfg.toy_spec else None
    if p is not None:
        if seqs.shape[1] != p.length or seqs.max() >= p.n_tokens:
            raise DataError("samples do not fit the toy spec")
        emp = empirical_distribution(seqs, p.n_tokens)
        report["empirical_tv"] = total_variation(emp, p)
        report["empirical_kl"] = exact_kl(emp, p)
    if cfg.checkpoint:
        meta = cio.checkpoint_meta(cfg.checkpoint)
        model = cio.load_checkpoint(cfg.checkpoint)
        process = _process_from_meta(meta, model.config.n)
        if seqs.shape[1] != model.config.length or seqs.max() >= process.n_clean:
            raise DataError("samples do not fit the reference checkpoint")
        rng = np.random.default_rng(cfg.seed)
        report["nll"] = float(mc_nll(model, seqs, process, meta["loss"], cfg.nll_draws, rng).mean())
        if p is not None:
            kind = "score" if model.parameterization == "score" else "x0"
            sampler = cfg.sampler or DEFAULT_SAMPLER[(process.kind, kind)]
            if sampler != "euler-score":
                report["exact_kl"] = _exact_kl_of(model, process, sampler, cfg.sampler_steps, p)
    endpoint = endpoint_from_env()
    if endpoint:
        try:
            nll = remote_score(endpoint, seqs)
            report["gen_ppl"] = gen_ppl(nll, [seqs.shape[1]] * len(seqs))
        except RemoteUnavailable as exc:
            print(f"warning: {exc}; gen_ppl omitted", file=sys.stderr)
    for key, value in report.items():
        _say(f"{key}\t{value:.10g}" if isinstance(value, float) else f"{key}\t{value}")
    if cfg.out:
        atomic_write(cfg.out, render_csv(("metric", "value"),
                                         [{"metric": k, "value": v} for k, v in report.items()]))
        labels = [k for k in report if k != "count"]
        plot_bars(labels, [float(report[k]) for k in labels], _png_path(cfg.out), title="evaluation")
    return 0


def cmd_oracle_check(cfg: RunConfig) -> int:
    """Exact check that the distillation loss upper-bounds the KL on small instances."""
    rng = np.random.default_rng(cfg.seed)
    p_user = cio.load_toy_spec(cfg.toy_spec) if cfg.toy_spec else None
    rows = []
    for proc_kind, loss in ORACLE_CASES:
        p_star = p_user or dirichlet_distribution(3, 2, rng)
        # zero floor on the absorbing schedule so the terminal law is exactly all-mask
        eps = 0.0 if proc_kind == "absorbing" else cfg.eps
        process = make_process(proc_kind, _process_size(proc_kind, p_star.n_tokens),
                               NoiseSchedule(cfg.schedule, eps))
        teacher = OracleModel(p_star, process, loss)
        for trial in range(cfg.trials + 1):
            p_theta = p_star if trial == 0 else dirichlet_distribution(p_star.n_tokens, p_star.length, rng)
            value = exact_idlm_loss(p_theta, teacher, process, loss)
            kl = exact_kl(p_theta, p_star)
            ok = value >= kl - 1e-9 and (trial > 0 or value <= 1e-8)
            rows.append({"process": proc_kind, "loss": loss, "trial": trial, "idlm_loss": value,
                         "exact_kl": kl, "gap": value - kl, "ok": int(ok)})
    bad = [r for r in rows if not r["ok"]]
    for proc_kind, loss in ORACLE_CASES:
        sel = [r for r in rows if r["process"] == proc_kind and r["loss"] == loss]
        _say(f"{proc_kind}/{loss}: {sum(r['ok'] for r in sel)}/{len(sel)} ok, "
             f"min gap {min(r['gap'] for r in sel):.3g}")
    if cfg.out:
        atomic_write(cfg.out, render_csv(ORACLE_COLUMNS, rows))
        plot_scatter_diagonal([r["exact_kl"] for r in rows], [r["idlm_loss"] for r in rows],
                              _png_path(cfg.out), "exact KL", "distillation loss",
                              groups=[f"{r['process']}/{r['loss']}" for r in rows])
    if bad:
        raise NumericError(f"{len(bad)} oracle checks failed")
    return 0


COMMANDS = {"train-teacher": cmd_train_teacher, "distill": cmd_distill, "sample": cmd_sample,
            "eval": cmd_eval, "oracle-check": cmd_oracle_check}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    defaults = RunConfig("x")

    def common(p):
        p.add_argument("--seed", type=int, default=defaults.seed)
        p.add_argument("--out", help="output path")
        return p

    def data_args(p):
        p.add_argument("--toy-spec", dest="toy_spec", help="JSON toy distribution (enables toy mode)")
        p.add_argument("--corpus", help="text corpus to ingest")
        p.add_argument("--corpus-mode", dest="corpus_mode", choices=("char", "byte"), default="char")
        p.add_argument("--length", type=int, default=defaults.length, help="window length for corpora")

    def sampler_args(p, steps=defaults.sampler_steps):
        p.add_argument("--sampler", choices=SAMPLER_KINDS)
        p.add_argument("--sampler-steps", dest="sampler_steps", type=int, default=steps)

    def opt_args(p):
        p.add_argument("--steps", type=int, default=defaults.steps)
        p.add_argument("--batch", type=int, default=defaults.batch)
        p.add_argument("--warmup", type=int, default=defaults.warmup)
        p.add_argument("--weight-decay", dest="weight_decay", type=float, default=defaults.weight_decay)
        p.add_argument("--metrics", help="metrics CSV (a PNG is written next to it)")
        p.add_argument("--timed", action="store_true", help="record wall time (breaks byte-identical reruns)")

    p = common(sub.add_parser("train-teacher", help="train a denoiser on data or a toy distribution"))
    data_args(p)
    opt_args(p)
    p.add_argument("--process", choices=("absorbing", "uniform"), default=defaults.process)
    p.add_argument("--loss", choices=LOSS_KINDS, default=defaults.loss)
    p.add_argument("--schedule", choices=SCHEDULE_KINDS, default=defaults.schedule)
    p.add_argument("--eps", type=float, default=defaults.eps)
    p.add_argument("--tau", type=float, default=defaults.tau)
    p.add_argument("--d", type=int, default=defaults.d)
    p.add_argument("--blocks", type=int, default=defaults.blocks)
    p.add_argument("--heads", type=int, default=defaults.heads)
    p.add_argument("--time-conditioning", dest="time_conditioning", action=argparse.BooleanOptionalAction,
                   default=None, help="feed t to the denoiser (default: only for the uniform process)")
    p.add_argument("--temperature", type=float, default=defaults.temperature)
    p.add_argument("--lr", dest="lr_teacher", type=float, default=defaults.lr_teacher)
    p.add_argument("--log-every", dest="log_every", type=int, default=defaults.log_every)

    p = common(sub.add_parser("distill", help="distill a teacher checkpoint into a few-step student"))
    data_args(p)
    opt_args(p)
    sampler_args(p, steps=4)
    p.add_argument("--teacher", help="teacher checkpoint")
    p.add_argument("--lr-fake", dest="lr_fake", type=float, default=defaults.lr_fake)
    p.add_argument("--lr-student", dest="lr_student", type=float, default=defaults.lr_student)
    p.add_argument("--ema-decay", dest="ema_decay", type=float, default=defaults.ema_decay)
    p.add_argument("--fake-per-student", dest="fake_per_student", type=int, default=defaults.fake_per_student)
    p.add_argument("--state", help="resumable state file")
    p.add_argument("--resume", action="store_true", help="continue from --state")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int, default=defaults.checkpoint_every)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=defaults.eval_every)
    p.add_argument("--nll-draws", dest="nll_draws", type=int, default=defaults.nll_draws)
    p.add_argument("--export", choices=("ema", "live"), default=defaults.export)

    p = common(sub.add_parser("sample", help="generate sequences from a checkpoint"))
    sampler_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=defaults.count)

    p = common(sub.add_parser("eval", help="score a samples file (--out writes a CSV report and PNG)"))
    sampler_args(p)
    p.add_argument("--samples", required=True)
    p.add_argument("--checkpoint", help="reference checkpoint for NLL and exact KL")
    p.add_argument("--toy-spec", dest="toy_spec")
    p.add_argument("--nll-draws", dest="nll_draws", type=int, default=defaults.nll_draws)

    p = common(sub.add_parser("oracle-check", help="exact bound check on small enumerable instances"))
    p.add_argument("--toy-spec", dest="toy_spec", help="use this p* instead of random ones")
    p.add_argument("--trials", type=int, default=defaults.trials)
    p.add_argument("--schedule", choices=SCHEDULE_KINDS, default=defaults.schedule)
    p.add_argument("--eps", type=float, default=defaults.eps)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = RunConfig.from_namespace(ns)
        if ns.command in ("sample", "eval") and cfg.checkpoint:
            meta = cio.checkpoint_meta(cfg.checkpoint)
            cfg.process = meta.get("process", cfg.process)
            cfg.loss = meta.get("loss", cfg.loss)
        cfg.validate()
        return COMMANDS[ns.command](cfg)
    except WorkbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
