"""Synthetic workloads, ablations, desk-scale training, scaling benchmark,
and correlation diagnostics.

Workloads plant a known subset of query-aligned tokens among random
distractors, giving ground truth for recall.  The benchmark feeds
either the full or the selected token stream into a quadratic-cost mock
downstream block and reports wall times; ablations compare the selector
against uniform-stride retention at the same per-instance budget.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tape, Var
from .config import RunConfig
from .errors import InputError, NumericError, ParameterError
from .objective import DualState, PenaltyWeights, dual_ascent, total_loss
from .selector import DiagnosticsRecord, SelectionResult, SelectorModel, select
from .tensorio import atomic_write_text


class AblationVariant(Enum):
    UNIF = "UNIF"
    NREENC = "nREENC"
    QTS = "QTS"


@dataclass(frozen=True)
class WorkloadSpec:
    """Planted-relevance workload parameters.

    Either give ``m`` directly, or set ``frames`` (with the video
    geometry fields) to derive the token count as
    (frames / sample_interval) * (height * width / patch^2); timestamps
    then follow the sampled frames at ``frame_rate``.
    """

    m: int | None = 256
    d: int = 16
    l: int = 4
    k: int = 4
    alignment: float = 6.0
    noise: float = 1.0
    frames: int | None = None
    frame_rate: float = 1.0
    sample_interval: int = 1
    frame_height: int = 56
    frame_width: int = 56
    patch: int = 14
    seed: int = 0

    def tokens_per_frame(self) -> int:
        return (self.frame_height * self.frame_width) // (self.patch * self.patch)

    def token_count(self) -> int:
        if self.frames is not None:
            if self.frames < 1:
                raise InputError(f"frame count must be >= 1, got {self.frames}")
            sampled = self.frames // self.sample_interval
            if sampled < 1:
                raise InputError("sampling interval leaves no frames")
            return sampled * self.tokens_per_frame()
        if self.m is None or self.m < 1:
            raise InputError(f"token count must be >= 1, got {self.m}")
        return self.m

    def validate(self) -> None:
        m = self.token_count()
        if self.k > m:
            raise InputError(f"planted count {self.k} exceeds token count {m}")
        if self.alignment <= 0:
            raise InputError(f"alignment strength must be positive, got {self.alignment}")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "WorkloadSpec":
        return cls(
            m=cfg.wl_tokens if cfg.wl_tokens > 0 else None,
            d=cfg.d,
            l=cfg.wl_query_len,
            k=cfg.wl_planted,
            alignment=cfg.wl_alignment,
            noise=cfg.wl_noise,
            frames=cfg.wl_frames if cfg.wl_frames > 0 else None,
            frame_rate=cfg.wl_frame_rate,
            sample_interval=cfg.wl_sample_interval,
            frame_height=cfg.wl_frame_height,
            frame_width=cfg.wl_frame_width,
            patch=cfg.wl_patch,
            seed=cfg.seed,
        )


@dataclass
class Workload:
    x: Array
    timestamps: Array
    q: Array
    planted: Array


def generate_workload(spec: WorkloadSpec, rng: np.random.Generator) -> Workload:
    """Random tokens with a planted query-aligned subset.

    Planted tokens sit at ``alignment`` times a shared unit direction
    (plus small jitter) while the query rows point along the same
    direction, so their expected query inner product strictly exceeds
    every distractor's.
    """
    spec.validate()
    m = spec.token_count()
    direction = rng.standard_normal(spec.d)
    direction /= np.linalg.norm(direction)
    q = 3.0 * direction[None, :] + 0.1 * rng.standard_normal((spec.l, spec.d))
    x = spec.noise * rng.standard_normal((m, spec.d))
    planted = np.sort(rng.choice(m, size=spec.k, replace=False))
    x[planted] = spec.alignment * direction[None, :] + 0.1 * spec.noise * rng.standard_normal(
        (spec.k, spec.d)
    )
    if spec.frames is not None:
        tpf = spec.tokens_per_frame()
        frame_idx = np.arange(m) // tpf
        timestamps = frame_idx * spec.sample_interval / spec.frame_rate
    else:
        timestamps = np.arange(m, dtype=np.float64)
    return Workload(x=x, timestamps=timestamps, q=q, planted=planted)


def uniform_stride_indices(m: int, n: int) -> Array:
    """n evenly spaced indices over [0, m), ascending and unique."""
    if not (1 <= n <= m):
        raise ParameterError(f"stride selection needs 1 <= n <= M, got n={n}, M={m}")
    return np.floor(np.arange(n) * m / n).astype(np.int64)


@dataclass
class AblationRow:
    variant: str
    trial: int
    recall: float
    rho: float
    n: int
    ms: float


@dataclass
class AblationMetrics:
    variant: str
    trials: int
    mean_recall: float
    mean_rho: float
    mean_n: float
    mean_ms: float
    rows: list[AblationRow] = field(default_factory=list)
    records: list[DiagnosticsRecord] = field(default_factory=list)


def run_ablation(
    variant: AblationVariant,
    spec: WorkloadSpec,
    model: SelectorModel,
    trials: int,
) -> AblationMetrics:
    """Recall/budget/timing for one variant over seeded trials.

    UNIF replaces the selector with uniform-stride retention but keeps
    the per-instance budget the selector would have chosen, so the
    comparison isolates *which* tokens are kept, not how many.
    """
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    eval_model = model.without_reencoder() if variant is AblationVariant.NREENC else model
    rows: list[AblationRow] = []
    records: list[DiagnosticsRecord] = []
    for trial in range(trials):
        rng = np.random.default_rng([spec.seed, trial])
        wl = generate_workload(spec, rng)
        start = time.perf_counter()
        res = select(eval_model, wl.x, wl.timestamps, wl.q, mode="infer")
        if variant is AblationVariant.UNIF:
            kept = uniform_stride_indices(wl.x.shape[0], res.record.n)
        else:
            kept = res.indices
        ms = (time.perf_counter() - start) * 1e3
        recall = float(np.intersect1d(kept, wl.planted).size / wl.planted.size)
        rows.append(
            AblationRow(variant.value, trial, recall, res.record.rho, res.record.n, ms)
        )
        records.append(res.record)
    return AblationMetrics(
        variant=variant.value,
        trials=trials,
        mean_recall=float(np.mean([r.recall for r in rows])),
        mean_rho=float(np.mean([r.rho for r in rows])),
        mean_n=float(np.mean([r.n for r in rows])),
        mean_ms=float(np.mean([r.ms for r in rows])),
        rows=rows,
        records=records,
    )


# ---------------------------------------------------------------------------
# desk-scale training

@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.05
    momentum: float = 0.9
    clip_norm: float = 1.0
    batch: int = 8

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "OptimizerConfig":
        return cls(
            lr=cfg.train_lr,
            momentum=cfg.train_momentum,
            clip_norm=cfg.clip_norm,
            batch=cfg.train_batch,
        )


@dataclass
class EpochStats:
    epoch: int
    loss: float
    mean_rho: float
    mean_n: float


def planted_mass_loss(res: SelectionResult, planted: Array) -> Var:
    """Synthetic task loss: -log of the mean keep probability on planted
    tokens.  Differentiable through the soft gate; minimized by keeping
    every planted token with probability one."""
    if res.soft_var is None:
        raise ParameterError("task loss needs a train-mode selection result")
    mass = ad.sum_all(ad.take_cols(res.soft_var, planted))
    return ad.smul(ad.log(ad.add_const(ad.smul(mass, 1.0 / planted.size), 1e-12)), -1.0)


def train_desk_scale(
    spec: WorkloadSpec,
    model: SelectorModel,
    epochs: int,
    opt: OptimizerConfig,
    penalties: PenaltyWeights,
    dual: DualState | None = None,
    seed: int = 0,
) -> tuple[SelectorModel, list[EpochStats]]:
    """SGD-with-momentum training of the full differentiable path.

    Per instance the loss is the planted-mass task loss plus the
    compute-aware penalty on rho (batch expectation is the arithmetic
    mean).  The workload pool is fixed across epochs (gate noise stays
    fresh) so the per-epoch loss is comparable; gradients are clipped at
    a global norm.  Divergence (a non-finite loss) aborts with a
    diagnostic dump.
    """
    params = model.parameters()
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    pool = [
        generate_workload(spec, np.random.default_rng([seed, item]))
        for item in range(opt.batch)
    ]
    trajectory: list[EpochStats] = []
    for epoch in range(epochs):
        grad_sum = {name: np.zeros_like(p) for name, p in params.items()}
        losses: list[float] = []
        rhos: list[float] = []
        kept: list[int] = []
        for item, wl in enumerate(pool):
            rng = np.random.default_rng([seed, epoch, item])
            tape = Tape()
            bound, tracked = model.with_parameters(params).bind(tape)
            res = select(bound, wl.x, wl.timestamps, wl.q, mode="train", rng=rng)
            task = planted_mass_loss(res, wl.planted)
            loss = total_loss(
                task, res.rho_var, wl.x.shape[0], model.n_max, penalties, dual
            )
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericError(
                    "training diverged: non-finite loss",
                    dump={
                        "epoch": epoch,
                        "item": item,
                        "rho": res.record.rho,
                        "t": res.record.t,
                        "r_stats": res.r_stats,
                    },
                )
            names = list(tracked)
            for name, g in zip(names, tape.gradients(loss, [tracked[n] for n in names])):
                grad_sum[name] += g
            losses.append(loss_value)
            rhos.append(res.record.rho)
            kept.append(res.record.n)
            if dual is not None:
                dual = dual_ascent(dual, res.record.rho, wl.x.shape[0])
        grads = {name: g / opt.batch for name, g in grad_sum.items()}
        total_norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total_norm > opt.clip_norm > 0:
            scale = opt.clip_norm / total_norm
            grads = {name: g * scale for name, g in grads.items()}
        for name in params:
            velocity[name] = opt.momentum * velocity[name] - opt.lr * grads[name]
            params[name] = params[name] + velocity[name]
        trajectory.append(
            EpochStats(
                epoch=epoch,
                loss=float(np.mean(losses)),
                mean_rho=float(np.mean(rhos)),
                mean_n=float(np.mean(kept)),
            )
        )
    return model.with_parameters(params), trajectory


# ---------------------------------------------------------------------------
# scaling benchmark

@dataclass
class BenchRecord:
    frames: int
    m: int
    n: int
    selector_ms: float
    downstream_ms: float
    total_ms: float
    mode: str


def mock_downstream(tokens: Array, chunk: int = 256) -> Array:
    """Dense single-head self-attention over the token stream.

    Stands in for the downstream decoder's attention cost, Theta(n^2 d);
    evaluated in float32 and row-chunked so the benchmark scales without
    materializing the full score matrix.
    """
    x = np.asarray(tokens, dtype=np.float32)
    n, d = x.shape
    scale = 1.0 / math.sqrt(d)
    out = np.empty_like(x)
    xt = x.T.copy()
    for start in range(0, n, chunk):
        block = x[start : start + chunk]
        scores = (block @ xt) * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[start : start + chunk] = scores @ x
    return out


def bench_scaling(
    frame_counts: Sequence[int],
    model: SelectorModel,
    spec: WorkloadSpec,
    downstream: Callable[[Array], Array] = mock_downstream,
) -> list[BenchRecord]:
    """Two latency curves per frame count: all tokens vs selected tokens."""
    records: list[BenchRecord] = []
    for frames in frame_counts:
        if frames < 1:
            raise InputError(f"frame count must be >= 1, got {frames}")
        wl_spec = replace(spec, frames=frames, m=None)
        rng = np.random.default_rng([wl_spec.seed, frames])
        wl = generate_workload(wl_spec, rng)
        m = wl.x.shape[0]

        start = time.perf_counter()
        downstream(wl.x)
        base_ms = (time.perf_counter() - start) * 1e3
        records.append(
            BenchRecord(frames, m, m, 0.0, base_ms, base_ms, "baseline")
        )

        start = time.perf_counter()
        res = select(model, wl.x, wl.timestamps, wl.q, mode="infer")
        sel_ms = (time.perf_counter() - start) * 1e3
        start = time.perf_counter()
        downstream(res.z)
        down_ms = (time.perf_counter() - start) * 1e3
        records.append(
            BenchRecord(
                frames, m, res.record.n, sel_ms, down_ms, sel_ms + down_ms, "qts"
            )
        )
    return records


# ---------------------------------------------------------------------------
# correlation diagnostics

@dataclass
class CorrelationRow:
    pair: str
    r: float | None
    slope: float | None
    intercept: float | None
    count: int


CORRELATION_PAIRS = (
    ("sq_mean", "rho"),
    ("log_m", "rho"),
    ("r_max", "rho"),
    ("entropy", "rho"),
    ("rho", "t"),
)


def _spread(values: Array) -> float:
    return float(np.sqrt(((values - values.mean()) ** 2).sum()))


def _is_constant(values: Array, spread: float) -> bool:
    # a constant column can still show ulp-level spread after the mean
    # subtraction; compare against the rounding noise floor, not zero
    noise_floor = 1e-12 * max(1.0, float(np.abs(values).max())) * math.sqrt(values.size)
    return spread <= noise_floor


def _pearson(x: Array, y: Array) -> tuple[float | None, float | None, float | None]:
    dx = x - x.mean()
    dy = y - y.mean()
    sx = _spread(x)
    sy = _spread(y)
    if _is_constant(x, sx) or _is_constant(y, sy):
        return None, None, None
    r = float((dx * dy).sum() / (sx * sy))
    slope = float((dx * dy).sum() / (dx * dx).sum())
    intercept = float(y.mean() - slope * x.mean())
    return r, slope, intercept


def correlation_report(records: Sequence[DiagnosticsRecord]) -> list[CorrelationRow]:
    """Pearson coefficient and least-squares fit for each diagnostic pair.

    Zero-variance columns yield an explicit undefined marker instead of
    a NaN.
    """
    if len(records) < 3:
        raise InputError(f"correlation report needs >= 3 records, got {len(records)}")
    rows = []
    for x_name, y_name in CORRELATION_PAIRS:
        x = np.array([getattr(rec, x_name) for rec in records], dtype=np.float64)
        y = np.array([getattr(rec, y_name) for rec in records], dtype=np.float64)
        r, slope, intercept = _pearson(x, y)
        rows.append(CorrelationRow(f"{x_name}_vs_{y_name}", r, slope, intercept, len(records)))
    return rows


# ---------------------------------------------------------------------------
# CSV emitters/parsers (every schema round-trips exactly)

UNDEFINED = "undefined"


def _fmt(value) -> str:
    if value is None:
        return UNDEFINED
    if isinstance(value, float):
        return repr(value)
    return str(value)


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "trial", "recall", "rho", "n", "ms"])
    for row in rows:
        writer.writerow(
            [row.variant, row.trial, _fmt(row.recall), _fmt(row.rho), row.n, _fmt(row.ms)]
        )
    return buf.getvalue()


def parse_ablation_csv(text: str) -> list[AblationRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(
            AblationRow(
                variant=rec["variant"],
                trial=int(rec["trial"]),
                recall=float(rec["recall"]),
                rho=float(rec["rho"]),
                n=int(rec["n"]),
                ms=float(rec["ms"]),
            )
        )
    return rows


def bench_csv(records: Sequence[BenchRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frames", "M", "n", "selector_ms", "downstream_ms", "total_ms", "mode"])
    for rec in records:
        writer.writerow(
            [
                rec.frames,
                rec.m,
                rec.n,
                _fmt(rec.selector_ms),
                _fmt(rec.downstream_ms),
                _fmt(rec.total_ms),
                rec.mode,
            ]
        )
    return buf.getvalue()


def parse_bench_csv(text: str) -> list[BenchRecord]:
    records = []
    for rec in csv.DictReader(io.StringIO(text)):
        records.append(
            BenchRecord(
                frames=int(rec["frames"]),
                m=int(rec["M"]),
                n=int(rec["n"]),
                selector_ms=float(rec["selector_ms"]),
                downstream_ms=float(rec["downstream_ms"]),
                total_ms=float(rec["total_ms"]),
                mode=rec["mode"],
            )
        )
    return records


def correlation_csv(rows: Sequence[CorrelationRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pair", "r", "slope", "intercept", "count"])
    for row in rows:
        writer.writerow([row.pair, _fmt(row.r), _fmt(row.slope), _fmt(row.intercept), row.count])
    return buf.getvalue()


def parse_correlation_csv(text: str) -> list[CorrelationRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        def opt(token: str) -> float | None:
            return None if token == UNDEFINED else float(token)

        rows.append(
            CorrelationRow(
                pair=rec["pair"],
                r=opt(rec["r"]),
                slope=opt(rec["slope"]),
                intercept=opt(rec["intercept"]),
                count=int(rec["count"]),
            )
        )
    return rows


def records_csv(records: Sequence[DiagnosticsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(DiagnosticsRecord.FIELDS))
    for rec in records:
        writer.writerow([_fmt(getattr(rec, name)) for name in DiagnosticsRecord.FIELDS])
    return buf.getvalue()


def parse_records_csv(text: str) -> list[DiagnosticsRecord]:
    records = []
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or set(reader.fieldnames) != set(DiagnosticsRecord.FIELDS):
        raise InputError(
            f"diagnostics CSV must have columns {','.join(DiagnosticsRecord.FIELDS)}"
        )
    for rec in reader:
        records.append(
            DiagnosticsRecord(
                sq_mean=float(rec["sq_mean"]),
                log_m=float(rec["log_m"]),
                r_max=float(rec["r_max"]),
                entropy=float(rec["entropy"]),
                rho=float(rec["rho"]),
                t=float(rec["t"]),
                n=int(rec["n"]),
                m=int(rec["m"]),
            )
        )
    return records


def trajectory_csv(stats: Sequence[EpochStats]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "mean_rho", "mean_n"])
    for s in stats:
        writer.writerow([s.epoch, _fmt(s.loss), _fmt(s.mean_rho), _fmt(s.mean_n)])
    return buf.getvalue()


def parse_trajectory_csv(text: str) -> list[EpochStats]:
    stats = []
    for rec in csv.DictReader(io.StringIO(text)):
        stats.append(
            EpochStats(
                epoch=int(rec["epoch"]),
                loss=float(rec["loss"]),
                mean_rho=float(rec["mean_rho"]),
                mean_n=float(rec["mean_n"]),
            )
        )
    return stats


def write_csv(path: str | Path, text: str) -> None:
    atomic_write_text(path, text)
