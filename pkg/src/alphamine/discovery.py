"""Factor discovery: pre-train an MLP to mimic a prior, prune it, fine-tune it
on the IC objective, and read back saliency maps.

``mine`` runs that pipeline once per catalog entry and returns a pool of
``FactorModel`` objects.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ic_objective as ico
from .analysis import IcSummary, daily_spearman, summarize_ic
from .indicators import IndicatorSpec, indicator_values
from .market_data import (
    DataError,
    DayBatch,
    Panel,
    SplitSpec,
    day_batch,
    forward_returns,
    range_days,
    split,
    standardize,
    window_tensor,
)
from .neural_core import (
    AdamState,
    Mlp,
    MlpConfig,
    MlpParams,
    PruneMask,
    backward,
    forward,
    init_params,
    load_model,
    optimizer_step,
    save_model,
)

log = logging.getLogger(__name__)

MIN_TARGETS = 100
ERROR_RATE_FLOOR = 1e-6


class FactorCollapse(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    pretrain_epochs: int = 50
    pretrain_batch: int = 256
    pretrain_lr: float = 1e-3
    holdout_fraction: float = 0.2
    finetune_steps: int = 500
    days_per_step: int = 8
    finetune_lr: float = 1e-3
    eval_every: int = 10
    patience: int = 20
    window: int = 30
    holding: int = 5

    def __post_init__(self):
        for name in ("pretrain_epochs", "pretrain_batch", "days_per_step", "eval_every", "patience", "window", "holding"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.finetune_steps < 0:
            raise ValueError("finetune_steps must be >= 0")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in (0, 1)")


@dataclass
class FactorModel:
    config: MlpConfig
    params: MlpParams
    mask: PruneMask | None
    provenance: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.provenance.get("name", "factor")

    def mlp(self) -> Mlp:
        return Mlp(self.config, self.params, self.mask)

    def values(self, standardized: Panel) -> np.ndarray:
        """Factor value for every (ticker, day) with a full window; NaN elsewhere."""
        return model_values(self.mlp(), standardized, self.config.input_size // 5)

    def save(self, path) -> None:
        save_model(path, self.config, self.params, self.mask, {"provenance": self.provenance, "metrics": self.metrics})

    @classmethod
    def load(cls, path) -> FactorModel:
        cfg, params, mask, extra = load_model(path)
        return cls(cfg, params, mask, extra.get("provenance", {}), extra.get("metrics", {}))


def model_values(mlp: Mlp, standardized: Panel, n: int) -> np.ndarray:
    X = window_tensor(standardized, n)  # N x T x 5n
    N, T, D = X.shape
    flat = X.reshape(N * T, D)
    ok = np.isfinite(flat).all(axis=1)
    out = np.full(N * T, np.nan)
    if ok.any():
        out[ok] = mlp.predict(flat[ok])
    return out.reshape(N, T)


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainResult:
    params: MlpParams
    error_rate: float
    target_shift: float
    target_scale: float
    samples: int


def error_rate(y: np.ndarray, f: np.ndarray) -> float:
    """Mean |(y - f) / y| over targets with |y| above a tiny floor."""
    ok = np.abs(y) > ERROR_RATE_FLOOR
    if not ok.any():
        return float("nan")
    return float(np.mean(np.abs((y[ok] - f[ok]) / y[ok])))


def pretrain_targets(
    target: np.ndarray, standardized: Panel, train: range, n: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(inputs, targets, day index) for every finite (ticker, day) in ``train``."""
    X = window_tensor(standardized, n)
    xs, ys, ds = [], [], []
    for t in train:
        if t - n + 1 < 0:
            continue
        rows = np.flatnonzero(np.isfinite(target[:, t]) & np.isfinite(X[:, t]).all(axis=1))
        if rows.size:
            xs.append(X[rows, t])
            ys.append(target[rows, t])
            ds.append(np.full(rows.size, t))
    if not xs:
        return np.empty((0, 5 * n)), np.empty(0), np.empty(0, dtype=int)
    return np.concatenate(xs), np.concatenate(ys), np.concatenate(ds)


def pretrain_on_target(
    cfg: MlpConfig,
    target: np.ndarray,
    standardized: Panel,
    train: range,
    schedule: TrainSchedule,
    seed,
) -> PretrainResult:
    """Fit an MLP to ``target`` (n_tickers x n_days) by mean squared error.

    The last ``holdout_fraction`` of the train days is held out and only used
    to report the error rate. Targets are affinely rescaled to unit variance
    for fitting; the returned params already map back to the target's units.
    """
    n = cfg.input_size // 5
    X, y, d = pretrain_targets(target, standardized, train, n)
    if y.size < MIN_TARGETS:
        raise DataError(f"only {y.size} valid pre-training targets (< {MIN_TARGETS})")
    days = np.unique(d)
    cut = days[int(np.floor(len(days) * (1.0 - schedule.holdout_fraction)))]
    fit = d < cut
    shift = float(y[fit].mean())
    scale = float(y[fit].std()) or 1.0
    yt = (y - shift) / scale

    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng.integers(2**63))
    fit_cfg = replace(cfg, dropout_rate=0.0)
    state = AdamState(lr=schedule.pretrain_lr)
    Xf, yf = X[fit], yt[fit]
    nb = schedule.pretrain_batch
    total_steps = schedule.pretrain_epochs * int(np.ceil(len(yf) / nb))
    step = 0
    for _ in range(schedule.pretrain_epochs):
        order = rng.permutation(len(yf))
        for s in range(0, len(order), nb):
            idx = order[s : s + nb]
            out, cache = forward(fit_cfg, params, Xf[idx])
            upstream = 2.0 * (out[:, 0] - yf[idx]) / len(idx)
            grads, _ = backward(cache, upstream[:, None])
            # cosine decay keeps the last epochs from bouncing around the optimum
            lr = schedule.pretrain_lr * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            params = optimizer_step(state, params, grads, lr)
            step += 1

    # fold the target scaling into the output layer
    params.weights[-1] = params.weights[-1] * scale
    params.biases[-1] = params.biases[-1] * scale + shift
    hold = ~fit
    pred = Mlp(cfg, params).predict(X[hold])
    return PretrainResult(params, error_rate(y[hold], pred), shift, scale, int(y.size))


def pretrain(
    cfg: MlpConfig,
    spec: IndicatorSpec,
    standardized: Panel,
    train: range,
    seed,
    schedule: TrainSchedule = TrainSchedule(),
) -> tuple[MlpParams, float]:
    res = pretrain_on_target(cfg, indicator_values(spec, standardized), standardized, train, schedule, seed)
    return res.params, res.error_rate


# ---------------------------------------------------------------------------
# pruning
# ---------------------------------------------------------------------------


def prune(params: MlpParams, rate: float) -> PruneMask:
    """Per layer, mask the ``round(rate * size)`` smallest-magnitude weights.

    Ties are broken by lowest flat index. Biases are never pruned.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("prune rate must lie in [0, 1)")
    mask = []
    for w in params.weights:
        flat = np.abs(w).reshape(-1)
        k = int(round(rate * flat.size))
        m = np.ones(flat.size)
        if k:
            order = np.lexsort((np.arange(flat.size), flat))
            m[order[:k]] = 0.0
        mask.append(m.reshape(w.shape))
    return mask


# ---------------------------------------------------------------------------
# fine-tuning and evaluation
# ---------------------------------------------------------------------------


class BatchSource:
    """DayBatches for a fixed set of days, built once and reused."""

    def __init__(self, standardized: Panel, days: Sequence[int], n: int, a: int, limit: int | None):
        self.batches: list[DayBatch] = [day_batch(standardized, t, n, a, limit) for t in days]

    def __len__(self):
        return len(self.batches)


def _batches_for(standardized: Panel, rng_: range, schedule: TrainSchedule, contain_future=True) -> BatchSource:
    n, a = schedule.window, schedule.holding
    days = range_days(standardized, rng_, n, a, contain_future)
    limit = rng_.stop - 1 if contain_future else None
    return BatchSource(standardized, days, n, a, limit)


def _batch_ic(mlp: Mlp, batches: BatchSource) -> IcSummary:
    if len(batches) == 0:
        raise DataError("no eligible days")
    from .analysis import spearman_ic

    ics = []
    for b in batches.batches:
        ics.append(spearman_ic(mlp.predict(b.flat_inputs()), b.forward_returns))
    return summarize_ic(ics)


def finetune(
    model: FactorModel,
    standardized: Panel,
    train: range,
    val: range,
    schedule: TrainSchedule = TrainSchedule(),
    seed=0,
    kernel: ico.RankKernelParams = ico.DEFAULT_KERNEL,
) -> FactorModel:
    """Descend the smooth-IC loss on D randomly sampled train days per step.

    The mask stays frozen. Validation IC (exact Spearman) is checked every
    ``eval_every`` steps; the best-validation parameters are returned, the
    starting point included, and training stops after ``patience`` checks
    without improvement.
    """
    if schedule.finetune_steps == 0:
        return replace(model, trace=list(model.trace))
    train_b = _batches_for(standardized, train, schedule)
    val_b = _batches_for(standardized, val, schedule)
    if len(train_b) == 0:
        raise DataError("no eligible training days")
    rng = np.random.default_rng(seed)
    cfg, mask = model.config, model.mask
    params = model.params.copy()
    state = AdamState(lr=schedule.finetune_lr)
    best_val = _batch_ic(Mlp(cfg, params, mask), val_b).mean if len(val_b) else -np.inf
    best = params.copy()
    since_best = 0
    collapsed_run = 0
    trace = []
    D = schedule.days_per_step
    for step in range(1, schedule.finetune_steps + 1):
        picks = rng.choice(len(train_b), size=D, replace=D > len(train_b))
        bs = [train_b.batches[i] for i in picks]
        X = np.concatenate([b.flat_inputs() for b in bs])
        out, cache = forward(cfg, params, X, mask, train_mode=True, rng_seed=rng.integers(2**63))
        out = out[:, 0]
        bounds = np.cumsum([0] + [b.m for b in bs])
        samples = [ico.IcSample(out[bounds[i] : bounds[i + 1]], bs[i].forward_returns) for i in range(D)]
        res, day_grads = ico.loss_grad(samples, kernel)
        collapsed_run = collapsed_run + 1 if res.degenerate == D else 0
        if collapsed_run >= 50:
            raise FactorCollapse(f"all sampled days degenerate for 50 consecutive steps (step {step})")
        grads, _ = backward(cache, np.concatenate(day_grads)[:, None])
        params = optimizer_step(state, params, grads, mask=mask)
        rec = {"step": step, "loss": res.loss}
        if step % schedule.eval_every == 0 and len(val_b):
            v = _batch_ic(Mlp(cfg, params, mask), val_b).mean
            rec["val_ic"] = v
            if v > best_val:
                best_val, best, since_best = v, params.copy(), 0
            else:
                since_best += 1
                if since_best >= schedule.patience:
                    trace.append(rec)
                    break
        trace.append(rec)
    if not len(val_b):
        best = params
    return FactorModel(cfg, best, mask, dict(model.provenance), dict(model.metrics), model.trace + trace)


def evaluate_ic(model, standardized: Panel, day_range: range, schedule: TrainSchedule = TrainSchedule(), contain_future: bool = True) -> IcSummary:
    """Exact Spearman IC of the raw model output, per day and averaged.

    ``model`` is a FactorModel or anything with ``predict`` over flat inputs.
    """
    mlp = model.mlp() if isinstance(model, FactorModel) else model
    batches = _batches_for(standardized, day_range, schedule, contain_future)
    return _batch_ic(mlp, batches)


def saliency(model: FactorModel, batch: DayBatch) -> np.ndarray:
    """Mean over stocks of |d output / d input|, reshaped to (5, n)."""
    out, cache = forward(model.config, model.params, batch.flat_inputs(), model.mask)
    _, dx = backward(cache, np.ones_like(out))
    return np.abs(dx).mean(axis=0).reshape(batch.inputs.shape[1:])


# ---------------------------------------------------------------------------
# mining
# ---------------------------------------------------------------------------


def values_ic(values: np.ndarray, standardized: Panel, day_range: range, a: int = 5) -> IcSummary:
    """Exact daily Spearman IC of precomputed factor values over ``day_range``."""
    ret = forward_returns(standardized, a)
    return summarize_ic(daily_spearman(values, ret, day_range))


def build_factor(
    name: str,
    target: np.ndarray,
    standardized: Panel,
    ranges: tuple[range, range, range],
    cfg: MlpConfig,
    schedule: TrainSchedule,
    prune_rate: float,
    seed,
    kernel: ico.RankKernelParams = ico.DEFAULT_KERNEL,
    prior: str | None = None,
) -> FactorModel:
    """Pre-train on ``target``, prune, fine-tune; record metrics at each stage."""
    train, val, test = ranges
    ss = np.random.SeedSequence(seed)
    s_pre, s_fine = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    pre = pretrain_on_target(cfg, target, standardized, train, schedule, s_pre)
    mask = prune(pre.params, prune_rate) if prune_rate > 0 else None
    prov = {
        "name": name,
        "prior": prior or name,
        "prune_rate": prune_rate,
        "seed": int(seed) if np.isscalar(seed) else list(seed),
        "pretrain_seed": s_pre,
        "finetune_seed": s_fine,
        "train": [train.start, train.stop],
        "val": [val.start, val.stop],
        "test": [test.start, test.stop],
        "target_shift": pre.target_shift,
        "target_scale": pre.target_scale,
    }
    model = FactorModel(cfg, pre.params, mask, prov, {"pretrain_error_rate": pre.error_rate})
    n, a = schedule.window, schedule.holding
    pre_vals = model.values(standardized)
    model.metrics["pretrain_test_ic"] = values_ic(pre_vals, standardized, _eval_days(standardized, test, n, a, False), a).mean
    model = finetune(model, standardized, train, val, schedule, s_fine, kernel)
    vals = model.values(standardized)
    for label, r, inside in (("train", train, True), ("val", val, True), ("test", test, False)):
        model.metrics[f"{label}_ic"] = values_ic(vals, standardized, _eval_days(standardized, r, n, a, inside), a).mean
    model.metrics["finetune_steps_run"] = len(model.trace)
    return model


def _eval_days(panel: Panel, r: range, n: int, a: int, inside: bool) -> list[int]:
    return range_days(panel, r, n, a, contain_future=inside)


def _mine_one(args):
    spec, standardized, ranges, cfg, schedule, prune_rate, seed, kernel = args
    try:
        target = indicator_values(spec, standardized)
        return build_factor(spec.label, target, standardized, ranges, cfg, schedule, prune_rate, seed, kernel)
    except Exception as exc:  # reported per entry, the run continues
        log.error("mining %s failed: %s", spec.label, exc)
        return exc


def entry_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def mine(
    catalog: Sequence[IndicatorSpec],
    panel: Panel,
    spec: SplitSpec = SplitSpec(),
    schedule: TrainSchedule = TrainSchedule(),
    prune_rate: float = 0.35,
    seed: int = 0,
    cfg: MlpConfig | None = None,
    kernel: ico.RankKernelParams = ico.DEFAULT_KERNEL,
    workers: int = 1,
    progress: Callable[[str], None] | None = None,
) -> tuple[list[FactorModel], dict[str, str]]:
    """One factor per catalog entry. Returns (models, failures by entry label).

    Each entry's seed depends only on (seed, position), so the pool is the
    same whatever the worker count or completion order.
    """
    if not catalog:
        raise ValueError("catalog is empty")
    ranges = split(panel, spec)
    standardized = panel if panel.raw is not None else standardize(panel, ranges[0])
    cfg = cfg or MlpConfig(input_size=5 * schedule.window)
    jobs = [
        (entry, standardized, ranges, cfg, schedule, prune_rate, entry_seed(seed, i), kernel)
        for i, entry in enumerate(catalog)
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_mine_one, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_mine_one(job))
            if progress:
                progress(job[0].label)
    models, failures = [], {}
    for entry, res in zip(catalog, results):
        if isinstance(res, Exception):
            failures[entry.label] = str(res)
        else:
            models.append(res)
    return models, failures


def write_manifest(models: Sequence[FactorModel], directory, name: str) -> Path:
    """Save each model and a JSON-lines manifest describing the pool."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = directory / f"{name}.jsonl"
    lines = []
    for i, m in enumerate(models):
        fname = f"{name}_{i:03d}.model"
        m.save(directory / fname)
        rec = {"kind": "model", "name": m.name, "path": fname, "provenance": m.provenance, "metrics": _clean(m.metrics)}
        lines.append(json.dumps(rec, sort_keys=True))
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return manifest


def _clean(d: dict) -> dict:
    return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in d.items()}
