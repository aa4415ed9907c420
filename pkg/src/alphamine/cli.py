"""Command-line pipeline: synth, mine, eval, backtest, report.

All knobs live in one INI file; ``--seed``, ``--out`` and ``--workers``
override it. Every output is a pure function of the config and seed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import backtest as bt
from . import gp_baseline as gp
from . import svg
from .analysis import daily_spearman, distance_matrix, cs_zscore, mds_2d, scheme_report, summarize_ic
from .discovery import FactorModel, TrainSchedule, build_factor, entry_seed, mine, write_manifest
from .ic_objective import RankKernelParams
from .indicators import DEFAULT_CATALOG, IndicatorSpec, check_catalog, indicator_values
from .market_data import (
    DataError,
    Panel,
    SplitSpec,
    SynthConfig,
    forward_returns,
    generate_synthetic,
    load_panel,
    range_days,
    split,
    standardize,
    truncate,
    write_panel,
)
from .neural_core import MlpConfig

log = logging.getLogger("alphamine")

POOL_NAMES = {"pk": "PK", "gp": "GP", "adnn": "ADNN", "gp_adnn": "GP&ADNN"}
BACKTEST_POOLS = ("pk", "new", "gp_pk", "combined")


class UserError(Exception):
    """Problem with the inputs rather than the code; exit status 1."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    data_path: str | None = None
    synth: SynthConfig = SynthConfig()
    split: SplitSpec = SplitSpec()
    mlp: MlpConfig = MlpConfig()
    schedule: TrainSchedule = TrainSchedule()
    prune_rate: float = 0.35
    kernel: RankKernelParams = RankKernelParams()
    gp: gp.GpConfig = gp.GpConfig()
    gp_top_k: int = 10
    gp_seed_models: int = 3
    catalog: tuple[IndicatorSpec, ...] = DEFAULT_CATALOG
    strategy: bt.StrategyConfig = bt.StrategyConfig()
    keep: int = 50
    boost_rounds: int = 100
    boost_depth: int = 3
    clusters: int = 3
    diversity: bool = True
    out: str = "runs/default"
    seed: int = 0
    workers: int = 1


def _coerce(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value.strip()


def _section(parser: configparser.ConfigParser, name: str, base, skip=()):
    if not parser.has_section(name):
        return base, {}
    known = {f.name: getattr(base, f.name) for f in dataclasses.fields(base)}
    updates, rest = {}, {}
    for key, raw in parser.items(name):
        if key in known and key not in skip:
            updates[key] = _coerce(raw, known[key])
        else:
            rest[key] = raw
    return replace(base, **updates), rest


def load_config(path: str | None, seed: int | None = None, out: str | None = None, workers: int | None = None) -> RunConfig:
    """Read an INI file (sections data, split, mlp, train, gp, strategy, eval, run)."""
    p = configparser.ConfigParser()
    if path is not None:
        if not Path(path).is_file():
            raise UserError(f"config file not found: {path}")
        try:
            p.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise UserError(f"cannot parse config: {exc}") from None
    try:
        return _build_config(p, seed, out, workers)
    except (ValueError, TypeError) as exc:
        raise UserError(f"invalid config: {exc}") from None


def _build_config(p, seed, out, workers) -> RunConfig:
    run = dict(p.items("run")) if p.has_section("run") else {}
    g_seed = int(run.get("seed", 0)) if seed is None else seed
    if g_seed < 0:
        raise ValueError("seed must be >= 0")
    data, extra = _section(p, "data", SynthConfig(seed=g_seed))
    source = extra.pop("source", "synthetic").strip()
    if extra:
        raise ValueError(f"unknown [data] keys: {sorted(extra)}")
    spl, _ = _section(p, "split", SplitSpec())
    sched, _ = _section(p, "train", TrainSchedule())
    mlp, _ = _section(p, "mlp", MlpConfig(), skip=("input_size", "output_size"))
    mlp = replace(mlp, input_size=5 * sched.window)
    gpc, gextra = _section(p, "gp", gp.GpConfig(seed=g_seed, window=sched.window, holding=sched.holding), skip=("window", "holding"))
    strat, sextra = _section(p, "strategy", bt.StrategyConfig(holding=sched.holding), skip=("holding",))
    ev = dict(p.items("eval")) if p.has_section("eval") else {}
    cat = DEFAULT_CATALOG
    if p.has_section("catalog") and p.has_option("catalog", "entries"):
        entries = [e.strip() for e in _split_catalog(p.get("catalog", "entries")) if e.strip()]
        cat = check_catalog(IndicatorSpec.parse(e) for e in entries)
        if not cat:
            raise ValueError("catalog is empty")
    cfg = RunConfig(
        data_path=None if source == "synthetic" else source,
        synth=data,
        split=spl,
        mlp=mlp,
        schedule=sched,
        prune_rate=float(p.get("prune", "rate", fallback="0.35")),
        kernel=RankKernelParams(float(p.get("kernel", "steepness", fallback="1.83"))),
        gp=gpc,
        gp_top_k=int(gextra.get("top_k", 10)),
        gp_seed_models=int(gextra.get("seed_models", 3)),
        catalog=cat,
        strategy=strat,
        keep=int(sextra.get("keep", 50)),
        boost_rounds=int(sextra.get("rounds", 100)),
        boost_depth=int(sextra.get("depth", 3)),
        clusters=int(ev.get("clusters", 3)),
        diversity=_coerce(ev.get("diversity", "true"), True),
        out=out or run.get("out", "runs/default"),
        seed=g_seed,
        workers=workers if workers is not None else int(run.get("workers", 1)),
    )
    if not 0.0 <= cfg.prune_rate < 1.0:
        raise ValueError("prune rate must lie in [0, 1)")
    if cfg.workers < 1 or cfg.gp_top_k < 1 or cfg.gp_seed_models < 0 or cfg.keep < 1 or cfg.clusters < 1:
        raise ValueError("workers, top_k, keep and clusters must be >= 1")
    return cfg


def _split_catalog(text: str) -> list[str]:
    """Split on commas that are not inside parentheses."""
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch in ",\n" and depth == 0:
            out.append(cur)
            cur = ""
        else:
            cur += ch
    out.append(cur)
    return out


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


class JsonLines(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        rec = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        rec.update(getattr(record, "fields", {}))
        if record.exc_info:
            rec["exc"] = self.formatException(record.exc_info)
        return json.dumps(rec, sort_keys=True)


def _setup_logging(verbose: bool) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(JsonLines())
    root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _event(msg: str, **fields) -> None:
    log.info(msg, extra={"fields": fields})


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])
    return path


def out_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.out)
    try:
        d.mkdir(parents=True, exist_ok=True)
        probe = d / ".write_probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise UserError(f"output directory not writable: {d} ({exc.strerror or exc})") from None
    return d


def load_data(cfg: RunConfig) -> tuple[Panel, Panel, tuple[range, range, range]]:
    """(raw panel, standardized panel, (train, val, test))."""
    path = Path(cfg.data_path) if cfg.data_path else Path(cfg.out) / "panel.csv"
    if not path.is_file():
        hint = "" if cfg.data_path else " (run `synth` first)"
        raise UserError(f"data file not found: {path}{hint}")
    panel = load_panel(path)
    ranges = split(panel, cfg.split)
    return panel, standardize(panel, ranges[0]), ranges


def _manifest_path(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.out) / "factors" / f"{name}.jsonl"


def read_manifest(path: Path) -> list[dict]:
    if not path.is_file():
        raise UserError(f"missing manifest: {path}")
    recs = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not recs:
        raise UserError(f"empty manifest: {path}")
    return recs


@dataclass
class Factor:
    pool: str
    name: str
    compute: Callable[[Panel], np.ndarray] = field(repr=False)
    metrics: dict = field(default_factory=dict)


def manifest_factors(path: Path, pool: str, window: int) -> list[Factor]:
    out = []
    for rec in read_manifest(path):
        if rec["kind"] == "expr":
            e = gp.parse(rec["expr"])
            out.append(Factor(pool, rec["expr"], lambda p, e=e: gp.expr_values(e, p, window), rec.get("metrics", {})))
        else:
            model = FactorModel.load(path.parent / rec["path"])
            out.append(Factor(pool, rec["name"], model.values, rec.get("metrics", {})))
    return out


def pk_factors(cfg: RunConfig) -> list[Factor]:
    return [Factor("pk", s.label, lambda p, s=s: indicator_values(s, p)) for s in cfg.catalog]


def _ic_triplet(values, sp: Panel, ranges, n, a) -> dict:
    ret = forward_returns(sp, a)
    out = {}
    for label, r, inside in zip(("train", "val", "test"), ranges, (True, True, False)):
        out[f"{label}_ic"] = summarize_ic(daily_spearman(values, ret, range_days(sp, r, n, a, inside))).mean
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> Path:
    d = out_dir(cfg)
    panel = generate_synthetic(cfg.synth)
    path = d / "panel.csv"
    write_panel(panel, path)
    _event("synth done", path=str(path), tickers=panel.n_tickers, days=panel.n_days)
    return path


def _mine_adnn(cfg, panel, sp, ranges) -> None:
    models, failures = mine(
        cfg.catalog,
        sp,
        cfg.split,
        cfg.schedule,
        cfg.prune_rate,
        cfg.seed,
        cfg.mlp,
        cfg.kernel,
        cfg.workers,
        progress=lambda label: _event("mined", method="adnn", factor=label),
    )
    for label, err in sorted(failures.items()):
        log.warning("factor %s failed: %s", label, err)
    if not models:
        raise UserError("every catalog entry failed to mine")
    for m in models:
        _event("factor", method="adnn", name=m.name, **{k: float(v) for k, v in m.metrics.items()})
    write_manifest(models, Path(cfg.out) / "factors", "adnn")


def _mine_gp(cfg, sp, ranges) -> list[gp.GpResult]:
    train, val, test = ranges
    n, a = cfg.schedule.window, cfg.schedule.holding
    ranked, history = gp.evolve(
        sp, train, val, cfg.gp, progress=lambda g, best: _event("generation", method="gp", gen=g, best_train_ic=best)
    )
    top = ranked[: cfg.gp_top_k]
    lines = []
    for r in top:
        metrics = _ic_triplet(gp.expr_values(r.expr, sp, n), sp, ranges, n, a)
        lines.append(json.dumps({"kind": "expr", "expr": gp.to_sexpr(r.expr), "metrics": metrics}, sort_keys=True))
        _event("factor", method="gp", name=gp.to_sexpr(r.expr), **metrics)
    path = _manifest_path(cfg, "gp")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return top


def _mine_gp_adnn(cfg, sp, ranges, top: list[gp.GpResult]) -> None:
    n = cfg.schedule.window
    models = []
    for i, r in enumerate(top[: cfg.gp_seed_models]):
        text = gp.to_sexpr(r.expr)
        target = gp.expr_values(r.expr, sp, n)
        m = build_factor(
            f"GP{i}", target, sp, ranges, cfg.mlp, cfg.schedule, cfg.prune_rate,
            entry_seed(cfg.seed, 1000 + i), cfg.kernel, prior=text,
        )
        _event("factor", method="gp_adnn", name=m.name, prior=text, **{k: float(v) for k, v in m.metrics.items()})
        models.append(m)
    write_manifest(models, Path(cfg.out) / "factors", "gp_adnn")


def cmd_mine(cfg: RunConfig, method: str) -> None:
    out_dir(cfg)
    panel, sp, ranges = load_data(cfg)
    if method in ("adnn", "both"):
        _mine_adnn(cfg, panel, sp, ranges)
    if method in ("gp", "both"):
        top = _mine_gp(cfg, sp, ranges)
        if method == "both" and cfg.gp_seed_models > 0:
            _mine_gp_adnn(cfg, sp, ranges, top)


def _default_pools(cfg: RunConfig) -> list[tuple[str, Path | None]]:
    pools = [("pk", None)]
    for name in ("gp", "adnn", "gp_adnn"):
        p = _manifest_path(cfg, name)
        if p.is_file():
            pools.append((name, p))
    if len(pools) == 1:
        raise UserError(f"no manifests under {Path(cfg.out) / 'factors'} (run `mine` first)")
    return pools


def cmd_eval(cfg: RunConfig, manifests: list[str] | None = None) -> Path:
    d = out_dir(cfg) / "eval"
    d.mkdir(exist_ok=True)
    panel, sp, ranges = load_data(cfg)
    n, a = cfg.schedule.window, cfg.schedule.holding
    if manifests:
        pools = [(Path(m).stem, Path(m)) for m in manifests]
    else:
        pools = _default_pools(cfg)
    factors: dict[str, list[Factor]] = {}
    for name, path in pools:
        factors[name] = pk_factors(cfg) if path is None else manifest_factors(path, name, n)
    if cfg.diversity:
        small = [k for k, v in factors.items() if len(v) < cfg.clusters]
        if small:
            raise UserError(f"diversity needs at least {cfg.clusters} factors per pool; too few in {small}")
    values = {k: [f.compute(sp) for f in v] for k, v in factors.items()}
    test_days = range_days(sp, ranges[2], n, a, contain_future=False)
    ret = forward_returns(sp, a)
    labels = {k: POOL_NAMES.get(k, k) for k in factors}
    rows = scheme_report({labels[k]: v for k, v in values.items()}, ret, test_days, cfg.clusters, cfg.seed, cfg.diversity)
    path = write_csv(
        d / "schemes.csv",
        ["pool", "factors", "mean_test_ic", "ic_std", "diversity", "days"],
        [(r.pool, r.factors, r.mean_ic, r.ic_std, r.diversity, r.days) for r in rows],
    )
    frows = []
    for k, fs in factors.items():
        for f, v in zip(fs, values[k]):
            m = _ic_triplet(v, sp, ranges, n, a)
            frows.append((labels[k], f.name, m["train_ic"], m["val_ic"], m["test_ic"]))
    write_csv(d / "factors.csv", ["pool", "factor", "train_ic", "val_ic", "test_ic"], frows)
    _cluster_svg(d / "clusters.svg", values, labels, factors, test_days)
    for r in rows:
        _event("scheme", pool=r.pool, factors=r.factors, mean_test_ic=r.mean_ic, diversity=r.diversity)
    return path


def _cluster_svg(path, values, labels, factors, days) -> None:
    allv = [v for k in values for v in values[k]]
    if len(allv) < 2:
        return
    stack = np.stack(allv)
    acc, count = np.zeros((len(allv), len(allv))), 0
    for t in days:
        col = stack[:, :, t]
        ok = np.isfinite(col).all(axis=0)
        if ok.sum() >= 2:
            acc += distance_matrix(cs_zscore(col[:, ok]))
            count += 1
    if not count:
        return
    coords = mds_2d(acc / count)
    groups = [labels[k] for k in values for _ in values[k]]
    names = [f.name for k in values for f in factors[k]]
    svg.write(path, svg.scatter(coords, groups, names, "Factor map (mean test-day cross-entropy distance)"))


def _backtest_pool(cfg, kind, sp_train, sp, ranges, factors):
    """Pool factor list for a backtest; selection uses only the truncated panel."""
    pk = factors["pk"]
    if kind == "pk":
        return pk[: cfg.keep], None
    if kind == "new":
        return factors["adnn"][: cfg.keep], None
    other = factors["gp"] if kind == "gp_pk" else factors["adnn"]
    union_train = [f.compute(sp_train) for f in pk + other]
    ls = bt.build_labels(sp_train, ranges[0], union_train, cfg.strategy.holding)
    kept, idx = bt.select_features(
        union_train[: len(pk)], union_train[len(pk) :], ls, cfg.keep, rounds=cfg.boost_rounds, depth=cfg.boost_depth
    )
    union = pk + other
    return [union[i] for i in idx], idx


def cmd_backtest(cfg: RunConfig, pools: list[str] | None = None) -> Path:
    d = out_dir(cfg) / "backtest"
    d.mkdir(exist_ok=True)
    panel, sp, ranges = load_data(cfg)
    n, a = cfg.schedule.window, cfg.schedule.holding
    factors = {"pk": pk_factors(cfg)}
    for name in ("gp", "adnn"):
        p = _manifest_path(cfg, name)
        if p.is_file():
            factors[name] = manifest_factors(p, name, n)
    requested = pools or [k for k in BACKTEST_POOLS if {"new": "adnn", "combined": "adnn", "gp_pk": "gp"}.get(k, "pk") in factors]
    for k in requested:
        if k not in BACKTEST_POOLS:
            raise UserError(f"unknown pool {k!r}; choose from {', '.join(BACKTEST_POOLS)}")
        need = {"new": "adnn", "combined": "adnn", "gp_pk": "gp"}.get(k)
        if need and need not in factors:
            raise UserError(f"pool {k} needs the {need} manifest (run `mine` first)")
    train = ranges[0]
    sp_train = truncate(sp, train.stop)
    summary, curves = [], {}
    for k in requested:
        chosen, idx = _backtest_pool(cfg, k, sp_train, sp, ranges, factors)
        tr_vals = [f.compute(sp_train) for f in chosen]
        ls = bt.build_labels(sp_train, train, tr_vals, a)
        scorer = bt.train_classifier(ls, cfg.boost_rounds, cfg.boost_depth)
        vals = [f.compute(sp) for f in chosen]
        curve = bt.simulate(sp, ranges[2], scorer, vals, cfg.strategy)
        perf = bt.performance(curve)
        curves[k] = curve
        summary.append((k, len(chosen), perf.annual_return, perf.max_drawdown, perf.sharpe, curve.excess[-1] - 1.0))
        write_csv(
            d / f"nav_{k}.csv",
            ["date", "strategy", "hedge", "excess"],
            zip(curve.dates, curve.strategy, curve.hedge, curve.excess),
        )
        write_csv(
            d / f"features_{k}.csv",
            ["position", "pool", "factor", "importance"],
            [(i + 1, f.pool, f.name, w) for i, (f, w) in enumerate(zip(chosen, scorer.importances))],
        )
        _event("backtest", pool=k, factors=len(chosen), revenue=perf.annual_return, max_drawdown=perf.max_drawdown, sharpe=perf.sharpe)
    path = write_csv(d / "summary.csv", ["pool", "factors", "revenue", "max_drawdown", "sharpe", "excess_return"], summary)
    first = next(iter(curves.values()))
    svg.write(
        d / "excess.svg",
        svg.line_chart({k: c.excess for k, c in curves.items()}, "Excess NAV over equal-weight hedge (test range)", first.dates, "excess NAV", "date"),
    )
    return path


def cmd_report(cfg: RunConfig) -> Path:
    d = out_dir(cfg)
    parts = ["# Factor mining report", ""]
    sections = [
        ("Schemes (test range)", d / "eval" / "schemes.csv"),
        ("Factors", d / "eval" / "factors.csv"),
        ("Backtest", d / "backtest" / "summary.csv"),
    ]
    found = False
    for title, path in sections:
        if not path.is_file():
            continue
        found = True
        with open(path, encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        parts += [f"## {title}", "", "| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
        parts += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        parts.append("")
    gpm = _manifest_path(cfg, "gp")
    if gpm.is_file():
        found = True
        parts += ["## Top GP expressions", "", "| expression | train IC | val IC | test IC |", "|---|---|---|---|"]
        for rec in read_manifest(gpm):
            m = rec["metrics"]
            parts.append(f"| `{rec['expr']}` | {fmt(m['train_ic'])} | {fmt(m['val_ic'])} | {fmt(m['test_ic'])} |")
        parts.append("")
    if not found:
        raise UserError(f"nothing to report under {d}")
    path = d / "report.md"
    path.write_text("\n".join(parts), encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--workers", type=int, help="parallel mining workers")
    common.add_argument("-v", "--verbose", action="store_true")
    ap = argparse.ArgumentParser(prog="alphamine", description="Factor mining pipeline")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic panel CSV")
    m = sub.add_parser("mine", parents=[common], help="mine factors")
    m.add_argument("method", choices=("adnn", "gp", "both"))
    e = sub.add_parser("eval", parents=[common], help="IC and diversity tables")
    e.add_argument("manifests", nargs="*", help="manifest files (default: all under OUT/factors plus PK)")
    e.add_argument("--no-diversity", action="store_true")
    b = sub.add_parser("backtest", parents=[common], help="multi-factor strategy backtest")
    b.add_argument("pools", nargs="*", help=f"any of {', '.join(BACKTEST_POOLS)} (default: all available)")
    sub.add_parser("report", parents=[common], help="markdown summary of all outputs")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = load_config(args.config, args.seed, args.out, args.workers)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "mine":
            cmd_mine(cfg, args.method)
        elif args.command == "eval":
            if args.no_diversity:
                cfg = replace(cfg, diversity=False)
            cmd_eval(cfg, args.manifests)
        elif args.command == "backtest":
            cmd_backtest(cfg, args.pools)
        else:
            cmd_report(cfg)
    except (UserError, DataError) as exc:
        log.error(str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.exception("internal error: %s", exc)
        return 2
    _event(f"{args.command} complete")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
