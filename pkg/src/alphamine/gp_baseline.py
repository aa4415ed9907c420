"""Genetic programming over formulaic factors.

Expressions are small immutable trees over the standardized OHLCV series.
They evaluate on any array whose last axis is time, so one code path serves
a single day's window tensor and the whole panel.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .analysis import daily_spearman, summarize_ic
from .market_data import DataError, DayBatch, Panel, SERIES, forward_returns, range_days

log = logging.getLogger(__name__)

UNARY = ("neg", "abs")
WINDOWED = ("shift", "ts_mean", "ts_std", "delta")
BINARY = ("add", "sub", "mul", "div", "max", "min")
COMMUTATIVE = frozenset({"add", "mul", "max", "min"})
K_SET = (1, 3, 5, 10)
CONST_RANGE = 5.0
DIV_EPS = 1e-10


@dataclass(frozen=True)
class Expr:
    op: str
    children: tuple[Expr, ...] = ()
    value: float | int | None = None

    def __post_init__(self):
        op, n = self.op, len(self.children)
        if op in SERIES or op == "const":
            ok = n == 0 and (op != "const" or self.value is not None)
        elif op in UNARY:
            ok = n == 1
        elif op in WINDOWED:
            ok = n == 1 and self.value in K_SET
        elif op in BINARY:
            ok = n == 2
        else:
            raise ValueError(f"unknown operator {op!r}")
        if not ok:
            raise ValueError(f"malformed {op} node")

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def __str__(self) -> str:
        return to_sexpr(self)


def leaf(name: str) -> Expr:
    return Expr(name)


def const(v: float) -> Expr:
    return Expr("const", (), float(v))


def depth(e: Expr) -> int:
    return 1 + max((depth(c) for c in e.children), default=0)


def lookback(e: Expr) -> int:
    """Extra past days (beyond the current one) the expression reads."""
    inner = max((lookback(c) for c in e.children), default=0)
    if e.op in ("shift", "delta"):
        return inner + e.value
    if e.op in ("ts_mean", "ts_std"):
        return inner + e.value - 1
    return inner


def size(e: Expr) -> int:
    return 1 + sum(size(c) for c in e.children)


def is_valid(e: Expr, max_depth: int, max_lookback: int) -> bool:
    return depth(e) <= max_depth and lookback(e) <= max_lookback


# ---------------------------------------------------------------------------
# text form
# ---------------------------------------------------------------------------


def _fmt_const(v: float) -> str:
    return repr(float(v))


def to_sexpr(e: Expr) -> str:
    if e.op == "const":
        return _fmt_const(e.value)
    if e.is_leaf:
        return e.op
    parts = [e.op] + [to_sexpr(c) for c in e.children]
    if e.op in WINDOWED:
        parts.append(str(e.value))
    return "(" + " ".join(parts) + ")"


_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def parse(text: str) -> Expr:
    tokens = _TOKEN.findall(text)
    pos = 0

    def read() -> Expr:
        nonlocal pos
        if pos >= len(tokens):
            raise ValueError("unexpected end of expression")
        tok = tokens[pos]
        pos += 1
        if tok == ")":
            raise ValueError("unexpected ')'")
        if tok != "(":
            if tok in SERIES:
                return Expr(tok)
            try:
                return const(float(tok))
            except ValueError:
                raise ValueError(f"unknown terminal {tok!r}") from None
        op = tokens[pos]
        pos += 1
        if op == "protected_div":
            op = "div"
        if op in UNARY:
            node = Expr(op, (read(),))
        elif op in WINDOWED:
            child = read()
            node = Expr(op, (child,), int(tokens[pos]))
            pos += 1
        elif op in BINARY:
            left = read()
            node = Expr(op, (left, read()))
        else:
            raise ValueError(f"unknown operator {op!r}")
        if pos >= len(tokens) or tokens[pos] != ")":
            raise ValueError(f"expected ')' after {op}")
        pos += 1
        return node

    e = read()
    if pos != len(tokens):
        raise ValueError("trailing tokens in expression")
    return e


def normalize(e: Expr) -> Expr:
    """Canonical form: children of commutative operators sorted by text."""
    if e.is_leaf:
        return e
    kids = tuple(normalize(c) for c in e.children)
    if e.op in COMMUTATIVE:
        kids = tuple(sorted(kids, key=to_sexpr))
    return replace(e, children=kids)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _shift(x: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(x, np.nan)
    if k < x.shape[-1]:
        out[..., k:] = x[..., :-k]
    return out


def eval_series(e: Expr, series: dict[str, np.ndarray]) -> np.ndarray:
    """Evaluate on arrays whose last axis is time; NaN where history runs out."""
    op = e.op
    if op in SERIES:
        return series[op]
    if op == "const":
        return np.full_like(series["close"], e.value)
    if op in UNARY or op in WINDOWED:
        x = eval_series(e.children[0], series)
        if op == "neg":
            return -x
        if op == "abs":
            return np.abs(x)
        k = e.value
        if op == "shift":
            return _shift(x, k)
        if op == "delta":
            return x - _shift(x, k)
        if op == "ts_mean":
            return _kernels.rolling_mean(x, k)
        return _kernels.rolling_std(x, k)
    a = eval_series(e.children[0], series)
    b = eval_series(e.children[1], series)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        if op == "add":
            return a + b
        if op == "sub":
            return a - b
        if op == "mul":
            return a * b
        if op == "div":
            small = np.abs(b) < DIV_EPS
            return np.where(small, 1.0, a / np.where(small, 1.0, b))
        if op == "max":
            return np.maximum(a, b)
        return np.minimum(a, b)


def eval_expr(e: Expr, batch: DayBatch) -> np.ndarray:
    """Expression value for every stock of a DayBatch at its last window day."""
    n = batch.inputs.shape[2]
    if lookback(e) > n - 1:
        raise DataError(f"expression lookback {lookback(e)} exceeds window {n}")
    series = {s: batch.inputs[:, j, :] for j, s in enumerate(SERIES)}
    return np.asarray(eval_series(e, series))[..., -1].astype(np.float64)


def history_mask(panel: Panel, n: int) -> np.ndarray:
    """True where a ticker has a full n-day window ending on that day."""
    mask = np.zeros((panel.n_tickers, panel.n_days), dtype=bool)
    for i, (lo, hi) in enumerate(panel.spans):
        mask[i, lo + n - 1 : hi + 1] = True
    return mask


def expr_values(e: Expr, standardized: Panel, n: int = 30) -> np.ndarray:
    """Expression values for every (ticker, day) that has a full window."""
    if lookback(e) > n - 1:
        raise DataError(f"expression lookback {lookback(e)} exceeds window {n}")
    vals = eval_series(e, {s: standardized.data[s] for s in SERIES})
    return np.where(history_mask(standardized, n), vals, np.nan)


# ---------------------------------------------------------------------------
# variation operators
# ---------------------------------------------------------------------------


def _random_leaf(rng: np.random.Generator) -> Expr:
    if rng.random() < 0.15:
        return const(round(float(rng.uniform(-CONST_RANGE, CONST_RANGE)), 2))
    return Expr(SERIES[int(rng.integers(len(SERIES)))])


def _window_cost(op: str, k: int) -> int:
    return k if op in ("shift", "delta") else k - 1


def random_expr(rng: np.random.Generator, max_depth: int, max_lookback: int = 29, method: str = "grow") -> Expr:
    """Random tree no deeper than ``max_depth`` (grow or full construction)."""
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")

    def build(d: int, budget: int) -> Expr:
        if d == 1 or (method == "grow" and rng.random() < 0.3):
            return _random_leaf(rng)
        choice = rng.random()
        if choice < 0.45:
            op = BINARY[int(rng.integers(len(BINARY)))]
            return Expr(op, (build(d - 1, budget), build(d - 1, budget)))
        if choice < 0.85:
            op = WINDOWED[int(rng.integers(len(WINDOWED)))]
            ks = [k for k in K_SET if _window_cost(op, k) <= budget]
            if ks:
                k = ks[int(rng.integers(len(ks)))]
                return Expr(op, (build(d - 1, budget - _window_cost(op, k)),), k)
        op = UNARY[int(rng.integers(len(UNARY)))]
        return Expr(op, (build(d - 1, budget),))

    return build(max_depth, max_lookback)


def paths(e: Expr, prefix: tuple = ()) -> list[tuple]:
    out = [prefix]
    for i, c in enumerate(e.children):
        out += paths(c, prefix + (i,))
    return out


def get_node(e: Expr, path: tuple) -> Expr:
    for i in path:
        e = e.children[i]
    return e


def put_node(e: Expr, path: tuple, new: Expr) -> Expr:
    if not path:
        return new
    kids = list(e.children)
    kids[path[0]] = put_node(kids[path[0]], path[1:], new)
    return replace(e, children=tuple(kids))


def _first_leaf(e: Expr) -> Expr:
    while not e.is_leaf:
        e = e.children[0]
    return e


def trim(e: Expr, max_depth: int, _d: int = 1) -> Expr:
    """Replace any subtree that would exceed ``max_depth`` with its leftmost leaf."""
    if e.is_leaf:
        return e
    if _d >= max_depth:
        return _first_leaf(e)
    return replace(e, children=tuple(trim(c, max_depth, _d + 1) for c in e.children))


def crossover(a: Expr, b: Expr, rng: np.random.Generator, max_depth: int = 6, max_lookback: int = 29) -> tuple[Expr, Expr]:
    """Swap a random subtree of ``a`` with a random subtree of ``b``."""
    pa = paths(a)
    pb = paths(b)
    ia = pa[int(rng.integers(len(pa)))]
    ib = pb[int(rng.integers(len(pb)))]
    c1 = trim(put_node(a, ia, get_node(b, ib)), max_depth)
    c2 = trim(put_node(b, ib, get_node(a, ia)), max_depth)
    # a child that reads too far back is replaced by its own parent
    if lookback(c1) > max_lookback:
        c1 = a
    if lookback(c2) > max_lookback:
        c2 = b
    return c1, c2


def mutate(e: Expr, rng: np.random.Generator, max_depth: int = 6, max_lookback: int = 29) -> Expr:
    """Point mutation or subtree replacement, chosen with equal probability."""
    ps = paths(e)
    path = ps[int(rng.integers(len(ps)))]
    node = get_node(e, path)
    if rng.random() < 0.5:
        if node.is_leaf:
            new = _random_leaf(rng)
        elif node.op in BINARY:
            op = BINARY[int(rng.integers(len(BINARY)))]
            new = replace(node, op=op)
        else:
            pool = UNARY + WINDOWED
            op = pool[int(rng.integers(len(pool)))]
            k = int(K_SET[int(rng.integers(len(K_SET)))]) if op in WINDOWED else None
            new = Expr(op, node.children, k)
    else:
        room = max_depth - len(path)
        budget = max_lookback - (lookback(e) - lookback(node))
        new = random_expr(rng, max(1, room), max(0, budget), "grow")
    out = put_node(e, path, new)
    return out if is_valid(out, max_depth, max_lookback) else e


# ---------------------------------------------------------------------------
# evolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GpConfig:
    population: int = 200
    generations: int = 30
    tournament_size: int = 5
    crossover_prob: float = 0.7
    mutation_prob: float = 0.2
    elitism: int = 5
    max_depth: int = 6
    seed: int = 0
    window: int = 30
    holding: int = 5

    def __post_init__(self):
        for p in (self.crossover_prob, self.mutation_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if self.crossover_prob + self.mutation_prob > 1.0:
            raise ValueError("crossover_prob + mutation_prob must not exceed 1")
        if self.population < self.tournament_size or self.tournament_size < 1:
            raise ValueError("population must be >= tournament size >= 1")
        if not 0 <= self.elitism <= self.population:
            raise ValueError("elitism must lie in [0, population]")
        if self.max_depth < 1 or self.generations < 0:
            raise ValueError("max_depth >= 1 and generations >= 0 required")

    @property
    def max_lookback(self) -> int:
        return self.window - 1


@dataclass(frozen=True)
class GpResult:
    expr: Expr
    train_ic: float
    val_ic: float


class IcEvaluator:
    """Mean daily exact-Spearman IC of expressions over a fixed set of days."""

    def __init__(self, standardized: Panel, days: Sequence[int], n: int, a: int):
        self.panel = standardized
        self.days = list(days)
        self.n = n
        self.returns = forward_returns(standardized, a)
        self.cache: dict[str, float] = {}

    def __call__(self, e: Expr) -> float:
        key = to_sexpr(normalize(e))
        hit = self.cache.get(key)
        if hit is None:
            vals = expr_values(e, self.panel, self.n)
            with np.errstate(invalid="ignore"):
                vals = np.where(np.isfinite(vals), vals, np.nan)
            hit = summarize_ic(daily_spearman(vals, self.returns, self.days)).mean if self.days else 0.0
            self.cache[key] = hit
        return hit


def initial_population(cfg: GpConfig) -> list[Expr]:
    """Ramped half-and-half: depths 2..max_depth, alternating grow and full."""
    out = []
    depths = list(range(2, cfg.max_depth + 1)) or [1]
    for i in range(cfg.population):
        rng = np.random.default_rng([cfg.seed, 0, i, 7])
        d = depths[i % len(depths)]
        method = "grow" if (i // len(depths)) % 2 == 0 else "full"
        out.append(random_expr(rng, d, cfg.max_lookback, method))
    return out


def _tournament(rng, fitness: np.ndarray, size_: int) -> int:
    picks = rng.choice(len(fitness), size=size_, replace=False)
    return int(picks[np.argmax(fitness[picks])])


def evolve(
    standardized: Panel,
    train: range,
    val: range,
    cfg: GpConfig = GpConfig(),
    population: list[Expr] | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[list[GpResult], list[float]]:
    """Evolve expressions by train IC; return them ranked by validation IC.

    Also returns the best train fitness per generation. Duplicate trees (same
    normalized form) appear once in the ranking.
    """
    n, a = cfg.window, cfg.holding
    train_days = range_days(standardized, train, n, a)
    val_days = range_days(standardized, val, n, a)
    if not train_days:
        raise DataError("no eligible training days")
    fit = IcEvaluator(standardized, train_days, n, a)
    pop = list(population) if population is not None else initial_population(cfg)
    history = []
    for gen in range(cfg.generations + 1):
        scores = np.array([fit(e) for e in pop])
        history.append(float(scores.max()))
        if progress:
            progress(gen, history[-1])
        if gen == cfg.generations:
            break
        order = np.argsort(-scores, kind="stable")
        nxt = [pop[i] for i in order[: cfg.elitism]]
        i = 0
        while len(nxt) < cfg.population:
            rng = np.random.default_rng([cfg.seed, gen + 1, i])
            i += 1
            r = rng.random()
            p1 = pop[_tournament(rng, scores, cfg.tournament_size)]
            if r < cfg.crossover_prob:
                p2 = pop[_tournament(rng, scores, cfg.tournament_size)]
                c1, c2 = crossover(p1, p2, rng, cfg.max_depth, cfg.max_lookback)
                nxt.append(c1)
                if len(nxt) < cfg.population:
                    nxt.append(c2)
            elif r < cfg.crossover_prob + cfg.mutation_prob:
                nxt.append(mutate(p1, rng, cfg.max_depth, cfg.max_lookback))
            else:
                nxt.append(p1)
        pop = nxt

    val_fit = IcEvaluator(standardized, val_days, n, a)
    seen = {}
    for e in pop:
        key = to_sexpr(normalize(e))
        if key not in seen:
            seen[key] = GpResult(e, fit(e), val_fit(e) if val_days else 0.0)
    ranked = sorted(seen.values(), key=lambda r: (-r.val_ic, -r.train_ic, to_sexpr(r.expr)))
    return ranked, history


def expr_ic(e: Expr, standardized: Panel, day_range: range, n: int = 30, a: int = 5, contain_future: bool = True) -> float:
    days = range_days(standardized, day_range, n, a, contain_future)
    return IcEvaluator(standardized, days, n, a)(e)


FORMULA_1 = parse("(div (sub high low) (shift volume 1))")
FORMULA_2 = parse("(div (sub high volume) (shift volume 1))")
REVERSAL = parse("(neg (delta close 5))")
