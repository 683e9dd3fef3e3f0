"""Forecast metrics, the naive baseline, rolling-origin backtests and the
scaling / staleness experiment harnesses.

Demand error and demand bias are black-price weighted and scale free::

    D = sqrt( sum b (q_hat - q)^2 / sum b q^2 )
    B = sum b (q_hat - q) / sum b q

Every metric takes an optional boolean mask; weeks that are imputed, fully
censored or out of stock are masked out by the callers and never enter a sum.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .features import Batch, FeatureBuilder
from .model import DemandForecaster, ModelConfig
from .training import TrainConfig, train

log = logging.getLogger(__name__)

BUCKETS = {"near": (1, 5), "far": (6, 20), "extrapolated": (21, 26)}
HEADLINE = "near"
PREDICT_CHUNK = 256


class MetricError(ValueError):
    """Metric undefined, e.g. no positive actual demand in scope."""


def _prep(pred, actual, weight=None, mask=None):
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    pred, actual = np.broadcast_arrays(pred, actual)
    w = np.ones_like(pred) if weight is None else np.broadcast_to(np.asarray(weight, dtype=np.float64), pred.shape)
    keep = np.ones(pred.shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    return pred[keep], actual[keep], w[keep]


def demand_error(pred, actual, black_price=None, mask=None) -> float:
    p, q, b = _prep(pred, actual, black_price, mask)
    den = float(np.sum(b * q * q))
    if den <= 0:
        raise MetricError("demand error undefined: no positive actual demand in scope")
    return float(np.sqrt(np.sum(b * (p - q) ** 2) / den))


def demand_bias(pred, actual, black_price=None, mask=None) -> float:
    p, q, b = _prep(pred, actual, black_price, mask)
    den = float(np.sum(b * q))
    if den <= 0:
        raise MetricError("demand bias undefined: no positive actual demand in scope")
    return float(np.sum(b * (p - q)) / den)


def rmse(pred, actual, mask=None) -> float:
    p, q, _ = _prep(pred, actual, None, mask)
    if p.size == 0:
        raise MetricError("rmse undefined on an empty selection")
    return float(np.sqrt(np.mean((p - q) ** 2)))


def mape_offset10(pred, actual, mask=None) -> float:
    """MAPE on (q_hat + 10, q + 10); the offset removes division by zero."""
    p, q, _ = _prep(pred, actual, None, mask)
    if p.size == 0:
        raise MetricError("mape undefined on an empty selection")
    return float(np.mean(np.abs((p + 10.0) - (q + 10.0)) / (q + 10.0)))


def naive_forecast(history, horizon: int) -> tuple[np.ndarray, bool]:
    """Repeat the last observed demand; NaN marks unobserved history weeks.

    Returns (predictions [horizon], fallback) where ``fallback`` is True when
    there was no observed week and zeros were returned.
    """
    h = np.asarray(history, dtype=np.float64)
    seen = np.flatnonzero(~np.isnan(h))
    if seen.size == 0:
        return np.zeros(horizon), True
    return np.full(horizon, h[seen[-1]]), False


# ----------------------------------------------------------------- reports


def _safe(fn, *args, **kw) -> float:
    try:
        return fn(*args, **kw)
    except MetricError:
        return float("nan")


@dataclass
class MetricsReport:
    buckets: dict[str, dict[str, float]]
    per_week: np.ndarray  # demand error per horizon week
    n_articles: int
    excluded_weeks: int
    scored_points: int

    @property
    def demand_error(self) -> float:
        return self.buckets[HEADLINE]["demand_error"]

    def week(self, k: int) -> float:
        """Demand error of horizon week k (1-based)."""
        return float(self.per_week[k - 1])

    def to_dict(self) -> dict:
        return {
            "buckets": self.buckets,
            "per_week": [float(x) for x in self.per_week],
            "n_articles": self.n_articles,
            "excluded_weeks": self.excluded_weeks,
            "scored_points": self.scored_points,
        }

    def to_text(self, title: str = "model") -> str:
        lines = [f"{title}: {self.n_articles} articles, {self.scored_points} scored points, {self.excluded_weeks} excluded weeks"]
        lines.append(f"  {'bucket':<13}{'demand_err':>11}{'bias':>9}{'rmse':>10}{'mape+10':>9}")
        for name, m in self.buckets.items():
            lines.append(
                f"  {name:<13}{m['demand_error']:>11.4f}{m['demand_bias']:>9.4f}{m['rmse']:>10.3f}{m['mape_offset10']:>9.4f}"
            )
        return "\n".join(lines)


def score(pred: np.ndarray, batch: Batch) -> MetricsReport:
    """Score [B, H, c] demand predictions against a batch built with full actuals."""
    H = pred.shape[1]
    mask = batch.eval_mask[:, :H]
    q = np.nan_to_num(batch.demand[:, :H])
    b = np.broadcast_to(batch.black_price[:, None, :], pred.shape)
    weeks = np.arange(1, H + 1)
    buckets = {}
    scopes = {name: (weeks >= lo) & (weeks <= hi) for name, (lo, hi) in BUCKETS.items() if lo <= H}
    scopes["overall"] = np.ones(H, dtype=bool)
    for name, sel in scopes.items():
        m = mask & sel[None, :, None]
        buckets[name] = {
            "demand_error": _safe(demand_error, pred, q, b, m),
            "demand_bias": _safe(demand_bias, pred, q, b, m),
            "rmse": _safe(rmse, pred, q, m),
            "mape_offset10": _safe(mape_offset10, pred, q, m),
        }
    per_week = np.array([_safe(demand_error, pred[:, k], q[:, k], b[:, k], mask[:, k]) for k in range(H)])
    excluded = int((batch.target_mask[:, :H] & ~mask).sum())
    return MetricsReport(buckets, per_week, len(batch), excluded, int(mask.sum()))


def predict_batch(model: DemandForecaster, builder: FeatureBuilder, articles, origin: int, horizon: int) -> tuple[np.ndarray, Batch]:
    """Model predictions for articles with usable history, in chunks to bound memory."""
    arts = np.asarray(articles)
    batch = builder.batch(arts, np.full(len(arts), origin), horizon)
    batch = batch.select(batch.has_history)
    preds = [
        model.predict(batch.select(slice(s, s + PREDICT_CHUNK)), horizon)
        for s in range(0, len(batch), PREDICT_CHUNK)
    ]
    pred = np.concatenate(preds) if preds else np.zeros((0, horizon, builder.schema.row_markets))
    return pred, batch


def naive_predictions(batch: Batch, horizon: int) -> np.ndarray:
    return np.broadcast_to(batch.last_demand[:, None, :], (len(batch), horizon, batch.last_demand.shape[1])).copy()


# --------------------------------------------------------------- backtests

Trainer = Callable[..., DemandForecaster]


def make_trainer(builder: FeatureBuilder, model_config: ModelConfig, train_config: TrainConfig) -> Trainer:
    """``trainer(cutoff, seed=..., articles=None, samples_per_epoch=None)`` -> trained model."""

    def trainer(cutoff: int, seed: int | None = None, articles=None, samples_per_epoch=None) -> DemandForecaster:
        s = train_config.seed if seed is None else seed
        model = DemandForecaster(replace(model_config, seed=s), builder.schema)
        tc = replace(train_config, seed=s, samples_per_epoch=samples_per_epoch or train_config.samples_per_epoch)
        train(builder, model, tc, cutoff=cutoff, articles=articles)
        return model

    return trainer


def make_finetuner(builder: FeatureBuilder, train_config: TrainConfig) -> Callable[..., DemandForecaster]:
    """``finetune(model, cutoff, seed)`` -> copy of ``model`` trained further on data up to ``cutoff``."""

    def finetune(model: DemandForecaster, cutoff: int, seed: int = 0) -> DemandForecaster:
        out = model.copy()
        train(builder, out, replace(train_config, seed=seed), cutoff=cutoff, warm_start=True)
        return out

    return finetune


@dataclass
class BacktestResult:
    start_dates: list[int]
    model: list[MetricsReport]
    naive: list[MetricsReport]
    skipped: list[int] = field(default_factory=list)

    def curve(self, which: str = "model") -> np.ndarray:
        reps = self.model if which == "model" else self.naive
        return np.nanmean(np.stack([r.per_week for r in reps]), axis=0)

    def mean_week(self, k: int, which: str = "model") -> float:
        reps = self.model if which == "model" else self.naive
        return float(np.mean([r.week(k) for r in reps]))

    def bucket_mean(self, lo: int, hi: int, which: str = "model") -> float:
        return float(np.nanmean(self.curve(which)[lo - 1 : hi]))

    def write_curve(self, path: str | Path) -> None:
        """Plot data: week, model_demand_error, naive_demand_error (means over start dates)."""
        m, n = self.curve("model"), self.curve("naive")
        rows = ["week,model_demand_error,naive_demand_error"]
        rows += [f"{k + 1},{m[k]!r},{n[k]!r}" for k in range(len(m))]
        Path(path).write_text("\n".join(rows) + "\n")

    def to_text(self, include_naive: bool = True) -> str:
        out = []
        for t, mr, nr in zip(self.start_dates, self.model, self.naive):
            out += [f"start week {t}", mr.to_text("model")]
            if include_naive:
                out.append(nr.to_text("naive"))
        for t in self.skipped:
            out.append(f"start week {t}: skipped (insufficient actuals)")
        return "\n".join(out)

    def to_dict(self) -> dict:
        return {
            "start_dates": self.start_dates,
            "model": [r.to_dict() for r in self.model],
            "naive": [r.to_dict() for r in self.naive],
            "skipped": self.skipped,
        }


def run_backtest(
    builder: FeatureBuilder,
    model_factory: Callable[[int], DemandForecaster],
    start_dates: Sequence[int],
    horizon: int = 26,
    articles=None,
) -> BacktestResult:
    """For each start date t: obtain a model trained on actuals up to t, forecast t+1..t+horizon."""
    arts = np.arange(builder.n_articles) if articles is None else np.asarray(articles)
    res = BacktestResult([], [], [])
    for t in start_dates:
        if t + horizon >= builder.n_weeks:
            log.warning("start week %d leaves fewer than %d weeks of actuals; skipped", t, horizon)
            res.skipped.append(int(t))
            continue
        model = model_factory(int(t))
        pred, batch = predict_batch(model, builder, arts, int(t), horizon)
        res.start_dates.append(int(t))
        res.model.append(score(pred, batch))
        res.naive.append(score(naive_predictions(batch, horizon), batch))
    return res


# ------------------------------------------------------------- experiments


def _week_error(model, builder, articles, origin: int, weeks: int) -> float:
    pred, batch = predict_batch(model, builder, articles, origin, weeks)
    return score(pred, batch).buckets["overall"]["demand_error"]


def _naive_error(builder, articles, origin: int, weeks: int) -> float:
    batch = builder.batch(np.asarray(articles), np.full(len(articles), origin), weeks)
    batch = batch.select(batch.has_history)
    return score(naive_predictions(batch, weeks), batch).buckets["overall"]["demand_error"]


@dataclass
class ScalingResult:
    rows: list[tuple[float, int, int, int, float]]  # fraction, n_train, seed, start, error
    naive: dict[int, float]  # start -> naive error on the test set

    def seed_means(self) -> dict[float, np.ndarray]:
        """fraction -> per-seed error averaged over start dates."""
        out: dict[float, dict[int, list[float]]] = {}
        for f, _, s, _, e in self.rows:
            out.setdefault(f, {}).setdefault(s, []).append(e)
        return {f: np.array([np.mean(v) for _, v in sorted(d.items())]) for f, d in sorted(out.items())}

    def summary(self) -> list[tuple[float, float, float]]:
        return [(f, float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0) for f, v in self.seed_means().items()]

    def pooled_std(self) -> float:
        return float(np.sqrt(np.mean([s * s for _, _, s in self.summary()])))

    def naive_error(self) -> float:
        return float(np.mean(list(self.naive.values())))

    def non_increasing(self) -> bool:
        means = [m for _, m, _ in self.summary()]
        tol = self.pooled_std()
        return all(b <= a + tol for a, b in zip(means, means[1:]))

    def write(self, path: str | Path) -> None:
        """Plot data (log-log): fraction, n_train, seed, start, demand_error, naive_demand_error."""
        lines = ["fraction,n_train,seed,start,demand_error,naive_demand_error"]
        lines += [f"{f!r},{n},{s},{t},{e!r},{self.naive[t]!r}" for f, n, s, t, e in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")


def split_test_articles(builder: FeatureBuilder, test_share: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([seed, 0x7E57])
    perm = rng.permutation(builder.n_articles)
    n_test = max(1, int(round(test_share * builder.n_articles)))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def scaling_experiment(
    builder: FeatureBuilder,
    trainer: Trainer,
    fractions: Sequence[float],
    start_dates: Sequence[int],
    seeds: Sequence[int] = (0, 1, 2),
    test_share: float = 0.2,
    eval_weeks: int = 5,
    split_seed: int = 0,
) -> ScalingResult:
    """Train on nested article subsets with equal samples per epoch; score one fixed test set."""
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ValueError(f"fractions must lie in (0, 1], got {list(fractions)}")
    pool, test = split_test_articles(builder, test_share, split_seed)
    order = np.random.default_rng([split_seed, 0x5CA1]).permutation(pool)
    budget = len(pool)  # samples per epoch for every fraction: equal batches per epoch
    rows = []
    naive = {int(t): _naive_error(builder, test, int(t), eval_weeks) for t in start_dates}
    for f in sorted(fractions):
        n = int(round(f * len(pool)))
        if n == 0:
            raise ValueError(f"fraction {f} of {len(pool)} training articles yields no article")
        subset = np.sort(order[:n])
        for s in seeds:
            for t in start_dates:
                model = trainer(int(t), seed=int(s), articles=subset, samples_per_epoch=budget)
                e = _week_error(model, builder, test, int(t), eval_weeks)
                rows.append((float(f), n, int(s), int(t), e))
                log.info("scaling fraction %.2f seed %d start %d: %.4f", f, s, t, e)
    return ScalingResult(rows, naive)


@dataclass
class StalenessResult:
    rows: list[tuple[int, int, float, float, float]]  # seed, offset, stale, retrained, naive

    def mean(self, column: str) -> float:
        i = {"stale": 2, "retrained": 3, "naive": 4}[column]
        return float(np.mean([r[i] for r in self.rows]))

    def curve(self) -> list[tuple[int, float, float]]:
        offs = sorted({r[1] for r in self.rows})
        return [
            (k, float(np.mean([r[2] for r in self.rows if r[1] == k])), float(np.mean([r[3] for r in self.rows if r[1] == k])))
            for k in offs
        ]

    def write(self, path: str | Path) -> None:
        """Plot data: seed, offset, stale_error, retrained_error, naive_error (week-1 demand error)."""
        lines = ["seed,offset,stale_error,retrained_error,naive_error"]
        lines += [f"{s},{k},{a!r},{b!r},{c!r}" for s, k, a, b, c in self.rows]
        Path(path).write_text("\n".join(lines) + "\n")


def staleness_experiment(
    builder: FeatureBuilder,
    trainer: Trainer,
    train_week: int,
    offsets: Sequence[int] = tuple(range(9)),
    seeds: Sequence[int] = (0, 1, 2),
    articles=None,
    finetune: Callable[..., DemandForecaster] | None = None,
) -> StalenessResult:
    """Week-1 error of one model trained at ``train_week`` vs models retrained at each forecast week.

    Retraining is from scratch with ``trainer`` or, when ``finetune`` is given,
    incremental: each week's model continues from the previous week's.
    """
    arts = np.arange(builder.n_articles) if articles is None else np.asarray(articles)
    last = train_week + max(offsets)
    if last + 1 >= builder.n_weeks:
        raise ValueError(f"offset {max(offsets)} from week {train_week} leaves no actuals")
    rows = []
    for s in seeds:
        stale = trainer(train_week, seed=int(s))
        fresh = stale
        for k in offsets:
            origin = train_week + k
            e_stale = _week_error(stale, builder, arts, origin, 1)
            if k > 0:
                fresh = finetune(fresh, origin, int(s) + 1000 * k) if finetune else trainer(origin, seed=int(s))
            e_fresh = e_stale if k == 0 else _week_error(fresh, builder, arts, origin, 1)
            rows.append((int(s), int(k), e_stale, e_fresh, _naive_error(builder, arts, origin, 1)))
            log.info("staleness seed %d offset %d: stale %.4f retrained %.4f", s, k, e_stale, e_fresh)
    return StalenessResult(rows)


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))
