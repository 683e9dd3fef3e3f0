"""Loss, near/far freeze schedule and the minibatch training loop.

Phase 1 trains encoder, embeddings and the near decoder/head on weeks
1..near_horizon while the far pair is frozen. Phase 2 freezes everything
except the far decoder/head and trains it on weeks 1..far_horizon.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .features import Batch, FeatureBuilder
from .model import DemandForecaster, group_names
from .tensor import Tensor

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    near_epochs: int = 7
    far_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 2e-3
    # constant | cosine (decay to lr_floor * learning_rate over each phase)
    lr_schedule: str = "cosine"
    lr_floor: float = 0.05
    # per-market loss weights; None means the markets' demand shares
    market_weights: tuple[float, ...] | None = None
    samples_per_epoch: int | None = None
    # only draw forecast origins from the last N weeks before the cutoff
    recent_origins: int | None = None
    min_history: int = 1
    imputed_weight: float = 1.0
    clip_norm: float | None = None
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.near_epochs < 1 or self.far_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch_size and learning_rate must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.market_weights is not None:
            w = np.asarray(self.market_weights, dtype=np.float64)
            if (w <= 0).any() or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"market weights must be positive and sum to 1, got {self.market_weights}")
        return self


def taylor_link(x):
    """Third-order Taylor polynomial of exp: 1 + x + x^2/2 + x^3/6.

    Evaluated as (6 + 6x + 3x^2 + x^3) / 6 so that small integer arguments
    round only once (v(-1) is the double nearest 1/3).
    """
    if isinstance(x, Tensor):
        x2 = x * x
        return (6.0 + x * 6.0 + x2 * 3.0 + x2 * x) / 6.0
    x = np.asarray(x, dtype=np.float64)
    return (6.0 + 6.0 * x + 3.0 * x * x + x * x * x) / 6.0


def loss(pred: Tensor, target, weights, market_weights) -> Tensor:
    """sum_j gamma_j sum_weeks w * (v(pred) - v(target))^2, averaged over the batch.

    ``weights`` [B, H, c] is zero for weeks that must not contribute (zero stock,
    censored, beyond the training cutoff).
    """
    target = np.asarray(target, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.isnan(pred.data).any() or np.isnan(target).any():
        raise FloatingPointError("NaN in loss inputs")
    gam = np.asarray(market_weights, dtype=np.float64)
    diff = taylor_link(pred) - taylor_link(target)
    w = weights * gam / pred.shape[0]
    return T.tsum(diff * diff * w)


def market_shares(builder: FeatureBuilder, articles=None, cutoff: int | None = None) -> np.ndarray:
    d = builder.imputed.demand
    if articles is not None:
        d = d[np.asarray(articles)]
    if cutoff is not None:
        d = d[:, :, : cutoff + 1]
    tot = np.nansum(d, axis=(0, 2))
    if tot.sum() <= 0:
        return np.full(len(tot), 1.0 / len(tot))
    tot = np.maximum(tot, 1e-9)
    return tot / tot.sum()


@dataclass
class TrainResult:
    model: DemandForecaster
    trace: list[tuple[int, str, float]] = field(default_factory=list)
    initial_loss: float = float("nan")
    phase1_loss: float = float("nan")
    market_weights: np.ndarray | None = None
    phase1_monotone: bool = True
    snapshots: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def write_trace(self, path: str | Path) -> None:
        lines = ["epoch,phase,loss"] + [f"{e},{p},{v!r}" for e, p, v in self.trace]
        Path(path).write_text("\n".join(lines) + "\n")


class SampleDrawer:
    """Draws (article, origin) pairs; small article sets are cycled to fill an epoch."""

    def __init__(self, builder: FeatureBuilder, articles, cutoff: int, cfg: TrainConfig):
        self.builder = builder
        self.cutoff = cutoff
        lo = []
        keep = []
        for a in articles:
            first = builder.first_origin(int(a)) + cfg.min_history - 1
            if cfg.recent_origins is not None:
                first = max(first, cutoff - cfg.recent_origins)
            if first <= cutoff - 1:
                keep.append(int(a))
                lo.append(first)
        if not keep:
            raise ValueError("no article has usable history before the training cutoff")
        self.articles = np.asarray(keep)
        self.lo = np.asarray(lo)
        self.hi = cutoff - 1

    def epoch(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        reps = -(-n // len(self.articles))
        idx = np.concatenate([rng.permutation(len(self.articles)) for _ in range(reps)])[:n]
        origins = rng.integers(self.lo[idx], self.hi + 1)
        return self.articles[idx], origins


def _init_output_bias(model: DemandForecaster, batch: Batch) -> None:
    """Start the black-price demand output near the mean log demand per market."""
    c = model.config.n_markets
    m = batch.target_mask
    mean = (batch.target * m).sum(axis=(0, 1)) / np.maximum(m.sum(axis=(0, 1)), 1)
    inv_softplus = np.log(np.expm1(np.maximum(mean, 1e-3)))
    for part in ("near", "far"):
        b = model.params[f"{part}.phi1.o.b"]
        b.data = b.data.copy()
        b.data[:c] = inv_softplus


def _snapshot(params, names) -> dict[str, np.ndarray]:
    return {k: params[k].data.copy() for k in names}


def batch_loss(model: DemandForecaster, batch: Batch, part: str, horizon: int, mw, imputed_weight=1.0, gamma=None):
    fw = model.forward(batch, part, horizon, gamma=gamma)
    w = batch.target_mask[:, :horizon].astype(np.float64)
    if imputed_weight != 1.0:
        imp = batch.target_mask[:, :horizon] & ~batch.eval_mask[:, :horizon]
        w = np.where(imp, imputed_weight, w)
    return loss(fw.head.xi, batch.target[:, :horizon], w, mw)


def train(
    builder: FeatureBuilder,
    model: DemandForecaster,
    cfg: TrainConfig,
    cutoff: int,
    articles=None,
    checkpoint_dir: str | Path | None = None,
    keep_snapshots: bool = False,
    warm_start: bool = False,
) -> TrainResult:
    """Fit ``model`` on samples whose targets end at or before week ``cutoff``.

    ``warm_start`` continues from the current parameters (no output-bias
    initialisation), e.g. for incremental weekly retraining.
    """
    cfg.validate()
    mc = model.config
    articles = np.arange(builder.n_articles) if articles is None else np.asarray(articles)
    drawer = SampleDrawer(builder, articles, cutoff, cfg)
    n_epoch = cfg.samples_per_epoch or len(articles)
    rng = np.random.default_rng([cfg.seed, 0x7EA1])
    mw = np.asarray(cfg.market_weights) if cfg.market_weights is not None else market_shares(builder, articles, cutoff)
    params = model.params
    far_names = group_names(params, "far.")
    near_side = set(params) - far_names

    monitor_a, monitor_o = drawer.epoch(min(256, n_epoch), np.random.default_rng([cfg.seed, 0x0B5]))
    monitor = builder.batch(monitor_a, monitor_o, mc.near_horizon, cutoff)
    if not warm_start:
        _init_output_bias(model, monitor)

    def monitor_loss():
        return float(batch_loss(model, monitor, "near", mc.near_horizon, mw).data)

    result = TrainResult(model=model, market_weights=mw)
    result.initial_loss = monitor_loss()
    if keep_snapshots:
        result.snapshots["start"] = _snapshot(params, params)
    model.training = True
    last_good = _snapshot(params, params)
    ckpt = None

    def run_phase(phase: str, epochs: int, frozen: set[str], horizon: int, epoch0: int):
        nonlocal last_good, ckpt
        opt = T.Adam(cfg.learning_rate, clip_norm=cfg.clip_norm)
        trainable = {k: p for k, p in params.items() if k not in frozen}
        total = epochs * -(-n_epoch // cfg.batch_size)
        step = 0
        for e in range(epochs):
            arts, origins = drawer.epoch(n_epoch, rng)
            losses = []
            for s in range(0, n_epoch, cfg.batch_size):
                b = builder.batch(arts[s : s + cfg.batch_size], origins[s : s + cfg.batch_size], horizon, cutoff)
                gamma = None
                if phase == "far":
                    gamma = model.encode(b.enc, b.enc_mask)  # encoder frozen: no tape
                try:
                    with T.Tape() as tape:
                        L = batch_loss(model, b, phase, horizon, mw, cfg.imputed_weight, gamma)
                    value = float(L.data)
                except FloatingPointError:
                    value = float("nan")
                if not math.isfinite(value):
                    _restore(params, last_good)
                    raise TrainingDiverged(f"loss became {value} in {phase} epoch {e}; last checkpoint: {ckpt}")
                g = tape.backward(L)
                opt.lr = learning_rate(cfg, step, total)
                step += 1
                try:
                    opt.step(params, {k: g.get(p) for k, p in trainable.items()}, frozen)
                except T.NonFiniteGradientError as exc:
                    _restore(params, last_good)
                    raise TrainingDiverged(f"{exc} in {phase} epoch {e}; last checkpoint: {ckpt}") from exc
                losses.append(float(L.data))
            mean = float(np.mean(losses))
            result.trace.append((epoch0 + e, phase, mean))
            log.info("epoch %d (%s): loss %.5f", epoch0 + e, phase, mean)
            last_good = _snapshot(params, params)
            if checkpoint_dir is not None:
                ckpt = Path(checkpoint_dir) / f"epoch{epoch0 + e:03d}.npz"
                model.save(ckpt)

    run_phase("near", cfg.near_epochs, far_names, mc.near_horizon, 0)
    if keep_snapshots:
        result.snapshots["after_near"] = _snapshot(params, params)
    model.training = False
    result.phase1_loss = monitor_loss()
    near_trace = [v for _, p, v in result.trace if p == "near"]
    result.phase1_monotone = bool(np.all(np.diff(near_trace) <= 0))
    if not result.phase1_monotone:
        log.warning("phase-1 training loss is not monotone: %s", near_trace)
    model.training = True
    run_phase("far", cfg.far_epochs, near_side, mc.far_horizon, cfg.near_epochs)
    model.training = False
    if keep_snapshots:
        result.snapshots["after_far"] = _snapshot(params, params)
    return result


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant" or total <= 1:
        return cfg.learning_rate
    frac = step / (total - 1)
    return cfg.learning_rate * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * frac)))


def _restore(params, snap) -> None:
    for k, v in snap.items():
        params[k].data = v.copy()
