"""What-if demand grids: demand per (article, market, horizon week, discount level).

The encoder and both decoders run once per article; the discount sweep only
re-evaluates the monotonic head with the cached (q_hat, sigma, delta).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import discount_grid
from .features import FeatureBuilder
from .model import MAX_DISCOUNT, DemandForecaster, segment_fill

GRID_HEADER = "article,market,week,discount,demand"
GRID_HORIZON = 26
CHUNK = 128


@dataclass
class DemandGrid:
    values: np.ndarray  # [a, c, t, d] demand units
    article_ids: np.ndarray  # [a]
    discounts: np.ndarray  # [d]
    origin: int | None = None
    skipped: list[int] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __len__(self) -> int:
        return int(self.values.size)

    def equals(self, other: "DemandGrid") -> bool:
        return (
            np.array_equal(self.values, other.values)
            and np.array_equal(self.article_ids, other.article_ids)
            and np.array_equal(self.discounts, other.discounts)
        )

    def violations(self) -> int:
        """Number of decreasing steps along the discount axis."""
        return int((np.diff(self.values, axis=-1) < 0).sum())


def _check_discounts(discounts) -> np.ndarray:
    d = np.asarray(discounts, dtype=np.float64)
    if d.ndim != 1 or d.size == 0 or (np.diff(d) <= 0).any() or d[0] < 0 or d[-1] > MAX_DISCOUNT + 1e-12:
        raise ValueError(f"discount axis must be increasing within [0, {MAX_DISCOUNT}], got {d.tolist()}")
    return d


def sweep(q_hat, sigma, delta, discounts) -> np.ndarray:
    """Head response [B, H, c, d] in log1p space for every discount level."""
    fill = segment_fill(discounts)  # [d, 7]
    lift = np.einsum("bhcn,dn->bhcd", delta, fill)
    return q_hat[..., None] + sigma[..., None] * lift


def predict_grid(
    model: DemandForecaster,
    builder: FeatureBuilder,
    origin: int,
    articles=None,
    discounts=None,
    horizon: int = GRID_HORIZON,
    workers: int = 1,
) -> DemandGrid:
    """Demand grid for forecasts issued at week ``origin``; articles without usable history are skipped."""
    d = _check_discounts(discount_grid() if discounts is None else discounts)
    arts = np.arange(builder.n_articles) if articles is None else np.asarray(articles)
    batch = builder.batch(arts, np.full(len(arts), origin), horizon)
    skipped = [int(builder.catalog.article_ids[a]) for a in arts[~batch.has_history]]
    batch = batch.select(batch.has_history)

    def run(start: int) -> np.ndarray:
        q, s, delta = model.head_outputs(batch.select(slice(start, start + CHUNK)), horizon)
        return np.expm1(sweep(q, s, delta, d))

    starts = range(0, len(batch), CHUNK)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    c = builder.schema.row_markets
    vals = np.concatenate(parts) if parts else np.zeros((0, horizon, c, len(d)))
    values = np.ascontiguousarray(np.transpose(vals, (0, 2, 1, 3)))  # [a, c, t, d]
    ids = builder.catalog.article_ids[batch.article]
    return DemandGrid(values, np.asarray(ids), d, origin, skipped)


def export_grid(grid: DemandGrid, path: str | Path) -> None:
    """One record per line; floats use repr so reading back is exact."""
    path = Path(path)
    a, c, t, nd = grid.values.shape
    try:
        with open(path, "w") as fh:
            fh.write(GRID_HEADER + "\n")
            for i in range(a):
                aid = int(grid.article_ids[i])
                for m in range(c):
                    for w in range(t):
                        row = grid.values[i, m, w]
                        fh.writelines(f"{aid},{m},{w + 1},{float(grid.discounts[k])!r},{float(row[k])!r}\n" for k in range(nd))
        if grid.skipped or grid.origin is not None:
            path.with_suffix(".skipped.json").write_text(json.dumps({"origin": grid.origin, "skipped_articles": grid.skipped}))
    except OSError as exc:
        raise OSError(f"cannot write grid to {path}: {exc}") from exc


def read_grid(path: str | Path) -> DemandGrid:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise OSError(f"cannot read grid from {path}: {exc}") from exc
    if not lines or lines[0] != GRID_HEADER:
        raise ValueError(f"{path}: missing grid header {GRID_HEADER!r}")
    recs = [ln.split(",") for ln in lines[1:] if ln]
    origin, skipped = None, []
    side = path.with_suffix(".skipped.json")
    if side.exists():
        meta = json.loads(side.read_text())
        origin, skipped = meta["origin"], meta["skipped_articles"]
    if not recs:
        return DemandGrid(np.zeros((0, 0, 0, 0)), np.zeros(0, dtype=np.int64), np.zeros(0), origin, skipped)
    ids = list(dict.fromkeys(int(r[0]) for r in recs))
    markets = sorted({int(r[1]) for r in recs})
    weeks = sorted({int(r[2]) for r in recs})
    discounts = sorted({float(r[3]) for r in recs})
    shape = (len(ids), len(markets), len(weeks), len(discounts))
    if len(recs) != np.prod(shape):
        raise ValueError(f"{path}: {len(recs)} records do not form a full grid of shape {shape}")
    pos = {aid: i for i, aid in enumerate(ids)}
    dpos = {v: i for i, v in enumerate(discounts)}
    values = np.full(shape, np.nan)
    for r in recs:
        values[pos[int(r[0])], int(r[1]) - markets[0], int(r[2]) - weeks[0], dpos[float(r[3])]] = float(r[4])
    return DemandGrid(values, np.array(ids), np.array(discounts), origin, skipped)
