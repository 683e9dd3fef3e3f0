"""Synthetic fashion catalog: long-tailed, price-sensitive, stock-censored weekly panels.

Each article gets its own RNG stream derived from ``(seed, article_id)`` so a
panel does not depend on how many other articles were generated.

Demand process per article, market and week::

    rate = base * brand * group * market_share * exp(level_w) * season_w * uplift(discount_w)
    total ~ NegBin(mean=rate, shape=dispersion)
    sizes ~ Multinomial(total, size_profile)

``uplift`` is multiplicative and piecewise-linear in discount with a
non-negative slope per 10pp segment, so expected demand never falls when
discount rises. Sales equal demand for sizes in stock and zero otherwise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterator

import numpy as np

from .artifacts import write_npz

DISCOUNT_STEP = 0.05
MAX_DISCOUNT = 0.7
N_SEGMENTS = 7

PANEL_COLUMNS = (
    "article_id",
    "market_id",
    "week",
    "brand_id",
    "commodity_group_id",
    "black_price",
    "discount",
    "stock_uplift",
    "sales_by_size",
    "stock_by_size",
)


class ConfigError(ValueError):
    pass


@dataclass
class CatalogSpec:
    n_articles: int = 200
    n_markets: int = 2
    n_weeks: int = 130
    seed: int = 0
    size_count_range: tuple[int, int] = (3, 6)
    # true multiplicative uplift per 10pp of discount
    elasticity_range: tuple[float, float] = (0.1, 0.6)
    base_rate_mu: float = 1.0
    base_rate_sigma: float = 1.0
    dispersion: float = 4.0
    stockout_rate: float = 0.05
    # share of stockout mass that arrives as full out-of-stock episodes
    episode_share: float = 0.5
    episode_length_range: tuple[int, int] = (2, 6)
    cold_start_share: float = 0.15
    n_brands: int = 25
    n_commodity_groups: int = 8
    brand_effect_sigma: float = 0.4
    discount_step_prob: float = 0.25
    sale_event_weeks: tuple[int, ...] = ()
    sale_event_boost: float = 0.3
    level_volatility: float = 0.08
    seasonality_amplitude: float = 0.25
    # relative growth of every elasticity per 52 weeks (concept drift)
    elasticity_drift: float = 0.0
    returns_rate: float = 1.0

    def validate(self) -> "CatalogSpec":
        def bad(msg):
            raise ConfigError(f"invalid CatalogSpec: {msg}")

        if self.n_articles < 1 or self.n_markets < 1 or self.n_weeks < 1:
            bad("n_articles, n_markets and n_weeks must be positive")
        lo, hi = self.size_count_range
        if not 1 <= lo <= hi:
            bad(f"size_count_range {self.size_count_range}")
        lo, hi = self.elasticity_range
        if not 0 <= lo <= hi:
            bad(f"elasticity_range {self.elasticity_range} (must be 0 <= min <= max)")
        for name in ("stockout_rate", "episode_share", "cold_start_share", "discount_step_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                bad(f"{name}={v} outside [0, 1]")
        if self.base_rate_sigma < 0 or self.dispersion <= 0:
            bad("base_rate_sigma must be >= 0 and dispersion > 0")
        lo, hi = self.episode_length_range
        if not 1 <= lo <= hi:
            bad(f"episode_length_range {self.episode_length_range}")
        if self.n_brands < 1 or self.n_commodity_groups < 1:
            bad("need at least one brand and commodity group")
        if self.elasticity_drift < 0:
            bad("elasticity_drift must be >= 0 to keep demand monotone in discount")
        return self


@dataclass
class Catalog:
    """Array view of a generated (or loaded) catalog; sizes padded to ``max_sizes``."""

    sales: np.ndarray  # [a, m, w, s] int
    stock: np.ndarray  # [a, w, s] int, shared across markets
    discount: np.ndarray  # [a, m, w]
    black_price: np.ndarray  # [a, m]
    brand: np.ndarray  # [a]
    commodity_group: np.ndarray  # [a]
    stock_uplift: np.ndarray  # [a, w]
    launch_week: np.ndarray  # [a]
    n_sizes: np.ndarray  # [a]
    article_ids: np.ndarray  # [a]

    @property
    def n_articles(self) -> int:
        return self.sales.shape[0]

    @property
    def n_markets(self) -> int:
        return self.sales.shape[1]

    @property
    def n_weeks(self) -> int:
        return self.sales.shape[2]

    def subset(self, rows) -> "Catalog":
        rows = np.asarray(rows)
        return Catalog(**{k: getattr(self, k)[rows] for k in self.__dataclass_fields__})

    def panel(self, a: int, m: int) -> "ArticlePanel":
        start = int(self.launch_week[a])
        k = int(self.n_sizes[a])
        return ArticlePanel(
            article_id=int(self.article_ids[a]),
            market_id=m,
            brand_id=int(self.brand[a]),
            commodity_group_id=int(self.commodity_group[a]),
            black_price=float(self.black_price[a, m]),
            weeks=np.arange(start, self.n_weeks),
            sales_by_size=self.sales[a, m, start:, :k],
            stock_by_size=self.stock[a, start:, :k],
            discount=self.discount[a, m, start:],
            stock_uplift=self.stock_uplift[a, start:],
        )

    def panels(self) -> Iterator["ArticlePanel"]:
        for a in range(self.n_articles):
            for m in range(self.n_markets):
                yield self.panel(a, m)


@dataclass
class ArticlePanel:
    article_id: int
    market_id: int
    brand_id: int
    commodity_group_id: int
    black_price: float
    weeks: np.ndarray
    sales_by_size: np.ndarray  # [n_weeks, k]
    stock_by_size: np.ndarray  # [n_weeks, k]
    discount: np.ndarray
    stock_uplift: np.ndarray

    @property
    def n_sizes(self) -> int:
        return self.sales_by_size.shape[1]


@dataclass
class GroundTruth:
    expected_demand: np.ndarray  # [a, m, w] mean of total weekly demand
    demand_by_size: np.ndarray  # [a, m, w, s] uncensored draws
    size_profile: np.ndarray  # [a, s]
    elasticity: np.ndarray  # [a]
    segment_slopes: np.ndarray  # [a, 7]

    @property
    def demand(self) -> np.ndarray:
        return self.demand_by_size.sum(axis=-1)


def discount_grid() -> np.ndarray:
    return np.round(np.arange(0, MAX_DISCOUNT + 1e-9, DISCOUNT_STEP), 2)


def uplift(discount, slopes) -> np.ndarray:
    """Multiplicative demand uplift ``1 + sum_n slope_n * fill_n(discount)``.

    ``fill_n`` is the covered fraction of the n-th 10pp segment, so the result is
    continuous, piecewise-linear and non-decreasing for non-negative slopes.
    """
    d = np.asarray(discount, dtype=np.float64)
    fill = np.clip(10.0 * d[..., None] - np.arange(N_SEGMENTS), 0.0, 1.0)
    return 1.0 + (fill * np.asarray(slopes)).sum(axis=-1)


@dataclass
class _ArticleDraw:
    base: float
    market_share: np.ndarray
    black_price: np.ndarray
    slopes: np.ndarray
    level: np.ndarray
    season_phase: float
    profile: np.ndarray
    launch: int
    brand: int
    group: int


def _brand_effects(spec: CatalogSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 0xB2A2D])
    brand = np.exp(rng.normal(0.0, spec.brand_effect_sigma, spec.n_brands))
    group = np.exp(rng.normal(0.0, spec.brand_effect_sigma / 2, spec.n_commodity_groups))
    return brand, group


def _market_shares(spec: CatalogSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0x3A2CE7])
    share = rng.dirichlet(np.full(spec.n_markets, 4.0))
    return np.sort(share)[::-1] * spec.n_markets


def expected_demand(draw: _ArticleDraw, discount: np.ndarray, spec: CatalogSpec, effects) -> np.ndarray:
    """Mean total weekly demand [m, w] for a given discount path [m, w]."""
    brand, group = effects
    w = np.arange(discount.shape[-1])
    season = 1.0 + spec.seasonality_amplitude * np.sin(2 * np.pi * w / 52.0 + draw.season_phase)
    drift = 1.0 + spec.elasticity_drift * w / 52.0
    lift = 1.0 + (uplift(discount, draw.slopes) - 1.0) * drift
    scale = draw.base * brand[draw.brand] * group[draw.group]
    return scale * draw.market_share[:, None] * np.exp(draw.level) * season * lift


def _draw_article(spec: CatalogSpec, article_id: int, shares: np.ndarray) -> tuple[_ArticleDraw, np.random.Generator]:
    rng = np.random.default_rng([spec.seed, 1, article_id])
    W, M = spec.n_weeks, spec.n_markets
    k = int(rng.integers(spec.size_count_range[0], spec.size_count_range[1] + 1))
    profile = rng.dirichlet(np.full(k, 2.0))
    e = rng.uniform(*spec.elasticity_range)
    raw = rng.uniform(0.5, 1.5, N_SEGMENTS)
    slopes = e * raw / raw.mean()
    base = float(np.exp(rng.normal(spec.base_rate_mu, spec.base_rate_sigma)))
    price = float(np.exp(rng.normal(np.log(40.0), 0.5)))
    black_price = np.round(price * rng.uniform(0.9, 1.1, M), 2)
    steps = rng.normal(0.0, spec.level_volatility, W)
    level = np.cumsum(steps)
    level -= level.mean()
    cold = rng.random() < spec.cold_start_share
    launch = int(rng.integers(W // 2, W)) if cold else 0
    return (
        _ArticleDraw(
            base=base,
            market_share=shares,
            black_price=black_price,
            slopes=slopes,
            level=level,
            season_phase=float(rng.uniform(0, 2 * np.pi)),
            profile=profile,
            launch=launch,
            brand=int(rng.integers(spec.n_brands)),
            group=int(rng.integers(spec.n_commodity_groups)),
        ),
        rng,
    )


def _discount_paths(spec: CatalogSpec, rng: np.random.Generator) -> np.ndarray:
    W, M = spec.n_weeks, spec.n_markets
    n_levels = int(round(MAX_DISCOUNT / DISCOUNT_STEP))
    lvl = np.zeros((M, W), dtype=np.int64)
    cur = rng.integers(0, 4, M)
    for w in range(W):
        move = rng.random(M) < spec.discount_step_prob
        step = np.where(rng.random(M) < 0.6, 1, -1)
        cur = np.clip(cur + move * step, 0, n_levels - 2)
        lvl[:, w] = cur
    boost = int(round(spec.sale_event_boost / DISCOUNT_STEP))
    for w in spec.sale_event_weeks:
        if 0 <= w < W:
            lvl[:, w] = np.minimum(lvl[:, w] + boost, n_levels)
    return np.round(lvl * DISCOUNT_STEP, 2)


def _availability(spec: CatalogSpec, rng: np.random.Generator, k: int) -> np.ndarray:
    W = spec.n_weeks
    gap_p = spec.stockout_rate * (1.0 - spec.episode_share)
    avail = rng.random((W, k)) >= gap_p
    lo, hi = spec.episode_length_range
    mean_len = 0.5 * (lo + hi)
    start_p = spec.stockout_rate * spec.episode_share / mean_len
    w = 0
    while w < W:
        if rng.random() < start_p:
            length = int(rng.integers(lo, hi + 1))
            avail[w : w + length] = False
            w += length
        else:
            w += 1
    return avail


def generate_catalog(spec: CatalogSpec) -> tuple[Catalog, GroundTruth]:
    spec.validate()
    A, M, W = spec.n_articles, spec.n_markets, spec.n_weeks
    S = spec.size_count_range[1]
    effects = _brand_effects(spec)
    shares = _market_shares(spec)

    sales = np.zeros((A, M, W, S), dtype=np.int64)
    demand = np.zeros((A, M, W, S), dtype=np.int64)
    stock = np.zeros((A, W, S), dtype=np.int64)
    uplift_units = np.zeros((A, W), dtype=np.int64)
    discount = np.zeros((A, M, W))
    expected = np.zeros((A, M, W))
    black_price = np.zeros((A, M))
    profiles = np.zeros((A, S))
    elasticity = np.zeros(A)
    slopes = np.zeros((A, N_SEGMENTS))
    meta = np.zeros((A, 4), dtype=np.int64)

    for a in range(A):
        draw, rng = _draw_article(spec, a, shares)
        k = len(draw.profile)
        disc = _discount_paths(spec, rng)
        lam = expected_demand(draw, disc, spec, effects)
        # negative binomial via gamma-poisson mixture
        gam = rng.gamma(spec.dispersion, lam / spec.dispersion)
        total = rng.poisson(gam)
        by_size = np.zeros((M, W, k), dtype=np.int64)
        for m in range(M):
            by_size[m] = rng.multinomial(total[m], draw.profile)
        avail = _availability(spec, rng, k)
        live = np.arange(W) >= draw.launch
        avail &= live[:, None]
        need = by_size.sum(axis=0)
        buffer = rng.poisson(3.0, (W, k)) + 1
        stk = np.where(avail, need + buffer, 0)
        returns = rng.poisson(spec.returns_rate, W)
        restock = np.concatenate([[False], (stk[1:].sum(1) > 0) & (stk[:-1].sum(1) == 0)])
        upl = np.where(restock, stk.sum(1), returns) * live

        lam = lam * live
        by_size = by_size * live[None, :, None]
        sales[a, :, :, :k] = by_size * avail[None]
        demand[a, :, :, :k] = by_size
        stock[a, :, :k] = stk
        uplift_units[a] = upl
        discount[a] = disc
        expected[a] = lam
        black_price[a] = draw.black_price
        profiles[a, :k] = draw.profile
        elasticity[a] = draw.slopes.mean()
        slopes[a] = draw.slopes
        meta[a] = (draw.launch, k, draw.brand, draw.group)

    catalog = Catalog(
        sales=sales,
        stock=stock,
        discount=discount,
        black_price=black_price,
        brand=meta[:, 2].copy(),
        commodity_group=meta[:, 3].copy(),
        stock_uplift=uplift_units,
        launch_week=meta[:, 0].copy(),
        n_sizes=meta[:, 1].copy(),
        article_ids=np.arange(A),
    )
    truth = GroundTruth(
        expected_demand=expected,
        demand_by_size=demand,
        size_profile=profiles,
        elasticity=elasticity,
        segment_slopes=slopes,
    )
    return catalog, truth


def expected_demand_for(spec: CatalogSpec, article_id: int, discount: np.ndarray) -> np.ndarray:
    """Expected demand [m, w] of one article under an arbitrary discount path."""
    spec.validate()
    draw, _ = _draw_article(spec, article_id, _market_shares(spec))
    lam = expected_demand(draw, np.asarray(discount, dtype=np.float64), spec, _brand_effects(spec))
    return lam * (np.arange(spec.n_weeks) >= draw.launch)


# ---------------------------------------------------------------- summary


def summarize_catalog(catalog: Catalog) -> dict:
    """Log-scale histogram of article-week demand plus sparsity and tail statistics."""
    if catalog.n_articles == 0:
        raise ValueError("empty catalog")
    weekly = catalog.sales.sum(axis=(1, 3))  # [a, w]
    live = np.arange(catalog.n_weeks)[None, :] >= catalog.launch_week[:, None]
    values = weekly[live]
    top = int(values.max()) if values.size else 0
    edges = [0, 1]
    while edges[-1] <= top:
        edges.append(edges[-1] * 2)
    counts, _ = np.histogram(values, bins=edges)
    per_article = np.array([weekly[a, live[a]].mean() if live[a].any() else 0.0 for a in range(len(weekly))])
    return {
        "bucket_lo": edges[:-1],
        "bucket_hi": edges[1:],
        "count": counts.tolist(),
        "zero_share": float((values == 0).mean()) if values.size else 1.0,
        "article_weeks": int(values.size),
        "tail": {
            "p50": float(np.percentile(per_article, 50)),
            "p90": float(np.percentile(per_article, 90)),
            "p99": float(np.percentile(per_article, 99)),
            "max": float(per_article.max()),
            "hill_index": _hill_index(per_article),
        },
    }


def _hill_index(x: np.ndarray, top_share: float = 0.1) -> float:
    x = np.sort(x[x > 0])[::-1]
    k = max(2, int(len(x) * top_share))
    if len(x) <= k:
        return float("nan")
    logs = np.log(x[:k]) - np.log(x[k])
    est = logs.mean()
    return float(1.0 / est) if est > 0 else float("inf")


def write_summary(summary: dict, path: str | Path) -> None:
    path = Path(path)
    lines = ["bucket_lo,bucket_hi,count"]
    lines += [f"{lo},{hi},{c}" for lo, hi, c in zip(summary["bucket_lo"], summary["bucket_hi"], summary["count"])]
    path.write_text("\n".join(lines) + "\n")
    stats = {k: v for k, v in summary.items() if k not in ("bucket_lo", "bucket_hi", "count")}
    path.with_suffix(".json").write_text(json.dumps(stats, indent=2, sort_keys=True))


# --------------------------------------------------------------------- io


def write_panels(catalog: Catalog, path: str | Path) -> None:
    """One JSON record per article-market-week, columns in ``PANEL_COLUMNS`` order."""
    with open(path, "w") as fh:
        for p in catalog.panels():
            for i, w in enumerate(p.weeks):
                rec = (
                    p.article_id,
                    p.market_id,
                    int(w),
                    p.brand_id,
                    p.commodity_group_id,
                    p.black_price,
                    float(p.discount[i]),
                    int(p.stock_uplift[i]),
                    p.sales_by_size[i].tolist(),
                    p.stock_by_size[i].tolist(),
                )
                fh.write(json.dumps(dict(zip(PANEL_COLUMNS, rec)), separators=(",", ":")) + "\n")


def read_panels(path: str | Path, n_weeks: int | None = None) -> Catalog:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    if not rows:
        raise ValueError(f"{path}: no panel records")
    ids = sorted({r["article_id"] for r in rows})
    pos = {aid: i for i, aid in enumerate(ids)}
    A = len(ids)
    M = 1 + max(r["market_id"] for r in rows)
    W = n_weeks or 1 + max(r["week"] for r in rows)
    S = max(len(r["sales_by_size"]) for r in rows)
    sales = np.zeros((A, M, W, S), dtype=np.int64)
    stock = np.zeros((A, W, S), dtype=np.int64)
    discount = np.zeros((A, M, W))
    black_price = np.zeros((A, M))
    brand = np.zeros(A, dtype=np.int64)
    group = np.zeros(A, dtype=np.int64)
    upl = np.zeros((A, W), dtype=np.int64)
    launch = np.full(A, W, dtype=np.int64)
    n_sizes = np.zeros(A, dtype=np.int64)
    for r in rows:
        a, m, w = pos[r["article_id"]], r["market_id"], r["week"]
        k = len(r["sales_by_size"])
        sales[a, m, w, :k] = r["sales_by_size"]
        stock[a, w, :k] = r["stock_by_size"]
        discount[a, m, w] = r["discount"]
        black_price[a, m] = r["black_price"]
        brand[a] = r["brand_id"]
        group[a] = r["commodity_group_id"]
        upl[a, w] = r["stock_uplift"]
        launch[a] = min(launch[a], w)
        n_sizes[a] = k
    return Catalog(
        sales=sales,
        stock=stock,
        discount=discount,
        black_price=black_price,
        brand=brand,
        commodity_group=group,
        stock_uplift=upl,
        launch_week=launch,
        n_sizes=n_sizes,
        article_ids=np.asarray(ids),
    )


def save_truth(truth: GroundTruth, path: str | Path) -> None:
    write_npz(path, asdict(truth), compress=True)


def load_truth(path: str | Path) -> GroundTruth:
    with np.load(path) as z:
        return GroundTruth(**{k: z[k] for k in z.files})
