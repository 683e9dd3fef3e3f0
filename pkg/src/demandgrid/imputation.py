"""Sales-to-demand translation under size-level stockouts.

Weekly demand over the k sizes of an article is modelled as
``Multinomial(n, p)``. ``p`` is learned from weeks where every size was in
stock; in a week where only some sizes are available, the total ``n`` is
estimated by the maximum-likelihood estimator restricted to the observed
cells::

    n_hat = (sales over available sizes) / (p mass over available sizes)

Weeks with too little observed mass are treated as fully censored.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import PANEL_COLUMNS, ArticlePanel, Catalog

DEFAULT_ALPHA = 0.5
DEFAULT_MIN_MASS = 0.2


class NoFullAvailability(ValueError):
    """No week with every size in stock and positive sales."""


@dataclass
class SizeProfile:
    article_id: int
    p: np.ndarray
    source: str = "article"  # article | commodity_group | global | uniform

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        if (self.p < 0).any() or abs(self.p.sum() - 1.0) > 1e-9:
            raise ValueError(f"size profile of article {self.article_id} is not a distribution: {self.p}")

    @property
    def k(self) -> int:
        return len(self.p)


@dataclass
class ImputedWeek:
    article_id: int
    week: int
    demand_estimate: float
    observed_sales: int
    imputed_flag: bool
    excluded_from_eval: bool
    fully_censored: bool = False
    market_id: int = 0
    missing_by_size: dict[int, float] = field(default_factory=dict)


def _full_weeks(sales: np.ndarray, stock: np.ndarray) -> np.ndarray:
    """Boolean [w]: every size in stock and some sales."""
    return (stock > 0).all(axis=-1) & (sales.sum(axis=-1) > 0)


def profile_from_counts(article_id: int, totals, alpha: float = DEFAULT_ALPHA, source="article") -> SizeProfile:
    c = np.asarray(totals, dtype=np.float64) + alpha
    return SizeProfile(article_id, c / c.sum(), source)


def fit_size_profile(panel: ArticlePanel | list[ArticlePanel], alpha: float = DEFAULT_ALPHA) -> SizeProfile:
    """Size distribution from fully stocked weeks; several panels of one article are pooled."""
    panels = panel if isinstance(panel, list) else [panel]
    if panels[0].n_sizes == 1:
        return SizeProfile(panels[0].article_id, np.ones(1))
    totals = np.zeros(panels[0].n_sizes)
    found = False
    for p in panels:
        full = _full_weeks(p.sales_by_size, p.stock_by_size)
        if full.any():
            found = True
            totals += p.sales_by_size[full].sum(axis=0)
    if not found:
        raise NoFullAvailability(f"article {panels[0].article_id}: no fully stocked week with sales")
    return profile_from_counts(panels[0].article_id, totals, alpha)


def impute_week(
    sales_by_size,
    availability_by_size,
    profile: SizeProfile,
    min_mass: float = DEFAULT_MIN_MASS,
    week: int = 0,
    market_id: int = 0,
) -> ImputedWeek:
    sales = np.asarray(sales_by_size)
    avail = np.asarray(availability_by_size, dtype=bool)
    if sales.shape != (profile.k,) or avail.shape != (profile.k,):
        raise ValueError(f"week {week}: {sales.shape[0]} sizes vs profile of {profile.k}")
    total = int(sales.sum())
    base = dict(article_id=profile.article_id, week=week, observed_sales=total, market_id=market_id)
    if avail.all():
        return ImputedWeek(demand_estimate=float(total), imputed_flag=False, excluded_from_eval=False, **base)
    mass = float(profile.p[avail].sum())
    if not avail.any() or mass < min_mass or mass <= 0.0:
        return ImputedWeek(
            demand_estimate=float("nan"),
            imputed_flag=True,
            excluded_from_eval=True,
            fully_censored=True,
            **base,
        )
    n_hat = float(sales[avail].sum()) / mass
    missing = {int(s): float(profile.p[s] * n_hat) for s in np.flatnonzero(~avail)}
    return ImputedWeek(
        demand_estimate=n_hat,
        imputed_flag=True,
        excluded_from_eval=True,
        missing_by_size=missing,
        **base,
    )


@dataclass
class ImputationReport:
    weeks: int = 0
    imputed: int = 0
    fully_censored: int = 0
    errors: list[str] = field(default_factory=list)
    profile_sources: Counter = field(default_factory=Counter)


def impute_panel(
    panel: ArticlePanel,
    profile: SizeProfile,
    min_mass: float = DEFAULT_MIN_MASS,
    report: ImputationReport | None = None,
) -> list[ImputedWeek]:
    out = []
    for i, w in enumerate(panel.weeks):
        try:
            iw = impute_week(
                panel.sales_by_size[i],
                panel.stock_by_size[i] > 0,
                profile,
                min_mass,
                week=int(w),
                market_id=panel.market_id,
            )
        except ValueError as exc:
            if report is None:
                raise
            report.errors.append(str(exc))
            continue
        out.append(iw)
        if report is not None:
            report.weeks += 1
            report.imputed += iw.imputed_flag
            report.fully_censored += iw.fully_censored
    return out


# -------------------------------------------------------- catalog level


@dataclass
class ImputedCatalog:
    """Per article-market-week demand arrays; NaN demand where undefined."""

    demand: np.ndarray  # [a, m, w]
    imputed: np.ndarray  # [a, m, w] bool
    censored: np.ndarray  # [a, m, w] bool, fully censored or not launched
    profiles: np.ndarray  # [a, s] padded with zeros
    profile_source: list[str]

    @property
    def excluded(self) -> np.ndarray:
        return self.imputed | self.censored

    def subset(self, rows) -> "ImputedCatalog":
        rows = np.asarray(rows)
        return ImputedCatalog(
            self.demand[rows],
            self.imputed[rows],
            self.censored[rows],
            self.profiles[rows],
            [self.profile_source[i] for i in rows],
        )


def fit_profiles(catalog: Catalog, alpha: float = DEFAULT_ALPHA) -> list[SizeProfile]:
    """Per-article profiles, falling back to commodity-group, then global pooled counts."""
    A = catalog.n_articles
    totals: list[np.ndarray | None] = []
    for a in range(A):
        k = int(catalog.n_sizes[a])
        sales = catalog.sales[a, :, :, :k]
        full = _full_weeks(sales.sum(axis=0), catalog.stock[a, :, :k])
        totals.append(sales[:, full].sum(axis=(0, 1)) if full.any() else None)

    pooled_group: dict[tuple[int, int], np.ndarray] = {}
    pooled_all: dict[int, np.ndarray] = {}
    for a, t in enumerate(totals):
        if t is None:
            continue
        key = (int(catalog.commodity_group[a]), len(t))
        pooled_group[key] = pooled_group.get(key, 0) + t
        pooled_all[len(t)] = pooled_all.get(len(t), 0) + t

    profiles = []
    for a, t in enumerate(totals):
        aid = int(catalog.article_ids[a])
        k = int(catalog.n_sizes[a])
        if k == 1:
            profiles.append(SizeProfile(aid, np.ones(1)))
        elif t is not None:
            profiles.append(profile_from_counts(aid, t, alpha))
        elif (int(catalog.commodity_group[a]), k) in pooled_group:
            profiles.append(profile_from_counts(aid, pooled_group[int(catalog.commodity_group[a]), k], alpha, "commodity_group"))
        elif k in pooled_all:
            profiles.append(profile_from_counts(aid, pooled_all[k], alpha, "global"))
        else:
            profiles.append(SizeProfile(aid, np.full(k, 1.0 / k), "uniform"))
    return profiles


def impute_catalog(
    catalog: Catalog,
    alpha: float = DEFAULT_ALPHA,
    min_mass: float = DEFAULT_MIN_MASS,
    profiles: list[SizeProfile] | None = None,
) -> ImputedCatalog:
    """Vectorised :func:`impute_week` over every article, market and week."""
    if profiles is None:
        profiles = fit_profiles(catalog, alpha)
    A, M, W, S = catalog.sales.shape
    P = np.zeros((A, S))
    for a, prof in enumerate(profiles):
        P[a, : prof.k] = prof.p
    size_ok = np.arange(S)[None, :] < catalog.n_sizes[:, None]  # [a, s]
    avail = (catalog.stock > 0) & size_ok[:, None, :]  # [a, w, s]
    all_avail = (avail | ~size_ok[:, None, :]).all(axis=-1)  # [a, w]
    mass = (P[:, None, :] * avail).sum(axis=-1)  # [a, w]
    obs = (catalog.sales * avail[:, None]).sum(axis=-1).astype(np.float64)  # [a, m, w]
    live = np.arange(W)[None, :] >= catalog.launch_week[:, None]
    censored = ~live | ~avail.any(axis=-1) | (mass < min_mass) | (mass <= 0)
    censored &= ~all_avail | ~live
    with np.errstate(divide="ignore", invalid="ignore"):
        n_hat = obs / mass[:, None, :]
    demand = np.where(all_avail[:, None, :], obs, n_hat)
    censored_m = np.broadcast_to(censored[:, None, :], (A, M, W)).copy()
    demand[censored_m] = np.nan
    imputed = np.broadcast_to((~all_avail & live)[:, None, :], (A, M, W)).copy()
    return ImputedCatalog(demand, imputed, censored_m, P, [p.source for p in profiles])


# --------------------------------------------------------------------- io


def write_imputed(catalog: Catalog, imputed: ImputedCatalog, path: str | Path) -> None:
    """Panel records extended with demand_estimate, imputed_flag, excluded_from_eval, fully_censored."""
    with open(path, "w") as fh:
        for a in range(catalog.n_articles):
            for m in range(catalog.n_markets):
                p = catalog.panel(a, m)
                for i, w in enumerate(p.weeks):
                    w = int(w)
                    d = imputed.demand[a, m, w]
                    rec = dict(
                        zip(
                            PANEL_COLUMNS,
                            (
                                p.article_id,
                                m,
                                w,
                                p.brand_id,
                                p.commodity_group_id,
                                p.black_price,
                                float(p.discount[i]),
                                int(p.stock_uplift[i]),
                                p.sales_by_size[i].tolist(),
                                p.stock_by_size[i].tolist(),
                            ),
                        )
                    )
                    rec["demand_estimate"] = None if np.isnan(d) else float(d)
                    rec["imputed_flag"] = bool(imputed.imputed[a, m, w])
                    rec["excluded_from_eval"] = bool(imputed.excluded[a, m, w])
                    rec["fully_censored"] = bool(imputed.censored[a, m, w])
                    fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
    Path(path).with_suffix(".profiles.json").write_text(
        json.dumps(
            {
                str(int(catalog.article_ids[a])): {
                    "p": imputed.profiles[a, : int(catalog.n_sizes[a])].tolist(),
                    "source": imputed.profile_source[a],
                }
                for a in range(catalog.n_articles)
            }
        )
    )


def read_imputed(path: str | Path, catalog: Catalog) -> ImputedCatalog:
    A, M, W, S = catalog.sales.shape
    pos = {int(aid): i for i, aid in enumerate(catalog.article_ids)}
    demand = np.full((A, M, W), np.nan)
    imputed = np.zeros((A, M, W), dtype=bool)
    censored = np.ones((A, M, W), dtype=bool)
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            a, m, w = pos[r["article_id"]], r["market_id"], r["week"]
            if r["demand_estimate"] is not None:
                demand[a, m, w] = r["demand_estimate"]
            imputed[a, m, w] = r["imputed_flag"]
            censored[a, m, w] = r["fully_censored"]
    meta = json.loads(Path(path).with_suffix(".profiles.json").read_text())
    P = np.zeros((A, S))
    sources = [""] * A
    for aid, v in meta.items():
        a = pos[int(aid)]
        P[a, : len(v["p"])] = v["p"]
        sources[a] = v["source"]
    return ImputedCatalog(demand, imputed, censored, P, sources)
