"""Encoder/decoder input assembly: covariate transforms, positional rows, masking.

Row layout (``schema.encoder_rows()``) for the stacked multi-market mode, one
column per history week, in the spirit of a ``[v x (t+1)]`` matrix per article::

    demand[m] ... | discount[m] ... | black_price[m] ... | stock | stock_uplift | pos[0..e_dim)

Decoder columns carry the last observed discount and demand of every market,
the future-available covariates and the positional rows of the future week.
Static categorical covariates are not rows; they are embedded and routed to
the monotonic demand head.

Batches are batch-major: encoder ``[B, L, v]``, decoder ``[B, H, v']``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .datagen import Catalog
from .imputation import ImputedCatalog

CATEGORIES = ("static-global", "dynamic-global", "static-international", "dynamic-international")


class DataError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Covariate:
    name: str
    category: str
    value_type: str  # categorical | numeric
    transform: str  # none | logarithm | embedded
    future_available: bool
    dim: int = 1

    @property
    def international(self) -> bool:
        return self.category.endswith("international")

    @property
    def static(self) -> bool:
        return self.category.startswith("static")


# Brand, Commodity Group, Discount, Black Price, Sales, Stock, Stock Uplift
TABLE_COVARIATES = (
    Covariate("brand", "static-global", "categorical", "embedded", True, 10),
    Covariate("commodity_group", "static-global", "categorical", "embedded", True, 10),
    Covariate("discount", "dynamic-international", "numeric", "none", False),
    Covariate("black_price", "static-international", "numeric", "logarithm", True),
    Covariate("sales", "dynamic-international", "numeric", "logarithm", False),
    Covariate("stock", "dynamic-global", "numeric", "logarithm", False),
    Covariate("stock_uplift", "dynamic-global", "numeric", "logarithm", False),
)

_ENCODER_ORDER = ("sales", "discount", "black_price", "stock", "stock_uplift")
_DECODER_ORDER = ("black_price",)


@dataclass
class CovariateSchema:
    covariates: tuple[Covariate, ...] = TABLE_COVARIATES
    n_markets: int = 2
    market_mode: str = "stacked"  # stacked | single
    e_dim: int = 8
    t_dim: int = 52
    window: int = 52
    brand_vocab: int = 25
    group_vocab: int = 8

    def __post_init__(self):
        self.covariates = tuple(Covariate(**c) if isinstance(c, dict) else c for c in self.covariates)
        names = [c.name for c in self.covariates]
        for c in self.covariates:
            if c.category not in CATEGORIES:
                raise ConfigError(f"covariate {c.name}: unknown category {c.category!r}")
            if c.value_type == "categorical" and not c.static:
                raise ConfigError(f"covariate {c.name}: dynamic categorical covariates are not supported")
        for required in ("sales", "discount"):
            if required not in names:
                raise ConfigError(f"schema must contain covariate {required!r}")
        if self.e_dim % 2:
            raise ConfigError(f"positional encoding e_dim must be even, got {self.e_dim}")
        if self.market_mode not in ("stacked", "single"):
            raise ConfigError(f"market_mode must be 'stacked' or 'single', got {self.market_mode!r}")

    def get(self, name: str) -> Covariate | None:
        return next((c for c in self.covariates if c.name == name), None)

    @property
    def row_markets(self) -> int:
        return self.n_markets if self.market_mode == "stacked" else 1

    @property
    def static_embeddings(self) -> tuple[Covariate, ...]:
        return tuple(c for c in self.covariates if c.transform == "embedded")

    def _rows(self, order, future: bool) -> list[str]:
        rows = []
        for name in order:
            c = self.get(name)
            if c is None or (future and not c.future_available):
                continue
            if c.international:
                rows += [f"{name}[{m}]" for m in range(self.row_markets)]
            else:
                rows.append(name)
        return rows

    def encoder_rows(self) -> list[str]:
        return self._rows(_ENCODER_ORDER, False) + [f"pos[{i}]" for i in range(self.e_dim)]

    def decoder_rows(self) -> list[str]:
        c = self.row_markets
        last = [f"last_discount[{m}]" for m in range(c)] + [f"last_demand[{m}]" for m in range(c)]
        return last + self._rows(_DECODER_ORDER, True) + [f"pos[{i}]" for i in range(self.e_dim)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["covariates"] = [asdict(c) for c in self.covariates]
        d["encoder_rows"] = self.encoder_rows()
        d["decoder_rows"] = self.decoder_rows()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CovariateSchema":
        d = {k: v for k, v in d.items() if k not in ("encoder_rows", "decoder_rows", "hash")}
        d["covariates"] = tuple(Covariate(**c) for c in d["covariates"])
        return cls(**d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path: str | Path) -> None:
        d = self.to_dict()
        d["hash"] = self.hash()
        Path(path).write_text(json.dumps(d, indent=2))

    @classmethod
    def load(cls, path: str | Path) -> "CovariateSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def check_heads(self, heads: int, d_k: int) -> None:
        v = len(self.encoder_rows())
        if v != heads * d_k:
            options = [f"heads={h}, d_k={v // h}" for h in range(1, v + 1) if v % h == 0]
            raise ConfigError(
                f"encoder rows v={v} must equal heads*d_k={heads}*{d_k}={heads * d_k}; "
                f"valid choices: {'; '.join(options)}"
            )


# ----------------------------------------------------------------- single ops


def transform_covariates(week: dict, schema: CovariateSchema | None = None) -> np.ndarray:
    """Numeric covariates of one panel week in schema order, log1p where the schema says logarithm."""
    schema = schema or CovariateSchema()
    out = []
    for c in schema.covariates:
        if c.value_type != "numeric":
            continue
        if c.name not in week:
            raise DataError(f"panel week lacks covariate {c.name!r}")
        x = float(week[c.name])
        if c.transform == "logarithm":
            if x < 0:
                raise DataError(f"covariate {c.name!r} is negative ({x}); cannot take logarithm")
            x = np.log1p(x)
        out.append(x)
    return np.array(out)


def positional_encoding(n, e_dim: int, t_dim: int = 52) -> np.ndarray:
    """Interleaved sin/cos rows; component m runs at frequency (2m+1)/(e_dim*t_dim) per week.

    ``n`` may be an array of week indices; the encoding is added as a trailing axis.
    """
    if e_dim % 2:
        raise ConfigError(f"e_dim must be even, got {e_dim}")
    if t_dim <= 0:
        raise ConfigError(f"t_dim must be positive, got {t_dim}")
    m = np.arange(e_dim)
    f = (2 * m + 1) / (e_dim * t_dim)
    p = 2 * np.pi * f * np.asarray(n, dtype=np.float64)[..., None]
    return np.where(m % 2 == 0, np.sin(p), np.cos(p))


def build_masks(stock_total, n_history: int | None = None, window: int | None = None, censored=None) -> np.ndarray:
    """Week mask over a window, True where the week is usable.

    A week is masked when it is padding (the article has fewer than ``window``
    weeks of history), when total stock is zero, or when ``censored`` marks it.
    ``stock_total`` holds the observed weeks, oldest first.
    """
    stock_total = np.asarray(stock_total)
    n = len(stock_total) if n_history is None else n_history
    window = window or n
    ok = np.zeros(window, dtype=bool)
    take = min(n, window)
    if take:
        seen = stock_total[len(stock_total) - take :] > 0
        if censored is not None:
            seen &= ~np.asarray(censored)[len(stock_total) - take :]
        ok[window - take :] = seen
    return ok


# ------------------------------------------------------------------ batches


@dataclass
class EncoderInput:
    eta: np.ndarray  # [v, L]
    mask: np.ndarray  # [L]


@dataclass
class DecoderInput:
    eta_future: np.ndarray  # [v', H]
    discounts: np.ndarray  # [c, H] future discounts, routed to the head


@dataclass
class Batch:
    enc: np.ndarray  # [B, L, v]
    enc_mask: np.ndarray  # [B, L]
    dec: np.ndarray  # [B, H, v']
    discount: np.ndarray  # [B, H, c]
    target: np.ndarray  # [B, H, c] log1p demand (0 where masked)
    target_mask: np.ndarray  # [B, H, c] usable for the loss
    eval_mask: np.ndarray  # [B, H, c] usable for evaluation (not imputed)
    demand: np.ndarray  # [B, H, c] demand units, NaN where undefined
    black_price: np.ndarray  # [B, c]
    brand: np.ndarray  # [B]
    group: np.ndarray  # [B]
    article: np.ndarray  # [B] row index into the catalog
    origin: np.ndarray  # [B] last history week
    last_demand: np.ndarray  # [B, c] demand units at the last unmasked week
    has_history: np.ndarray = field(default=None)  # [B]

    def __len__(self) -> int:
        return len(self.article)

    def select(self, rows) -> "Batch":
        return Batch(**{k: getattr(self, k)[rows] for k in self.__dataclass_fields__})


def split_markets(catalog: Catalog, imputed: ImputedCatalog) -> tuple[Catalog, ImputedCatalog]:
    """Single-market layout: every (article, market) becomes its own one-market series."""
    A, M = catalog.n_articles, catalog.n_markets
    rep = np.repeat(np.arange(A), M)
    mk = np.tile(np.arange(M), A)
    cat = Catalog(
        sales=catalog.sales[rep, mk][:, None],
        stock=catalog.stock[rep],
        discount=catalog.discount[rep, mk][:, None],
        black_price=catalog.black_price[rep, mk][:, None],
        brand=catalog.brand[rep],
        commodity_group=catalog.commodity_group[rep],
        stock_uplift=catalog.stock_uplift[rep],
        launch_week=catalog.launch_week[rep],
        n_sizes=catalog.n_sizes[rep],
        article_ids=catalog.article_ids[rep] * M + mk,
    )
    imp = ImputedCatalog(
        imputed.demand[rep, mk][:, None],
        imputed.imputed[rep, mk][:, None],
        imputed.censored[rep, mk][:, None],
        imputed.profiles[rep],
        [imputed.profile_source[i] for i in rep],
    )
    return cat, imp


class FeatureBuilder:
    """Builds model inputs for (article, origin) pairs from a catalog and its imputed demand."""

    def __init__(self, schema: CovariateSchema, catalog: Catalog, imputed: ImputedCatalog):
        if schema.market_mode == "single" and catalog.n_markets > 1:
            catalog, imputed = split_markets(catalog, imputed)
        if catalog.n_markets != schema.row_markets:
            raise DataError(f"schema expects {schema.row_markets} market rows, catalog has {catalog.n_markets}")
        self.schema = schema
        self.catalog = catalog
        self.imputed = imputed
        c = catalog
        self._log_demand = np.log1p(np.nan_to_num(imputed.demand, nan=0.0))  # [a, m, w]
        self._stock = c.stock.sum(axis=-1)  # [a, w]
        self._usable = (self._stock > 0) & ~imputed.censored.any(axis=1)  # [a, w]
        self._rows = {
            "sales": np.transpose(self._log_demand, (0, 2, 1)),  # [a, w, m]
            "discount": np.transpose(c.discount, (0, 2, 1)),
            "stock": np.log1p(self._stock)[..., None],
            "stock_uplift": np.log1p(c.stock_uplift)[..., None].astype(np.float64),
        }
        if (c.stock_uplift < 0).any() or (c.stock < 0).any() or (c.black_price < 0).any():
            raise DataError("negative value in a log-transformed covariate")
        self._log_bp = np.log1p(c.black_price)  # [a, m]
        self.brand_idx = np.where(c.brand < schema.brand_vocab, c.brand, schema.brand_vocab)
        self.group_idx = np.where(c.commodity_group < schema.group_vocab, c.commodity_group, schema.group_vocab)

    @property
    def n_articles(self) -> int:
        return self.catalog.n_articles

    @property
    def n_weeks(self) -> int:
        return self.catalog.n_weeks

    def first_origin(self, a: int) -> int:
        """Earliest origin with at least one usable history week, or n_weeks if none."""
        ok = np.flatnonzero(self._usable[a])
        return int(ok[0]) if ok.size else self.n_weeks

    def batch(self, articles, origins, horizon: int, cutoff: int | None = None) -> Batch:
        """Samples with history ending at ``origins`` (inclusive) and ``horizon`` future weeks.

        Target weeks beyond ``cutoff`` (the last week whose actuals may be used)
        or beyond the catalog are masked out.
        """
        s = self.schema
        cat = self.catalog
        a = np.asarray(articles, dtype=np.int64)
        t = np.asarray(origins, dtype=np.int64)
        B, L, W, c = len(a), s.window, cat.n_weeks, s.row_markets
        cutoff = W - 1 if cutoff is None else cutoff

        weeks = t[:, None] - L + 1 + np.arange(L)[None, :]  # [B, L]
        inside = (weeks >= 0) & (weeks < W) & (weeks >= cat.launch_week[a][:, None])
        wk = np.clip(weeks, 0, W - 1)
        mask = inside & self._usable[a[:, None], wk]

        blocks = []
        for name in _ENCODER_ORDER:
            cov = s.get(name)
            if cov is None:
                continue
            if name == "black_price":
                blocks.append(np.broadcast_to(self._log_bp[a][:, None, :], (B, L, c)))
            else:
                blocks.append(self._rows[name][a[:, None], wk])
        blocks.append(positional_encoding(weeks, s.e_dim, s.t_dim))
        enc = np.concatenate(blocks, axis=-1) * inside[..., None]

        # last usable week at or before the origin
        idx = np.where(mask, np.arange(L)[None, :], -1).max(axis=1)
        has = idx >= 0
        last_w = wk[np.arange(B), np.maximum(idx, 0)]
        last_q = np.where(has[:, None], self._log_demand[a, :, last_w], 0.0)  # [B, c]
        last_d = np.where(has[:, None], cat.discount[a, :, last_w], 0.0)

        fweeks = t[:, None] + 1 + np.arange(horizon)[None, :]  # [B, H]
        fin = fweeks < W
        fw = np.clip(fweeks, 0, W - 1)
        dec_blocks = [
            np.broadcast_to(last_d[:, None, :], (B, horizon, c)),
            np.broadcast_to(last_q[:, None, :], (B, horizon, c)),
        ]
        bp = s.get("black_price")
        if bp is not None and bp.future_available:
            dec_blocks.append(np.broadcast_to(self._log_bp[a][:, None, :], (B, horizon, c)))
        dec_blocks.append(positional_encoding(fweeks, s.e_dim, s.t_dim))
        dec = np.concatenate(dec_blocks, axis=-1)

        discount = cat.discount[a[:, None], :, fw] * fin[..., None]
        demand = self.imputed.demand[a[:, None], :, fw].copy()
        demand[~fin] = np.nan
        censored = self.imputed.censored[a[:, None], :, fw] | ~fin[..., None]
        tmask = ~censored & (fweeks <= cutoff)[..., None] & (self._stock[a[:, None], fw] > 0)[..., None]
        emask = tmask & ~self.imputed.imputed[a[:, None], :, fw]
        target = np.where(tmask, np.log1p(np.nan_to_num(demand, nan=0.0)), 0.0)

        return Batch(
            enc=enc,
            enc_mask=mask,
            dec=dec,
            discount=discount,
            target=target,
            target_mask=tmask,
            eval_mask=emask,
            demand=demand,
            black_price=cat.black_price[a],
            brand=self.brand_idx[a],
            group=self.group_idx[a],
            article=a,
            origin=t,
            last_demand=np.expm1(last_q),
            has_history=has,
        )

    def encoder_input(self, a: int, origin: int) -> EncoderInput:
        b = self.batch([a], [origin], 1)
        return EncoderInput(eta=b.enc[0].T.copy(), mask=b.enc_mask[0].copy())

    def decoder_input(self, a: int, origin: int, horizon: int) -> DecoderInput:
        b = self.batch([a], [origin], horizon)
        return DecoderInput(eta_future=b.dec[0].T.copy(), discounts=b.discount[0].T.copy())


def build_encoder_input(builder: FeatureBuilder, article: int, origin: int) -> EncoderInput:
    return builder.encoder_input(article, origin)


def build_decoder_input(builder: FeatureBuilder, article: int, origin: int, horizon: int) -> DecoderInput:
    return builder.decoder_input(article, origin, horizon)
