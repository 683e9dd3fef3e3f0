"""Transformer demand forecaster with a monotonic piecewise-linear discount head.

Pipeline for one batch::

    encoder:  masked multi-head self-attention over history weeks -> gamma [B, L, D]
    decoder:  per future week, source attention onto gamma with tau-scored
              query/key pairs (no attention between future weeks) -> kappa [B, H, D]
    head:     slopes  = softplus(phi0(masked_mean(gamma), static))   [B, c, 7]
              q0, s   = softplus(phi1(kappa, static))                 [B, H, c]
              xi(d)   = q0 + s * sum_n slope_n * fill_n(d)

``fill_n(d) = clip(10 d - (n - 1), 0, 1)`` is the covered share of the n-th
0.1-wide discount segment, so xi is continuous and non-decreasing in d for
any parameter values. xi lives in log1p-demand space; ``expm1`` maps back.

Weeks 1..near_horizon are served by the near decoder/head pair, later weeks by
the far pair. Encoder and embeddings are shared.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .artifacts import write_npz
from .features import Batch, CovariateSchema
from .tensor import Tensor

CHECKPOINT_VERSION = 1
SEGMENT_WIDTH = 0.1
N_SEGMENTS = 7
MAX_DISCOUNT = SEGMENT_WIDTH * N_SEGMENTS


class SchemaMismatch(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 16
    heads: int = 4
    d_k: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 32
    dec_in_dim: int = 14
    n_markets: int = 2
    window: int = 52
    near_horizon: int = 5
    far_horizon: int = 20
    prediction_horizon: int = 26
    segment_width: float = SEGMENT_WIDTH
    n_segments: int = N_SEGMENTS
    tau_hidden: int = 8  # 0 makes tau a single linear layer
    head_hidden: int = 32
    emb_dim: int = 10
    brand_vocab: int = 25
    group_vocab: int = 8
    dropout: float = 0.1
    seed: int = 0

    def validate(self) -> "ModelConfig":
        if self.d_model != self.heads * self.d_k:
            raise ValueError(f"d_model={self.d_model} must equal heads*d_k={self.heads}*{self.d_k}")
        if not 0 < self.near_horizon <= self.far_horizon <= self.prediction_horizon:
            raise ValueError("need 0 < near_horizon <= far_horizon <= prediction_horizon")
        if abs(self.segment_width * self.n_segments - MAX_DISCOUNT) > 1e-12:
            raise ValueError("segments must tile the discount domain [0, 0.7]")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate {self.dropout} outside [0, 1)")
        return self

    @classmethod
    def for_schema(cls, schema: CovariateSchema, **kw) -> "ModelConfig":
        v = len(schema.encoder_rows())
        heads = kw.pop("heads", 4)
        schema.check_heads(heads, kw.get("d_k", v // heads))
        kw.setdefault("d_k", v // heads)
        cfg = cls(
            d_model=v,
            heads=heads,
            dec_in_dim=len(schema.decoder_rows()),
            n_markets=schema.row_markets,
            window=schema.window,
            brand_vocab=schema.brand_vocab,
            group_vocab=schema.group_vocab,
            **kw,
        )
        return cfg.validate()


# ------------------------------------------------------------ response


def segment_fill(d) -> np.ndarray:
    """[..., 7] covered share of each 0.1-wide discount segment."""
    d = np.asarray(d, dtype=np.float64)
    return np.clip(d[..., None] / SEGMENT_WIDTH - np.arange(N_SEGMENTS), 0.0, 1.0)


def demand_response(d: float, q_hat: float, sigma: float, delta) -> float:
    """Piecewise-linear response at discount ``d`` (all inputs already non-negative).

    With m = floor(10 d) (clamped to 6 at d = 0.7) this is
    q_hat + sigma * (sum_{n<=m} delta_n + (d - 0.1 m) * delta_{m+1} / 0.1).
    """
    if not 0.0 <= d <= MAX_DISCOUNT + 1e-12:
        raise DomainError(f"discount {d} outside [0, {MAX_DISCOUNT}]")
    delta = np.asarray(delta, dtype=np.float64)
    m = min(int(math.floor(d / SEGMENT_WIDTH)), N_SEGMENTS - 1)
    return float(q_hat + sigma * (delta[:m].sum() + (d - SEGMENT_WIDTH * m) * delta[m] / SEGMENT_WIDTH))


# -------------------------------------------------------------- params


def _glorot(rng, fan_in, fan_out, shape=None):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, shape or (fan_in, fan_out))


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    D, F, c = cfg.d_model, cfg.ffn_dim, cfg.n_markets
    p: dict[str, np.ndarray] = {}

    def lin(name, fin, fout):
        p[f"{name}.w"] = _glorot(rng, fin, fout)
        p[f"{name}.b"] = np.zeros(fout)

    def ln(name):
        p[f"{name}.g"] = np.ones(D)
        p[f"{name}.b"] = np.zeros(D)

    def block(prefix, tau):
        for nm in ("q", "k", "v", "o"):
            lin(f"{prefix}.attn.{nm}", D, D)
        if tau:
            if cfg.tau_hidden:
                p[f"{prefix}.tau.wq"] = _glorot(rng, 2 * cfg.d_k, cfg.tau_hidden, (cfg.d_k, cfg.tau_hidden))
                p[f"{prefix}.tau.wk"] = _glorot(rng, 2 * cfg.d_k, cfg.tau_hidden, (cfg.d_k, cfg.tau_hidden))
                p[f"{prefix}.tau.b1"] = np.zeros(cfg.tau_hidden)
                p[f"{prefix}.tau.w2"] = _glorot(rng, cfg.tau_hidden, 1)
            else:
                p[f"{prefix}.tau.wq"] = _glorot(rng, 2 * cfg.d_k, 1, (cfg.d_k, 1))
                p[f"{prefix}.tau.wk"] = _glorot(rng, 2 * cfg.d_k, 1, (cfg.d_k, 1))
        ln(f"{prefix}.ln1")
        lin(f"{prefix}.ff1", D, F)
        lin(f"{prefix}.ff2", F, D)
        ln(f"{prefix}.ln2")

    p["emb.brand"] = rng.normal(0.0, 0.1, (cfg.brand_vocab + 1, cfg.emb_dim))
    p["emb.group"] = rng.normal(0.0, 0.1, (cfg.group_vocab + 1, cfg.emb_dim))
    for i in range(cfg.enc_layers):
        block(f"enc.{i}", tau=False)
    head_in = D + 2 * cfg.emb_dim
    for part in ("near", "far"):
        lin(f"{part}.dec.in", cfg.dec_in_dim, D)
        for i in range(cfg.dec_layers):
            block(f"{part}.dec.{i}", tau=True)
        lin(f"{part}.phi0.h", head_in, cfg.head_hidden)
        lin(f"{part}.phi0.o", cfg.head_hidden, N_SEGMENTS * c)
        lin(f"{part}.phi1.h", head_in, cfg.head_hidden)
        lin(f"{part}.phi1.o", cfg.head_hidden, 2 * c)
        # small initial slopes and scale keep the untrained response gentle
        p[f"{part}.phi0.o.b"] -= 2.0
        p[f"{part}.phi1.o.b"][c:] -= 1.0
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def group_names(params, *prefixes: str) -> set[str]:
    return {k for k in params if k.startswith(prefixes)}


# ------------------------------------------------------------- outputs


@dataclass
class HeadOutput:
    q_hat: Tensor  # [B, H, c] log1p space
    sigma: Tensor  # [B, H, c]
    delta: Tensor  # [B, c, 7]
    xi: Tensor  # [B, H, c] log1p-space prediction at the given discounts


@dataclass
class Forward:
    gamma: Tensor
    kappa: Tensor
    head: HeadOutput
    enc_attention: list[np.ndarray] = field(default_factory=list)
    dec_attention: list[np.ndarray] = field(default_factory=list)


class DemandForecaster:
    def __init__(self, config: ModelConfig, schema: CovariateSchema | None = None, params=None):
        self.config = config.validate()
        self.schema = schema
        self.params: dict[str, Tensor] = params if params is not None else init_params(config)
        self.rng = np.random.default_rng([config.seed, 0xD20F])
        self.training = False
        self.keep_attention = False

    def copy(self) -> "DemandForecaster":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return DemandForecaster(self.config, self.schema, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def _drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.config.dropout, self.rng, self.training)

    def _lin(self, x: Tensor, name: str) -> Tensor:
        return T.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _heads(self, x: Tensor) -> Tensor:
        B, N, _ = x.shape
        cfg = self.config
        return T.transpose(T.reshape(x, (B, N, cfg.heads, cfg.d_k)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        B, h, N, dk = x.shape
        return T.reshape(T.transpose(x, (0, 2, 1, 3)), (B, N, h * dk))

    def _ffn_sublayer(self, x: Tensor, prefix: str) -> Tensor:
        hidden = T.relu(self._lin(x, f"{prefix}.ff1"))
        return self._ln(x + self._drop(self._lin(hidden, f"{prefix}.ff2")), f"{prefix}.ln2")

    # ---------------------------------------------------------- encoder

    def encode(self, enc, mask, store=None) -> Tensor:
        """gamma [B, L, D]; ``mask`` [B, L] is True for usable weeks."""
        x = enc if isinstance(enc, Tensor) else Tensor(enc)
        mask = np.asarray(mask, dtype=bool)
        if x.shape[-1] != self.config.d_model:
            raise SchemaMismatch(f"encoder rows {x.shape[-1]} != d_model {self.config.d_model}")
        if not mask.any(axis=1).all():
            raise T.AllMaskedError("an article has no usable history week")
        key_mask = mask[:, None, None, :]
        scale = 1.0 / math.sqrt(self.config.d_k)
        for i in range(self.config.enc_layers):
            pre = f"enc.{i}"
            q = self._heads(self._lin(x, f"{pre}.attn.q"))
            k = self._heads(self._lin(x, f"{pre}.attn.k"))
            v = self._heads(self._lin(x, f"{pre}.attn.v"))
            scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
            w = T.masked_softmax(scores, key_mask)
            if store is not None:
                store.append(w.data)
            att = self._lin(self._merge(T.matmul(w, v)), f"{pre}.attn.o")
            x = self._ln(x + self._drop(att), f"{pre}.ln1")
            x = self._ffn_sublayer(x, pre)
        return x

    # ---------------------------------------------------------- decoder

    def _tau_scores(self, q: Tensor, k: Tensor, pre: str) -> Tensor:
        """One score per (future week, past week): tau applied to the stacked [q; k] pair."""
        B, h, H, dk = q.shape
        L = k.shape[2]
        p = self.params
        a = T.matmul(q, p[f"{pre}.tau.wq"])  # [B, h, H, n]
        b = T.matmul(k, p[f"{pre}.tau.wk"])  # [B, h, L, n]
        n = a.shape[-1]
        if self.config.tau_hidden == 0:
            return T.reshape(a, (B, h, H, 1)) + T.reshape(b, (B, h, 1, L))
        return T.pair_scores(a, b, p[f"{pre}.tau.b1"], p[f"{pre}.tau.w2"])

    def decode(self, gamma: Tensor, mask, dec, part: str = "near", store=None) -> Tensor:
        """kappa [B, H, D]; column T depends only on gamma and the decoder column T."""
        x = dec if isinstance(dec, Tensor) else Tensor(dec)
        if x.shape[-1] != self.config.dec_in_dim:
            raise SchemaMismatch(f"decoder rows {x.shape[-1]} != trained layout {self.config.dec_in_dim}")
        if gamma.shape[0] != x.shape[0] or gamma.shape[-1] != self.config.d_model:
            raise SchemaMismatch(f"gamma {gamma.shape} incompatible with decoder input {x.shape}")
        key_mask = np.asarray(mask, dtype=bool)[:, None, None, :]
        scale = 1.0 / math.sqrt(self.config.d_k)
        x = self._lin(x, f"{part}.dec.in")
        for i in range(self.config.dec_layers):
            pre = f"{part}.dec.{i}"
            q = self._heads(self._lin(x, f"{pre}.attn.q"))
            k = self._heads(self._lin(gamma, f"{pre}.attn.k"))
            v = self._heads(self._lin(gamma, f"{pre}.attn.v"))
            w = T.masked_softmax(self._tau_scores(q, k, pre) * scale, key_mask)
            if store is not None:
                store.append(w.data)
            att = self._lin(self._merge(T.matmul(w, v)), f"{pre}.attn.o")
            x = self._ln(x + self._drop(att), f"{pre}.ln1")
            x = self._ffn_sublayer(x, pre)
        return x

    # ------------------------------------------------------------- head

    def static_features(self, brand, group) -> Tensor:
        return T.concat(
            [T.embedding(self.params["emb.brand"], brand), T.embedding(self.params["emb.group"], group)], axis=-1
        )

    def pooled(self, gamma: Tensor, mask) -> Tensor:
        m = np.asarray(mask, dtype=np.float64)
        w = m / m.sum(axis=1, keepdims=True)
        return T.tsum(gamma * w[..., None], axis=1)

    def head_params(self, gamma: Tensor, mask, kappa: Tensor, static: Tensor, part: str):
        c = self.config.n_markets
        B, H, _ = kappa.shape
        pooled = T.concat([self.pooled(gamma, mask), static], axis=-1)
        h0 = T.tanh(self._lin(pooled, f"{part}.phi0.h"))
        delta = T.reshape(T.softplus(self._lin(h0, f"{part}.phi0.o")), (B, c, N_SEGMENTS))
        st = T.broadcast_to(T.reshape(static, (B, 1, static.shape[-1])), (B, H, static.shape[-1]))
        h1 = T.tanh(self._lin(T.concat([kappa, st], axis=-1), f"{part}.phi1.h"))
        out = T.softplus(self._lin(h1, f"{part}.phi1.o"))  # [B, H, 2c]
        return out[:, :, :c], out[:, :, c:], delta

    @staticmethod
    def response(q_hat: Tensor, sigma: Tensor, delta: Tensor, discount) -> Tensor:
        """xi [B, H, c] at discounts [B, H, c] on [0, 0.7]."""
        d = np.asarray(discount, dtype=np.float64)
        if (d < 0).any() or (d > MAX_DISCOUNT + 1e-12).any():
            raise DomainError(f"discounts must lie in [0, {MAX_DISCOUNT}]")
        B, c = delta.shape[0], delta.shape[1]
        fill = segment_fill(d)  # [B, H, c, 7]
        lift = T.tsum(T.reshape(delta, (B, 1, c, N_SEGMENTS)) * fill, axis=-1)
        return q_hat + sigma * lift

    # ---------------------------------------------------------- forward

    def forward(self, batch: Batch, part: str = "near", horizon: int | None = None, gamma: Tensor | None = None) -> Forward:
        """Run one decoder/head pair over the first ``horizon`` columns of ``batch``."""
        H = batch.dec.shape[1] if horizon is None else horizon
        enc_store, dec_store = ([], []) if self.keep_attention else (None, None)
        if gamma is None:
            gamma = self.encode(batch.enc, batch.enc_mask, enc_store)
        kappa = self.decode(gamma, batch.enc_mask, batch.dec[:, :H], part, dec_store)
        static = self.static_features(batch.brand, batch.group)
        q_hat, sigma, delta = self.head_params(gamma, batch.enc_mask, kappa, static, part)
        xi = self.response(q_hat, sigma, delta, batch.discount[:, :H])
        return Forward(gamma, kappa, HeadOutput(q_hat, sigma, delta, xi), enc_store or [], dec_store or [])

    def head_outputs(self, batch: Batch, horizon: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(q_hat [B,H,c], sigma [B,H,c], delta [B,H,c,7]) with near weeks from the near pair."""
        H = batch.dec.shape[1] if horizon is None else horizon
        n = min(H, self.config.near_horizon)
        gamma = self.encode(batch.enc, batch.enc_mask)
        near = self.forward(batch, "near", n, gamma=gamma).head
        qs, ss = [near.q_hat.data], [near.sigma.data]
        ds = [np.broadcast_to(near.delta.data[:, None], (len(batch), n) + near.delta.shape[1:])]
        if H > n:
            sub = batch.select(slice(None))
            sub.dec = batch.dec[:, n:H]
            sub.discount = batch.discount[:, n:H]
            far = self.forward(sub, "far", H - n, gamma=gamma).head
            qs.append(far.q_hat.data)
            ss.append(far.sigma.data)
            ds.append(np.broadcast_to(far.delta.data[:, None], (len(batch), H - n) + far.delta.shape[1:]))
        return np.concatenate(qs, 1), np.concatenate(ss, 1), np.concatenate(ds, 1)

    def predict_log(self, batch: Batch, horizon: int | None = None) -> np.ndarray:
        q, s, d = self.head_outputs(batch, horizon)
        H = q.shape[1]
        fill = segment_fill(batch.discount[:, :H])
        return q + s * (fill * d).sum(-1)

    def predict(self, batch: Batch, horizon: int | None = None) -> np.ndarray:
        """Demand-unit point forecasts [B, H, c]."""
        return np.expm1(self.predict_log(batch, horizon))

    # ------------------------------------------------------- checkpoint

    def save(self, path: str | Path) -> None:
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "schema_hash": self.schema.hash() if self.schema else None,
            "schema": self.schema.to_dict() if self.schema else None,
        }
        arrays = {f"param/{k}": v.data for k, v in self.params.items()}
        arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        write_npz(path, arrays)

    @classmethod
    def load(cls, path: str | Path, schema: CovariateSchema | None = None) -> "DemandForecaster":
        with np.load(path) as z:
            meta = json.loads(z["__meta__"].tobytes().decode())
            params = {k[6:]: Tensor(z[k], requires_grad=True, name=k[6:]) for k in z.files if k.startswith("param/")}
        if meta.get("version") != CHECKPOINT_VERSION:
            raise SchemaMismatch(f"checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}")
        stored = CovariateSchema.from_dict(meta["schema"]) if meta.get("schema") else None
        if schema is not None and meta.get("schema_hash") != schema.hash():
            raise SchemaMismatch(f"{path}: checkpoint schema hash {meta.get('schema_hash')} != {schema.hash()}")
        cfg = meta["config"]
        model = cls(ModelConfig(**cfg), schema or stored, params)
        missing = set(init_params(model.config)) ^ set(params)
        if missing:
            raise SchemaMismatch(f"{path}: parameter set differs from config: {sorted(missing)[:5]}")
        return model
