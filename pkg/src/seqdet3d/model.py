"""Pillar-style point encoder and a causal transformer decoder over box tokens."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


DEFAULT_BINS = (2160, 2160, 160, 600, 200, 200, 125, 600, 600)


def value_basis(u: np.ndarray, bins: int, k: int) -> np.ndarray:
    """Fixed sin/cos features of normalized values ``u`` in [0, 1).

    Frequencies are log-spaced from half a cycle over the whole range up to
    ``bins / 4`` cycles, so neighbouring bins get similar features.
    """
    u = np.asarray(u, dtype=np.float64)
    freqs = np.geomspace(0.5, max(bins / 4.0, 0.5), k // 2)
    ang = 2.0 * np.pi * u[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def bin_basis(bins: int, k: int) -> np.ndarray:
    return value_basis((np.arange(bins) + 0.5) / bins, bins, k)


@dataclass(frozen=True)
class EncoderConfig:
    extent: float = 48.0  # BEV square side, centered on the ego
    cell: float = 1.5
    pillar_dim: int = 64
    out_dim: int = 128
    mlp_depth: int = 2
    mix_layers: int = 2
    # > 0 adds a fixed-frequency basis to the BEV positional tables, laid out
    # over the same range and bin count as the x/y tokens
    pos_features: int = 0
    pos_lo: float = -54.0
    pos_span: float = 108.0
    pos_bins: int = 2160

    def __post_init__(self):
        n = self.extent / self.cell
        if abs(n - round(n)) > 1e-9 or n < 1:
            raise ValueError(f"extent {self.extent} is not a whole number of {self.cell} m cells")
        if min(self.pillar_dim, self.out_dim, self.mlp_depth) < 1 or self.mix_layers < 0:
            raise ValueError("encoder dimensions must be positive")

    @property
    def grid(self) -> int:
        return int(round(self.extent / self.cell))


@dataclass(frozen=True)
class DecoderConfig:
    layers: int = 2
    heads: int = 4
    dim: int = 128
    ff_dim: int = 512
    vocab_size: int = 6818
    t_max: int = 62
    dropout: float = 0.1
    # > 0 parameterizes numeric-token embeddings and output weights partly
    # through a fixed basis over bin values (see value_basis)
    value_features: int = 0
    value_bins: tuple = DEFAULT_BINS
    num_categories: int = 10

    def __post_init__(self):
        object.__setattr__(self, "value_bins", tuple(int(b) for b in self.value_bins))
        if self.value_features and 3 + self.num_categories + sum(self.value_bins) != self.vocab_size:
            raise ValueError("value_bins and num_categories do not add up to vocab_size")
        if self.value_features % 2:
            raise ValueError("value_features must be even")
        if self.dim % self.heads:
            raise ValueError(f"model dim {self.dim} not divisible by {self.heads} heads")
        if self.t_max < 2:
            raise ValueError("t_max must leave room for START and END")


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    dtype: str = "float64"

    def __post_init__(self):
        if self.encoder.out_dim != self.decoder.dim:
            raise ValueError(
                f"encoder output dim {self.encoder.out_dim} != decoder dim {self.decoder.dim}"
            )
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype}")
        if self.encoder.pos_features % 2:
            raise ValueError("pos_features must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), DecoderConfig(**d["decoder"]), d.get("dtype", "float64"))


class ModelParams(dict):
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: ModelConfig, tensors=None):
        super().__init__(tensors or {})
        self.config = config

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.value.copy(), True, k) for k, v in self.items()})

    def count(self) -> int:
        return sum(v.value.size for v in self.values())

    def encoder_names(self) -> list[str]:
        return [k for k in self if k.startswith("enc.")]

    def decoder_names(self) -> list[str]:
        return [k for k in self if k.startswith("dec.")]

    def values_equal(self, other: "ModelParams") -> bool:
        return self.keys() == other.keys() and all(
            np.array_equal(self[k].value, other[k].value) for k in self
        )


POINT_FEATURES = 7


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    e, d = cfg.encoder, cfg.decoder
    s: dict[str, tuple[int, ...]] = {}
    fan_in = POINT_FEATURES
    for i in range(e.mlp_depth):
        s[f"enc.mlp.{i}.w"] = (fan_in, e.pillar_dim)
        s[f"enc.mlp.{i}.b"] = (e.pillar_dim,)
        fan_in = e.pillar_dim
    s["enc.empty"] = (e.pillar_dim,)
    for i in range(e.mix_layers):
        s[f"enc.mix.{i}.w"] = (9 * e.pillar_dim, e.pillar_dim)
        s[f"enc.mix.{i}.b"] = (e.pillar_dim,)
    s["enc.proj.w"] = (e.pillar_dim, e.out_dim)
    s["enc.proj.b"] = (e.out_dim,)
    s["enc.ln.g"] = (e.out_dim,)
    s["enc.ln.b"] = (e.out_dim,)
    s["enc.pos_x"] = (e.grid, e.out_dim)
    s["enc.pos_y"] = (e.grid, e.out_dim)
    if e.pos_features:
        s["enc.pos_x_basis"] = (e.pos_features, e.out_dim)
        s["enc.pos_y_basis"] = (e.pos_features, e.out_dim)
    s["dec.tok_emb"] = (d.vocab_size, d.dim)
    for i in range(len(d.value_bins) if d.value_features else 0):
        s[f"dec.emb_basis.{i}"] = (d.value_features, d.dim)
        s[f"dec.out_basis.{i}"] = (d.dim, d.value_features)
    s["dec.pos_emb"] = (d.t_max, d.dim)
    for l in range(d.layers):
        p = f"dec.{l}."
        for ln in ("ln1", "ln2", "ln3"):
            s[p + ln + ".g"] = (d.dim,)
            s[p + ln + ".b"] = (d.dim,)
        for att in ("self", "cross"):
            for m in ("wq", "wk", "wv", "wo"):
                s[f"{p}{att}.{m}"] = (d.dim, d.dim)
        s[p + "ff.w1"] = (d.dim, d.ff_dim)
        s[p + "ff.b1"] = (d.ff_dim,)
        s[p + "ff.w2"] = (d.ff_dim, d.dim)
        s[p + "ff.b2"] = (d.dim,)
    s["dec.ln_f.g"] = (d.dim,)
    s["dec.ln_f.b"] = (d.dim,)
    s["dec.out.w"] = (d.dim, d.vocab_size)
    s["dec.out.b"] = (d.vocab_size,)
    return s


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Gaussian (sigma 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    out = ModelParams(cfg)
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".g"):
            v = np.ones(shape)
        elif name.endswith(".b") or name.endswith((".b1", ".b2")):
            v = np.zeros(shape)
        else:
            v = 0.02 * rng.standard_normal(shape)
        out[name] = Tensor(v.astype(dtype), requires_grad=True, name=name)
    return out


def no_weight_decay(name: str) -> bool:
    return name.endswith((".b", ".g", ".b1", ".b2")) or name in (
        "enc.empty", "enc.pos_x", "enc.pos_y", "dec.pos_emb", "dec.tok_emb",
    )


# ----------------------------------------------------------------------------
# encoder


@dataclass
class BEVFeatures:
    grid: Tensor  # (B, H*W, D), positional embedding included
    height: int
    width: int

    @property
    def batch(self) -> int:
        return self.grid.shape[0]

    def row(self, i: int) -> "BEVFeatures":
        return BEVFeatures(Tensor(self.grid.value[i : i + 1]), self.height, self.width)

    def repeat(self, n: int) -> "BEVFeatures":
        return BEVFeatures(Tensor(np.repeat(self.grid.value, n, axis=0)), self.height, self.width)


def _as_batch(points) -> list[np.ndarray]:
    if isinstance(points, np.ndarray) and points.ndim == 2:
        return [points]
    return [np.asarray(p, dtype=float).reshape(-1, 4) for p in points]


def pillarize(points_batch: list[np.ndarray], cfg: EncoderConfig):
    """Scatter points to BEV cells.

    Returns per-point features (N, 7), per-point pillar ids, the number of
    pillars and a (B, H, W) map holding 1 + pillar id, or 0 for empty cells.
    """
    g, half = cfg.grid, 0.5 * cfg.extent
    feats, keys = [], []
    for b, pts in enumerate(points_batch):
        pts = np.asarray(pts, dtype=float).reshape(-1, 4)
        inside = (pts[:, 0] >= -half) & (pts[:, 0] < half) & (pts[:, 1] >= -half) & (pts[:, 1] < half)
        pts = pts[inside]
        ix = np.clip(np.floor((pts[:, 0] + half) / cfg.cell).astype(np.int64), 0, g - 1)
        iy = np.clip(np.floor((pts[:, 1] + half) / cfg.cell).astype(np.int64), 0, g - 1)
        cx = -half + (ix + 0.5) * cfg.cell
        cy = -half + (iy + 0.5) * cfg.cell
        feats.append(np.stack([pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3], cx, cy], axis=1))
        keys.append(b * g * g + ix * g + iy)
    raw = np.concatenate(feats, axis=0) if feats else np.zeros((0, 6))
    key = np.concatenate(keys) if keys else np.zeros(0, dtype=np.int64)
    uniq, pid = np.unique(key, return_inverse=True)
    npil = len(uniq)
    cnt = np.bincount(pid, minlength=npil).astype(float)
    means = [np.bincount(pid, weights=raw[:, j], minlength=npil) / np.maximum(cnt, 1) for j in range(3)]
    pf = np.stack(
        [
            raw[:, 0] - raw[:, 4],
            raw[:, 1] - raw[:, 5],
            raw[:, 2],
            raw[:, 3],
            raw[:, 0] - means[0][pid],
            raw[:, 1] - means[1][pid],
            raw[:, 2] - means[2][pid],
        ],
        axis=1,
    )
    grid_map = np.zeros(len(points_batch) * g * g, dtype=np.int64)
    grid_map[uniq] = np.arange(1, npil + 1)
    return pf, pid, npil, grid_map.reshape(len(points_batch), g, g)


def _conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    bsz, h, wd, c = x.shape
    xp = ad.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [ad.slice_(xp, (slice(None), slice(i, i + h), slice(j, j + wd))) for i in range(3) for j in range(3)]
    return ad.linear(ad.concat(cols, axis=3), w, b)


def encode_content(points, params: ModelParams) -> Tensor:
    """BEV feature grid before positional embedding, shape (B, H, W, D)."""
    cfg = params.config.encoder
    dtype = np.dtype(params.config.dtype)
    batch = _as_batch(points)
    pf, pid, npil, grid_map = pillarize(batch, cfg)
    h = Tensor(pf.astype(dtype))
    for i in range(cfg.mlp_depth):
        h = ad.relu(ad.linear(h, params[f"enc.mlp.{i}.w"], params[f"enc.mlp.{i}.b"]))
    if npil:
        pooled = ad.segment_max(h, pid, npil)
        table = ad.concat([ad.reshape(params["enc.empty"], (1, cfg.pillar_dim)), pooled], axis=0)
    else:
        table = ad.reshape(params["enc.empty"], (1, cfg.pillar_dim))
    x = ad.embedding_lookup(table, grid_map)  # (B, G, G, P)
    for i in range(cfg.mix_layers):
        x = ad.add(x, ad.relu(_conv3x3(x, params[f"enc.mix.{i}.w"], params[f"enc.mix.{i}.b"])))
    x = ad.linear(x, params["enc.proj.w"], params["enc.proj.b"])
    return ad.layer_norm(x, params["enc.ln.g"], params["enc.ln.b"])


def bev_positional_embedding(params: ModelParams) -> Tensor:
    """(H, W, D) grid with emb[i, j] = emb_x[i] + emb_y[j]."""
    px, py = params["enc.pos_x"], params["enc.pos_y"]
    e = params.config.encoder
    if e.pos_features:
        centers = -0.5 * e.extent + (np.arange(e.grid) + 0.5) * e.cell
        phi = _const(value_basis((centers - e.pos_lo) / e.pos_span, e.pos_bins, e.pos_features), params)
        px = ad.add(px, ad.matmul(phi, params["enc.pos_x_basis"]))
        py = ad.add(py, ad.matmul(phi, params["enc.pos_y_basis"]))
    g, d = px.shape
    return ad.add(ad.reshape(px, (g, 1, d)), ad.reshape(py, (1, g, d)))


def encode_points(points, params: ModelParams) -> BEVFeatures:
    content = encode_content(points, params)
    bsz, g, _, d = content.shape
    grid = ad.add(content, bev_positional_embedding(params))
    return BEVFeatures(ad.reshape(grid, (bsz, g * g, d)), g, g)


# ----------------------------------------------------------------------------
# decoder


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return ad.transpose(ad.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None) -> Tensor:
    dh = q.shape[-1]
    s = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if mask is not None:
        s = ad.masked_fill(s, mask, -np.inf)
    return ad.matmul(ad.softmax(s, axis=-1), v)


def memory_kv(features: BEVFeatures, params: ModelParams, layer: int) -> tuple[Tensor, Tensor]:
    heads = params.config.decoder.heads
    p = f"dec.{layer}.cross."
    k = _split_heads(ad.matmul(features.grid, params[p + "wk"]), heads)
    v = _split_heads(ad.matmul(features.grid, params[p + "wv"]), heads)
    return k, v


def _block(x, params, l, heads, self_kv_fn, mem_k, mem_v, mask, rate, rng):
    p = f"dec.{l}."
    h = ad.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
    q = _split_heads(ad.matmul(h, params[p + "self.wq"]), heads)
    k = _split_heads(ad.matmul(h, params[p + "self.wk"]), heads)
    v = _split_heads(ad.matmul(h, params[p + "self.wv"]), heads)
    k, v = self_kv_fn(k, v)
    a = ad.matmul(_merge_heads(_attend(q, k, v, mask)), params[p + "self.wo"])
    x = ad.add(x, ad.dropout(a, rate, rng))

    h = ad.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    q = _split_heads(ad.matmul(h, params[p + "cross.wq"]), heads)
    a = ad.matmul(_merge_heads(_attend(q, mem_k, mem_v, None)), params[p + "cross.wo"])
    x = ad.add(x, ad.dropout(a, rate, rng))

    h = ad.layer_norm(x, params[p + "ln3.g"], params[p + "ln3.b"])
    h = ad.gelu(ad.linear(h, params[p + "ff.w1"], params[p + "ff.b1"]))
    h = ad.linear(h, params[p + "ff.w2"], params[p + "ff.b2"])
    return ad.add(x, ad.dropout(h, rate, rng))


def _const(a: np.ndarray, params: ModelParams) -> Tensor:
    return Tensor(np.asarray(a, dtype=params.config.dtype))


def token_table(params: ModelParams) -> Tensor:
    """Token embedding table, including the value-basis part for numeric tokens."""
    cfg = params.config.decoder
    table = params["dec.tok_emb"]
    if not cfg.value_features:
        return table
    parts = [_const(np.zeros((3 + cfg.num_categories, cfg.dim)), params)]
    for i, bins in enumerate(cfg.value_bins):
        parts.append(ad.matmul(_const(bin_basis(bins, cfg.value_features), params), params[f"dec.emb_basis.{i}"]))
    return ad.add(table, ad.concat(parts, axis=0))


def output_weight(params: ModelParams) -> Tensor:
    """(D, V) output projection, including the value-basis part for numeric tokens."""
    cfg = params.config.decoder
    w = params["dec.out.w"]
    if not cfg.value_features:
        return w
    parts = [_const(np.zeros((cfg.dim, 3 + cfg.num_categories)), params)]
    for i, bins in enumerate(cfg.value_bins):
        parts.append(ad.matmul(params[f"dec.out_basis.{i}"], _const(bin_basis(bins, cfg.value_features).T, params)))
    return ad.add(w, ad.concat(parts, axis=1))


def _head(x: Tensor, params: ModelParams, weight: Tensor | None = None) -> Tensor:
    x = ad.layer_norm(x, params["dec.ln_f.g"], params["dec.ln_f.b"])
    return ad.linear(x, output_weight(params) if weight is None else weight, params["dec.out.b"])


class SequenceTooLongError(ValueError):
    pass


def decoder_forward(
    features: BEVFeatures,
    tokens,
    params: ModelParams,
    rng: np.random.Generator | None = None,
    hidden: bool = False,
) -> Tensor:
    """Logits (B, T, V) for every prefix position; position t sees tokens <= t.

    ``rng`` enables dropout (training); pass None for deterministic evaluation.
    """
    cfg = params.config.decoder
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    bsz, t = tokens.shape
    if t > cfg.t_max:
        raise SequenceTooLongError(f"prefix length {t} exceeds T_max={cfg.t_max}")
    if features.batch != bsz:
        raise ValueError(f"{features.batch} feature grids for {bsz} sequences")
    rate = cfg.dropout if rng is not None else 0.0
    x = ad.add(ad.embedding_lookup(token_table(params), tokens), ad.slice_(params["dec.pos_emb"], slice(0, t)))
    x = ad.dropout(x, rate, rng)
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    for l in range(cfg.layers):
        mk, mv = memory_kv(features, params, l)
        x = _block(x, params, l, cfg.heads, lambda k, v: (k, v), mk, mv, causal, rate, rng)
    return x if hidden else _head(x, params)


@dataclass
class DecoderCache:
    mem_k: list[np.ndarray]
    mem_v: list[np.ndarray]
    self_k: list[np.ndarray]
    self_v: list[np.ndarray]
    length: int = 0
    # effective token table and output weight, built once per decode
    emb: np.ndarray | None = None
    out_w: np.ndarray | None = None

    def select(self, rows) -> "DecoderCache":
        rows = np.asarray(rows)
        return DecoderCache(
            [m[rows] for m in self.mem_k],
            [m[rows] for m in self.mem_v],
            [s[rows] for s in self.self_k],
            [s[rows] for s in self.self_v],
            self.length,
            self.emb,
            self.out_w,
        )


def init_cache(features: BEVFeatures, params: ModelParams) -> DecoderCache:
    cfg = params.config.decoder
    mk, mv = [], []
    for l in range(cfg.layers):
        k, v = memory_kv(features, params, l)
        mk.append(k.value)
        mv.append(v.value)
    bsz, dh = features.batch, cfg.dim // cfg.heads
    dtype = features.grid.value.dtype
    empty = np.zeros((bsz, cfg.heads, 0, dh), dtype=dtype)
    return DecoderCache(
        mk, mv, [empty] * cfg.layers, [empty] * cfg.layers, 0, token_table(params).value, output_weight(params).value
    )


def decoder_step(
    features: BEVFeatures, cache: DecoderCache | None, new_token, params: ModelParams
) -> tuple[np.ndarray, DecoderCache]:
    """Feed one token per row; return next-position logits (B, V) and the grown cache."""
    cfg = params.config.decoder
    if cache is None:
        cache = init_cache(features, params)
    if cache.length >= cfg.t_max:
        raise SequenceTooLongError(f"cache already holds {cache.length} tokens (T_max={cfg.t_max})")
    tok = np.asarray(new_token, dtype=np.int64).reshape(-1, 1)
    pos = cache.length
    emb = Tensor(cache.emb) if cache.emb is not None else token_table(params)
    x = ad.add(ad.embedding_lookup(emb, tok), ad.slice_(params["dec.pos_emb"], slice(pos, pos + 1)))
    new_k, new_v = [], []
    for l in range(cfg.layers):

        def grow(k, v, l=l):
            kk = np.concatenate([cache.self_k[l], k.value], axis=2)
            vv = np.concatenate([cache.self_v[l], v.value], axis=2)
            new_k.append(kk)
            new_v.append(vv)
            return Tensor(kk), Tensor(vv)

        x = _block(x, params, l, cfg.heads, grow, Tensor(cache.mem_k[l]), Tensor(cache.mem_v[l]), None, 0.0, None)
    out_w = Tensor(cache.out_w) if cache.out_w is not None else None
    logits = _head(x, params, out_w).value[:, 0, :]
    return logits, DecoderCache(cache.mem_k, cache.mem_v, new_k, new_v, pos + 1, cache.emb, cache.out_w)


def prefill(features: BEVFeatures, tokens, params: ModelParams) -> tuple[np.ndarray, DecoderCache]:
    """Step through a (B, T) prefix; return logits after the last token and the cache."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    cache = init_cache(features, params)
    logits = None
    for t in range(tokens.shape[1]):
        logits, cache = decoder_step(features, cache, tokens[:, t], params)
    return logits, cache
