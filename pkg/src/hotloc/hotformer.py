"""Hierarchical octree transformer: stem, feature pyramid, relay tokens,
alternating relay-token / windowed attention, and descriptor pooling."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import pooling
from . import tensor as T
from .geometry import BoundingRegion, CoordMode, PointCloud
from .octree import OctreePyramid, build_pyramid, neighbor_table
from .serialization import WindowPartition, serialize
from .tensor import Tensor

Params = dict[str, Tensor]
POOLING_MODES = ("pyramid-attn", "gem", "pyramid-gem")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 7
    levels: int = 3
    blocks: int = 10
    channels: int = 256
    window: int = 64
    heads: int = 8
    stem_blocks: int = 2
    coord_mode: CoordMode = "cylindrical"
    pooled_tokens: tuple[int, ...] = (74, 36, 18)
    mixer_tokens: int = 32
    mixer_channels: int = 8
    ffn_ratio: int = 4
    fuser_ratio: int = 1
    relay_tokens: bool = True
    adape_stats: Literal["centroid", "points"] = "centroid"
    pooling: str = "pyramid-attn"
    radius: float = 30.0
    z_min: float = -2.0
    z_max: float = 14.0

    def __post_init__(self):
        object.__setattr__(self, "pooled_tokens", tuple(int(q) for q in self.pooled_tokens))
        problems = []
        if self.depth - self.levels < 1 or self.levels < 1:
            problems.append(f"need levels >= 1 and depth - levels >= 1 (depth={self.depth}, levels={self.levels})")
        if self.channels % self.heads:
            problems.append(f"channels {self.channels} not divisible by heads {self.heads}")
        if len(self.pooled_tokens) != self.levels:
            problems.append(f"pooled_tokens needs {self.levels} entries, got {len(self.pooled_tokens)}")
        if sum(self.pooled_tokens) < self.mixer_tokens:
            problems.append("sum(pooled_tokens) must be >= mixer_tokens")
        if self.window < 2:
            problems.append("window must be >= 2")
        if self.coord_mode not in ("cartesian", "cylindrical"):
            problems.append(f"unknown coord_mode {self.coord_mode!r}")
        if self.pooling not in POOLING_MODES:
            problems.append(f"unknown pooling {self.pooling!r}")
        if self.adape_stats not in ("centroid", "points"):
            problems.append(f"unknown adape_stats {self.adape_stats!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def descriptor_dim(self) -> int:
        return self.mixer_tokens * self.mixer_channels

    @property
    def region(self) -> BoundingRegion:
        return BoundingRegion.around_sensor(self.coord_mode, self.radius, self.z_min, self.z_max)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pooled_tokens"] = list(self.pooled_tokens)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model keys: {', '.join(unknown)}")
        return cls(**d)


def toy_config(**overrides) -> ModelConfig:
    base = dict(depth=5, levels=2, blocks=2, channels=32, window=8, heads=4, stem_blocks=2,
                pooled_tokens=(24, 12), mixer_tokens=32, mixer_channels=8)
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# parameters


def _block_shapes(prefix: str, c: int, ratio: int) -> dict[str, tuple[tuple[int, ...], str]]:
    return {
        prefix + "ln1.g": ((c,), "one"),
        prefix + "ln1.b": ((c,), "zero"),
        prefix + "wq": ((c, c), "normal"),
        prefix + "wk": ((c, c), "normal"),
        prefix + "wv": ((c, c), "normal"),
        prefix + "wo": ((c, c), "zero"),
        prefix + "ln2.g": ((c,), "one"),
        prefix + "ln2.b": ((c,), "zero"),
        prefix + "ffn.w1": ((c, ratio * c), "normal"),
        prefix + "ffn.b1": ((ratio * c,), "zero"),
        prefix + "ffn.w2": ((ratio * c, c), "zero"),
        prefix + "ffn.b2": ((c,), "zero"),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    """Name -> (shape, init kind) for every tensor the config needs, in file order."""
    c = cfg.channels
    s: dict[str, tuple[tuple[int, ...], str]] = {
        "stem.w": ((10, c), "normal"),
        "stem.b": ((c,), "zero"),
        "stem.conv": ((27, c), "normal"),
    }
    for i in range(cfg.stem_blocks):
        s.update(_block_shapes(f"stem.osa{i}.", c, cfg.ffn_ratio))
    for l in range(1, cfg.levels + 1):
        s[f"ds{l}.w"] = ((8, c, c), "normal")
        s[f"ds{l}.b"] = ((c,), "zero")
        s[f"ds{l}.ln.g"] = ((c,), "one")
        s[f"ds{l}.ln.b"] = ((c,), "zero")
    if cfg.relay_tokens:
        s["adape.w1"] = ((9, c), "normal")
        s["adape.b1"] = ((c,), "zero")
        s["adape.w2"] = ((c, c), "normal")
        s["adape.b2"] = ((c,), "zero")
    for m in range(cfg.blocks):
        if cfg.relay_tokens:
            s.update(_block_shapes(f"block{m}.rtsa.", c, cfg.ffn_ratio))
        for l in range(1, cfg.levels + 1):
            s[f"block{m}.hosa{l}.cpe"] = ((27, c), "normal")
            s.update(_block_shapes(f"block{m}.hosa{l}.", c, cfg.ffn_ratio))
    if cfg.pooling == "pyramid-attn":
        qt = sum(cfg.pooled_tokens)
        for l, q in enumerate(cfg.pooled_tokens, start=1):
            s[f"pool.q{l}"] = ((q, c), "normal")
        for i in range(pooling.FUSER_BLOCKS):
            s[f"fuser{i}.ln.g"] = ((c,), "one")
            s[f"fuser{i}.ln.b"] = ((c,), "zero")
            s[f"fuser{i}.w1"] = ((qt, qt * cfg.fuser_ratio), "normal")
            s[f"fuser{i}.b1"] = ((qt * cfg.fuser_ratio,), "zero")
            s[f"fuser{i}.w2"] = ((qt * cfg.fuser_ratio, qt), "zero")
            s[f"fuser{i}.b2"] = ((qt,), "zero")
        s["mixer.token.w"] = ((cfg.mixer_tokens, qt), "normal")
        s["mixer.token.b"] = ((cfg.mixer_tokens, 1), "zero")
        s["mixer.channel.w"] = ((c, cfg.mixer_channels), "normal")
        s["mixer.channel.b"] = ((cfg.mixer_channels,), "zero")
    elif cfg.pooling == "gem":
        s["gem.p"] = ((1,), "three")
        s["gem.w"] = ((c, cfg.descriptor_dim), "normal")
        s["gem.b"] = ((cfg.descriptor_dim,), "zero")
    else:
        for l in range(1, cfg.levels + 1):
            s[f"gem.p{l}"] = ((1,), "three")
        s["gem.w"] = ((cfg.levels * c, cfg.descriptor_dim), "normal")
        s["gem.b"] = ((cfg.descriptor_dim,), "zero")
    return s


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def init_params(cfg: ModelConfig, seed: int = 0, std: float = 0.02) -> Params:
    """Truncated-normal projections; zero biases and residual output projections."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, (shape, kind) in param_shapes(cfg).items():
        if kind == "normal":
            data = _trunc_normal(rng, shape, std)
        elif kind == "one":
            data = np.ones(shape)
        elif kind == "three":
            data = np.full(shape, 3.0)
        else:
            data = np.zeros(shape)
        params[name] = T.parameter(data)
    return params


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(shape) for shape, _ in param_shapes(cfg).values()))


def decays(name: str) -> bool:
    """Weight decay applies to matrices only, never to biases, LN affines or GeM exponents."""
    leaf = name.rsplit(".", 1)[-1]
    if name.endswith((".ln.g", ".ln.b", ".ln1.g", ".ln1.b", ".ln2.g", ".ln2.b")):
        return False
    if leaf.startswith("b") or leaf.startswith("p"):
        return False
    return True


# ---------------------------------------------------------------------------
# input preparation (no gradients)


@dataclass
class LevelInput:
    partition: WindowPartition
    neighbors: np.ndarray
    child_pos: np.ndarray  # low 3 Morton bits of each finer-level octant
    parent_idx: np.ndarray  # finer-level octant -> this level's index
    psi: np.ndarray  # [w, 9] window statistics


@dataclass
class PreparedCloud:
    pyramid: OctreePyramid
    leaf_features: np.ndarray
    leaf_neighbors: np.ndarray
    leaf_partition: WindowPartition
    levels: list[LevelInput] = field(default_factory=list)


def octant_input_features(level) -> np.ndarray:
    """``[N, 10]``: normalized log count, in-cell centroid offset, cell-scaled covariance."""
    side = float(1 << level.depth)
    count = level.count.astype(np.float64)
    max_count = count.max()
    occ = np.log1p(count) / np.log1p(max_count)
    offset = level.centroid * side - (level.coords + 0.5)
    cov = level.cov_upper * side * side
    return np.concatenate([occ[:, None], offset, cov], axis=1)


def _sample_cov_upper(x: np.ndarray) -> np.ndarray:
    if len(x) < 2:
        return np.zeros(6)
    d = x - x.mean(axis=0)
    c = d.T @ d / (len(x) - 1)
    return np.array([c[0, 0], c[1, 1], c[2, 2], c[0, 1], c[0, 2], c[1, 2]])


def window_stats(level, partition: WindowPartition, mode: str = "centroid") -> np.ndarray:
    """``[w, 9]`` of (mean, covariance upper triangle) per window.

    ``centroid`` treats each valid octant centroid as one sample (``n - 1``
    denominator); ``points`` pools the octants' point statistics, which equals
    the statistics of the raw points falling in the window.
    """
    out = np.zeros((partition.w, 9))
    k = partition.k
    for wi in range(partition.w):
        sl = slice(wi * k, min((wi + 1) * k, partition.n))
        if mode == "centroid":
            cen = level.centroid[sl]
            out[wi, :3] = cen.mean(axis=0)
            out[wi, 3:] = _sample_cov_upper(cen)
        else:
            n_i = level.count[sl].astype(np.float64)
            mu_i = level.centroid[sl]
            n = n_i.sum()
            mu = (mu_i * n_i[:, None]).sum(axis=0) / n
            d = mu_i - mu
            cu = level.cov_upper[sl]
            between = np.stack([d[:, 0] ** 2, d[:, 1] ** 2, d[:, 2] ** 2, d[:, 0] * d[:, 1], d[:, 0] * d[:, 2],
                                d[:, 1] * d[:, 2]], axis=1)
            scatter = (cu * (n_i - 1.0)[:, None] + between * n_i[:, None]).sum(axis=0)
            out[wi, :3] = mu
            out[wi, 3:] = scatter / (n - 1.0) if n > 1 else 0.0
    return out


def prepare_pyramid(pyramid: OctreePyramid, cfg: ModelConfig) -> PreparedCloud:
    leaf = pyramid.levels[0]
    prep = PreparedCloud(
        pyramid=pyramid,
        leaf_features=octant_input_features(leaf),
        leaf_neighbors=neighbor_table(leaf, cfg.coord_mode),
        leaf_partition=serialize(leaf, cfg.window),
    )
    for l in range(1, cfg.levels + 1):
        lvl = pyramid.levels[l]
        part = serialize(lvl, cfg.window)
        prep.levels.append(
            LevelInput(
                partition=part,
                neighbors=neighbor_table(lvl, cfg.coord_mode),
                child_pos=(pyramid.levels[l - 1].keys & 7).astype(np.int64),
                parent_idx=pyramid.parent_of[l - 1],
                psi=window_stats(lvl, part, cfg.adape_stats),
            )
        )
    return prep


def prepare(pc: PointCloud, cfg: ModelConfig) -> PreparedCloud:
    return prepare_pyramid(build_pyramid(pc, cfg.region, cfg.depth, cfg.levels), cfg)


# ---------------------------------------------------------------------------
# layers


def dwconv(x: Tensor, neighbors: np.ndarray, weight: Tensor) -> Tensor:
    """Depth-wise octree convolution: ``sum_o weight[o] * x[neighbor(o)]``, missing neighbors skipped."""
    gathered = T.gather_rows(x, neighbors)  # [N, 27, C]
    return T.sum_(gathered * weight, axis=1)


def ffn(x: Tensor, params: Params, p: str) -> Tensor:
    h = T.gelu(T.linear(x, params[p + "ffn.w1"], params[p + "ffn.b1"]))
    return T.linear(h, params[p + "ffn.w2"], params[p + "ffn.b2"])


def transformer_block(x: Tensor, mask: np.ndarray | None, params: Params, p: str, heads: int) -> Tensor:
    """Pre-LN block: ``x += MHSA(LN(x))``, then ``x += FFN(LN(x))``."""
    h = T.layernorm(x, params[p + "ln1.g"], params[p + "ln1.b"])
    x = x + T.mhsa(h, mask, heads, params[p + "wq"], params[p + "wk"], params[p + "wv"], params[p + "wo"])
    h = T.layernorm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    return x + ffn(h, params, p)


def windowed(x: Tensor, partition: WindowPartition) -> Tensor:
    return T.gather_rows(x, partition.gather_index)


def from_windows(xw: Tensor, partition: WindowPartition) -> Tensor:
    flat = T.reshape(xw, (partition.w * partition.k, xw.shape[-1]))
    return flat[: partition.n]


def osa_block(x: Tensor, partition: WindowPartition, params: Params, p: str, heads: int) -> Tensor:
    """Windowed self-attention over ``[N, C]`` features without relay tokens."""
    xw = transformer_block(windowed(x, partition), partition.valid_mask, params, p, heads)
    return from_windows(xw, partition)


def downsample(x: Tensor, lvl: LevelInput, n_parents: int, params: Params, l: int) -> Tensor:
    """``LN(sum_children W[pos] f_child + b)`` onto the next-coarser level."""
    p = f"ds{l}."
    acc = None
    for pos in range(8):
        rows = np.flatnonzero(lvl.child_pos == pos)
        if len(rows) == 0:
            continue
        y = T.matmul(x[rows], params[p + "w"][pos])
        y = T.segment_sum(y, lvl.parent_idx[rows], n_parents)
        acc = y if acc is None else acc + y
    acc = acc + params[p + "b"]
    return T.layernorm(acc, params[p + "ln.g"], params[p + "ln.b"])


def adape(psi, params: Params) -> Tensor:
    h = T.gelu(T.linear(T.as_tensor(psi), params["adape.w1"], params["adape.b1"]))
    return T.linear(h, params["adape.w2"], params["adape.b2"])


def init_relay_tokens(x: Tensor, partition: WindowPartition, encoding: Tensor | None) -> Tensor:
    """Masked mean of each window's valid tokens plus its positional encoding."""
    xw = windowed(x, partition)
    mean = T.sum_(xw, axis=1) * (1.0 / partition.valid_counts.astype(np.float64))[:, None]
    return mean if encoding is None else mean + encoding


def rtsa_block(relay: list[Tensor], params: Params, p: str, heads: int) -> list[Tensor]:
    """Full attention across the relay tokens of every level, split back per level."""
    sizes = [r.shape[0] for r in relay]
    rt = T.reshape(T.concat(relay, axis=0), (1, sum(sizes), relay[0].shape[-1]))
    rt = T.reshape(transformer_block(rt, None, params, p, heads), (sum(sizes), -1))
    out, start = [], 0
    for s in sizes:
        out.append(rt[start : start + s])
        start += s
    return out


def cpe(x: Tensor, neighbors: np.ndarray, weight: Tensor) -> Tensor:
    return x + dwconv(x, neighbors, weight)


def hosa_block(
    x: Tensor, relay: Tensor | None, partition: WindowPartition, params: Params, p: str, heads: int
) -> tuple[Tensor, Tensor | None]:
    """Windowed attention with each window's relay token prepended as slot 0."""
    if relay is None:
        return osa_block(x, partition, params, p, heads), None
    xw = windowed(x, partition)
    tokens = T.concat([T.reshape(relay, (partition.w, 1, -1)), xw], axis=1)
    mask = np.concatenate([np.ones((partition.w, 1), dtype=bool), partition.valid_mask], axis=1)
    tokens = transformer_block(tokens, mask, params, p, heads)
    new_relay = T.reshape(tokens[:, 0:1, :], (partition.w, -1))
    return from_windows(tokens[:, 1:, :], partition), new_relay


# ---------------------------------------------------------------------------
# forward


@dataclass
class ForwardResult:
    features: list[Tensor]  # refined F_1..F_L in key order
    partitions: list[WindowPartition]
    descriptor: Tensor
    relay_counts: list[int]
    pool_attention: list[np.ndarray] = field(default_factory=list)


def embed_stem(prep: PreparedCloud, params: Params, cfg: ModelConfig) -> Tensor:
    with T.mac_scope("stem"):
        x = T.linear(T.as_tensor(prep.leaf_features), params["stem.w"], params["stem.b"])
        x = x + dwconv(x, prep.leaf_neighbors, params["stem.conv"])
        for i in range(cfg.stem_blocks):
            x = osa_block(x, prep.leaf_partition, params, f"stem.osa{i}.", cfg.heads)
    return x


def build_feature_pyramid(f0: Tensor, prep: PreparedCloud, params: Params, cfg: ModelConfig) -> list[Tensor]:
    feats, prev = [], f0
    with T.mac_scope("pyramid"):
        for l, lvl in enumerate(prep.levels, start=1):
            prev = downsample(prev, lvl, lvl.partition.n, params, l)
            feats.append(prev)
    return feats


def forward_prepared(
    prep: PreparedCloud, params: Params, cfg: ModelConfig, record_pooling: bool = False
) -> ForwardResult:
    f0 = embed_stem(prep, params, cfg)
    feats = build_feature_pyramid(f0, prep, params, cfg)
    parts = [lvl.partition for lvl in prep.levels]

    relay: list[Tensor | None] = [None] * cfg.levels
    if cfg.relay_tokens:
        with T.mac_scope("relay_init"):
            relay = [
                init_relay_tokens(f, lvl.partition, adape(lvl.psi, params)) for f, lvl in zip(feats, prep.levels)
            ]
    relay_counts = [part.w for part in parts] if cfg.relay_tokens else []
    if cfg.relay_tokens:
        assert sum(r.shape[0] for r in relay) == sum(p.w for p in parts)

    for m in range(cfg.blocks):
        with T.mac_scope(f"block{m}"):
            if cfg.relay_tokens:
                with T.mac_scope("rtsa"):
                    relay = rtsa_block(relay, params, f"block{m}.rtsa.", cfg.heads)
            for l, lvl in enumerate(prep.levels, start=1):
                with T.mac_scope(f"hosa{l}"):
                    p = f"block{m}.hosa{l}."
                    x = cpe(feats[l - 1], lvl.neighbors, params[p + "cpe"])
                    feats[l - 1], relay[l - 1] = hosa_block(x, relay[l - 1], lvl.partition, params, p, cfg.heads)

    record: list | None = [] if record_pooling else None
    with T.mac_scope("pooling"):
        if cfg.pooling == "pyramid-attn":
            desc = pooling.pyramid_descriptor(feats, params, record)
        else:
            desc = pooling.gem_descriptor(feats, params, per_level=cfg.pooling == "pyramid-gem")
    return ForwardResult(feats, parts, desc, relay_counts, record or [])


def forward(pc: PointCloud, params: Params, cfg: ModelConfig) -> ForwardResult:
    return forward_prepared(prepare(pc, cfg), params, cfg)


def embed(pc: PointCloud, params: Params, cfg: ModelConfig) -> np.ndarray:
    with T.no_grad():
        return forward(pc, params, cfg).descriptor.data.copy()


def attention_macs_closed_form(partitions: list[WindowPartition], cfg: ModelConfig) -> int:
    """Score + value MACs of one block: ``sum_l w_l 2 (k+1)^2 C + 2 w_total^2 C``."""
    c, k = cfg.channels, cfg.window
    w = [p.w for p in partitions]
    if not cfg.relay_tokens:
        return sum(wl * 2 * k * k * c for wl in w)
    return sum(wl * 2 * (k + 1) ** 2 * c for wl in w) + 2 * sum(w) ** 2 * c
