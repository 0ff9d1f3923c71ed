"""Triplet-loss metric learning on synthetic forest scenes."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .geometry import AugmentConfig, Pose, PointCloud, SceneSpec, augment, random_forest, synth_submap
from .hotformer import ConfigError, ModelConfig, Params, decays, embed, forward_prepared, init_params, prepare
from .retrieval import DescriptorDatabase, evaluate
from .tensor import Tensor

POSITIVE_DISTANCE = 15.0
NEGATIVE_DISTANCE = 60.0


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TupleSpec:
    anchor: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]


def mine_tuples(
    positions: np.ndarray, positive: float = POSITIVE_DISTANCE, negative: float = NEGATIVE_DISTANCE
) -> tuple[list[TupleSpec], int]:
    """Tuples for every anchor with at least one positive and one negative.

    Returns the tuples (ordered by anchor) and the number of skipped anchors.
    """
    p = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
    if len(p) < 2:
        raise ValueError("need at least two submaps to mine tuples")
    d = np.hypot(p[:, None, 0] - p[None, :, 0], p[:, None, 1] - p[None, :, 1])
    tuples, skipped = [], 0
    for i in range(len(p)):
        pos = np.flatnonzero(d[i] < positive)
        pos = pos[pos != i]
        neg = np.flatnonzero(d[i] > negative)
        if len(pos) and len(neg):
            tuples.append(TupleSpec(i, tuple(int(j) for j in pos), tuple(int(j) for j in neg)))
        else:
            skipped += 1
    return tuples, skipped


def triplet_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float = 0.3) -> Tensor:
    """``max(0, |a - p| - |a - n| + margin)``."""
    dp = T.sqrt(T.sum_((anchor - positive) * (anchor - positive)))
    dn = T.sqrt(T.sum_((anchor - negative) * (anchor - negative)))
    return T.relu(dp - dn + margin)


@dataclass
class OptimState:
    lr: float
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with L2 weight decay folded into the gradient of decaying parameters."""

    def __init__(self, params: Params, lr: float, weight_decay: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.state = OptimState(lr, weight_decay, tuple(betas), eps)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        s = self.state
        s.step += 1
        b1, b2 = s.betas
        c1 = 1.0 - b1**s.step
        c2 = 1.0 - b2**s.step
        for name, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if s.weight_decay and decays(name):
                g = g + s.weight_decay * p.data
            m = s.m[name] = b1 * s.m[name] + (1.0 - b1) * g
            v = s.v[name] = b2 * s.v[name] + (1.0 - b2) * g * g
            p.data -= s.lr * (m / c1) / (np.sqrt(v / c2) + s.eps)


# ---------------------------------------------------------------------------
# synthetic dataset


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 500
    lr: float = 1e-3
    weight_decay: float = 1e-4
    margin: float = 0.3
    lr_decay_every: int = 0
    lr_decay: float = 0.1
    locations: int = 60
    spacing: float = 70.0
    views: int = 4
    view_offset: float = 0.5
    view_yaw: float = 0.02
    landmarks_per_km2: float = 5000.0
    landmark_density: float = 15.0
    noise_sigma: float = 0.03
    batch: int = 8
    hard_negatives: int = 4
    mining: str = "batch"
    val_every: int = 100
    augment: AugmentConfig = AugmentConfig(translation=0.5, jitter_sigma=0.02)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train keys: {', '.join(unknown)}")
        d = dict(d)
        if "augment" in d:
            aug_known = {f.name for f in dataclasses.fields(AugmentConfig)}
            bad = sorted(set(d["augment"]) - aug_known)
            if bad:
                raise ConfigError(f"unknown train.augment keys: {', '.join(bad)}")
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SyntheticSet:
    scene: SceneSpec
    location_poses: list[Pose]
    train_clouds: list[PointCloud]  # views * locations, view-major within each location
    train_location: np.ndarray
    db_clouds: list[PointCloud]
    query_clouds: list[PointCloud]

    @property
    def train_positions(self) -> np.ndarray:
        return np.array([c.pose.translation[:2] for c in self.train_clouds])


def location_grid(n: int, spacing: float) -> np.ndarray:
    cols = math.ceil(math.sqrt(n))
    ij = np.array([(i % cols, i // cols) for i in range(n)], dtype=np.float64)
    return (ij - (cols - 1) / 2.0) * spacing


def build_synthetic_set(cfg: TrainConfig) -> SyntheticSet:
    """Forest scene, one database render per location, jittered training and query views."""
    grid = location_grid(cfg.locations, cfg.spacing)
    extent = float(np.abs(grid).max() + 40.0)
    n_trees = max(4, int(round(cfg.landmarks_per_km2 * (2 * extent) ** 2 / 1e6)))
    scene = random_forest(cfg.seed, extent, n_trees, noise_sigma=cfg.noise_sigma,
                          landmark_density=cfg.landmark_density, ring_points=(400, 200), ring_radii=(4.0, 12.0))
    rng = np.random.default_rng([cfg.seed, 1])

    def jittered(xy) -> Pose:
        off = rng.uniform(-cfg.view_offset, cfg.view_offset, 2)
        yaw = rng.uniform(-cfg.view_yaw, cfg.view_yaw)
        return Pose.from_xy_yaw(xy[0] + off[0], xy[1] + off[1], yaw)

    poses = [Pose.from_xy_yaw(x, y) for x, y in grid]
    db = [synth_submap(scene, p, "ground", f"db{i}") for i, p in enumerate(poses)]
    train, loc = [], []
    for i, xy in enumerate(grid):
        for v in range(cfg.views):
            train.append(synth_submap(scene, jittered(xy), "ground", f"train{i}_{v}"))
            loc.append(i)
    queries = [synth_submap(scene, jittered(xy), "ground", f"query{i}") for i, xy in enumerate(grid)]
    return SyntheticSet(scene, poses, train, np.array(loc), db, queries)


def validate(data: SyntheticSet, params: Params, model_cfg: ModelConfig) -> dict:
    db_desc = np.stack([embed(c, params, model_cfg) for c in data.db_clouds])
    q_desc = np.stack([embed(c, params, model_cfg) for c in data.query_clouds])
    db = DescriptorDatabase(np.arange(len(db_desc)), [c.pose.translation[:2] for c in data.db_clouds], db_desc)
    return evaluate(db, q_desc, [c.pose.translation[:2] for c in data.query_clouds])


@dataclass
class TrainResult:
    params: Params
    log: list[dict]
    final: dict


def train(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    data: SyntheticSet | None = None,
    params: Params | None = None,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` triplet steps; deterministic given ``cfg.seed``."""
    data = data or build_synthetic_set(cfg)
    params = params if params is not None else init_params(model_cfg, cfg.seed)
    tuples, _ = mine_tuples(data.train_positions)
    if not tuples:
        raise ValueError("no training tuples could be mined")
    opt = Adam(params, cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, 2])
    log: list[dict] = []

    def emit(rec: dict) -> None:
        log.append(rec)
        if on_record is not None:
            on_record(rec)

    def view(i: int):
        cloud = augment(data.train_clouds[i], int(rng.integers(2**31)), cfg.augment)
        return prepare(cloud, model_cfg)

    def tuple_loss(tup: TupleSpec) -> Tensor:
        a = view(tup.anchor)
        p = view(tup.positives[int(rng.integers(len(tup.positives)))])
        cand = rng.choice(len(tup.negatives), size=min(cfg.hard_negatives, len(tup.negatives)), replace=False)
        negs = [view(tup.negatives[int(j)]) for j in sorted(cand)]
        da = forward_prepared(a, params, model_cfg).descriptor
        dp = forward_prepared(p, params, model_cfg).descriptor
        if len(negs) > 1:
            # hardest candidate under the current weights
            with T.no_grad():
                dists = [np.linalg.norm(da.data - forward_prepared(n, params, model_cfg).descriptor.data) for n in negs]
            n_prep = negs[int(np.argmin(dists))]
        else:
            n_prep = negs[0]
        dn = forward_prepared(n_prep, params, model_cfg).descriptor
        return triplet_loss(da, dp, dn, cfg.margin)

    positions = data.train_positions

    def batch_loss(batch: list[TupleSpec]) -> list[Tensor]:
        # hardest negative among the other members of the batch
        members, descs = [], []
        for tup in batch:
            pos = tup.positives[int(rng.integers(len(tup.positives)))]
            for i in (tup.anchor, pos):
                members.append(i)
                descs.append(forward_prepared(view(i), params, model_cfg).descriptor)
        out = []
        for b, tup in enumerate(batch):
            da, dp = descs[2 * b], descs[2 * b + 1]
            far = [j for j, m in enumerate(members)
                   if np.hypot(*(positions[m] - positions[tup.anchor])) > NEGATIVE_DISTANCE]
            if far:
                j = min(far, key=lambda j: float(np.linalg.norm(da.data - descs[j].data)))
                dn = descs[j]
            else:
                dn = forward_prepared(view(tup.negatives[int(rng.integers(len(tup.negatives)))]), params, model_cfg).descriptor
            out.append(triplet_loss(da, dp, dn, cfg.margin))
        return out

    if cfg.mining not in ("candidates", "batch"):
        raise ConfigError(f"unknown mining mode {cfg.mining!r}")

    for step in range(1, cfg.steps + 1):
        if cfg.lr_decay_every and step > 1 and (step - 1) % cfg.lr_decay_every == 0:
            opt.state.lr *= cfg.lr_decay
        opt.zero_grad()
        picked = [tuples[int(rng.integers(len(tuples)))] for _ in range(cfg.batch)]
        losses = batch_loss(picked) if cfg.mining == "batch" else [tuple_loss(t) for t in picked]
        loss = losses[0]
        for extra in losses[1:]:
            loss = loss + extra
        if cfg.batch > 1:
            loss = loss * (1.0 / cfg.batch)
        if not np.isfinite(loss.data).all():
            raise DivergenceError(f"loss became {loss.item()} at step {step}")
        loss.backward()
        opt.step()
        emit({"step": step, "loss": loss.item(), "lr": opt.state.lr})
        if cfg.val_every and step % cfg.val_every == 0 and step != cfg.steps:
            rep = validate(data, params, model_cfg)
            emit({"step": step, "ar@1": rep["ar@1"], "mrr": rep["mrr"]})

    final = validate(data, params, model_cfg)
    emit({"step": cfg.steps, "ar@1": final["ar@1"], "mrr": final["mrr"]})
    return TrainResult(params, log, final)


def mean_loss(log: Sequence[dict], last: int = 50) -> float:
    losses = [r["loss"] for r in log if "loss" in r]
    return float(np.mean(losses[-last:])) if losses else float("nan")
