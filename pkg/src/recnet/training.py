"""Pair sampling, the optimization loop, checkpoints and validation."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from recnet.engine import Adam, Tensor, no_grad
from recnet.errors import ConfigError
from recnet.losses import LOG_HEADER, LossConfig, LossReport, similarity_from_distance, total_loss
from recnet.model import RecNet, get_profile, load_weights, save_weights
from recnet.pointcloud_io import PointCloud, Pose, read_cloud, read_kitti_poses, read_kitti_times
from recnet.projection import ProjectionConfig, project
from recnet.synthetic import SceneSpec, observe, scene_points, trajectory_poses

log = logging.getLogger(__name__)

# Odometry split conventionally used on KITTI: train / validation / evaluation sequences.
KITTI_SPLIT = {
    "train": ["03", "04", "05", "06", "07", "08", "09", "10"],
    "val": ["02"],
    "eval": ["00"],
}


@dataclass(frozen=True)
class ScanEntry:
    source: str | Callable[[], PointCloud]
    pose: Pose
    timestamp: float


class ScanSequence:
    """Ordered scans with their poses and timestamps."""

    def __init__(self, entries: Sequence[ScanEntry], name: str = ""):
        self.entries = list(entries)
        self.name = name
        ts = [e.timestamp for e in self.entries]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ConfigError(f"sequence {name!r}: timestamps must be nondecreasing")

    def __len__(self) -> int:
        return len(self.entries)

    def load(self, i: int) -> PointCloud:
        src = self.entries[i].source
        return src() if callable(src) else read_cloud(src)

    @property
    def poses(self) -> list[Pose]:
        return [e.pose for e in self.entries]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([e.timestamp for e in self.entries], dtype=np.float64)

    def translations(self) -> np.ndarray:
        return np.array([e.pose.translation for e in self.entries]).reshape(-1, 3)

    @classmethod
    def from_kitti(cls, velodyne_dir, poses_path, times_path=None, rate_hz: float = 10.0) -> ScanSequence:
        scans = sorted(Path(velodyne_dir).glob("*.bin"))
        poses = read_kitti_poses(poses_path)
        if len(poses) != len(scans):
            raise ConfigError(f"{len(scans)} scans but {len(poses)} poses")
        times = read_kitti_times(times_path) if times_path else [i / rate_hz for i in range(len(scans))]
        if len(times) != len(scans):
            raise ConfigError(f"{len(scans)} scans but {len(times)} timestamps")
        return cls([ScanEntry(str(s), p, t) for s, p, t in zip(scans, poses, times)], name=str(velodyne_dir))


def make_synthetic_sequence(spec: SceneSpec = SceneSpec(), seed: int = 0, projection: ProjectionConfig | None = None) -> ScanSequence:
    """Scans of a random parametric scene along the trajectory in ``spec``."""
    projection = projection or ProjectionConfig.os1_32()
    poses = trajectory_poses(spec)
    world = scene_points(spec, seed, avoid=np.array([p.translation for p in poses]))
    entries = []
    for i, pose in enumerate(poses):
        t = i / spec.rate_hz

        def scan(pose=pose, i=i, t=t):
            return observe(world, pose, projection, frame_id=f"{i:06d}", timestamp=t)

        entries.append(ScanEntry(scan, pose, t))
    return ScanSequence(entries, name=f"synthetic-{seed}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. All defaults are repo choices, not published values."""

    loss: LossConfig = LossConfig()
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 1000
    seed: int = 0
    r_pos: float = 5.0
    r_neg: float = 20.0
    checkpoint_interval: int = 500
    profile: str = "mini"
    val_batches: int = 8

    def __post_init__(self):
        if not self.r_pos < self.r_neg:
            raise ConfigError(f"r_pos ({self.r_pos}) must be smaller than r_neg ({self.r_neg})")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        get_profile(self.profile)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        known = {f for f in cls.__dataclass_fields__} - {"loss"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(loss=loss, **d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PairBatch:
    """Index pairs into a sequence plus their poses; leg 1 is ``first``."""

    first: np.ndarray
    second: np.ndarray
    distances: np.ndarray
    near: np.ndarray

    def __len__(self) -> int:
        return len(self.first)


def _far_pair(rng, pos, r_neg, far_cache):
    n = len(pos)
    for _ in range(64):
        i, j = rng.integers(0, n, size=2)
        if i != j and np.linalg.norm(pos[i] - pos[j]) >= r_neg:
            return (min(i, j), max(i, j))
    if far_cache.get("pairs") is None:
        ii, jj = np.triu_indices(n, k=1)
        d = np.linalg.norm(pos[ii] - pos[jj], axis=1)
        keep = d >= r_neg
        far_cache["pairs"] = np.stack([ii[keep], jj[keep]], axis=1)
    pairs = far_cache["pairs"]
    if len(pairs) == 0:
        return None
    i, j = pairs[rng.integers(0, len(pairs))]
    return (int(i), int(j))


class PairSampler:
    """Draws balanced near/far batches from one sequence.

    Near pairs lie within ``r_pos`` and far pairs at least ``r_neg`` apart.
    If no far pair exists the batch is filled with near pairs.
    """

    def __init__(self, seq: ScanSequence, config: TrainConfig):
        if len(seq) < 2:
            raise ConfigError("pair sampling needs at least two scans")
        self.pos = seq.translations()
        tree = cKDTree(self.pos)
        near = tree.query_pairs(config.r_pos, output_type="ndarray")
        if len(near) == 0:
            raise ConfigError(f"no scan pairs within r_pos={config.r_pos} m (r_neg={config.r_neg} m)")
        self.near = near[np.lexsort((near[:, 1], near[:, 0]))]
        self.config = config
        self._far_cache: dict = {}

    def sample(self, rng: np.random.Generator) -> PairBatch:
        b = self.config.batch_size
        n_near = (b + 1) // 2
        pairs, near_flags = [], []
        for k in range(b):
            pair = None
            if k >= n_near:
                pair = _far_pair(rng, self.pos, self.config.r_neg, self._far_cache)
            is_near = pair is None
            if pair is None:
                i, j = self.near[rng.integers(0, len(self.near))]
                pair = (int(i), int(j))
            if rng.random() < 0.5:
                pair = (pair[1], pair[0])
            pairs.append(pair)
            near_flags.append(is_near)
        first = np.array([p[0] for p in pairs])
        second = np.array([p[1] for p in pairs])
        d = np.linalg.norm(self.pos[first] - self.pos[second], axis=1)
        return PairBatch(first, second, d, np.array(near_flags))


def sample_pairs(seq: ScanSequence, config: TrainConfig, rng: np.random.Generator) -> PairBatch:
    return PairSampler(seq, config).sample(rng)


class ImageCache:
    """Normalized network inputs per scan index, projected once."""

    def __init__(self, seq: ScanSequence, projection: ProjectionConfig):
        self.seq = seq
        self.projection = projection
        self._images: dict[int, np.ndarray] = {}

    def __getitem__(self, i: int) -> np.ndarray:
        img = self._images.get(i)
        if img is None:
            data = project(self.seq.load(i), self.projection).data
            img = self._images[i] = (data / np.float32(self.projection.max_range)).astype(np.float32)[None]
        return img

    def batch(self, indices) -> Tensor:
        return Tensor(np.stack([self[int(i)] for i in indices]))


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, component: str):
        super().__init__(f"loss component {component} became non-finite at step {step}")
        self.step = step
        self.component = component


@dataclass
class TrainResult:
    model: RecNet
    reports: list[LossReport] = field(default_factory=list)
    first_step: int = 1
    checkpoints: list[Path] = field(default_factory=list)
    validation: list[tuple[int, float, float]] = field(default_factory=list)


def _validation_seed(config: TrainConfig) -> int:
    return config.seed + 7919


def validate(model, seq: ScanSequence, config: TrainConfig, projection: ProjectionConfig | None = None, cache=None):
    """Eval-mode mean reconstruction MSE and mean ``|c_hat - c|``.

    Pairs come from a fixed-seed draw of ``config.val_batches`` batches, so
    repeated calls see the same pairs. The model's weights are not touched.
    """
    projection = projection or get_profile(config.profile).projection()
    cache = cache or ImageCache(seq, projection)
    sampler = PairSampler(seq, config)
    rng = np.random.default_rng(_validation_seed(config))
    was_training = model.training
    model.eval()
    mse, err, count = 0.0, 0.0, 0
    try:
        with no_grad():
            for _ in range(config.val_batches):
                batch = sampler.sample(rng)
                x1, x2 = cache.batch(batch.first), cache.batch(batch.second)
                b1, b2 = model.encode(x1), model.encode(x2)
                recon = model.decode(b1)
                score = model.tail(b1, b2)
                c = similarity_from_distance(batch.distances, config.loss.m)
                diff = np.asarray(recon.data, dtype=np.float64) - np.asarray(x1.data, dtype=np.float64)
                mse += float(np.sum(np.mean(diff.reshape(len(batch), -1) ** 2, axis=1)))
                err += float(np.sum(np.abs(np.asarray(score.data, dtype=np.float64).reshape(-1) - c)))
                count += len(batch)
    finally:
        if was_training:
            model.train()
    return mse / count, err / count


def _checkpoint_paths(directory: Path, step: int) -> tuple[Path, Path, Path]:
    stem = directory / f"ckpt_{step:06d}"
    return stem.with_suffix(".rwts"), stem.with_suffix(".optim.npz"), stem.with_suffix(".json")


def save_checkpoint(directory, step: int, model: RecNet, opt: Adam, rng: np.random.Generator, config: TrainConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    wpath, opath, spath = _checkpoint_paths(directory, step)
    save_weights(model, wpath)
    with open(opath, "wb") as fh:
        np.savez(fh, **opt.state_arrays())
    sidecar = {
        "step": step,
        "weights": wpath.name,
        "optimizer": opath.name,
        "rng_state": rng.bit_generator.state,
        "config": config.to_dict(),
    }
    spath.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return spath


def latest_checkpoint(directory) -> Path | None:
    found = sorted(Path(directory).glob("ckpt_*.json"))
    return found[-1] if found else None


def load_checkpoint(sidecar_path, config: TrainConfig):
    """Restore ``(step, model, optimizer, rng)`` from a checkpoint sidecar."""
    sidecar_path = Path(sidecar_path)
    meta = json.loads(sidecar_path.read_text())
    model = load_weights(sidecar_path.parent / meta["weights"], config.profile)
    opt = Adam(model.params, lr=config.lr)
    with np.load(sidecar_path.parent / meta["optimizer"]) as arrays:
        opt.load_state_arrays({k: arrays[k] for k in arrays.files})
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    return int(meta["step"]), model, opt, rng


def train(
    seq_train: ScanSequence,
    seq_val: ScanSequence | None,
    config: TrainConfig,
    checkpoint_dir=None,
    log_path=None,
    resume=None,
    projection: ProjectionConfig | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
) -> TrainResult:
    """Run ``config.steps`` optimization steps (counted from 1).

    With ``checkpoint_dir`` set, an initial checkpoint (step 0) is written,
    then one every ``checkpoint_interval`` steps and one after the last step.
    ``resume`` is a checkpoint sidecar path; training continues from its step
    with the saved optimizer and RNG state. Loss rows are appended to
    ``log_path`` as comma-separated text.

    Raises:
        TrainingDiverged: a loss component became NaN or infinite.
    """
    profile = get_profile(config.profile)
    projection = projection or profile.projection()
    if (1, projection.height, projection.width) != profile.input_shape:
        raise ConfigError(f"projection {projection.height}x{projection.width} does not fit profile {profile.name}")
    sampler = PairSampler(seq_train, config)
    cache = ImageCache(seq_train, projection)
    val_cache = ImageCache(seq_val, projection) if seq_val is not None else None

    if resume is not None:
        start, model, opt, rng = load_checkpoint(resume, config)
    else:
        start = 0
        model = RecNet(profile, seed=config.seed)
        opt = Adam(model.params, lr=config.lr)
        rng = np.random.default_rng(config.seed)
    model.train()
    result = TrainResult(model=model, first_step=start + 1)

    log_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        fresh = resume is None or not log_path.exists()
        log_fh = open(log_path, "w" if fresh else "a")
        if fresh:
            log_fh.write(LOG_HEADER + "\n")
    try:
        if checkpoint_dir is not None and resume is None:
            result.checkpoints.append(save_checkpoint(checkpoint_dir, 0, model, opt, rng, config))
        for step in range(start + 1, config.steps + 1):
            batch = sampler.sample(rng)
            x1, x2 = cache.batch(batch.first), cache.batch(batch.second)
            c = similarity_from_distance(batch.distances, config.loss.m).astype(np.float32)
            model.zero_grad()
            recon, score, _, _ = model.forward(x1, x2)
            loss, report = total_loss(x1, recon, c, score, config.loss)
            for name in ("l_mse", "l_grad", "l_pr", "total"):
                if not math.isfinite(getattr(report, name)):
                    raise TrainingDiverged(step, name)
            loss.backward()
            opt.step()
            result.reports.append(report)
            if log_fh is not None:
                log_fh.write(report.csv_row(step) + "\n")
            if on_step is not None:
                on_step(step, report)
            at_interval = config.checkpoint_interval > 0 and step % config.checkpoint_interval == 0
            if at_interval or step == config.steps:
                if checkpoint_dir is not None:
                    result.checkpoints.append(save_checkpoint(checkpoint_dir, step, model, opt, rng, config))
                if seq_val is not None:
                    v = validate(model, seq_val, config, projection, val_cache)
                    result.validation.append((step, *v))
                    log.info("step %d: val l_mse=%.6f |c_hat-c|=%.4f", step, *v)
    finally:
        if log_fh is not None:
            log_fh.close()
    return result


def read_training_log(path) -> list[tuple[int, LossReport]]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != LOG_HEADER:
            raise ConfigError(f"{path}: unexpected header {header!r}")
        for line in fh:
            if line.strip():
                s, *vals = line.strip().split(",")
                rows.append((int(s), LossReport(*(float(v) for v in vals))))
    return rows


def load_train_config(path: str | os.PathLike) -> tuple[TrainConfig, dict]:
    """Read a JSON training config; returns the config and its ``data`` section."""
    raw = json.loads(Path(path).read_text())
    data = raw.pop("data", {})
    raw.pop("output", None)
    return TrainConfig.from_dict(raw), data
