"""Phantom corpora, per-task example simulation, the training loop and needle insertion."""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .fourier import adjoint_nufft_recon, image_to_radial_kspace, spokes_to_sinogram
from .geometry import (
    Geometry,
    SparsityPattern,
    make_fan_default,
    make_parallel_default,
    make_radial_geometry,
    parallel_detector_count,
    sparse_geometry,
    sparsify_indices,
)
from .models import Batch, Model
from .phantoms import PhantomSpec, generate_phantom
from .projectors import Sinogram, fbp, forward_project
from .sinogram_ops import corpus_percentile, upsample_bilinear

log = logging.getLogger(__name__)

TASKS = ("ct-fan", "ct-parallel", "mri-radial")
MU_WATER = 0.2
SOFT_TISSUE_MAX = MU_WATER


class NonFiniteLossError(FloatingPointError):
    """Training diverged (loss became NaN or infinite)."""


class PlacementError(ValueError):
    """Needle does not fit inside the field of view."""


# ------------------------------------------------------------------ examples


def task_geometry(task: str, size: int) -> Geometry:
    """Full-sampling geometry for a task; the MRI task uses ``2 * size`` spokes."""
    if task == "ct-fan":
        return make_fan_default(size)
    if task == "ct-parallel":
        return make_parallel_default(size)
    if task == "mri-radial":
        return make_radial_geometry(2 * size, parallel_detector_count(size))
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass
class ExampleSet:
    """Simulated data for a stack of images (leading axis = item)."""

    task: str
    factor: int
    images: np.ndarray
    full_sino: np.ndarray
    sparse: np.ndarray
    sparse_fbp: np.ndarray
    recon_input: np.ndarray
    upsampled: np.ndarray
    full_geom: Geometry
    sparse_geom: Geometry
    pattern: SparsityPattern

    def __len__(self):
        return self.images.shape[0]

    def batch(self, idx) -> Batch:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
        return Batch(
            sparse=self.sparse[idx],
            full_sino=self.full_sino[idx],
            target=self.images[idx],
            recon_input=self.recon_input[idx],
            sparse_fbp=self.sparse_fbp[idx],
            upsampled=self.upsampled[idx],
            full_geom=self.full_geom,
            sparse_geom=self.sparse_geom,
            pattern=self.pattern,
        )

    def subset(self, idx) -> "ExampleSet":
        idx = np.asarray(idx, dtype=np.int64)
        fields = ("images", "full_sino", "sparse", "sparse_fbp", "recon_input", "upsampled")
        kw = {f: getattr(self, f)[idx] for f in fields}
        return ExampleSet(self.task, self.factor, full_geom=self.full_geom, sparse_geom=self.sparse_geom,
                          pattern=self.pattern, **kw)

    def bilinear_fbp(self) -> np.ndarray:
        return fbp(self.upsampled, self.full_geom, self.images.shape[-1])

    def pair(self, kind: str) -> tuple[np.ndarray, np.ndarray]:
        """``(model_input, target)`` arrays for a model kind."""
        if kind == "recon-unet":
            return self.recon_input, self.images
        if kind == "sino-unet":
            return self.upsampled, self.full_sino
        if kind in ("pdnet", "pdunet"):
            return self.sparse, self.images
        raise ValueError(f"unknown model kind {kind!r}")


def make_examples(images, task: str, factor: int) -> ExampleSet:
    """Simulate full and sparse measurements for a stack of ``[B, N, N]`` images."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    n = images.shape[-1]
    geom = task_geometry(task, n)
    pattern = sparsify_indices(geom.n_angles, factor)
    keep = list(pattern.kept_indices)
    if task == "mri-radial":
        full, sparse, recon = [], [], []
        for img in images:
            k = image_to_radial_kspace(img, geom.n_angles, 2 * n)
            ks = k.sparsify(pattern)
            full.append(spokes_to_sinogram(k, geom.n_detectors).data)
            sparse.append(spokes_to_sinogram(ks, geom.n_detectors).data)
            recon.append(adjoint_nufft_recon(ks, n))
        full_sino, sparse_sino, recon_input = np.stack(full), np.stack(sparse), np.stack(recon)
    else:
        full_sino = forward_project(images, geom)
        sparse_sino = np.ascontiguousarray(full_sino[:, keep])
        recon_input = None
    sgeom = sparse_geometry(geom, pattern)
    sparse_fbp = fbp(sparse_sino, sgeom, n)
    if recon_input is None:
        recon_input = sparse_fbp
    upsampled = upsample_bilinear(Sinogram(sparse_sino, sgeom), geom.n_angles, factor).data
    return ExampleSet(task, factor, images, full_sino, sparse_sino, sparse_fbp, recon_input, upsampled,
                      geom, sgeom, pattern)


def make_example(img, task: str, factor: int) -> ExampleSet:
    return make_examples(np.asarray(img)[None], task, factor)


# ------------------------------------------------------------------ corpus


@dataclass(frozen=True)
class CorpusSpec:
    size: int = 64
    n_train: int = 200
    n_val: int = 30
    n_test: int = 50
    n_ellipses: int = 8
    seed: int = 0

    @property
    def total(self) -> int:
        return self.n_train + self.n_val + self.n_test


@dataclass
class Corpus:
    spec: CorpusSpec
    seeds: list
    images: np.ndarray
    splits: dict = field(default_factory=dict)

    def split(self, name: str) -> np.ndarray:
        return self.images[self.splits[name]]

    @property
    def p99(self) -> float:
        idx = np.concatenate([self.splits["train"], self.splits["val"]])
        return corpus_percentile(self.images[idx])

    def manifest(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "seeds": [int(s) for s in self.seeds],
            "splits": {k: [int(i) for i in v] for k, v in self.splits.items()},
        }


def phantom_seeds(seed: int, n: int) -> list:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def make_corpus(spec: CorpusSpec) -> Corpus:
    """Deterministic phantom corpus with a seeded train/val/test split."""
    seeds = phantom_seeds(spec.seed, spec.total)
    images = np.stack([generate_phantom(PhantomSpec(seed=s, n_ellipses=spec.n_ellipses, size=spec.size)) for s in seeds])
    order = np.random.default_rng(spec.seed).permutation(spec.total)
    splits = {
        "train": np.sort(order[: spec.n_train]),
        "val": np.sort(order[spec.n_train : spec.n_train + spec.n_val]),
        "test": np.sort(order[spec.n_train + spec.n_val :]),
    }
    return Corpus(spec, seeds, images, splits)


# ------------------------------------------------------------------ training


@dataclass
class TrainConfig:
    epochs: int = 30
    effective_batch: int = 32
    actual_batch: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    factor: int = 16
    task: str = "ct-fan"
    max_steps: int | None = None
    shuffle: bool = True
    restore_best: bool = True

    def __post_init__(self):
        if self.actual_batch < 1 or self.effective_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.effective_batch % self.actual_batch:
            raise ValueError(
                f"effective_batch {self.effective_batch} not divisible by actual_batch {self.actual_batch}"
            )
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")

    @property
    def accumulation_steps(self) -> int:
        return self.effective_batch // self.actual_batch


@dataclass
class EpochRecord:
    epoch: int
    train_l1: float
    val_l1: float
    wall_time: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    best_epoch: int = -1
    best_state: dict | None = None

    def best_val(self) -> float:
        return min(r.val_l1 for r in self.epochs)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_l1", "val_l1", "wall_time"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.train_l1), repr(r.val_l1), f"{r.wall_time:.3f}"])


def _check_finite(value: float, where: str):
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} at {where}")


def train_step(model: Model, data: ExampleSet, idx, cfg: TrainConfig) -> float:
    """One optimiser step over ``idx`` (the effective batch), accumulating micro-batch gradients.

    Each micro-batch loss is weighted by its share of the effective batch so the
    summed gradient equals the gradient of the mean loss over the whole batch.
    """
    idx = np.asarray(idx)
    total = 0.0
    for start in range(0, len(idx), cfg.actual_batch):
        micro = idx[start : start + cfg.actual_batch]
        loss = model.loss(data.batch(micro))
        value = float(loss.data)
        _check_finite(value, f"step {model.store.step_count + 1}")
        weight = len(micro) / len(idx)
        total += weight * value
        ad.affine(loss, weight, 0.0).backward()
    model.store.adam_step(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, zero_grad=True)
    return total


def evaluate_loss(model: Model, data: ExampleSet, batch_size: int = 4) -> float:
    total = 0.0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        with ad.no_grad():
            total += float(model.loss(data.batch(idx)).data) * len(idx)
    return total / len(data)


def train(model: Model, train_data: ExampleSet, val_data: ExampleSet | None, cfg: TrainConfig, log_path=None) -> TrainHistory:
    """Epoch loop with accumulation, per-epoch validation and best-epoch selection."""
    hist = TrainHistory()
    rng = np.random.default_rng(cfg.seed)
    n = len(train_data)
    steps = 0
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        losses = []
        for start in range(0, n, cfg.effective_batch):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            value = train_step(model, train_data, order[start : start + cfg.effective_batch], cfg)
            losses.append(value)
            hist.step_losses.append(value)
            steps += 1
        if not losses:
            break
        val = evaluate_loss(model, val_data, cfg.actual_batch) if val_data is not None else float(np.mean(losses))
        _check_finite(val, f"validation after epoch {epoch}")
        hist.epochs.append(EpochRecord(epoch, float(np.mean(losses)), val, time.perf_counter() - t0))
        log.info("epoch %d train %.5f val %.5f", epoch, np.mean(losses), val)
        # earliest epoch wins ties
        if hist.best_epoch < 0 or val < hist.epochs[hist.best_epoch].val_l1:
            hist.best_epoch = epoch
            hist.best_state = model.store.state_dict()
    if cfg.restore_best and hist.best_state is not None:
        model.store.load_state_dict(hist.best_state)
    if log_path is not None:
        hist.write_csv(log_path)
    return hist


def running_mean(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    out = np.empty_like(v)
    for i in range(len(v)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


# ------------------------------------------------------------------ needle


@dataclass(frozen=True)
class NeedleSpec:
    """Rigid straight needle: tip position (row, col), direction angle, length, width, attenuation."""

    tip: tuple
    angle: float = math.radians(30.0)
    length: float = 24.0
    width: float = 1.5
    attenuation: float = 10 * SOFT_TISSUE_MAX

    @property
    def tail(self) -> tuple:
        r, c = self.tip
        return (r + self.length * math.sin(self.angle), c - self.length * math.cos(self.angle))


def needle_mask(spec: NeedleSpec, size: int, supersample: int = 4) -> np.ndarray:
    """Fractional pixel coverage of the needle (capsule around the segment tip-tail)."""
    n = size * supersample
    sub = (np.arange(n) + 0.5) / supersample - 0.5
    rr, cc = sub[:, None], sub[None, :]
    (r0, c0), (r1, c1) = spec.tip, spec.tail
    dr, dc = r1 - r0, c1 - c0
    seg2 = dr * dr + dc * dc
    t = np.clip(((rr - r0) * dr + (cc - c0) * dc) / seg2, 0, 1) if seg2 > 0 else np.zeros_like(rr + cc)
    dist2 = (rr - r0 - t * dr) ** 2 + (cc - c0 - t * dc) ** 2
    inside = dist2 <= (spec.width / 2) ** 2
    return inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))


def insert_needle(img: np.ndarray, spec: NeedleSpec) -> np.ndarray:
    """Add the needle's attenuation to the image (additive model)."""
    img = np.asarray(img, dtype=np.float64)
    size = img.shape[-1]
    centre = (size - 1) / 2
    radius = size / 2 - spec.width
    for r, c in (spec.tip, spec.tail):
        if math.hypot(r - centre, c - centre) > radius:
            raise PlacementError(f"needle end ({r:.1f}, {c:.1f}) lies outside the field of view of a {size} px image")
    if spec.attenuation == 0:
        return img.copy()
    return img + spec.attenuation * needle_mask(spec, size)


def random_needle(rng: np.random.Generator, size: int, **kw) -> NeedleSpec:
    """Needle with its tip in the inner half of the image and a random direction that fits."""
    centre = (size - 1) / 2
    length = kw.pop("length", 0.375 * size)
    for _ in range(1000):
        r, t = rng.uniform(0, 0.25 * size), rng.uniform(0, 2 * math.pi)
        tip = (centre + r * math.sin(t), centre + r * math.cos(t))
        spec = NeedleSpec(tip=tip, angle=rng.uniform(0, 2 * math.pi), length=length, **kw)
        tr, tc = spec.tail
        if math.hypot(tr - centre, tc - centre) <= size / 2 - spec.width:
            return spec
    raise PlacementError("could not place a needle")


def corpus_to_json(corpus: Corpus) -> str:
    return json.dumps(corpus.manifest(), indent=2)


# ------------------------------------------------------------------ timing


def bench_geometry(size: int, n_projections: int) -> Geometry:
    """Fan geometry with ``n_projections`` views over a full turn."""
    return make_fan_default(size, n_angles=n_projections, angle_step=2 * math.pi / n_projections)


def bench_batch(size: int, n_projections: int, batch_size: int = 4, seed: int = 0) -> Batch:
    geom = bench_geometry(size, n_projections)
    rng = np.random.default_rng(seed)
    images = np.stack([generate_phantom(PhantomSpec(seed=int(s), size=size)) for s in rng.integers(0, 2**31, batch_size)])
    sino = forward_project(images, geom)
    pattern = sparsify_indices(geom.n_angles, 1)
    recon = fbp(sino, geom, size)
    return Batch(sino, sino, images, recon, recon, sino, geom, geom, pattern)


def time_inference(model: Model, batch: Batch, repeats: int = 20, warmup: int = 2) -> np.ndarray:
    """Wall-clock seconds of ``repeats`` forward passes (after ``warmup`` untimed ones)."""
    for _ in range(warmup):
        model.reconstruct(batch)
    out = np.empty(repeats)
    for i in range(repeats):
        t = time.perf_counter()
        model.reconstruct(batch)
        out[i] = time.perf_counter() - t
    return out


def inference_benchmark(models: dict, size: int, projections=(45, 90, 180, 360), batch_size: int = 4,
                        repeats: int = 20, warmup: int = 2, seed: int = 0) -> list:
    """Timing table rows: model, projections, mean / median / IQR seconds per batch."""
    rows = []
    for p in projections:
        batch = bench_batch(size, p, batch_size, seed)
        for name, model in models.items():
            t = time_inference(model, batch, repeats, warmup)
            q1, med, q3 = np.percentile(t, [25, 50, 75])
            rows.append({
                "model": name,
                "projections": int(p),
                "batch_size": batch_size,
                "repeats": repeats,
                "mean_s": float(t.mean()),
                "median_s": float(med),
                "iqr_s": float(q3 - q1),
                "n_params": model.n_params(),
            })
    return rows
