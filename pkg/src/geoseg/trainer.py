"""Patch sampling, Adam, the training loop and a synthetic curvilinear dataset."""

from __future__ import annotations

import csv
import logging
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial import cKDTree

from . import priors as P
from .model import ModelConfig, Params, init_params
from .objective import RegWeights, RegularizerGram, backward

log = logging.getLogger(__name__)


@dataclass
class Sample:
    image: np.ndarray  # (M, N) in [0, 1]
    label: np.ndarray  # (M, N) bool
    fov: np.ndarray  # (M, N) bool
    name: str = ""
    width_map: np.ndarray | None = None  # generator stroke width per pixel, synthetic data only


@dataclass
class DatasetSplit:
    samples: list
    role: str = "train"

    def __post_init__(self):
        for s in self.samples:
            if not (s.image.shape == s.label.shape == s.fov.shape):
                raise ValueError(f"{s.name}: image {s.image.shape}, label {s.label.shape}, "
                                 f"fov {s.fov.shape} disagree")

    def __len__(self):
        return len(self.samples)

    @property
    def images(self):
        return [s.image for s in self.samples]

    @property
    def labels(self):
        return [s.label for s in self.samples]

    @property
    def fovs(self):
        return [s.fov for s in self.samples]


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    reg: RegWeights = field(default_factory=RegWeights)
    learning_rate: float = 5e-4
    batch_size: int = 64
    epochs: int = 60
    patch_size: int = 128
    patches_per_epoch: int = 7000
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0  # steps; 0 disables
    min_vessel_fraction: float = 0.0  # patch balance option, off by default
    # noise-patch mining
    noise_patch_size: int = 64
    noise_candidates: int = 200
    noise_keep: int = 100
    noise_stride: int = 0  # 0 -> half the patch size
    output_bias_prior: bool = True

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "patch_size", "patches_per_epoch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.patch_size < self.model.max_filter_size:
            raise ValueError(f"patch size {self.patch_size} below largest filter size "
                             f"{self.model.max_filter_size}")

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


# -- patch sampling ---------------------------------------------------------

def sample_patch_coords(split, patch_size, count, seed, min_vessel_fraction=0.0):
    """Random crops ``(image index, row, col)`` whose centre lies inside the FOV."""
    rng = np.random.default_rng(seed)
    usable = []
    for i, s in enumerate(split.samples):
        if min(s.image.shape) < patch_size:
            log.warning("image %s smaller than patch size %d, skipped", s.name or i, patch_size)
            continue
        half = patch_size // 2
        H, W = s.image.shape
        fov = s.fov[half:H - patch_size + half + 1, half:W - patch_size + half + 1]
        rows, cols = np.nonzero(fov)
        if len(rows):
            usable.append((i, rows, cols))
    if not usable:
        raise ValueError(f"no image admits a {patch_size}x{patch_size} patch")
    coords = []
    tries = 0
    while len(coords) < count:
        i, rows, cols = usable[rng.integers(len(usable))]
        k = rng.integers(len(rows))
        r, c = int(rows[k]), int(cols[k])
        tries += 1
        if min_vessel_fraction > 0 and tries < 100 * count:
            lab = split.samples[i].label[r:r + patch_size, c:c + patch_size]
            if lab.mean() < min_vessel_fraction:
                continue
        coords.append((i, r, c))
    return coords


def crop(split, coords, patch_size):
    X = np.stack([split.samples[i].image[r:r + patch_size, c:c + patch_size] for i, r, c in coords])
    Y = np.stack([split.samples[i].label[r:r + patch_size, c:c + patch_size] for i, r, c in coords])
    return X.astype(np.float64), Y.astype(np.float64)


def sample_patches(split, patch_size, count, seed, min_vessel_fraction=0.0):
    coords = sample_patch_coords(split, patch_size, count, seed, min_vessel_fraction)
    X, Y = crop(split, coords, patch_size)
    return list(zip(X, Y))


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(a) for a in params.tensors()],
                   [np.zeros_like(a) for a in params.tensors()])


def adam_step(params, grads, state, t, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``.

    Raises ``FloatingPointError`` on a non-finite gradient and leaves the
    inputs untouched.
    """
    if t < 1:
        raise ValueError("step counter starts at 1")
    gs = grads.tensors()
    for g in gs:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient, step rejected")
    bc1, bc2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.tensors(), gs, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_p.append(p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps))
        new_m.append(m)
        new_v.append(v)
    shape = (len(params.rep.banks), len(params.task.blocks))
    return Params.from_tensors(new_p, *shape), AdamState(new_m, new_v, t)


# -- priors -----------------------------------------------------------------

def build_priors(model_config, split, patch_size=64, n_candidates=200, n_keep=100,
                 stride=None, exclude=None):
    """Pattern pairs and mined noise patches for every scale of ``model_config``."""
    patterns, noise = [], []
    K = model_config.n_filters
    for spec in model_config.scales:
        patterns.append(P.make_pattern_set(K, spec.pattern_size, spec.c1, spec.c2))
        bank = P.make_ridge_bank(spec.scale_id, K, size=spec.filter_size)
        noise.append(P.extract_noise_patches(
            split.images, split.labels, split.fovs, spec.scale_id, patch_size,
            n_candidates, n_keep, stride or None, bank,
            exclude=(exclude or {}).get(spec.scale_id, ()),
        ))
    return P.PriorAssets([s.scale_id for s in model_config.scales], patterns, noise)


# -- training loop ----------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


LOG_FIELDS = ("step", "epoch", "mse", "l_or", "l_no", "total")


def write_log_csv(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


def _atomic_savez(path, **arrays):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    with open(tmp, "wb") as f:
        np.savez(f, **arrays)
    os.replace(tmp, path)


def save_state(path, params, state, step, epoch):
    arrays = {f"p{i}": a for i, a in enumerate(params.tensors())}
    arrays.update({f"m{i}": a for i, a in enumerate(state.m)})
    arrays.update({f"v{i}": a for i, a in enumerate(state.v)})
    arrays["meta"] = np.array([step, epoch, state.t, len(params.rep.banks), len(params.task.blocks)])
    _atomic_savez(path, **arrays)


def load_state(path):
    with np.load(path) as z:
        step, epoch, t, Q, L = (int(v) for v in z["meta"])
        n = sum(1 for k in z.files if k.startswith("p"))
        params = Params.from_tensors([z[f"p{i}"] for i in range(n)], Q, L)
        state = AdamState([z[f"m{i}"] for i in range(n)], [z[f"v{i}"] for i in range(n)], t)
    return params, state, step, epoch


def output_bias_prior(split, coords, patch_size):
    """Logit of the vessel fraction over the sampled patches."""
    _, Y = crop(split, coords[:1000], patch_size)
    p = float(np.clip(Y.mean(), 1e-3, 1 - 1e-3))
    return np.log(p / (1 - p))


def steps_per_epoch(cfg):
    return math.ceil(cfg.patches_per_epoch / cfg.batch_size)


def train(split, priors, cfg, checkpoint_dir=None, resume=None, on_checkpoint=None):
    """Jointly fit representation and task parameters with Adam.

    Returns ``(params, log_rows)``.  The run is a pure function of
    ``(split, priors, cfg)``: patches are sampled once from ``cfg.seed`` and
    reshuffled every epoch from ``(seed, epoch)``, so a run resumed from a
    state file reproduces the uninterrupted one.
    """
    if not len(split):
        raise ValueError("empty training split")
    params = init_params(cfg.model, cfg.seed)
    if cfg.epochs == 0:
        return params, []
    coords = sample_patch_coords(split, cfg.patch_size, cfg.patches_per_epoch, cfg.seed,
                                 cfg.min_vessel_fraction)
    # start the logistic output at the vessel base rate instead of 0.5
    if cfg.output_bias_prior:
        params.task.head_bias[:] = output_bias_prior(split, coords, cfg.patch_size)
    state = AdamState.zeros_like(params)
    step = 0
    if resume is not None:
        params, state, step, _ = load_state(resume)

    gram = None
    if priors is not None:
        gram = RegularizerGram.build(priors, [s.filter_size for s in cfg.model.scales])
    spe = steps_per_epoch(cfg)
    rows = []
    last_good = None
    for epoch in range(step // spe, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(coords))
        for b in range(step - epoch * spe, spe):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            X, Y = crop(split, [coords[i] for i in idx], cfg.patch_size)
            losses, grads = backward(X, Y, params, cfg.model, cfg.reg, gram=gram)
            if not np.isfinite(losses.total):
                raise TrainingDiverged(f"non-finite loss at step {step}", last_good)
            params, state = adam_step(params, grads.params, state, step + 1, cfg.learning_rate,
                                      cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            step += 1
            rows.append({"step": step, "epoch": epoch, "mse": losses.mse, "l_or": losses.l_or,
                         "l_no": losses.l_no, "total": losses.total})
            log.debug("step %d epoch %d total %.6g", step, epoch, losses.total)
            if checkpoint_dir and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                last_good = Path(checkpoint_dir) / f"step_{step:07d}.state.npz"
                save_state(last_good, params, state, step, epoch)
                if on_checkpoint is not None:
                    on_checkpoint(step, params)
    return params, rows


# -- synthetic data ---------------------------------------------------------

def _random_walk(rng, size, max_turn=0.06):
    """Smooth curvilinear centre line sampled every 0.25 px."""
    pos = rng.uniform(0.1 * size, 0.9 * size, size=2)
    heading = rng.uniform(0, 2 * np.pi)
    curv = rng.uniform(-max_turn, max_turn) / 2
    length = rng.uniform(0.6 * size, 2.0 * size)
    pts = [pos.copy()]
    ds = 0.25
    for _ in range(int(length / ds)):
        curv = np.clip(curv + rng.normal(0, 0.004), -max_turn, max_turn)
        heading += curv * ds
        pos = pos + ds * np.array([np.sin(heading), np.cos(heading)])
        if not (0 <= pos[0] < size and 0 <= pos[1] < size):
            break
        pts.append(pos.copy())
    return np.array(pts)


def render_synthetic(size, rng, n_strokes=(4, 8), widths=(1, 5), contrast=(0.15, 0.35),
                     noise_sigma=0.02, n_blobs=(4, 10)):
    """One synthetic image and its parts: ``(image, label, width_map, clean, background)``.

    ``clean`` is the image before additive noise, ``background`` the same
    without strokes.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    grid = np.stack([yy.ravel(), xx.ravel()], axis=1)
    texture = gaussian_filter(rng.standard_normal((size, size)), 6.0)
    texture *= 0.06 / (texture.std() + 1e-12)
    tilt = rng.uniform(-0.1, 0.1, size=2)
    background = 0.4 + texture + (tilt[0] * (yy / size - 0.5) + tilt[1] * (xx / size - 0.5))
    for _ in range(rng.integers(n_blobs[0], n_blobs[1] + 1)):
        c = rng.uniform(0, size, 2)
        r = rng.uniform(1.5, 5.0)
        amp = rng.uniform(0.1, 0.3) * rng.choice([-1.0, 1.0])
        background += amp * np.exp(-((yy - c[0]) ** 2 + (xx - c[1]) ** 2) / (2 * r * r))

    width_map = np.zeros((size, size), dtype=np.int64)
    lift = np.zeros((size, size))
    for _ in range(rng.integers(n_strokes[0], n_strokes[1] + 1)):
        pts = _random_walk(rng, size)
        if len(pts) < 40:
            continue
        w = int(rng.integers(widths[0], widths[1] + 1))
        amp = rng.uniform(*contrast)
        d, _ = cKDTree(pts).query(grid, distance_upper_bound=w / 2)
        inside = (d < w / 2).reshape(size, size)
        # nearest pixel of every centre-line sample keeps 1 px strokes connected
        rc = np.clip(np.round(pts).astype(int), 0, size - 1)
        inside[rc[:, 0], rc[:, 1]] = True
        lift = np.where(inside, np.maximum(lift, amp), lift)
        width_map = np.where(inside, np.maximum(width_map, w), width_map)

    clean = background + lift
    image = np.clip(clean + rng.normal(0, noise_sigma, clean.shape), 0.0, 1.0)
    return image, width_map > 0, width_map, clean, background


def generate_synthetic_dataset(n_images, size=256, seed=0, role="train", **kw):
    """Images of random smooth strokes (widths 1-5 px) over textured, blobby background."""
    if size < 64:
        raise ValueError("synthetic images must be at least 64 px")
    samples = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        image, label, width_map, _, _ = render_synthetic(size, rng, **kw)
        samples.append(Sample(image, label, np.ones_like(label), f"synth_{i:03d}", width_map))
    return DatasetSplit(samples, role)


def with_epochs(cfg, epochs):
    return replace(cfg, epochs=epochs)
