"""Images, dataset layout, config files, prior assets and the model container."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .model import DEFAULT_SCALES, ModelConfig, Params, count_params
from .objective import RegWeights
from .priors import NoisePatchSet, OrientedPattern, PatternPair, PriorAssets, RidgeBank
from .trainer import DatasetSplit, Sample, TrainConfig

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pbm", ".pnm")
MAGIC = b"GEOSEG1\n"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


# -- images -----------------------------------------------------------------

def load_image(path):
    """Grayscale float image in [0, 1]; RGB inputs contribute their green channel."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ValueError(f"{path}: unsupported image format {path.suffix!r} (use PNG or PNM)")
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as e:
        raise ValueError(f"{path}: unreadable image ({e})") from e
    mode = im.mode
    if mode in ("RGB", "RGBA", "P", "LA", "CMYK"):
        a = np.asarray(im.convert("RGB"))[..., 1].astype(np.float64) / 255.0
    elif mode == "L":
        a = np.asarray(im).astype(np.float64) / 255.0
    elif mode == "1":
        a = np.asarray(im).astype(np.float64)
    elif mode.startswith("I"):
        a = np.asarray(im).astype(np.float64) / 65535.0
    elif mode == "F":
        a = np.asarray(im).astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported pixel mode {mode}")
    return np.clip(a, 0.0, 1.0)


def load_mask(path):
    return load_image(path) > 0.5


def save_gray(path, a, bits=8):
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        Image.fromarray(np.round(a * 65535).astype(np.uint16)).save(path)
    else:
        Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)


def save_rgb(path, a):
    Image.fromarray(np.asarray(a, dtype=np.uint8), mode="RGB").save(path)


# -- dataset layout ---------------------------------------------------------

def _by_stem(directory):
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def read_manifest(root):
    path = Path(root) / "manifest.txt"
    if not path.exists():
        return {}
    kv = parse_kv(path.read_text())
    return {k: v.split() if k in ("train", "test") else v for k, v in kv.items()}


def load_split(root, role=None):
    """Dataset from ``root/images``, ``root/labels`` and optional ``root/fovs``.

    Files pair by basename.  With ``role`` set, membership comes from
    ``root/manifest.txt`` when present.
    """
    root = Path(root)
    images = _by_stem(root / "images")
    labels = _by_stem(root / "labels")
    fovs = _by_stem(root / "fovs")
    if not images:
        raise ValueError(f"{root}/images holds no supported images")
    names = sorted(images)
    manifest = read_manifest(root)
    if role is not None and role in manifest:
        wanted = manifest[role]
        missing = [n for n in wanted if n not in images]
        if missing:
            raise ValueError(f"manifest lists unknown images: {missing}")
        names = list(wanted)
    samples = []
    for n in names:
        if n not in labels:
            raise ValueError(f"image {n} has no label in {root}/labels")
        img = load_image(images[n])
        lab = load_mask(labels[n])
        if n in fovs:
            fov = load_mask(fovs[n])
        else:
            log.warning("no FOV for %s, using the full frame", n)
            fov = np.ones_like(lab)
        samples.append(Sample(img, lab, fov, n))
    return DatasetSplit(samples, role or "all")


def write_split(root, split, manifest=None):
    root = Path(root)
    for sub in ("images", "labels", "fovs"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in split.samples:
        save_gray(root / "images" / f"{s.name}.png", s.image, bits=16)
        save_gray(root / "labels" / f"{s.name}.png", s.label.astype(float))
        save_gray(root / "fovs" / f"{s.name}.png", s.fov.astype(float))
    if manifest:
        lines = [f"{k} = {' '.join(v) if isinstance(v, (list, tuple)) else v}"
                 for k, v in manifest.items()]
        (root / "manifest.txt").write_text("\n".join(lines) + "\n")


# -- config files -----------------------------------------------------------

def parse_kv(text):
    """``key = value`` lines, ``#`` comments, order preserved."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


MODEL_KEYS = {"scales", "filters", "blocks", "width", "init"}
REG_KEYS = {"alpha", "beta"}
PRESETS = {
    "full": {},
    "single": {"scales": "3"},
    "tiny": {"scales": "3", "filters": "2", "blocks": "2", "width": "3"},
    "desk": {"scales": "3", "filters": "12", "blocks": "4", "width": "8",
             "epochs": "10", "patch_size": "64", "batch_size": "16",
             "patches_per_epoch": "640"},
}


def _coerce(value, kind):
    if kind is bool:
        return value.lower() in ("1", "true", "yes", "on")
    return kind(value)


def config_from_kv(kv):
    """Build a :class:`TrainConfig` from flat string key/values."""
    kv = dict(kv)
    unknown_model = {}
    if "scales" in kv:
        ids = [int(s) for s in kv.pop("scales").replace(",", " ").split()]
        unknown_model["scales"] = tuple(DEFAULT_SCALES[i] for i in ids)
    for key, attr in (("filters", "n_filters"), ("blocks", "n_blocks"), ("width", "width")):
        if key in kv:
            unknown_model[attr] = int(kv.pop(key))
    if "init" in kv:
        unknown_model["init"] = kv.pop("init")
    model = ModelConfig(**unknown_model)
    reg = RegWeights(**{k: float(kv.pop(k)) for k in list(kv) if k in REG_KEYS})
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    train = {}
    for k, v in kv.items():
        if k not in fields or k in ("model", "reg"):
            raise ValueError(f"unknown config key {k!r}")
        default = getattr(TrainConfig, k, None)
        train[k] = _coerce(v, type(default) if default is not None else float)
    return TrainConfig(model=model, reg=reg, **train)


def load_config(spec, overrides=None):
    """Preset name or path to a key/value file, with optional overrides."""
    if spec in PRESETS:
        kv = dict(PRESETS[spec])
    else:
        kv = parse_kv(Path(spec).read_text())
    kv.update(overrides or {})
    return config_from_kv(kv)


def config_to_kv(cfg):
    m = cfg.model
    lines = [
        f"scales = {','.join(str(s.scale_id) for s in m.scales)}",
        f"filters = {m.n_filters}", f"blocks = {m.n_blocks}", f"width = {m.width}",
        f"init = {m.init.value}", f"alpha = {cfg.reg.alpha!r}", f"beta = {cfg.reg.beta!r}",
    ]
    for f in dataclasses.fields(TrainConfig):
        if f.name not in ("model", "reg"):
            lines.append(f"{f.name} = {getattr(cfg, f.name)!r}")
    return "\n".join(lines) + "\n"


# -- prior assets -----------------------------------------------------------

def _atomic_write(path, data):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def digest(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_patterns(path, pairs):
    th = np.array([p.aligned.theta for p in pairs])
    p0 = pairs[0].aligned
    np.savez(path, theta=th, c1=p0.c1, c2=p0.c2,
             aligned=np.stack([p.aligned.pixels for p in pairs]),
             orthogonal=np.stack([p.orthogonal.pixels for p in pairs]))


def load_patterns(path):
    with np.load(path) as z:
        c1, c2, size = float(z["c1"]), float(z["c2"]), z["aligned"].shape[-1]
        return [PatternPair(OrientedPattern(t, size, c1, c2, a),
                            OrientedPattern((t + 90.0) % 180.0, size, c1, c2, o))
                for t, a, o in zip(z["theta"], z["aligned"], z["orthogonal"])]


def save_noise(path, ns):
    np.savez(path, scale_id=ns.scale_id, patch_size=ns.patch_size,
             n_candidates=ns.n_candidates, n_keep=ns.n_keep, patches=ns.patches,
             provenance=np.array(ns.provenance, dtype=np.int64).reshape(-1, 3),
             scores=ns.scores, short=ns.short)


def load_noise(path):
    with np.load(path) as z:
        return NoisePatchSet(
            int(z["scale_id"]), int(z["patch_size"]), int(z["n_candidates"]), int(z["n_keep"]),
            z["patches"], [tuple(int(v) for v in r) for r in z["provenance"]],
            z["scores"], bool(z["short"]),
        )


def save_priors(directory, priors):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for sid, pairs, ns in zip(priors.scale_ids, priors.patterns, priors.noise):
        if pairs is not None:
            save_patterns(d / f"patterns_s{sid}.npz", pairs)
        if ns is not None:
            save_noise(d / f"noise_s{sid}.npz", ns)


def load_priors(directory, scale_ids):
    d = Path(directory)
    patterns, noise = [], []
    for sid in scale_ids:
        for name in (f"patterns_s{sid}.npz", f"noise_s{sid}.npz"):
            if not (d / name).exists():
                raise FileNotFoundError(f"missing prior asset {d / name}")
        patterns.append(load_patterns(d / f"patterns_s{sid}.npz"))
        noise.append(load_noise(d / f"noise_s{sid}.npz"))
    return PriorAssets(list(scale_ids), patterns, noise)


def load_filter_bank(path, scale_id):
    """External mining filters: an npz with ``filters`` (K, m, m) and optional ``thetas``."""
    with np.load(path) as z:
        if "filters" not in z.files:
            raise ValueError(f"{path}: no 'filters' array")
        f = np.asarray(z["filters"], dtype=np.float64)
        thetas = z["thetas"] if "thetas" in z.files else np.arange(len(f)) * (180.0 / len(f))
    if f.ndim != 3 or f.shape[1] != f.shape[2]:
        raise ValueError(f"{path}: filters must be (K, m, m), got {f.shape}")
    return RidgeBank(scale_id, np.asarray(thetas, dtype=np.float64), f)


def prior_digests(priors):
    if priors is None:
        return {}
    return {
        f"scale_{sid}": {"patterns": digest(priors.aligned(i), priors.orthogonal(i)),
                         "noise": digest(priors.noise_patches(i))}
        for i, sid in enumerate(priors.scale_ids)
    }


# -- model container --------------------------------------------------------

@dataclass
class SegmentationModel:
    config: ModelConfig
    params: Params
    threshold: float = 0.5
    reg: RegWeights = field(default_factory=RegWeights)
    meta: dict = field(default_factory=dict)


def _payload(params):
    out = bytearray()
    for a in params.tensors():
        out += struct.pack("<I", a.size)
        out += np.ascontiguousarray(a, dtype="<f4").tobytes()
    return bytes(out)


def model_bytes(model):
    payload = _payload(model.params)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "reg": dataclasses.asdict(model.reg),
        "threshold": model.threshold,
        "shapes": [list(a.shape) for a in model.params.tensors()],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": model.meta,
    }
    hb = json.dumps(header, sort_keys=True, indent=1).encode()
    return MAGIC + struct.pack("<I", len(hb)) + hb + payload


def save_model(path, model):
    _atomic_write(path, model_bytes(model))


def load_model(path):
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise ContainerError(f"{path}: not a model container (bad magic)")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start:start + n])
    except ValueError as e:
        raise ContainerError(f"{path}: corrupt header ({e})") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"{path}: format version {header.get('format_version')}, "
                             f"this reader handles {FORMAT_VERSION}")
    payload = data[start + n:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise ContainerError(f"{path}: payload digest mismatch")
    config = ModelConfig.from_dict(header["config"])
    tensors, off = [], 0
    for shape in header["shapes"]:
        (size,) = struct.unpack_from("<I", payload, off)
        off += 4
        a = np.frombuffer(payload, dtype="<f4", count=size, offset=off)
        off += 4 * size
        tensors.append(a.astype(np.float64).reshape(shape))
    if off != len(payload):
        raise ContainerError(f"{path}: {len(payload) - off} trailing payload bytes")
    params = Params.from_tensors(tensors, config.n_scales, config.n_blocks)
    expected = count_params(config, include_bias=True).total
    if sum(a.size for a in tensors) != expected:
        raise ContainerError(f"{path}: payload holds {sum(a.size for a in tensors)} values, "
                             f"config needs {expected}")
    return SegmentationModel(config, params, header["threshold"], RegWeights(**header["reg"]),
                             header.get("meta", {}))
