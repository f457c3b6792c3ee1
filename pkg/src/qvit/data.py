"""Synthetic three-channel jet images plus the on-disk dataset format.

Each sample mimics the detector geometry of the real quark/gluon images:
channel 0 collects charged-particle hits (a 60% subset of the deposits),
channel 1 collects every deposit at full resolution, and channel 2 is the
same energy binned on a 5x coarser grid and upsampled by block replication,
so it is constant over aligned 5x5 pixel blocks.

Class morphology is the only physics carried over: one class ("quark",
label 0) is a compact spray of around ten deposits, the other ("gluon",
label 1) a wider spray of around twenty. A simple radial-moment threshold
already separates the classes, which keeps training experiments meaningful
at small sample counts.

Every sample is a pure function of (seed, index), so datasets are
bit-reproducible. On disk: manifest.json, images.f32 (raw little-endian
float32, NCHW) and labels.u8 (one byte per label). Splits are contiguous in
file order; labels alternate, so any contiguous even-length range is class
balanced.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, CorruptionError

GENERATOR_VERSION = "qvit-jets-1"
HCAL_BLOCK = 5
NUM_CHANNELS = 3
TRACKS, ECAL, HCAL = 0, 1, 2

MANIFEST_FILE = "manifest.json"
IMAGES_FILE = "images.f32"
LABELS_FILE = "labels.u8"

DEFAULT_RATIOS = (0.8, 0.1, 0.1)
SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class GeneratorParams:
    """Morphology knobs for the synthetic generator. Defaults target the
    full-size 125x125 geometry but any multiple of 5 works."""

    height: int = 125
    width: int = 125
    quark_particles: float = 10.0
    gluon_particles: float = 20.0
    quark_sigma: float = 5.0
    gluon_sigma: float = 12.0
    charged_fraction: float = 0.6
    energy_mean: float = 1.0

    def __post_init__(self):
        if self.height % HCAL_BLOCK or self.width % HCAL_BLOCK:
            raise ConfigError(f"image sides must be multiples of {HCAL_BLOCK}")
        if min(self.height, self.width) < HCAL_BLOCK:
            raise ConfigError("image too small")
        if not 0.0 <= self.charged_fraction <= 1.0:
            raise ConfigError("charged_fraction must lie in [0, 1]")
        for name in ("quark_particles", "gluon_particles", "quark_sigma",
                     "gluon_sigma", "energy_mean"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "GeneratorParams":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown generator params: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class JetSample:
    image: np.ndarray  # (3, H, W) float64, nonnegative
    label: int  # 0 = quark, 1 = gluon


def generate_sample(index: int, seed: int, params: GeneratorParams) -> JetSample:
    """Deterministic sample for a given (seed, index); labels alternate."""
    rng = np.random.default_rng([seed, index])
    label = index % 2
    lam = params.gluon_particles if label else params.quark_particles
    sigma = params.gluon_sigma if label else params.quark_sigma
    count = max(1, int(rng.poisson(lam)))
    center = np.array([(params.height - 1) / 2.0, (params.width - 1) / 2.0])
    positions = rng.normal(center, sigma, size=(count, 2))
    rows = np.clip(np.rint(positions[:, 0]), 0, params.height - 1).astype(np.int64)
    cols = np.clip(np.rint(positions[:, 1]), 0, params.width - 1).astype(np.int64)
    energies = rng.exponential(params.energy_mean, size=count)
    charged = rng.random(count) < params.charged_fraction

    image = np.zeros((NUM_CHANNELS, params.height, params.width))
    np.add.at(image[TRACKS], (rows[charged], cols[charged]), energies[charged])
    np.add.at(image[ECAL], (rows, cols), energies)
    coarse = np.zeros((params.height // HCAL_BLOCK, params.width // HCAL_BLOCK))
    np.add.at(coarse, (rows // HCAL_BLOCK, cols // HCAL_BLOCK), energies)
    image[HCAL] = np.repeat(np.repeat(coarse, HCAL_BLOCK, axis=0), HCAL_BLOCK, axis=1)
    return JetSample(image=image, label=label)


def generate(n: int, seed: int, params: GeneratorParams | None = None) -> Iterator[JetSample]:
    """Stream n alternating-label samples. n must be even so the classes
    stay balanced."""
    if n < 2 or n % 2 != 0:
        raise ValueError(f"sample count must be even and >= 2, got {n}")
    params = params or GeneratorParams()
    for index in range(n):
        yield generate_sample(index, seed, params)


def split(n: int, ratios=DEFAULT_RATIOS) -> dict[str, range]:
    """Contiguous train/val/test ranges in file order; sizes are floor
    based with the remainder assigned to test."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3:
        raise ConfigError("need exactly three split ratios")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios sum to {sum(ratios)!r}, expected 1")
    # the small epsilon absorbs float rounding when n * ratio is integral
    n_train = int(np.floor(n * ratios[0] + 1e-9))
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ConfigError(f"split of {n} by {ratios} leaves an empty part")
    return {
        "train": range(0, n_train),
        "val": range(n_train, n_train + n_val),
        "test": range(n_train + n_val, n),
    }


def write_dataset(out_dir, n: int, seed: int,
                  params: GeneratorParams | None = None,
                  ratios=DEFAULT_RATIOS) -> dict:
    """Generate and persist a dataset; returns the manifest.

    Images are streamed to disk as little-endian float32; the per-channel
    maxima used by preprocessing are computed over the training split only
    and stored in the manifest.
    """
    params = params or GeneratorParams()
    boundaries = split(n, ratios)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    channel_max = np.zeros(NUM_CHANNELS)
    labels = np.empty(n, dtype=np.uint8)
    train_stop = boundaries["train"].stop
    with open(out_dir / IMAGES_FILE, "wb") as sink:
        for index, sample in enumerate(generate(n, seed, params)):
            labels[index] = sample.label
            stored = sample.image.astype("<f4")
            # stats describe the quantized on-disk pixels, not the float64 ones
            if index < train_stop:
                channel_max = np.maximum(channel_max, stored.astype(np.float64).max(axis=(1, 2)))
            sink.write(stored.tobytes())
    (out_dir / LABELS_FILE).write_bytes(labels.tobytes())

    manifest = {
        "num_samples": n,
        "height": params.height,
        "width": params.width,
        "channels": NUM_CHANNELS,
        "dtype": "f32le",
        "layout": "NCHW",
        "images_file": IMAGES_FILE,
        "labels_file": LABELS_FILE,
        "seed": seed,
        "generator_version": GENERATOR_VERSION,
        "generator_params": params.to_dict(),
        "splits": {name: [r.start, r.stop] for name, r in boundaries.items()},
        "class_counts": [int((labels == 0).sum()), int((labels == 1).sum())],
        "channel_max_train": [float(v) for v in channel_max],
    }
    (out_dir / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


class Dataset:
    """Lazy view over a dataset directory; images stay memory-mapped."""

    def __init__(self, manifest: dict, images: np.ndarray, labels: np.ndarray):
        self.manifest = manifest
        self.images = images
        self.labels = labels
        self._channel_max = np.asarray(manifest["channel_max_train"], dtype=np.float64)

    def __len__(self) -> int:
        return int(self.manifest["num_samples"])

    @property
    def height(self) -> int:
        return int(self.manifest["height"])

    @property
    def width(self) -> int:
        return int(self.manifest["width"])

    def split_range(self, name: str) -> range:
        if name not in self.manifest["splits"]:
            raise ConfigError(f"dataset has no split {name!r}")
        start, stop = self.manifest["splits"][name]
        return range(start, stop)

    def image(self, index: int) -> np.ndarray:
        return np.asarray(self.images[index], dtype=np.float64)

    def label(self, index: int) -> int:
        return int(self.labels[index])

    def model_input(self, index: int) -> np.ndarray:
        """Preprocessed image ready for the patch pipeline."""
        return preprocess(self.image(index), self._channel_max)


def read_dataset(directory) -> Dataset:
    """Open a dataset directory, validating the manifest against the files."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    if not manifest_path.is_file():
        raise CorruptionError(f"missing {MANIFEST_FILE} in {directory}")
    manifest = json.loads(manifest_path.read_text())
    for key in ("num_samples", "height", "width", "channels", "dtype", "layout",
                "images_file", "labels_file", "splits", "channel_max_train"):
        if key not in manifest:
            raise CorruptionError(f"manifest missing field {key!r}")
    if manifest["dtype"] != "f32le":
        raise CorruptionError(f"unsupported dtype tag {manifest['dtype']!r}")
    if manifest["layout"] != "NCHW":
        raise CorruptionError(f"unsupported layout tag {manifest['layout']!r}")
    n = int(manifest["num_samples"])
    h, w, c = int(manifest["height"]), int(manifest["width"]), int(manifest["channels"])

    images_path = directory / manifest["images_file"]
    labels_path = directory / manifest["labels_file"]
    expected_bytes = n * c * h * w * 4
    if not images_path.is_file() or images_path.stat().st_size != expected_bytes:
        actual = images_path.stat().st_size if images_path.is_file() else "missing"
        raise CorruptionError(
            f"images_file: expected {expected_bytes} bytes, found {actual}"
        )
    if not labels_path.is_file() or labels_path.stat().st_size != n:
        actual = labels_path.stat().st_size if labels_path.is_file() else "missing"
        raise CorruptionError(f"labels_file: expected {n} bytes, found {actual}")

    images = np.memmap(images_path, dtype="<f4", mode="r", shape=(n, c, h, w))
    labels = np.frombuffer(labels_path.read_bytes(), dtype=np.uint8)
    if labels.size and labels.max() > 1:
        raise CorruptionError("labels_file: labels must be 0 or 1")
    return Dataset(manifest, images, labels)


def preprocess(image: np.ndarray, channel_max: np.ndarray) -> np.ndarray:
    """Per-channel log compression into [0, 1].

    x -> log1p(x) / log1p(max) with the max taken over the training split.
    A channel whose training maximum is zero passes through as zeros.
    """
    image = np.asarray(image, dtype=np.float64)
    out = np.zeros_like(image)
    for ch in range(image.shape[0]):
        top = channel_max[ch]
        if top > 0.0:
            out[ch] = np.log1p(image[ch]) / np.log1p(top)
    return out
