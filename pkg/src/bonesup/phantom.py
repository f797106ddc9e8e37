"""Synthetic dual-energy chest phantoms and the on-disk dataset layout.

A phantom is a soft-tissue layer and a bone layer quantized to the 8-bit
grid; the standard image is their saturating sum, so the composition law
holds exactly on disk.  A misregistered sample forms its standard image from
a shifted copy of the bone layer, like a dual-energy pair with patient motion
between exposures.

Layout::

    <root>/standard/<id>.pgm
    <root>/bone/<id>.pgm
    <root>/soft/<id>.pgm
    <root>/manifest.tsv      id  split  abnormal  misregistered  seed
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ConfigError, FormatError
from .pgm import read_image, write_image
from .splits import MIN_SAMPLES, SplitSpec, split_dataset

LAYERS = ("standard", "bone", "soft")
MANIFEST = "manifest.tsv"
MANIFEST_HEADER = ("id", "split", "abnormal", "misregistered", "seed")
LEVELS = 255
U64 = (1 << 64) - 1


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    rib_count: tuple = (5, 7)  # per side
    rib_curvature: tuple = (0.06, 0.12)  # arc height, fraction of image size
    rib_thickness: tuple = (1.2, 1.8)  # pixels at 64 px, scaled with size
    rib_intensity: tuple = (0.16, 0.24)
    spine_intensity: tuple = (0.18, 0.26)
    clavicle_intensity: tuple = (0.16, 0.24)
    lung_semi_axes: tuple = ((0.16, 0.20), (0.28, 0.34))  # (x range, y range), fractions
    lung_darkness: tuple = (0.12, 0.18)
    body_intensity: tuple = (0.42, 0.50)
    blob_probability: float = 0.5
    blob_intensity: tuple = (0.08, 0.16)
    blob_radius: tuple = (0.035, 0.06)  # gaussian sigma, fraction of image size
    misregistration_fraction: float = 0.05
    max_shift: int = 4
    noise: float = 0.01

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        for name in ("blob_probability", "misregistration_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")
        if not 1 <= self.max_shift < self.image_size / 8:
            raise ConfigError(
                f"max_shift must be >= 1 and < image_size/8 ({self.image_size / 8:g})"
            )
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        lo, hi = self.rib_count
        if lo < 1 or hi < lo:
            raise ConfigError("rib_count must be a non-empty positive range")

    @classmethod
    def easy_blobs(cls, **overrides):
        """Large, bright lesions: the easy configuration for the classification protocol."""
        base = dict(blob_intensity=(0.22, 0.30), blob_radius=(0.07, 0.09))
        base.update(overrides)
        return cls(**base)

    def with_size(self, image_size):
        return replace(self, image_size=image_size, max_shift=min(self.max_shift, max(1, (image_size - 1) // 8)))


@dataclass
class PhantomSample:
    standard: np.ndarray
    bone: np.ndarray
    soft: np.ndarray
    abnormal: bool
    misregistered: bool
    seed: int
    shift: tuple = (0, 0)
    blob: dict | None = field(default=None, repr=False)

    @property
    def de_soft(self):
        """Soft tissue as dual-energy subtraction would report it: clamp(standard - bone)."""
        return subtract_layers(self.standard, self.bone)


def _q(x):
    return np.rint(np.clip(x, 0.0, 1.0) * LEVELS).astype(np.int32)


def _f(q):
    return (q.astype(np.float64) / LEVELS).astype(np.float32)


def subtract_layers(standard, bone):
    """clamp(standard - bone) computed on the 8-bit grid."""
    return _f(np.clip(_q(standard) - _q(bone), 0, LEVELS))


def _u(rng, pair):
    return float(rng.uniform(pair[0], pair[1]))


def _ellipse_inside(yy, xx, cy, cx, ry, rx, softness):
    r = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return 1.0 / (1.0 + np.exp((r - 1.0) / softness))


def _soft_layer(rng, cfg, yy, xx):
    s = cfg.image_size
    body = _u(rng, cfg.body_intensity)
    img = 0.12 + (body - 0.12) * _ellipse_inside(yy, xx, 0.52 * s, 0.5 * s, 0.52 * s, 0.44 * s, 0.05)
    # low-frequency tissue variation
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2) * np.pi / s
        py, px = rng.uniform(0, 2 * np.pi, size=2)
        img += rng.uniform(0.01, 0.025) * np.cos(fy * yy + py) * np.cos(fx * xx + px)
    lungs = []
    for side in (-1, 1):
        rx = _u(rng, cfg.lung_semi_axes[0]) * s
        ry = _u(rng, cfg.lung_semi_axes[1]) * s
        cx = 0.5 * s + side * rng.uniform(0.19, 0.23) * s
        cy = rng.uniform(0.46, 0.52) * s
        img -= _u(rng, cfg.lung_darkness) * _ellipse_inside(yy, xx, cy, cx, ry, rx, 0.08)
        lungs.append((cy, cx, ry, rx))
    blob = None
    if rng.random() < cfg.blob_probability:
        cy, cx, ry, rx = lungs[int(rng.integers(2))]
        ang = rng.uniform(0, 2 * np.pi)
        rad = np.sqrt(rng.uniform(0, 0.5))
        by, bx = cy + rad * ry * np.sin(ang), cx + rad * rx * np.cos(ang)
        sigma = _u(rng, cfg.blob_radius) * s
        amp = _u(rng, cfg.blob_intensity)
        img += amp * np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma**2))
        blob = {"y": by, "x": bx, "sigma": sigma, "intensity": amp}
    if cfg.noise:
        img += rng.normal(0.0, cfg.noise, size=img.shape)
    return img, blob


def _arc(yy, xx, x0, x1, y_of_x, thickness, intensity):
    """Band of given thickness around y = y_of_x(x) for x in [x0, x1] (soft ends)."""
    lo, hi = min(x0, x1), max(x0, x1)
    centre = y_of_x(xx)
    d = (yy - centre) / thickness
    span = 1.0 / (1.0 + np.exp(-(xx - lo) / 0.8)) / (1.0 + np.exp((xx - hi) / 0.8))
    return intensity * np.exp(-d * d) * span


def _bone_layer(rng, cfg, yy, xx):
    s = cfg.image_size
    scale = s / 64.0
    img = np.zeros_like(yy)
    spine_w = 0.035 * s
    spine = _u(rng, cfg.spine_intensity) / (1.0 + np.exp((np.abs(xx - 0.5 * s) - spine_w) / (0.6 * scale)))
    img += spine * (yy > 0.05 * s)
    n_ribs = int(rng.integers(cfg.rib_count[0], cfg.rib_count[1] + 1))
    top = rng.uniform(0.20, 0.25) * s
    spacing = rng.uniform(0.085, 0.10) * s
    for side in (-1, 1):
        for k in range(n_ribs):
            y0 = top + k * spacing + rng.normal(0, 0.005 * s)
            amp = _u(rng, cfg.rib_curvature) * s
            length = rng.uniform(0.36, 0.42) * s
            droop = rng.uniform(0.10, 0.25)
            thick = _u(rng, cfg.rib_thickness) * scale
            x_spine = 0.5 * s + side * spine_w

            def y_of_x(x, y0=y0, amp=amp, length=length, droop=droop, x_spine=x_spine):
                u = np.clip(np.abs(x - x_spine) / length, 0.0, 1.0)
                return y0 - amp * np.sin(np.pi * u) + droop * length * u

            img += _arc(yy, xx, x_spine, x_spine + side * length, y_of_x, thick, _u(rng, cfg.rib_intensity))
    for side in (-1, 1):
        y0 = rng.uniform(0.12, 0.16) * s
        x_in = 0.5 * s + side * 0.06 * s
        length = rng.uniform(0.28, 0.34) * s
        rise = rng.uniform(0.03, 0.06) * s

        def clav(x, y0=y0, x_in=x_in, length=length, rise=rise):
            u = np.clip(np.abs(x - x_in) / length, 0.0, 1.0)
            return y0 - rise * u + 0.5 * rise * np.sin(np.pi * u)

        thick = 1.6 * _u(rng, cfg.rib_thickness) * scale
        img += _arc(yy, xx, x_in, x_in + side * length, clav, thick, _u(rng, cfg.clavicle_intensity))
    return img


def _shift(q, dy, dx):
    out = np.zeros_like(q)
    h, w = q.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = q[ys, xs]
    return out


def generate_phantom(config: PhantomConfig = PhantomConfig(), seed=0) -> PhantomSample:
    """Generate one phantom; identical ``(config, seed)`` give identical arrays."""
    seed = int(seed) & U64
    rng = np.random.default_rng(seed)
    s = config.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64) + 0.5
    soft, blob = _soft_layer(rng, config, yy, xx)
    bone = _bone_layer(rng, config, yy, xx)
    soft_q, bone_q = _q(soft), _q(bone)
    misregistered = bool(rng.random() < config.misregistration_fraction)
    shift = (0, 0)
    used = bone_q
    if misregistered:
        m = config.max_shift
        while shift == (0, 0):
            shift = (int(rng.integers(-m, m + 1)), int(rng.integers(-m, m + 1)))
        used = _shift(bone_q, *shift)
    standard_q = np.minimum(soft_q + used, LEVELS)
    return PhantomSample(
        standard=_f(standard_q),
        bone=_f(bone_q),
        soft=_f(soft_q),
        abnormal=blob is not None,
        misregistered=misregistered,
        seed=seed,
        shift=shift,
        blob=blob,
    )


def sample_seed(seed, index):
    return (int(seed) ^ int(index)) & U64


def sample_id(index):
    return f"{index:05d}"


@dataclass(frozen=True)
class ManifestRow:
    id: str
    split: str
    abnormal: bool
    misregistered: bool
    seed: int

    def to_line(self):
        return f"{self.id}\t{self.split}\t{int(self.abnormal)}\t{int(self.misregistered)}\t{self.seed}"


def write_manifest(rows, path):
    lines = ["\t".join(MANIFEST_HEADER)] + [r.to_line() for r in rows]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path):
    with open(path, encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_HEADER:
        raise FormatError(f"{path}: bad manifest header")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_HEADER):
            raise FormatError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
        try:
            rows.append(ManifestRow(parts[0], parts[1], bool(int(parts[2])), bool(int(parts[3])), int(parts[4])))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return rows


def generate_dataset(config: PhantomConfig, count, out_dir, split_spec=SplitSpec(), seed=0):
    """Write ``count`` phantoms under ``out_dir`` and return the manifest rows."""
    if count < MIN_SAMPLES:
        raise ConfigError(f"count must be >= {MIN_SAMPLES}, got {count}")
    ids = [sample_id(i) for i in range(count)]
    splits = split_dataset(ids, split_spec)
    split_of = {i: name for name, members in splits.items() for i in members}
    for layer in LAYERS:
        os.makedirs(os.path.join(out_dir, layer), exist_ok=True)
    rows = []
    for index, sid in enumerate(ids):
        sample = generate_phantom(config, sample_seed(seed, index))
        for layer in LAYERS:
            write_image(getattr(sample, layer), os.path.join(out_dir, layer, f"{sid}.pgm"))
        rows.append(ManifestRow(sid, split_of[sid], sample.abnormal, sample.misregistered, sample.seed))
    write_manifest(rows, os.path.join(out_dir, MANIFEST))
    return rows


class Dataset:
    """Read access to a dataset directory; layers are loaded lazily per id."""

    def __init__(self, root):
        self.root = root
        path = os.path.join(root, MANIFEST)
        if not os.path.isfile(path):
            raise FileNotFoundError(f"no {MANIFEST} under {root}")
        self.rows = read_manifest(path)
        self.by_id = {r.id: r for r in self.rows}

    def ids(self, split=None):
        return [r.id for r in self.rows if split is None or r.split == split]

    def has_layer(self, layer):
        return os.path.isdir(os.path.join(self.root, layer))

    def load(self, layer, ids):
        """Stack images of ``ids`` as an (N, H, W) float32 array in [0, 1]."""
        return np.stack([read_image(os.path.join(self.root, layer, f"{i}.pgm")) for i in ids])

    def load_de_soft(self, ids):
        return subtract_layers(self.load("standard", ids), self.load("bone", ids))

    def labels(self, ids):
        return np.array([self.by_id[i].abnormal for i in ids], dtype=bool)


def config_dict(config: PhantomConfig):
    return asdict(config)
