"""Seeded synthetic weather degradations with ground-truth masks.

Degradations are applied inside per-kind binary masks in a fixed order
(lowlight, haze, rain, snow). Pixels outside every mask are left untouched,
which is what lets the quality scorers be checked against known damage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InvalidInputError

KINDS = ("lowlight", "haze", "rain", "snow")

# The eleven single/composite combinations used by CDD-11.
CATEGORIES: dict[str, tuple[str, ...]] = {
    "low": ("lowlight",),
    "haze": ("haze",),
    "rain": ("rain",),
    "snow": ("snow",),
    "low_haze": ("lowlight", "haze"),
    "low_rain": ("lowlight", "rain"),
    "low_snow": ("lowlight", "snow"),
    "haze_rain": ("haze", "rain"),
    "haze_snow": ("haze", "snow"),
    "low_haze_rain": ("lowlight", "haze", "rain"),
    "low_haze_snow": ("lowlight", "haze", "snow"),
}

ATMOSPHERIC_LIGHT = 1.0


@dataclass
class DegradationSpec:
    kinds: tuple[str, ...]
    severities: dict[str, float]
    masks: dict[str, np.ndarray]
    seed: int = 0

    def __post_init__(self):
        if not self.kinds:
            raise InvalidInputError("degradation spec needs at least one kind")
        for k in self.kinds:
            if k not in KINDS:
                raise InvalidInputError(f"unknown degradation kind {k!r}")
            if k not in self.severities or k not in self.masks:
                raise InvalidInputError(f"kind {k!r} is missing a severity or mask")
            s = float(self.severities[k])
            if not 0.0 <= s <= 1.0:
                raise InvalidInputError(f"severity for {k!r} must lie in [0,1], got {s}")

    def union_mask(self) -> np.ndarray:
        out = np.zeros_like(next(iter(self.masks.values())), dtype=bool)
        for k in self.kinds:
            out |= self.masks[k]
        return out


@dataclass
class DegradedSample:
    clean: np.ndarray
    degraded: np.ndarray
    spec: DegradationSpec
    sample_id: str
    category: str = field(default="")


def gen_clean(seed: int, size: int) -> np.ndarray:
    """Procedural clean image: gradients, shapes and mid-frequency texture."""
    if size < 16:
        raise InvalidInputError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng([int(seed), 0xC1EA])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)

    c0, c1 = rng.uniform(0.4, 0.85, size=(2, 3))
    # Damp one channel per colour so clean scenes keep a dark channel.
    c0[rng.integers(3)] *= 0.5
    c1[rng.integers(3)] *= 0.5
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.clip(0.5 + (np.cos(theta) * (xx - 0.5) + np.sin(theta) * (yy - 0.5)), 0, 1)
    img = c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]

    for _ in range(rng.integers(10, 18)):
        color = rng.uniform(0.2, 0.95, size=3)
        color[rng.integers(3)] *= 0.4
        alpha = rng.uniform(0.6, 1.0)
        cx, cy = rng.uniform(0, 1, size=2)
        rx, ry = rng.uniform(0.05, 0.22, size=2)
        if rng.random() < 0.5:
            inside = (np.abs(xx - cx) < rx) & (np.abs(yy - cy) < ry)
        else:
            inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1.0
        img[inside] = (1 - alpha) * img[inside] + alpha * color

    texture = np.zeros((size, size))
    for _ in range(3):
        period = rng.uniform(10.0, 20.0) / (size - 1)
        phi = rng.uniform(0, np.pi)
        texture += rng.uniform(0.04, 0.07) * np.sin(
            2 * np.pi * (np.cos(phi) * xx + np.sin(phi) * yy) / period + rng.uniform(0, 2 * np.pi)
        )
    img = img + texture[..., None] + rng.normal(0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def random_mask(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Binary mask covering roughly 20-60% of the frame."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    shape = rng.integers(3)
    if shape == 0:
        w, h = rng.uniform(0.4, 0.7, size=2)
        x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        m = (xx >= x0) & (xx <= x0 + w) & (yy >= y0) & (yy <= y0 + h)
    elif shape == 1:
        cx, cy = rng.uniform(0.3, 0.7, size=2)
        rx, ry = rng.uniform(0.2, 0.38, size=2)
        m = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 < 1.0
    else:
        phi = rng.uniform(0, 2 * np.pi)
        offset = rng.uniform(0.0, 0.25)
        m = np.cos(phi) * (xx - 0.5) + np.sin(phi) * (yy - 0.5) > offset
    return m


def _rain_layer(rng: np.random.Generator, height: int, width: int, severity: float) -> np.ndarray:
    layer = np.zeros((height, width))
    angle = np.deg2rad(rng.uniform(-20, 20))
    n = int(0.03 * height * width * (0.5 + severity))
    starts = rng.uniform(0, 1, size=(n, 2)) * [height, width]
    lengths = rng.uniform(5, 14, size=n)
    bright = rng.uniform(0.5, 1.0, size=n)
    steps = np.linspace(0.0, 1.0, 16)
    ys = starts[:, :1] + np.outer(lengths, steps) * np.cos(angle)
    xs = starts[:, 1:] + np.outer(lengths, steps) * np.sin(angle)
    yi, xi = np.round(ys).astype(int), np.round(xs).astype(int)
    ok = (yi >= 0) & (yi < height) & (xi >= 0) & (xi < width)
    vals = np.broadcast_to(bright[:, None], yi.shape)
    np.maximum.at(layer, (yi[ok], xi[ok]), vals[ok])
    return 0.55 * severity * layer


def _snow_layer(rng: np.random.Generator, height: int, width: int, severity: float) -> np.ndarray:
    layer = np.zeros((height, width))
    for sigma, density in ((0.7, 0.02), (1.4, 0.006)):
        impulses = np.zeros((height, width))
        n = int(density * height * width * (0.5 + severity))
        yi = rng.integers(0, height, size=n)
        xi = rng.integers(0, width, size=n)
        np.add.at(impulses, (yi, xi), rng.uniform(0.6, 1.0, size=n))
        blobs = ndimage.gaussian_filter(impulses, sigma, mode="constant")
        layer += blobs * (2 * np.pi * sigma**2)
    return 0.8 * severity * np.clip(layer, 0, 1.2)


def apply_degradations(clean: np.ndarray, spec: DegradationSpec, sample_id: str = "") -> DegradedSample:
    clean = np.asarray(clean, dtype=np.float64)
    if clean.ndim != 3 or clean.shape[2] != 3:
        raise InvalidInputError(f"expected HxWx3 image, got shape {clean.shape}")
    h, w = clean.shape[:2]
    for k in spec.kinds:
        if spec.masks[k].shape != (h, w):
            raise InvalidInputError(f"mask for {k!r} has shape {spec.masks[k].shape}, image is {(h, w)}")

    rng = np.random.default_rng([int(spec.seed), 0xDE64])
    out = clean.copy()
    for kind in KINDS:
        if kind not in spec.kinds:
            continue
        s = float(spec.severities[kind])
        m = np.asarray(spec.masks[kind], dtype=bool)
        if kind == "lowlight":
            new = np.power(out, 1.0 + 2.0 * s)
        elif kind == "haze":
            t = 1.0 - 0.8 * s
            new = out * t + ATMOSPHERIC_LIGHT * (1.0 - t)
        elif kind == "rain":
            new = out + _rain_layer(rng, h, w, s)[..., None]
        else:
            new = out + _snow_layer(rng, h, w, s)[..., None]
        out = np.where(m[..., None], np.clip(new, 0.0, 1.0), out)
    return DegradedSample(clean=clean, degraded=out, spec=spec, sample_id=sample_id)


MAX_UNION_COVERAGE = 0.75


def random_spec(rng: np.random.Generator, kinds: tuple[str, ...], size: int, seed: int) -> DegradationSpec:
    severities = {k: float(rng.uniform(0.5, 1.0)) for k in kinds}
    # Redraw until some undamaged area remains to compare against.
    while True:
        masks = {k: random_mask(rng, size, size) for k in kinds}
        union = np.logical_or.reduce(list(masks.values()))
        if 0 < union.mean() <= MAX_UNION_COVERAGE:
            break
    return DegradationSpec(kinds=tuple(kinds), severities=severities, masks=masks, seed=seed)


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255.0) / 255.0


def make_sample(seed: int, size: int, category: str, sample_id: str = "") -> DegradedSample:
    """One paired sample; the clean image is pre-quantized to 8 bits so it survives PNG round-trips."""
    if category not in CATEGORIES:
        raise InvalidInputError(f"unknown category {category!r}")
    rng = np.random.default_rng([int(seed), 0x5A3E])
    clean = _quantize(gen_clean(seed, size))
    spec = random_spec(rng, CATEGORIES[category], size, seed)
    sample = apply_degradations(clean, spec, sample_id)
    sample.degraded = _quantize(sample.degraded)
    sample.category = category
    return sample


def allocate_categories(count: int, mix: dict[str, float], rng: np.random.Generator) -> list[str]:
    """Largest-remainder allocation of ``count`` labels to ``mix``, then shuffled."""
    names = list(mix)
    for n in names:
        if n not in CATEGORIES:
            raise InvalidInputError(f"unknown category {n!r}")
    weights = np.array([float(mix[n]) for n in names])
    if np.any(weights < 0) or weights.sum() <= 0:
        raise InvalidInputError("category mix needs non-negative weights with positive sum")
    exact = weights / weights.sum() * count
    counts = np.floor(exact).astype(int)
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[: count - counts.sum()]] += 1
    labels = [n for n, c in zip(names, counts) for _ in range(c)]
    rng.shuffle(labels)
    return labels


def _write_png(path: Path, img: np.ndarray) -> None:
    arr = np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def make_dataset(
    root: str | Path,
    count: int,
    size: int = 64,
    seed: int = 0,
    category_mix: dict[str, float] | None = None,
) -> list[str]:
    """Write ``count`` samples under ``root``; returns the sample ids in order."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    mix = category_mix or {c: 1.0 for c in CATEGORIES}
    labels = allocate_categories(count, mix, np.random.default_rng([int(seed), 0xCA7]))
    seeds = np.random.SeedSequence(int(seed)).generate_state(count, dtype=np.uint64)

    ids = []
    for i, (label, s) in enumerate(zip(labels, seeds)):
        sid = f"{i:05d}"
        sample = make_sample(int(s), size, label, sid)
        d = root / sid
        (d / "masks").mkdir(parents=True, exist_ok=True)
        _write_png(d / "clean.png", sample.clean)
        _write_png(d / "degraded.png", sample.degraded)
        for k in sample.spec.kinds:
            m = sample.spec.masks[k].astype(np.uint8) * 255
            Image.fromarray(m).save(d / "masks" / f"{k}.png", format="PNG", optimize=False)
        meta = {
            "sample_id": sid,
            "category": label,
            "kinds": list(sample.spec.kinds),
            "severities": {k: sample.spec.severities[k] for k in sample.spec.kinds},
            "seed": int(s),
        }
        (d / "spec.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        ids.append(sid)
    manifest = {"count": count, "size": size, "seed": int(seed), "mix": mix, "samples": ids}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ids


def load_sample(root: str | Path, sample_id: str) -> DegradedSample:
    d = Path(root) / sample_id
    meta = json.loads((d / "spec.json").read_text())
    masks = {}
    for k in meta["kinds"]:
        with Image.open(d / "masks" / f"{k}.png") as im:
            masks[k] = np.asarray(im) > 127
    spec = DegradationSpec(
        kinds=tuple(meta["kinds"]),
        severities={k: float(v) for k, v in meta["severities"].items()},
        masks=masks,
        seed=int(meta["seed"]),
    )
    return DegradedSample(
        clean=_read_png(d / "clean.png"),
        degraded=_read_png(d / "degraded.png"),
        spec=spec,
        sample_id=sample_id,
        category=meta.get("category", ""),
    )


def load_dataset(root: str | Path) -> list[DegradedSample]:
    root = Path(root)
    manifest = root / "manifest.json"
    if manifest.exists():
        ids = json.loads(manifest.read_text())["samples"]
    else:
        ids = sorted(p.name for p in root.iterdir() if (p / "spec.json").exists())
    return [load_sample(root, sid) for sid in ids]
