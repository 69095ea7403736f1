"""Dataset ingestion and synthetic domain-shift generation.

Real corpora are directory-per-class image trees with a `split.tsv` manifest
(rows `class_name<TAB>split`, split in {base, val, novel}). The synthetic
generator produces that same layout: base classes are composed arrangements
of 2-3 primitive glyphs (class identity is the arrangement), novel classes
come in three styles with increasing domain distance from the base set:

* shape-composition: new glyph arrangements, base-like rendering
* sketch: new arrangements with darker fills and a thin outline accent
* texture: dense full-canvas stripes or dot lattices, no composition at all
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .exceptions import (
    ConfigError,
    IoFailure,
    MissingSample,
    MissingSplitFile,
    OverlappingSplits,
)

SPLITS = ("base", "val", "novel")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# supersampling factor for anti-aliased glyph rendering
_SS = 4
GLYPHS = ("disc", "ring", "square", "triangle", "cross")

# rng stream tags so per-class and per-sample draws never collide
_STREAM_BASE = 0
_STREAM_NOVEL = 1


@dataclass(frozen=True)
class DatasetManifest:
    """Validated view of a dataset tree: classes, splits, and sample paths."""

    root: Path
    image_size: tuple
    classes: tuple
    split_of: dict
    samples: dict

    def classes_in(self, split: str) -> tuple:
        return tuple(c for c in self.classes if self.split_of[c] == split)

    def count(self, split: str) -> int:
        return sum(len(self.samples[c]) for c in self.classes_in(split))


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of one synthetic dataset; generation is pure in the seed."""

    num_base_classes: int
    num_novel_classes: int
    samples_per_class: int
    image_size: int = 32
    domain_style: str = "texture"
    noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_base_classes < 0 or self.num_novel_classes < 0:
            raise ConfigError("class counts must be non-negative")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        if self.domain_style not in ("shape-composition", "texture", "sketch"):
            raise ConfigError(f"unknown domain_style {self.domain_style!r}")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")


@dataclass(frozen=True)
class ArrayDataset:
    """In-memory split: images in [0, 1], integer labels, class names."""

    images: np.ndarray  # (N, H, W, C) float32
    labels: np.ndarray  # (N,) int64
    class_names: tuple

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images and labels disagree")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


# ---------------------------------------------------------------------------
# manifest loading
# ---------------------------------------------------------------------------

def load_manifest(root) -> DatasetManifest:
    """Read `root/split.tsv`, discover per-class images, validate splits."""
    root = Path(root)
    tsv = root / "split.tsv"
    if not tsv.is_file():
        raise MissingSplitFile(f"no split.tsv under {root}")
    split_of = {}
    for lineno, line in enumerate(tsv.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ConfigError(f"split.tsv line {lineno}: expected 2 fields")
        name, split = parts
        if split not in SPLITS:
            raise ConfigError(
                f"split.tsv line {lineno}: split must be one of {SPLITS}"
            )
        if name in split_of:
            raise OverlappingSplits(
                f"class {name!r} assigned to both {split_of[name]!r} "
                f"and {split!r}"
            )
        split_of[name] = split
    if not split_of:
        raise MissingSplitFile(f"{tsv} lists no classes")

    classes = tuple(sorted(split_of))
    samples = {}
    for name in classes:
        class_dir = root / name
        if not class_dir.is_dir():
            raise MissingSample(f"class directory missing: {class_dir}")
        paths = tuple(
            sorted(
                p for p in class_dir.iterdir()
                if p.suffix.lower() in IMAGE_SUFFIXES
            )
        )
        if not paths:
            raise MissingSample(f"class {name!r} has no images")
        samples[name] = paths

    with Image.open(samples[classes[0]][0]) as im:
        image_size = (im.height, im.width)
    return DatasetManifest(
        root=root, image_size=image_size, classes=classes,
        split_of=split_of, samples=samples,
    )


def load_image(path, size=None) -> np.ndarray:
    """Read one image as float32 in [0, 1], shape (H, W, 1) grayscale."""
    path = Path(path)
    if not path.is_file():
        raise MissingSample(f"sample vanished: {path}")
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and (im.height, im.width) != tuple(size):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[..., None]


def load_split(manifest: DatasetManifest, split: str, size=None) -> ArrayDataset:
    """Materialize one split as arrays; labels follow class-name order."""
    names = manifest.classes_in(split)
    if size is None:
        size = manifest.image_size
    images, labels = [], []
    for label, name in enumerate(names):
        for path in manifest.samples[name]:
            images.append(load_image(path, size))
            labels.append(label)
    if not images:
        return ArrayDataset(
            images=np.zeros((0, size[0], size[1], 1), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
            class_names=names,
        )
    return ArrayDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        class_names=names,
    )


def channel_stats(images: np.ndarray) -> tuple:
    """Per-channel mean and std (floored) for input normalization."""
    mean = images.mean(axis=(0, 1, 2))
    std = np.maximum(images.std(axis=(0, 1, 2)), 1e-6)
    return mean.astype(np.float32), std.astype(np.float32)


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip and random crop with 4-pixel zero padding."""
    pad = 4
    batch, h, w, c = images.shape
    padded = np.zeros((batch, h + 2 * pad, w + 2 * pad, c), dtype=images.dtype)
    padded[:, pad:pad + h, pad:pad + w] = images
    out = np.empty_like(images)
    flips = rng.random(batch) < 0.5
    tops = rng.integers(0, 2 * pad + 1, size=batch)
    lefts = rng.integers(0, 2 * pad + 1, size=batch)
    for i in range(batch):
        crop = padded[i, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


# ---------------------------------------------------------------------------
# synthetic generation: glyph compositions and texture fields
# ---------------------------------------------------------------------------

def _regular_polygon(cx, cy, radius, sides, angle_deg):
    pts = []
    for i in range(sides):
        a = math.radians(angle_deg) + 2.0 * math.pi * i / sides
        pts.append((cx + radius * math.cos(a), cy + radius * math.sin(a)))
    return pts


def _bar(cx, cy, half_len, half_w, angle_deg):
    ca = math.cos(math.radians(angle_deg))
    sa = math.sin(math.radians(angle_deg))
    pts = []
    for dx, dy in ((-half_len, -half_w), (half_len, -half_w),
                   (half_len, half_w), (-half_len, half_w)):
        pts.append((cx + dx * ca - dy * sa, cy + dx * sa + dy * ca))
    return pts


def _draw_glyph(draw: ImageDraw.ImageDraw, kind, cx, cy, radius, angle,
                fill, outline=None, outline_width=0):
    """Render one primitive at supersampled canvas coordinates."""
    if kind == "disc":
        box = (cx - radius, cy - radius, cx + radius, cy + radius)
        draw.ellipse(box, fill=fill)
        if outline is not None:
            draw.ellipse(box, outline=outline, width=outline_width)
    elif kind == "ring":
        box = (cx - radius, cy - radius, cx + radius, cy + radius)
        width = max(2, int(round(radius * 0.4)))
        draw.ellipse(box, outline=fill, width=width)
    elif kind in ("square", "triangle"):
        sides = 4 if kind == "square" else 3
        offset = 45.0 if kind == "square" else -90.0
        pts = _regular_polygon(cx, cy, radius, sides, angle + offset)
        draw.polygon(pts, fill=fill)
        if outline is not None:
            draw.polygon(pts, outline=outline, width=outline_width)
    elif kind == "cross":
        half_w = radius * 0.28
        for extra in (0.0, 90.0):
            draw.polygon(_bar(cx, cy, radius, half_w, angle + extra),
                         fill=fill)
    else:  # pragma: no cover - catalog and GLYPHS stay in sync
        raise ValueError(f"unknown glyph {kind!r}")


def _composition_catalog(rng: np.random.Generator, size: int) -> dict:
    """Class identity: which glyphs sit at which cells of a 3x3 grid."""
    count = int(rng.integers(2, 4))
    cells = rng.choice(9, size=count, replace=False)
    anchors = []
    for cell in cells:
        row, col = divmod(int(cell), 3)
        anchors.append(((col + 0.5) / 3.0 * size, (row + 0.5) / 3.0 * size))
    kinds = [GLYPHS[int(k)] for k in rng.integers(0, len(GLYPHS), size=count)]
    radii = rng.uniform(0.10, 0.15, size=count) * size
    angles = rng.uniform(0.0, 360.0, size=count)
    return {"anchors": anchors, "kinds": kinds, "radii": radii,
            "angles": angles}


def _render_composition(catalog, sample_rng, size, noise, sketch):
    canvas = size * _SS
    im = Image.new("L", (canvas, canvas), 0)
    draw = ImageDraw.Draw(im)
    for (ax, ay), kind, radius, angle in zip(
        catalog["anchors"], catalog["kinds"], catalog["radii"],
        catalog["angles"],
    ):
        cx = (ax + sample_rng.uniform(-0.02, 0.02) * size) * _SS
        cy = (ay + sample_rng.uniform(-0.02, 0.02) * size) * _SS
        r = radius * sample_rng.uniform(0.85, 1.15) * _SS
        a = angle + sample_rng.uniform(-15.0, 15.0)
        if sketch:
            fill = int(sample_rng.integers(120, 185))
            outline = int(sample_rng.integers(220, 256))
            _draw_glyph(draw, kind, cx, cy, r, a, fill,
                        outline=outline, outline_width=_SS)
        else:
            fill = int(sample_rng.integers(200, 256))
            _draw_glyph(draw, kind, cx, cy, r, a, fill)
    small = im.resize((size, size), Image.LANCZOS)
    return _finish(np.asarray(small, dtype=np.float64), sample_rng, noise)


def _texture_catalog(rng: np.random.Generator, index: int) -> dict:
    """Class identity: one dense periodic pattern, stripes or dot lattice."""
    if index % 2 == 0:
        return {
            "kind": "stripes",
            "period": float(rng.uniform(4.0, 9.0)),
            "orientation": float(rng.uniform(0.0, 180.0)),
            "duty": float(rng.uniform(0.35, 0.6)),
        }
    return {
        "kind": "dots",
        "spacing": float(rng.uniform(6.0, 11.0)),
        "radius": float(rng.uniform(1.2, 2.4)),
    }


def _render_texture(catalog, sample_rng, size, noise):
    canvas = size * _SS
    value = int(sample_rng.integers(200, 256))
    if catalog["kind"] == "stripes":
        theta = math.radians(
            catalog["orientation"] + sample_rng.uniform(-4.0, 4.0)
        )
        period = catalog["period"] * _SS
        phase = sample_rng.uniform(0.0, period)
        ys, xs = np.mgrid[0:canvas, 0:canvas]
        proj = xs * math.cos(theta) + ys * math.sin(theta) + phase
        mask = (proj % period) < catalog["duty"] * period
        field = np.where(mask, value, 0).astype(np.uint8)
        im = Image.fromarray(field, mode="L")
    else:
        spacing = catalog["spacing"] * _SS
        radius = catalog["radius"] * _SS
        ox = sample_rng.uniform(0.0, spacing)
        oy = sample_rng.uniform(0.0, spacing)
        im = Image.new("L", (canvas, canvas), 0)
        draw = ImageDraw.Draw(im)
        y = oy - spacing
        row = 0
        while y < canvas + spacing:
            shift = spacing / 2.0 if row % 2 else 0.0
            x = ox - spacing + shift
            while x < canvas + spacing:
                draw.ellipse((x - radius, y - radius, x + radius, y + radius),
                             fill=value)
                x += spacing
            y += spacing
            row += 1
    small = im.resize((size, size), Image.LANCZOS)
    return _finish(np.asarray(small, dtype=np.float64), sample_rng, noise)


def _finish(pixels: np.ndarray, sample_rng, noise) -> Image.Image:
    if noise > 0:
        pixels = pixels + sample_rng.normal(0.0, noise * 255.0, pixels.shape)
    out = np.clip(np.rint(pixels), 0, 255).astype(np.uint8)
    return Image.fromarray(out, mode="L")


def _novel_catalog(spec: SynthSpec, rng: np.random.Generator, index: int):
    if spec.domain_style == "texture":
        return _texture_catalog(rng, index)
    return _composition_catalog(rng, spec.image_size)


def _render_novel(spec: SynthSpec, catalog, sample_rng):
    if spec.domain_style == "texture":
        return _render_texture(catalog, sample_rng, spec.image_size,
                               spec.noise)
    return _render_composition(catalog, sample_rng, spec.image_size,
                               spec.noise, sketch=spec.domain_style == "sketch")


def generate_synthetic(spec: SynthSpec, out_dir) -> DatasetManifest:
    """Write the dataset tree for `spec` under `out_dir` and load it back.

    All randomness derives from (seed, stream, class, sample) so regeneration
    with the same spec is byte-identical regardless of generation order.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = []
        for c in range(spec.num_base_classes):
            name = f"base{c:03d}"
            rows.append((name, "base"))
            class_rng = np.random.default_rng(
                [spec.seed, _STREAM_BASE, c]
            )
            catalog = _composition_catalog(class_rng, spec.image_size)
            class_dir = out_dir / name
            class_dir.mkdir(exist_ok=True)
            for s in range(spec.samples_per_class):
                sample_rng = np.random.default_rng(
                    [spec.seed, _STREAM_BASE, c, s]
                )
                im = _render_composition(
                    catalog, sample_rng, spec.image_size, spec.noise,
                    sketch=False,
                )
                im.save(class_dir / f"{name}_{s:04d}.png")
        for c in range(spec.num_novel_classes):
            name = f"novel{c:03d}"
            rows.append((name, "novel"))
            class_rng = np.random.default_rng(
                [spec.seed, _STREAM_NOVEL, c]
            )
            catalog = _novel_catalog(spec, class_rng, c)
            class_dir = out_dir / name
            class_dir.mkdir(exist_ok=True)
            for s in range(spec.samples_per_class):
                sample_rng = np.random.default_rng(
                    [spec.seed, _STREAM_NOVEL, c, s]
                )
                im = _render_novel(spec, catalog, sample_rng)
                im.save(class_dir / f"{name}_{s:04d}.png")
        lines = [f"{name}\t{split}" for name, split in sorted(rows)]
        (out_dir / "split.tsv").write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write dataset under {out_dir}: {exc}") from exc
    return load_manifest(out_dir)
