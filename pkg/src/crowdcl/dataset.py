"""Crowd images, head annotations and Gaussian density maps.

On-disk layout read by :func:`load_dataset`::

    root/
      images/<stem>.png            (any format Pillow reads)
      annotations/<stem>.json      {"image": "<stem>.png", "heads": [[x, y], ...]}
      <manifest_name>.json         optional: {"name": ..., "split": "train"|"test",
                                              "annotations": ["annotations/a.json", ...]}

Without a manifest file every image under ``images/`` is loaded and the split
defaults to ``train``.
"""

from __future__ import annotations

import json
import logging
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AnnotationParseError, InterfaceError, LoadError, ParameterError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
DENSITY_CACHE_MAGIC = b"CCDMAP01"
DEFAULT_SIGMA = 4.0
KERNEL_RADIUS_SIGMAS = 4.0


@dataclass(eq=False)
class AnnotatedSample:
    id: str
    image: np.ndarray  # H x W x C, float32 in [0, 1]
    heads: np.ndarray  # (n, 2) of (x, y) in image pixels
    source: str = "real"

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim == 2:
            self.image = self.image[:, :, None]
        self.heads = np.asarray(self.heads, dtype=np.float64).reshape(-1, 2)
        if self.source not in ("real", "synthetic"):
            raise ParameterError(f"unknown sample source {self.source!r}")
        h, w = self.image.shape[:2]
        xs, ys = self.heads[:, 0], self.heads[:, 1]
        if np.any((xs < 0) | (xs >= w) | (ys < 0) | (ys >= h)):
            raise ParameterError(f"sample {self.id}: head outside {w}x{h} image")

    @property
    def count(self) -> int:
        return len(self.heads)

    @property
    def shape(self):
        return self.image.shape

    def __eq__(self, other):
        if not isinstance(other, AnnotatedSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.source == other.source
            and np.array_equal(self.image, other.image)
            and np.array_equal(self.heads, other.heads)
        )


@dataclass
class DensityMap:
    values: np.ndarray  # H' x W', float32, persons per cell
    downsample_factor: int = 1

    @property
    def count(self) -> float:
        return float(self.values.sum(dtype=np.float64))

    @property
    def shape(self):
        return self.values.shape


@dataclass
class DatasetManifest:
    name: str
    split: str
    samples: list[AnnotatedSample]
    clamped_heads: int = 0

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ParameterError(f"split must be 'train' or 'test', got {self.split!r}")
        if not self.samples:
            raise ParameterError("manifest has no samples")
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ParameterError(f"duplicate sample ids in manifest {self.name!r}")

    @property
    def N(self) -> int:
        return len(self.samples)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> dict[str, AnnotatedSample]:
        return {s.id: s for s in self.samples}

    def subset(self, ids, name=None) -> "DatasetManifest":
        lookup = self.by_id()
        return DatasetManifest(name or self.name, self.split, [lookup[i] for i in ids])


# ---------------------------------------------------------------- loading


def _parse_heads(text: str, path: Path) -> tuple[str | None, np.ndarray]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(path, exc.lineno, exc.msg) from None
    if not isinstance(doc, dict) or "heads" not in doc:
        raise AnnotationParseError(path, 1, "expected an object with a 'heads' list")
    heads = doc["heads"]
    if not isinstance(heads, list):
        raise AnnotationParseError(path, _line_of_key(text, "heads"), "'heads' must be a list")
    for k, rec in enumerate(heads):
        ok = (
            isinstance(rec, list)
            and len(rec) == 2
            and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in rec)
            and all(math.isfinite(v) for v in rec)
        )
        if not ok:
            raise AnnotationParseError(
                path, _line_of_record(text, k), f"head record {k} must be [x, y] numbers, got {rec!r}"
            )
    image = doc.get("image")
    return image, np.asarray(heads, dtype=np.float64).reshape(-1, 2)


def _line_of_key(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _line_of_record(text: str, index: int) -> int:
    """Line number of element ``index`` of the top-level "heads" array."""
    m = re.search(r'"heads"\s*:\s*\[', text)
    if m is None:
        return 1
    decoder = json.JSONDecoder()
    pos = m.end()
    for k in range(index + 1):
        while pos < len(text) and text[pos] in " \t\r\n,":
            pos += 1
        start = pos
        if k == index:
            return text.count("\n", 0, start) + 1
        try:
            _, pos = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            return text.count("\n", 0, start) + 1
    return 1


def read_annotation(path) -> tuple[str | None, np.ndarray]:
    """Parse one annotation file, returning (image filename or None, heads)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise LoadError(f"cannot read annotation {path}: {exc}") from None
    return _parse_heads(text, path)


def write_annotation(path, image_name: str, heads) -> None:
    heads = np.asarray(heads, dtype=np.float64).reshape(-1, 2)
    doc = {"image": image_name, "heads": [[float(x), float(y)] for x, y in heads]}
    Path(path).write_text(json.dumps(doc, indent=1))


def read_image(path, size: tuple[int, int] | None = None) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None:
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise LoadError(f"cannot read image {path}: {exc}") from None


def clamp_heads(heads: np.ndarray, height: int, width: int) -> tuple[np.ndarray, int]:
    """Clamp out-of-bounds heads to the nearest in-bounds pixel.

    Returns the clamped array and how many heads were moved.
    """
    heads = np.array(heads, dtype=np.float64).reshape(-1, 2)
    xs, ys = heads[:, 0], heads[:, 1]
    bad = (xs < 0) | (xs >= width) | (ys < 0) | (ys >= height)
    heads[:, 0] = np.where((xs < 0) | (xs >= width), np.clip(np.floor(xs), 0, width - 1), xs)
    heads[:, 1] = np.where((ys < 0) | (ys >= height), np.clip(np.floor(ys), 0, height - 1), ys)
    return heads, int(bad.sum())


def load_dataset(root_path, manifest_name: str = "train", image_size=None) -> DatasetManifest:
    """Load images and head annotations under ``root_path``.

    ``image_size`` (H, W) resizes every image and rescales its heads; by
    default images keep their native size. Out-of-bounds heads are clamped
    and tallied in ``manifest.clamped_heads``.
    """
    root = Path(root_path)
    image_dir = root / "images"
    manifest_file = root / f"{manifest_name}.json"
    split = "train"
    name = manifest_name

    if manifest_file.is_file():
        try:
            doc = json.loads(manifest_file.read_text())
        except json.JSONDecodeError as exc:
            raise AnnotationParseError(manifest_file, exc.lineno, exc.msg) from None
        split = doc.get("split", "train")
        name = doc.get("name", manifest_name)
        pairs = []
        for rel in doc.get("annotations", []):
            ann_path = root / rel
            if not ann_path.is_file():
                raise LoadError(f"annotation file {ann_path} listed in {manifest_file} is missing")
            image_name, heads = read_annotation(ann_path)
            if image_name is None:
                raise LoadError(f"{ann_path} does not name its image")
            pairs.append((image_dir / image_name, heads))
    else:
        if not image_dir.is_dir():
            raise LoadError(f"no images directory under {root}")
        images = sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        pairs = []
        for img_path in images:
            ann_path = root / "annotations" / f"{img_path.stem}.json"
            if not ann_path.is_file():
                raise LoadError(f"missing annotation file for image {img_path.name}")
            pairs.append((img_path, read_annotation(ann_path)[1]))

    if not pairs:
        raise LoadError(f"no samples found under {root}")

    samples, clamped = [], 0
    for img_path, heads in pairs:
        if not img_path.is_file():
            raise LoadError(f"image {img_path} not found")
        image = read_image(img_path)
        if image_size is not None:
            h0, w0 = image.shape[:2]
            image = read_image(img_path, image_size)
            heads = heads * np.array([image_size[1] / w0, image_size[0] / h0])
        heads, moved = clamp_heads(heads, image.shape[0], image.shape[1])
        clamped += moved
        samples.append(AnnotatedSample(img_path.stem, image, heads, "real"))
    if clamped:
        log.warning("%s: clamped %d out-of-bounds head(s)", root, clamped)
    return DatasetManifest(name, split, samples, clamped_heads=clamped)


def save_dataset(manifest: DatasetManifest, root_path, manifest_name: str | None = None) -> Path:
    """Write ``manifest`` in the layout :func:`load_dataset` reads.

    Images are quantized to 8-bit PNG.
    """
    from PIL import Image

    root = Path(root_path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    rels = []
    for s in manifest.samples:
        img = np.clip(np.rint(s.image * 255.0), 0, 255).astype(np.uint8)
        if img.shape[2] == 1:
            img = img[:, :, 0]
        Image.fromarray(img).save(root / "images" / f"{s.id}.png")
        rel = f"annotations/{s.id}.json"
        write_annotation(root / rel, f"{s.id}.png", s.heads)
        rels.append(rel)
    manifest_name = manifest_name or manifest.split
    out = root / f"{manifest_name}.json"
    out.write_text(json.dumps({"name": manifest.name, "split": manifest.split, "annotations": rels}, indent=1))
    return out


def convert_mat_annotation(mat_path, image_name: str, out_path) -> int:
    """Convert a MATLAB head-point file (ShanghaiTech style) to the JSON format.

    The first numeric (n, 2) array found in the file is taken as the head
    list. Returns the number of heads written.
    """
    from scipy.io import loadmat

    def find_points(obj):
        if isinstance(obj, np.ndarray):
            if obj.dtype.kind in "fiu" and obj.ndim == 2 and obj.shape[1] == 2:
                return obj
            if obj.dtype.kind in "OV":
                for item in obj.flat:
                    if obj.dtype.names:
                        for name in obj.dtype.names:
                            found = find_points(item[name])
                            if found is not None:
                                return found
                    else:
                        found = find_points(item)
                        if found is not None:
                            return found
        return None

    mat = loadmat(mat_path)
    for key, value in mat.items():
        if key.startswith("__"):
            continue
        pts = find_points(value)
        if pts is not None:
            write_annotation(out_path, image_name, pts)
            return len(pts)
    raise LoadError(f"no (n, 2) point array found in {mat_path}")


# ----------------------------------------------------------- density maps


def generate_density_map(sample: AnnotatedSample, sigma: float = DEFAULT_SIGMA, downsample_factor: int = 1) -> DensityMap:
    """Place one renormalized, truncated Gaussian per head.

    ``sigma`` is in full-resolution pixels and shrinks with the factor. When
    the factor does not divide H or W the image is treated as zero-padded
    on the bottom/right to the next multiple, so the map is
    ceil(H/f) x ceil(W/f). Each head contributes exactly unit mass.
    """
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    f = int(downsample_factor)
    if f < 1 or f != downsample_factor:
        raise ParameterError(f"downsample_factor must be a positive integer, got {downsample_factor}")
    h, w = sample.image.shape[:2]
    hd, wd = -(-h // f), -(-w // f)
    values = np.zeros((hd, wd), dtype=np.float64)
    s = sigma / f
    radius = max(1, math.ceil(KERNEL_RADIUS_SIGMAS * s))

    for x, y in sample.heads:
        cx, cy = x / f, y / f
        ix = min(int(cx), wd - 1)
        iy = min(int(cy), hd - 1)
        x0, x1 = max(0, ix - radius), min(wd, ix + radius + 1)
        y0, y1 = max(0, iy - radius), min(hd, iy + radius + 1)
        dx = np.arange(x0, x1) + 0.5 - cx
        dy = np.arange(y0, y1) + 0.5 - cy
        wx = np.exp(-(dx * dx) / (2 * s * s))
        wy = np.exp(-(dy * dy) / (2 * s * s))
        wx[np.abs(dx) > KERNEL_RADIUS_SIGMAS * s] = 0.0
        wy[np.abs(dy) > KERNEL_RADIUS_SIGMAS * s] = 0.0
        total = wx.sum() * wy.sum()
        if total > 0 and math.isfinite(total):
            values[y0:y1, x0:x1] += np.outer(wy, wx) / total
        else:
            values[iy, ix] += 1.0
    return DensityMap(values.astype(np.float32), f)


def write_density_cache(path, dmap: DensityMap) -> None:
    values = np.ascontiguousarray(dmap.values, dtype="<f4")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(DENSITY_CACHE_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(values.tobytes(order="C"))


def read_density_cache(path, downsample_factor: int = 1) -> DensityMap:
    data = Path(path).read_bytes()
    if data[:8] != DENSITY_CACHE_MAGIC:
        raise LoadError(f"{path}: bad density cache magic {data[:8]!r}")
    h, w = struct.unpack_from("<II", data, 8)
    body = data[16:]
    if len(body) != 4 * h * w:
        raise LoadError(f"{path}: expected {h * w} floats, found {len(body) // 4}")
    values = np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)
    return DensityMap(values, downsample_factor)


# -------------------------------------------------------------- synthetic


def synthesize_dataset(
    n_samples: int,
    count_range: tuple[int, int] = (5, 50),
    image_size: tuple[int, int] = (64, 64),
    seed: int = 0,
    split: str = "train",
    name: str | None = None,
    channels: int = 3,
    blob_sigma: float = 1.5,
) -> DatasetManifest:
    """Render blob images at random head positions over background noise.

    Head counts are uniform in ``count_range`` (inclusive); head positions are
    uniform over the image. Deterministic for a fixed seed.
    """
    if n_samples < 1:
        raise ParameterError("n_samples must be positive")
    lo, hi = count_range
    if lo < 0 or hi < lo:
        raise ParameterError(f"invalid count_range {count_range}")
    h, w = image_size
    name = name or f"synthetic-s{seed}"
    rng = np.random.default_rng(seed)
    yy = np.arange(h)[:, None] + 0.5
    xx = np.arange(w)[None, :] + 0.5

    samples = []
    for i in range(n_samples):
        count = int(rng.integers(lo, hi + 1))
        heads = np.column_stack([rng.uniform(0, w, count), rng.uniform(0, h, count)])
        image = rng.uniform(0.0, 0.25, size=(h, w, channels))
        tint = rng.uniform(0.6, 1.0, size=channels)
        if count:
            d2 = (xx[None] - heads[:, 0, None, None]) ** 2 + (yy[None] - heads[:, 1, None, None]) ** 2
            blobs = np.exp(-d2 / (2 * blob_sigma**2)).sum(axis=0)
            image = image + 0.7 * blobs[:, :, None] * tint
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        # x/y drawn in [0, w) can round up to w in float64 only at the edge
        heads = np.minimum(heads, np.nextafter(np.array([w, h], dtype=np.float64), 0))
        samples.append(AnnotatedSample(f"{name}-{i:05d}", image, heads, "synthetic"))
    return DatasetManifest(name, split, samples)


# --------------------------------------------------------------- batching


def pad_to_multiple(image: np.ndarray, multiple: int) -> np.ndarray:
    """Zero-pad an H x W x C image on the bottom/right to multiples of ``multiple``."""
    h, w = image.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return image
    return np.pad(image, ((0, ph), (0, pw), (0, 0)))


def image_stack(manifest, multiple: int = 1) -> np.ndarray:
    """All images as one float32 (n, C, H, W) array, padded to ``multiple``."""
    shapes = {s.image.shape for s in manifest}
    if len(shapes) != 1:
        raise InterfaceError(
            f"images in {manifest.name!r} have {len(shapes)} different shapes; "
            "load with a fixed image_size to batch them"
        )
    return np.stack([pad_to_multiple(s.image, multiple).transpose(2, 0, 1) for s in manifest]).astype(np.float32)


def density_stack(manifest, sigma: float, downsample_factor: int) -> np.ndarray:
    """Ground-truth density maps as one float32 (n, H', W') array."""
    return np.stack([generate_density_map(s, sigma, downsample_factor).values for s in manifest])
