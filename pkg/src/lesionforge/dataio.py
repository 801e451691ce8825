"""Images, dataset manifests and the procedural synthetic dataset.

Manifests are JSON-lines files.  The first line is a header object::

    {"format": "lesionforge-manifest", "version": 1, "kind": "images", "seed": 7}

and every following line is one record.  Record paths are written relative
to the manifest's directory so a run directory can be moved or compared
byte-for-byte against another run.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from collections.abc import Iterable, Iterator
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

from lesionforge.errors import DataError
from lesionforge.seeding import derive_seed

MANIFEST_FORMAT = "lesionforge-manifest"
MANIFEST_VERSION = 1

LESION = "lesion"
NON_LESION = "non-lesion"
LABELS = (LESION, NON_LESION)
# "source" holds extra negatives reserved for synthesizing augmentations.
SPLITS = ("train", "val", "test", "source")
PROVENANCES = ("empirical", "generated")


@dataclass
class Image:
    """Grayscale image with intensities in [0, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DataError(f"image must be a non-empty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise DataError("image intensities must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class BoundingBox:
    """Half-open pixel rectangle ``[x_min, x_max) x [y_min, y_max)``."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    def is_valid_for(self, height: int, width: int) -> bool:
        return 0 <= self.x_min < self.x_max <= width and 0 <= self.y_min < self.y_max <= height

    def check(self, height: int, width: int) -> None:
        if not self.is_valid_for(height, width):
            raise DataError(f"bounding box {self} does not fit a {height}x{width} image")

    def contains(self, other: BoundingBox) -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )

    def to_list(self) -> list[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, values) -> BoundingBox:
        return cls(*(int(v) for v in values))


@dataclass
class DatasetRecord:
    image_id: str
    path: str
    label: str
    split: str
    body_part: str
    height: int
    width: int
    boxes: list[BoundingBox] = field(default_factory=list)
    provenance: str = "empirical"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.label not in LABELS:
            raise DataError(f"{self.image_id}: unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise DataError(f"{self.image_id}: unknown split {self.split!r}")
        if self.provenance not in PROVENANCES:
            raise DataError(f"{self.image_id}: unknown provenance {self.provenance!r}")
        if (self.label == LESION) != bool(self.boxes):
            raise DataError(f"{self.image_id}: lesion records need boxes, non-lesion records none")
        if self.provenance == "generated" and self.split != "train":
            raise DataError(f"{self.image_id}: generated images may only enter the train split")
        for box in self.boxes:
            box.check(self.height, self.width)

    @property
    def is_lesion(self) -> bool:
        return self.label == LESION

    def to_dict(self, base: Path | None = None) -> dict:
        d = asdict(self)
        d["boxes"] = [b.to_list() for b in self.boxes]
        if base is not None:
            d["path"] = os.path.relpath(self.path, base)
        if not self.extra:
            del d["extra"]
        return d

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> DatasetRecord:
        d = dict(d)
        d["boxes"] = [BoundingBox.from_list(b) for b in d.get("boxes", [])]
        if base is not None and not os.path.isabs(d["path"]):
            d["path"] = os.path.normpath(os.path.join(base, d["path"]))
        d.setdefault("extra", {})
        return cls(**d)


@dataclass
class DatasetManifest:
    records: list[DatasetRecord]
    seed: int = 0

    def __post_init__(self):
        ids = [r.image_id for r in self.records]
        dupes = [k for k, v in Counter(ids).items() if v > 1]
        if dupes:
            raise DataError(f"duplicate image ids in manifest: {dupes[:5]}")

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[DatasetRecord]:
        return iter(self.records)

    def split(self, name: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == name]

    def by_id(self) -> dict[str, DatasetRecord]:
        return {r.image_id: r for r in self.records}


# ---------------------------------------------------------------------------
# JSON-lines serialization


def write_jsonl(path, header: dict, rows: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.writelines(json.dumps(row, sort_keys=True) + "\n" for row in rows)


def read_jsonl(path) -> tuple[dict, list[dict]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"empty manifest: {path}")
    try:
        header = json.loads(lines[0])
        rows = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    if header.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{path} is not a lesionforge manifest")
    if header.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {header.get('version')}")
    return header, rows


def write_manifest(path, manifest: DatasetManifest) -> None:
    base = Path(path).resolve().parent
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "kind": "images", "seed": manifest.seed}
    write_jsonl(path, header, (r.to_dict(base) for r in manifest.records))


def read_manifest(path) -> DatasetManifest:
    header, rows = read_jsonl(path)
    if header.get("kind") != "images":
        raise DataError(f"{path}: expected an image manifest, got kind={header.get('kind')!r}")
    base = Path(path).resolve().parent
    return DatasetManifest([DatasetRecord.from_dict(r, base) for r in rows], seed=int(header.get("seed", 0)))


def manifest_summary(manifest: DatasetManifest | Iterable[DatasetRecord]) -> dict[str, dict[str, int]]:
    """Per-split lesion / non-lesion counts; every split is present even when empty."""
    counts = {s: {LESION: 0, NON_LESION: 0} for s in SPLITS}
    for rec in manifest:
        counts[rec.split][rec.label] += 1
    return counts


# ---------------------------------------------------------------------------
# image I/O


def load_image(path) -> Image:
    """Read a grayscale PNG/TIFF and map its stored bit depth linearly to [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "1":
                im = im.convert("L")
                mode = "L"
            if mode == "L":
                arr = np.asarray(im, dtype=np.float64) / 255.0
            elif mode.startswith("I;16"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif mode == "I":
                raw = np.asarray(im, dtype=np.int64)
                if raw.min() < 0 or raw.max() > 65535:
                    raise DataError(f"{path}: 32-bit integer image outside 16-bit range")
                arr = raw.astype(np.float64) / 65535.0
            else:
                raise DataError(f"{path}: not a grayscale image (mode {mode})")
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return Image(arr)


def save_image(image: Image | np.ndarray, path, bit_depth: int = 16) -> None:
    px = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bit_depth == 16:
        data = np.round(np.clip(px, 0.0, 1.0) * 65535.0).astype(np.uint16)
    elif bit_depth == 8:
        data = np.round(np.clip(px, 0.0, 1.0) * 255.0).astype(np.uint8)
    else:
        raise ValueError("bit_depth must be 8 or 16")
    PILImage.fromarray(data).save(path)


# ---------------------------------------------------------------------------
# synthetic dataset

# Shape families stand in for body parts: they differ in how much the bone's
# orientation, width, bend and position vary from image to image.
FAMILIES = {
    "humerus": dict(angle_sd=4.0, width_frac=(0.30, 0.36), bend=0.0, offset_sd=0.03),
    "tibia": dict(angle_sd=10.0, width_frac=(0.24, 0.38), bend=0.12, offset_sd=0.07),
    "femur": dict(angle_sd=18.0, width_frac=(0.26, 0.44), bend=0.25, offset_sd=0.10),
}


@dataclass
class SynthConfig:
    family: str = "humerus"
    n_pos: dict = field(default_factory=lambda: {"train": 30, "val": 20, "test": 50})
    n_neg: dict = field(default_factory=lambda: {"train": 1000, "val": 100, "test": 100, "source": 300})
    height_range: tuple = (96, 128)
    width_range: tuple = (48, 64)
    lesion_radius_range: tuple = (3.0, 6.0)
    lesion_amplitude_range: tuple = (0.10, 0.22)
    noise_sigma: float = 0.03
    texture_amplitude: float = 0.08
    seed: int = 0

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise DataError(f"unknown shape family {self.family!r}; choose from {sorted(FAMILIES)}")
        for name, counts in (("n_pos", self.n_pos), ("n_neg", self.n_neg)):
            for split, n in counts.items():
                if split not in SPLITS:
                    raise DataError(f"{name}: unknown split {split!r}")
                if int(n) < 0:
                    raise DataError(f"{name}[{split}] must be >= 0")
        if self.n_pos.get("source", 0):
            raise DataError("the source split holds non-lesion images only")
        for name in ("height_range", "width_range", "lesion_radius_range", "lesion_amplitude_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi or lo <= 0:
                raise DataError(f"{name} must satisfy 0 < low <= high, got {(lo, hi)}")
        if self.height_range[0] < 8 or self.width_range[0] < 8:
            raise DataError("synthetic images must be at least 8 pixels on each side")
        if 2 * self.lesion_radius_range[1] >= min(self.height_range[0], self.width_range[0]):
            raise DataError(
                f"lesion diameter {2 * self.lesion_radius_range[1]} does not fit the smallest image "
                f"({self.height_range[0]}x{self.width_range[0]})"
            )
        if self.noise_sigma < 0 or self.texture_amplitude < 0:
            raise DataError("noise parameters must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        d = dict(d)
        for key in ("height_range", "width_range", "lesion_radius_range", "lesion_amplitude_range"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


def render_bone(rng: np.random.Generator, height: int, width: int, family: str, cfg: SynthConfig):
    """Draw a bright elongated band with soft edges, a cortical rim and smooth texture.

    Returns ``(pixels, bone_profile, axis)`` where ``bone_profile`` is the band's
    [0, 1] occupancy map and ``axis`` parameterizes the centre line.
    """
    fam = FAMILIES[family]
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    theta = math.radians(rng.normal(0.0, fam["angle_sd"]))
    cx = width / 2 + rng.normal(0.0, fam["offset_sd"]) * width
    cy = height / 2
    half_w = 0.5 * width * rng.uniform(*fam["width_frac"])
    bend = rng.uniform(-fam["bend"], fam["bend"]) * width / height**2

    along = (yy - cy) * math.cos(theta) + (xx - cx) * math.sin(theta)
    across = (xx - cx) * math.cos(theta) - (yy - cy) * math.sin(theta) - bend * along**2
    d = np.abs(across) / half_w
    profile = np.exp(-(d**4))
    rim = 0.25 * np.exp(-(((d - 0.85) / 0.18) ** 2))

    base = rng.uniform(0.45, 0.6)
    background = rng.uniform(0.03, 0.08)
    texture = gaussian_filter(rng.normal(0.0, 1.0, (height, width)), sigma=3.0)
    texture *= cfg.texture_amplitude / max(texture.std(), 1e-12)
    px = background + profile * (base + rim + texture)
    return px, profile, (cx, cy, theta, half_w, bend)


def add_lesion(rng: np.random.Generator, px: np.ndarray, profile: np.ndarray, axis, cfg: SynthConfig):
    """Superimpose one soft-edged bright ellipse on the bone; returns (pixels, tight box)."""
    height, width = px.shape
    cx, cy, theta, half_w, bend = axis
    r_lo, r_hi = cfg.lesion_radius_range
    rx, ry = rng.uniform(r_lo, r_hi), rng.uniform(r_lo, r_hi)
    phi = rng.uniform(0.0, math.pi)
    ext_x = math.sqrt((rx * math.cos(phi)) ** 2 + (ry * math.sin(phi)) ** 2)
    ext_y = math.sqrt((rx * math.sin(phi)) ** 2 + (ry * math.cos(phi)) ** 2)

    # centre on the bone axis, kept far enough from the border that the box is tight
    for _ in range(100):
        s = rng.uniform(-0.35, 0.35) * height
        t = rng.uniform(-0.4, 0.4) * half_w + bend * s**2
        lx = cx + s * math.sin(theta) + t * math.cos(theta)
        ly = cy + s * math.cos(theta) - t * math.sin(theta)
        if ext_x + 1 <= lx <= width - ext_x - 1 and ext_y + 1 <= ly <= height - ext_y - 1:
            break
    else:
        lx, ly = width / 2, height / 2

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    u = (xx - lx) * math.cos(phi) + (yy - ly) * math.sin(phi)
    v = -(xx - lx) * math.sin(phi) + (yy - ly) * math.cos(phi)
    r = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    blob = 1.0 / (1.0 + np.exp((r - 1.0) / 0.12))
    amp = rng.uniform(*cfg.lesion_amplitude_range)
    px = px + amp * blob * np.maximum(profile, 0.5)

    box = BoundingBox(
        max(0, int(math.floor(lx - ext_x))),
        max(0, int(math.floor(ly - ext_y))),
        min(width, int(math.ceil(lx + ext_x)) + 1),
        min(height, int(math.ceil(ly + ext_y)) + 1),
    )
    return px, box


def synthesize_image(seed: int, cfg: SynthConfig, lesion: bool):
    rng = np.random.default_rng(seed)
    height = int(rng.integers(cfg.height_range[0], cfg.height_range[1] + 1))
    width = int(rng.integers(cfg.width_range[0], cfg.width_range[1] + 1))
    px, profile, axis = render_bone(rng, height, width, cfg.family, cfg)
    box = None
    if lesion:
        px, box = add_lesion(rng, px, profile, axis, cfg)
    px = px + rng.normal(0.0, cfg.noise_sigma, px.shape)
    return Image(np.clip(px, 0.0, 1.0)), box


def generate_synthetic_dataset(config: SynthConfig, out_dir, manifest_path=None) -> DatasetManifest:
    """Render the configured splits to 16-bit PNGs under ``out_dir/images`` and write a manifest.

    The manifest goes to ``manifest_path`` (default ``out_dir/dataset.jsonl``).

    Each image is seeded from ``(config.seed, image_id)`` alone, so output does
    not depend on generation order.
    """
    config.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory {out_dir} is not writable: {exc}") from exc

    records = []
    for split in SPLITS:
        for label, counts in ((LESION, config.n_pos), (NON_LESION, config.n_neg)):
            tag = "pos" if label == LESION else "neg"
            for idx in range(int(counts.get(split, 0))):
                image_id = f"{config.family}-{split}-{tag}-{idx:05d}"
                img, box = synthesize_image(derive_seed(config.seed, f"synth/{image_id}"), config, label == LESION)
                path = out_dir / "images" / f"{image_id}.png"
                save_image(img, path)
                records.append(
                    DatasetRecord(
                        image_id=image_id,
                        path=str(path.resolve()),
                        label=label,
                        split=split,
                        body_part=config.family,
                        height=img.height,
                        width=img.width,
                        boxes=[box] if box is not None else [],
                    )
                )
    manifest = DatasetManifest(records, seed=config.seed)
    write_manifest(manifest_path or out_dir / "dataset.jsonl", manifest)
    return manifest
