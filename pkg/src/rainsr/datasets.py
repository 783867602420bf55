"""Dataset ingestion, synthetic rain, and the procedural micro-dataset.

Training follows the unpaired regime: the sunny and rainy training folders
come from disjoint scenes and no file in one has a counterpart in the
other.  Only the eval split is paired (clean HR / rainy HR / rainy LR), so
that restoration quality can be measured against ground truth.

On-disk layout under a dataset root::

    <root>/sunny_hr/*.png    clean HR training images
    <root>/rainy_hr/*.png    rain-degraded HR training images (disjoint scenes)
    <root>/real_lr/*.png     bicubic /4 of held-out rainy images
    <root>/eval/*.png        paired triplets for metrics
    <root>/manifest.txt      key = value header plus per-split file tables
"""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DimensionError, EmptyDatasetError, IngestError, ManifestError
from .imaging import require_image, resample_matrix, resize_bicubic, to_model_range
from .png_io import quantize, read_png, write_png
from .rng import Stream, derive_seed

log = logging.getLogger(__name__)

DOMAIN_LABELS = ("sunny_hr", "rainy_hr", "real_lr")


@dataclass(frozen=True)
class RainParams:
    """Additive bright-streak rain model with global contrast dimming.

    ``synth_rain`` computes ``clamp((1 - contrast_dim) * img +
    contrast_dim * 0.5 + S)`` where S stacks ``streak_count`` anti-aliased
    line segments of the given length/width/angle, each with intensity
    ``opacity``, at positions drawn deterministically from ``seed``.
    """

    streak_count: int = 14
    length_px: float = 14.0
    width_px: float = 1.6
    angle_deg: float = 15.0
    opacity: float = 0.35
    contrast_dim: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.streak_count < 0:
            raise ValueError("streak_count must be >= 0")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError("opacity must be in [0, 1]")
        if not 0.0 <= self.contrast_dim < 1.0:
            raise ValueError("contrast_dim must be in [0, 1)")


def render_streak_mask(height: int, width: int, p: RainParams) -> np.ndarray:
    """Sum of anti-aliased streak segments as an (H, W) float64 mask."""
    mask = np.zeros((height, width), dtype=np.float64)
    if p.streak_count == 0 or p.opacity == 0.0:
        return mask
    stream = Stream(derive_seed(p.seed, "streaks"))
    ys = stream.uniform(p.streak_count) * (height - 1)
    xs = stream.uniform(p.streak_count) * (width - 1)
    ang = np.deg2rad(p.angle_deg)
    dy, dx = np.cos(ang), np.sin(ang)
    half = p.length_px / 2.0
    reach = half + p.width_px / 2.0 + 1.0
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    for cy, cx in zip(ys, xs):
        y0 = max(int(np.floor(cy - reach)), 0)
        y1 = min(int(np.ceil(cy + reach)) + 1, height)
        x0 = max(int(np.floor(cx - reach)), 0)
        x1 = min(int(np.ceil(cx + reach)) + 1, width)
        if y0 >= y1 or x0 >= x1:
            continue
        py = yy[y0:y1, x0:x1] - cy
        px = xx[y0:y1, x0:x1] - cx
        # distance to the centred segment of half-length `half`
        t = np.clip(py * dy + px * dx, -half, half)
        dist = np.hypot(py - t * dy, px - t * dx)
        cover = np.clip(p.width_px / 2.0 + 0.5 - dist, 0.0, 1.0)
        mask[y0:y1, x0:x1] += p.opacity * cover
    return mask


def synth_rain(img: np.ndarray, p: RainParams) -> np.ndarray:
    """Apply the rain model; pure function of (img, p)."""
    img = require_image(img)
    base = (1.0 - p.contrast_dim) * img + p.contrast_dim * 0.5
    mask = render_streak_mask(img.shape[0], img.shape[1], p)
    return np.clip(base + mask[:, :, None], 0.0, 1.0)


def synth_scene(size: int, seed: int) -> np.ndarray:
    """Procedural clean scene: gradient + shapes + smooth texture noise."""
    st = Stream(derive_seed(seed, "scene"))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / max(size - 1, 1)
    ang = st.uniform() * 2.0 * np.pi
    proj = (yy - 0.5) * np.cos(ang) + (xx - 0.5) * np.sin(ang) + 0.5
    c0 = 0.15 + 0.7 * st.uniform(3)
    c1 = 0.15 + 0.7 * st.uniform(3)
    img = proj[:, :, None] * c1 + (1.0 - proj[:, :, None]) * c0

    n_shapes = 2 + st.integers(4)
    for _ in range(n_shapes):
        colour = 0.1 + 0.8 * st.uniform(3)
        cy = st.uniform() * size
        cx = st.uniform() * size
        r = size * (0.08 + 0.17 * st.uniform())
        if st.uniform() < 0.5:
            cover = np.clip(r + 0.5 - np.hypot(yy * (size - 1) - cy,
                                               xx * (size - 1) - cx), 0.0, 1.0)
        else:
            hh = r * (0.6 + 0.8 * st.uniform())
            dy = np.abs(yy * (size - 1) - cy)
            dx = np.abs(xx * (size - 1) - cx)
            cover = np.clip(r + 0.5 - dx, 0, 1) * np.clip(hh + 0.5 - dy, 0, 1)
        img = img * (1.0 - cover[:, :, None]) + colour * cover[:, :, None]

    coarse = st.normal((8, 8, 3)) * 0.035
    up = resample_matrix(8, size)
    tex = np.tensordot(up, coarse, axes=(1, 0))
    tex = np.tensordot(up, tex.transpose(1, 0, 2), axes=(1, 0)).transpose(1, 0, 2)
    return np.clip(img + tex, 0.02, 0.98)


@dataclass
class DatasetIndex:
    """Ordered index over one domain folder.

    Entries are (file name, height, width) sorted byte-wise lexicographically
    by name; ``skipped`` lists (name, reason) for files that were present but
    not decodable as 8-bit RGB PNG.
    """

    domain_label: str
    root: str
    entries: list[tuple[str, int, int]]
    skipped: list[tuple[str, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def path(self, i: int) -> str:
        return os.path.join(self.root, self.entries[i][0])

    def load(self, i: int) -> np.ndarray:
        return read_png(self.path(i))


def ingest_folder(path: str, domain_label: str,
                  expected_count: int | None = None) -> DatasetIndex:
    """Index every decodable image in a folder.

    Undecodable files are reported (logged and listed on the index), never
    silently dropped; unreadable files raise IngestError naming the file.
    """
    if domain_label not in DOMAIN_LABELS:
        raise ValueError(f"unknown domain label {domain_label!r}")
    if not os.path.isdir(path):
        raise IngestError(f"not a directory: {path}")
    names = sorted(
        (n for n in os.listdir(path) if os.path.isfile(os.path.join(path, n))),
        key=lambda n: n.encode("utf-8"),
    )
    entries: list[tuple[str, int, int]] = []
    skipped: list[tuple[str, str]] = []
    for name in names:
        full = os.path.join(path, name)
        try:
            img = read_png(full)
        except IngestError as exc:
            skipped.append((name, str(exc)))
            log.warning("skipping undecodable file %s: %s", full, exc)
            continue
        except OSError as exc:
            raise IngestError(f"cannot read {full}: {exc}") from exc
        entries.append((name, img.shape[0], img.shape[1]))
    if not entries:
        raise EmptyDatasetError(
            f"{path}: no decodable images (skipped {len(skipped)})"
        )
    if expected_count is not None and len(entries) != expected_count:
        raise IngestError(
            f"{path}: expected {expected_count} images for {domain_label}, "
            f"found {len(entries)}"
        )
    return DatasetIndex(domain_label, path, entries, skipped)


@dataclass(frozen=True)
class MicroSizes:
    sunny: int = 40
    rainy: int = 40
    real_lr: int = 40
    eval: int = 8


@dataclass
class MicroDatasetManifest:
    """What make_micro_dataset wrote: counts, rain model, and file tables."""

    seed: int
    scene_size: int
    rain: RainParams
    paired_eval: bool
    counts: dict[str, int]
    tables: dict[str, list[tuple[str, ...]]]

    def eval_triplets(self) -> list[tuple[str, str, str, str]]:
        return [tuple(row) for row in self.tables["eval"]]


def _manifest_text(man: MicroDatasetManifest) -> str:
    lines = [
        "format = rainsr-micro-v1",
        f"seed = {man.seed}",
        f"scene_size = {man.scene_size}",
        f"paired_eval = {'true' if man.paired_eval else 'false'}",
    ]
    for split in ("sunny_hr", "rainy_hr", "real_lr", "eval"):
        lines.append(f"counts.{split} = {man.counts[split]}")
    r = man.rain
    lines += [
        f"rain.streak_count = {r.streak_count}",
        f"rain.length_px = {r.length_px!r}",
        f"rain.width_px = {r.width_px!r}",
        f"rain.angle_deg = {r.angle_deg!r}",
        f"rain.opacity = {r.opacity!r}",
        f"rain.contrast_dim = {r.contrast_dim!r}",
        f"rain.seed = {r.seed}",
    ]
    for split in ("sunny_hr", "rainy_hr", "real_lr", "eval"):
        lines.append(f"[{split}]")
        for row in man.tables[split]:
            lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def write_manifest(path: str, man: MicroDatasetManifest) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_manifest_text(man))


def read_manifest(path: str) -> MicroDatasetManifest:
    if not os.path.isfile(path):
        raise ManifestError(f"manifest not found: {path}")
    header: dict[str, str] = {}
    tables: dict[str, list[tuple[str, ...]]] = {}
    section = None
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1]
                tables[section] = []
            elif section is None:
                key, _, value = line.partition("=")
                header[key.strip()] = value.strip()
            else:
                tables[section].append(tuple(line.split()))
    try:
        rain = RainParams(
            streak_count=int(header["rain.streak_count"]),
            length_px=float(header["rain.length_px"]),
            width_px=float(header["rain.width_px"]),
            angle_deg=float(header["rain.angle_deg"]),
            opacity=float(header["rain.opacity"]),
            contrast_dim=float(header["rain.contrast_dim"]),
            seed=int(header["rain.seed"]),
        )
        counts = {
            split: int(header[f"counts.{split}"])
            for split in ("sunny_hr", "rainy_hr", "real_lr", "eval")
        }
        man = MicroDatasetManifest(
            seed=int(header["seed"]),
            scene_size=int(header["scene_size"]),
            rain=rain,
            paired_eval=header.get("paired_eval", "true") == "true",
            counts=counts,
            tables=tables,
        )
    except KeyError as exc:
        raise ManifestError(f"manifest missing key {exc}") from None
    for split, n in man.counts.items():
        if len(tables.get(split, [])) != n:
            raise ManifestError(f"manifest table {split} does not match count")
    return man


def make_micro_dataset(out_dir: str, base_seed: int,
                       sizes: MicroSizes = MicroSizes(),
                       scene_size: int = 64,
                       rain: RainParams | None = None) -> MicroDatasetManifest:
    """Generate the desk-scale dataset; byte-identical for identical inputs.

    Train splits come from disjoint scene ids (unpaired); the eval split
    pairs each rainy LR with its clean HR.  The stored rainy LR is the
    bicubic /4 of the *quantised* rainy HR, so recomputing it from the
    written files reproduces it exactly.
    """
    rain = RainParams(seed=derive_seed(base_seed, "rain")) if rain is None else rain
    for sub in ("sunny_hr", "rainy_hr", "real_lr", "eval"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)

    tables: dict[str, list[tuple[str, ...]]] = {k: [] for k in
                                                ("sunny_hr", "rainy_hr", "real_lr", "eval")}
    next_id = 0

    def scene_for(sid: int) -> np.ndarray:
        return synth_scene(scene_size, derive_seed(base_seed, "scene", sid))

    def rained(img: np.ndarray, sid: int) -> np.ndarray:
        per_img = dataclasses.replace(rain, seed=derive_seed(rain.seed, "img", sid))
        return synth_rain(img, per_img)

    for _ in range(sizes.sunny):
        sid = next_id
        next_id += 1
        name = f"scene-{sid:04d}.png"
        write_png(os.path.join(out_dir, "sunny_hr", name), scene_for(sid))
        tables["sunny_hr"].append((f"scene-{sid:04d}", f"sunny_hr/{name}"))

    for _ in range(sizes.rainy):
        sid = next_id
        next_id += 1
        name = f"scene-{sid:04d}.png"
        write_png(os.path.join(out_dir, "rainy_hr", name),
                  rained(scene_for(sid), sid))
        tables["rainy_hr"].append((f"scene-{sid:04d}", f"rainy_hr/{name}"))

    for _ in range(sizes.real_lr):
        sid = next_id
        next_id += 1
        name = f"scene-{sid:04d}.png"
        rainy_q = quantize(rained(scene_for(sid), sid))
        lr = resize_bicubic(rainy_q, Fraction(1, 4))
        write_png(os.path.join(out_dir, "real_lr", name), lr)
        tables["real_lr"].append((f"scene-{sid:04d}", f"real_lr/{name}"))

    for _ in range(sizes.eval):
        sid = next_id
        next_id += 1
        stem = f"scene-{sid:04d}"
        clean = scene_for(sid)
        rainy = rained(clean, sid)
        rainy_q = quantize(rainy)
        lr = resize_bicubic(rainy_q, Fraction(1, 4))
        paths = (f"eval/{stem}_clean_hr.png", f"eval/{stem}_rainy_hr.png",
                 f"eval/{stem}_rainy_lr.png")
        write_png(os.path.join(out_dir, paths[0]), clean)
        write_png(os.path.join(out_dir, paths[1]), rainy_q)
        write_png(os.path.join(out_dir, paths[2]), lr)
        tables["eval"].append((stem,) + paths)

    man = MicroDatasetManifest(
        seed=base_seed,
        scene_size=scene_size,
        rain=rain,
        paired_eval=True,
        counts={"sunny_hr": sizes.sunny, "rainy_hr": sizes.rainy,
                "real_lr": sizes.real_lr, "eval": sizes.eval},
        tables=tables,
    )
    write_manifest(os.path.join(out_dir, "manifest.txt"), man)
    return man


class BatchStream:
    """Infinite deterministic stream of model-range training batches.

    ``batch(i)`` is a pure function of (index contents, patch size, batch
    size, seed, i): file choices and patch corners for batch ``i`` come from
    a stream seeded by ``derive_seed(seed, "batch", i)``, so any batch can
    be recomputed in isolation (checkpoint resume relies on this).
    Batches have shape (batch_size, 3, patch, patch), float32 in [-1, 1].
    """

    _MAX_CACHED = 64

    def __init__(self, index: DatasetIndex, patch_size: int, batch_size: int,
                 seed: int):
        too_small = [e for e in index.entries
                     if e[1] < patch_size or e[2] < patch_size]
        if too_small:
            raise DimensionError(
                f"{len(too_small)} image(s) smaller than patch {patch_size}, "
                f"first: {too_small[0][0]}"
            )
        self.index = index
        self.patch_size = patch_size
        self.batch_size = batch_size
        self.seed = seed
        self._cache: dict[int, np.ndarray] = {}

    def _tensor(self, i: int) -> np.ndarray:
        t = self._cache.get(i)
        if t is None:
            t = to_model_range(self.index.load(i)).astype(np.float32)
            if len(self._cache) >= self._MAX_CACHED:
                self._cache.pop(next(iter(self._cache)))
            self._cache[i] = t
        return t

    def batch(self, i: int) -> np.ndarray:
        st = Stream(derive_seed(self.seed, "batch", i))
        ps = self.patch_size
        out = np.empty((self.batch_size, 3, ps, ps), dtype=np.float32)
        for j in range(self.batch_size):
            fi = st.integers(len(self.index))
            img = self._tensor(fi)
            top = st.integers(img.shape[1] - ps + 1)
            left = st.integers(img.shape[2] - ps + 1)
            out[j] = img[:, top : top + ps, left : left + ps]
        return out

    def __iter__(self):
        i = 0
        while True:
            yield self.batch(i)
            i += 1
