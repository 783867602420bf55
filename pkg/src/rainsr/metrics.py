"""Full-reference metrics and the paired-eval report.

PSNR and SSIM are computed in RGB, in 64-bit, with the conventions stated
in every report header: PSNR capped at 100 dB when the MSE vanishes; SSIM
is the single-scale index with an 11x11 Gaussian window (sigma 1.5),
K1 = 0.01, K2 = 0.03, peak 1, computed per channel over valid window
positions and averaged.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ManifestError
from .imaging import require_image, resize_bicubic
from .png_io import read_png, write_png

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 when MSE is zero."""
    a, b = require_image(a), require_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB)


def _gaussian_window(n: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _corr_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    t = sliding_window_view(x, len(g), axis=0) @ g
    return sliding_window_view(t, len(g), axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over channels and valid window positions."""
    a, b = require_image(a), require_image(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise DimensionError(
            f"ssim needs min dim >= {SSIM_WINDOW}, got {a.shape[:2]}"
        )
    g = _gaussian_window()
    c1 = SSIM_K1 * SSIM_K1
    c2 = SSIM_K2 * SSIM_K2
    vals = []
    for c in range(3):
        x = a[:, :, c].astype(np.float64)
        y = b[:, :, c].astype(np.float64)
        mx = _corr_valid(x, g)
        my = _corr_valid(y, g)
        vxx = _corr_valid(x * x, g) - mx * mx
        vyy = _corr_valid(y * y, g) - my * my
        vxy = _corr_valid(x * y, g) - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * vxy + c2)
        den = (mx * mx + my * my + c1) * (vxx + vyy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class MetricsRow:
    name: str
    psnr_sr: float
    ssim_sr: float
    psnr_bicubic: float
    ssim_bicubic: float


@dataclass
class MetricsReport:
    rows: list[MetricsRow]
    aggregates: dict[str, dict[str, float]]
    grid_paths: list[str] = field(default_factory=list)
    fingerprint: str = ""
    report_dir: str = ""

    def median_gain_db(self) -> float:
        return float(np.median([r.psnr_sr - r.psnr_bicubic for r in self.rows]))

    def median_gain_ssim(self) -> float:
        return float(np.median([r.ssim_sr - r.ssim_bicubic for r in self.rows]))


_COLUMNS = ("psnr_sr", "ssim_sr", "psnr_bicubic", "ssim_bicubic")


def _aggregate(rows: list[MetricsRow]) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {"mean": {}, "median": {}}
    for col in _COLUMNS:
        data = np.array([getattr(r, col) for r in rows], dtype=np.float64)
        out["mean"][col] = float(data.mean())
        out["median"][col] = float(np.median(data))
    return out


def _nearest4(img: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(img, 4, axis=0), 4, axis=1)


def render_grid(lr: np.ndarray, bicubic_up: np.ndarray, sr: np.ndarray,
                clean: np.ndarray) -> np.ndarray:
    """[nearest-enlarged LR | bicubic x4 | SR output | clean HR], 2px separators."""
    panels = [_nearest4(lr), bicubic_up, sr, clean]
    h = panels[0].shape[0]
    sep = np.ones((h, 2, 3), dtype=np.float64)
    parts: list[np.ndarray] = []
    for i, p in enumerate(panels):
        if p.shape[0] != h:
            raise DimensionError("grid panels must share a height")
        if i:
            parts.append(sep)
        parts.append(p)
    return np.concatenate(parts, axis=1)


def evaluate_pipeline(sr_fn, dataset_root: str, eval_triplets,
                      out_dir: str, fingerprint: str = "") -> MetricsReport:
    """Score ``sr_fn`` against the paired eval split and write the report.

    ``sr_fn`` maps an LR image to its 4x restoration; the bicubic x4 of the
    same LR input is scored as the baseline against the same clean ground
    truth.  Writes report.csv, header.txt, and grids/<name>.png.
    """
    os.makedirs(os.path.join(out_dir, "grids"), exist_ok=True)
    rows: list[MetricsRow] = []
    grid_paths: list[str] = []
    for name, clean_rel, _rainy_hr_rel, lr_rel in eval_triplets:
        clean_path = os.path.join(dataset_root, clean_rel)
        lr_path = os.path.join(dataset_root, lr_rel)
        if not os.path.isfile(clean_path):
            raise ManifestError(f"missing ground truth {clean_path}")
        if not os.path.isfile(lr_path):
            raise ManifestError(f"missing rainy LR {lr_path}")
        clean = read_png(clean_path)
        lr = read_png(lr_path)
        sr = sr_fn(lr)
        if sr.shape != clean.shape:
            raise DimensionError(
                f"{name}: restored {sr.shape} does not match ground truth {clean.shape}"
            )
        base = resize_bicubic(lr, 4)
        rows.append(MetricsRow(
            name=name,
            psnr_sr=psnr(sr, clean),
            ssim_sr=ssim(sr, clean),
            psnr_bicubic=psnr(base, clean),
            ssim_bicubic=ssim(base, clean),
        ))
        grid_path = os.path.join(out_dir, "grids", f"{name}.png")
        write_png(grid_path, render_grid(lr, base, sr, clean))
        grid_paths.append(grid_path)
    if not rows:
        raise ManifestError("eval split is empty")

    report = MetricsReport(rows=rows, aggregates=_aggregate(rows),
                           grid_paths=grid_paths, fingerprint=fingerprint,
                           report_dir=out_dir)
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write("name," + ",".join(_COLUMNS) + "\n")
        for r in rows:
            fh.write(f"{r.name}," + ",".join(
                f"{getattr(r, c):.6f}" for c in _COLUMNS) + "\n")
        for agg in ("mean", "median"):
            fh.write(f"aggregate_{agg}," + ",".join(
                f"{report.aggregates[agg][c]:.6f}" for c in _COLUMNS) + "\n")
    with open(os.path.join(out_dir, "header.txt"), "w", encoding="utf-8") as fh:
        fh.write(
            f"config_fingerprint = {fingerprint}\n"
            "metric_space = RGB (no luma conversion)\n"
            f"psnr_cap_db = {PSNR_CAP_DB}\n"
            f"ssim_window = {SSIM_WINDOW}x{SSIM_WINDOW} gaussian "
            f"sigma {SSIM_SIGMA}, K1 {SSIM_K1}, K2 {SSIM_K2}, peak 1\n"
            "grid_layout = nearest-LR | bicubic_x4 | sr | clean_hr\n"
        )
    return report
