"""
Metrics Service
===============

Image and geometry metrics for held-out evaluation.

Features:
- PSNR on [0, 1] images, capped at 99 dB for identical inputs
- SSIM shared with the training loss (same window and constants)
- Mean angular error between normal maps
- Directory evaluation in parallel over frames, reported as a table and JSON
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from app.config import get_settings
from app.core.exceptions import ImageFormatError
from app.core.logging import get_logger
from app.models.documents import EvalReport, FrameMetrics
from app.services.image_service import IMAGE_SUFFIXES, load_image
from app.services.loss_service import ssim

logger = get_logger(__name__)

PathLike = Union[str, Path]

PSNR_CAP = 99.0
TEST_EVERY = 8
TIMINGS_FILE = "timings.json"


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / mse) in dB; identical images give PSNR_CAP."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape {a.shape} does not match {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * float(np.log10(1.0 / mse)))


def ssim_score(a: np.ndarray, b: np.ndarray) -> float:
    return float(ssim(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


def mean_angular_error(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """
    Mean angle in degrees between two (H, W, 3) normal maps over `mask`.

    Pixels where either normal is (near) zero are skipped; returns NaN when
    no pixel remains.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    n_pred = np.linalg.norm(pred, axis=-1)
    n_gt = np.linalg.norm(gt, axis=-1)
    keep = (n_pred > 1e-6) & (n_gt > 1e-6)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    if not keep.any():
        return float("nan")
    cos = np.sum(pred[keep] * gt[keep], axis=-1) / (n_pred[keep] * n_gt[keep])
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).mean())


def split_frames(n: int) -> Tuple[List[int], List[int]]:
    """(train, test) frame indices; every 8th frame, starting at 0, is held out."""
    test = list(range(0, n, TEST_EVERY))
    train = [i for i in range(n) if i % TEST_EVERY != 0]
    return train, test


def _images_in(directory: Path) -> Dict[str, Path]:
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _read_timings(directory: Path) -> Dict[str, float]:
    path = directory / TIMINGS_FILE
    if not path.exists():
        return {}
    try:
        return {str(k): float(v) for k, v in json.loads(path.read_text(encoding="utf-8")).items()}
    except (ValueError, AttributeError):
        logger.warning(f"Ignoring unreadable {path}")
        return {}


def evaluate_pair(name: str, render_path: Path, gt_path: Path, render_ms: Optional[float] = None) -> FrameMetrics:
    started = time.perf_counter()
    gt = load_image(gt_path)
    pred = load_image(render_path, gt.shape[:2])
    quality = {"psnr": psnr(pred, gt), "ssim": ssim_score(pred, gt)}
    ms = render_ms if render_ms is not None else (time.perf_counter() - started) * 1000.0
    return FrameMetrics(name=name, ms=ms, **quality)


def evaluate_directories(renders: PathLike, gt: PathLike, workers: Optional[int] = None) -> EvalReport:
    """
    Compare every ground-truth image with the render of the same stem.

    Frame time is the render time recorded by the render command when a
    timings file is present, otherwise the evaluation time of the frame.

    Raises:
        FileNotFoundError: a directory is missing or a render has no match
        ImageFormatError: an image does not decode or sizes differ
    """
    renders, gt = Path(renders), Path(gt)
    for d in (renders, gt):
        if not d.is_dir():
            raise FileNotFoundError(f"{d} is not a directory")
    expected = _images_in(gt)
    produced = _images_in(renders)
    if not expected:
        raise ImageFormatError(f"no images found in {gt}")
    missing = sorted(set(expected) - set(produced))
    if missing:
        raise FileNotFoundError(f"{renders} has no render for {missing[:5]}")

    timings = _read_timings(renders)
    workers = workers or get_settings().WORKERS
    names = sorted(expected)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        frames = list(
            pool.map(lambda n: evaluate_pair(n, produced[n], expected[n], timings.get(n)), names)
        )

    table = metrics_table(frames)
    report = EvalReport(
        frames=frames,
        mean_psnr=float(table["psnr"].mean()),
        mean_ssim=float(table["ssim"].mean()),
        ms_per_frame=float(table["ms"].mean()),
    )
    logger.info(f"Evaluated {len(frames)} frames: PSNR {report.mean_psnr:.2f} dB, SSIM {report.mean_ssim:.4f}")
    return report


def metrics_table(frames: List[FrameMetrics]) -> pd.DataFrame:
    return pd.DataFrame([f.dict() for f in frames], columns=["name", "psnr", "ssim", "ms"])


def format_report(report: EvalReport) -> str:
    """Fixed-width table of the per-frame metrics followed by the means."""
    table = metrics_table(report.frames)
    summary = pd.DataFrame(
        [{"name": "mean", "psnr": report.mean_psnr, "ssim": report.mean_ssim, "ms": report.ms_per_frame}]
    )
    return pd.concat([table, summary], ignore_index=True).to_string(index=False, float_format=lambda v: f"{v:.4f}")
