"""Image-quality and attack-performance metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .validation import check_same_shape

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MSE_DISPLAY_SCALE = 1e4


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_same_shape(x, y)
    return x, y


def mse(x, x_adv) -> float:
    x, x_adv = _pair(x, x_adv)
    return float(np.mean((x - x_adv) ** 2))


def psnr(x, x_adv, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    err = mse(x, x_adv)
    if err == 0.0:
        return math.inf
    return float(10.0 * np.log10(data_range**2 / err))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(x, x_adv, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian windows."""
    x, y = _pair(x, x_adv)
    if x.ndim != 2 or min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"ssim needs 2-D images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {x.shape}")
    if np.array_equal(x, y):
        return 1.0
    g = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    psnr: float
    ssim: float

    @property
    def mse_display(self) -> float:
        return self.mse * MSE_DISPLAY_SCALE

    def as_dict(self) -> dict[str, float]:
        return {"mse": self.mse, "psnr": self.psnr, "ssim": self.ssim}


def image_metrics(x, x_adv) -> MetricsReport:
    x, x_adv = _pair(x, x_adv)
    small = min(x.shape) < SSIM_WINDOW
    return MetricsReport(mse(x, x_adv), psnr(x, x_adv), math.nan if small else ssim(x, x_adv))


@dataclass
class EvalSummary:
    total: int
    successes: int
    i_avg: float
    mean_mse: float
    mean_psnr: float
    mean_ssim: float
    rows: list = field(default_factory=list, repr=False)

    @property
    def asr(self) -> float:
        return self.successes / self.total


def summarize(results: Sequence) -> EvalSummary:
    """ASR over all runs; iterations and image metrics averaged over successes.

    Accepts ``AttackResult`` objects or mappings with the report fields.
    """
    if not results:
        raise ValueError("summarize needs at least one result")
    rows = [r if isinstance(r, dict) else r.as_row() for r in results]
    ok = [r for r in rows if r["success"]]
    successes = len(ok)

    def avg(key):
        vals = [float(r[key]) for r in ok]
        return float(np.mean(vals)) if vals else math.nan

    return EvalSummary(
        total=len(rows),
        successes=successes,
        i_avg=avg("iterations"),
        mean_mse=avg("mse"),
        mean_psnr=avg("psnr"),
        mean_ssim=avg("ssim"),
        rows=rows,
    )


def _minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def export_saliency(saliency) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Split a signed map into positive and negative parts.

    Returns both parts min-max scaled to [0, 1] plus the mean square of
    each unscaled part; the two add up to the mean square of the map.
    """
    s = np.asarray(saliency, dtype=np.float64)
    pos = np.maximum(s, 0.0)
    neg = np.maximum(-s, 0.0)
    return _minmax(pos), _minmax(neg), float(np.mean(pos**2)), float(np.mean(neg**2))
