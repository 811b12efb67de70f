"""Picture-quality indices for fused cubes.

All inputs are ``(bands, height, width)`` cubes normalised to peak 1. The
formulas are arranged so that identical inputs give the ideal value exactly
(no rounding residue), which the evaluation reports rely on.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
UIQI_WINDOW = 32
UIQI_STRIDE = 8


def _pair(ref, est) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    if ref.shape != est.shape or ref.ndim != 3:
        raise ValueError(f"need two cubes of equal shape, got {ref.shape} and {est.shape}")
    return ref, est


def psnr_bands(ref, est) -> np.ndarray:
    ref, est = _pair(ref, est)
    mse = ((ref - est) ** 2).reshape(ref.shape[0], -1).mean(axis=1)
    out = np.full(mse.shape, PSNR_CAP)
    live = mse > 0
    out[live] = np.minimum(PSNR_CAP, 10.0 * np.log10(1.0 / mse[live]))
    return out


def psnr(ref, est) -> float:
    """Band-averaged PSNR in dB with peak 1; identical bands count as 100 dB."""
    return float(psnr_bands(ref, est).mean())


def sam(ref, est, return_skipped: bool = False):
    """Mean spectral angle in degrees over pixels with non-zero spectra."""
    ref, est = _pair(ref, est)
    a = ref.reshape(ref.shape[0], -1)
    b = est.reshape(est.shape[0], -1)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    live = (na > 0) & (nb > 0)
    ua = a[:, live] / na[live]
    ub = b[:, live] / nb[live]
    # Half-angle form: exact zero for parallel spectra, well conditioned near 0.
    diff = np.sqrt(((ua - ub) ** 2).sum(axis=0))
    summ = np.sqrt(((ua + ub) ** 2).sum(axis=0))
    angles = 2.0 * np.arctan2(diff, summ)
    value = float(np.degrees(angles.mean())) if angles.size else float("nan")
    if return_skipped:
        return value, int((~live).sum())
    return value


def rmse_bands(ref, est) -> np.ndarray:
    ref, est = _pair(ref, est)
    return np.sqrt(((ref - est) ** 2).reshape(ref.shape[0], -1).mean(axis=1))


def ergas(ref, est, ratio: float) -> float:
    ref, est = _pair(ref, est)
    means = ref.reshape(ref.shape[0], -1).mean(axis=1)
    if np.any(means == 0):
        raise ValueError("ERGAS is undefined for a band with zero mean")
    rel = rmse_bands(ref, est) / means
    return float(100.0 / ratio * np.sqrt(np.mean(rel ** 2)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """1-D normalised Gaussian; its outer product is the 2-D SSIM window."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2.0 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    tmp = sliding_window_view(img, n, axis=-2) @ g
    return sliding_window_view(tmp, n, axis=-1) @ g


def ssim_bands(ref, est) -> np.ndarray:
    ref, est = _pair(ref, est)
    if min(ref.shape[1:]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = gaussian_window()
    mx = _filter_valid(ref, g)
    my = _filter_valid(est, g)
    sxx = _filter_valid(ref * ref, g) - mx * mx
    syy = _filter_valid(est * est, g) - my * my
    sxy = _filter_valid(ref * est, g) - mx * my
    num = (2.0 * mx * my + SSIM_C1) * (2.0 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).reshape(ref.shape[0], -1).mean(axis=1)


def ssim(ref, est) -> float:
    """Single-scale SSIM (11x11 Gaussian window, sigma 1.5, valid region), band-averaged."""
    return float(ssim_bands(ref, est).mean())


def uiqi_bands(ref, est) -> np.ndarray:
    ref, est = _pair(ref, est)
    if min(ref.shape[1:]) < UIQI_WINDOW:
        raise ValueError(f"UIQI needs images of at least {UIQI_WINDOW}x{UIQI_WINDOW}")
    win = (UIQI_WINDOW, UIQI_WINDOW)
    wx = sliding_window_view(ref, win, axis=(1, 2))[:, ::UIQI_STRIDE, ::UIQI_STRIDE]
    wy = sliding_window_view(est, win, axis=(1, 2))[:, ::UIQI_STRIDE, ::UIQI_STRIDE]
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    dx = wx - mx[..., None, None]
    dy = wy - my[..., None, None]
    vx = (dx * dx).mean(axis=(-2, -1))
    vy = (dy * dy).mean(axis=(-2, -1))
    cxy = (dx * dy).mean(axis=(-2, -1))
    num = 4.0 * cxy * (mx * my)
    den = (vx + vy) * (mx * mx + my * my)
    out = np.full(ref.shape[0], np.nan)
    for b in range(ref.shape[0]):
        ok = den[b] != 0
        if ok.any():
            out[b] = (num[b][ok] / den[b][ok]).mean()
    return out


def uiqi(ref, est) -> float:
    """Wang-Bovik Q on 32x32 windows (stride 8), skipping degenerate windows."""
    q = uiqi_bands(ref, est)
    q = q[~np.isnan(q)]
    return float(q.mean()) if q.size else float("nan")


@dataclass
class MetricReport:
    psnr: float
    sam: float
    ergas: float
    ssim: float
    uiqi: float
    bands: dict[str, list[float]] = field(default_factory=dict)
    sam_skipped: int = 0

    def summary(self) -> dict[str, float]:
        return {"psnr": self.psnr, "sam": self.sam, "ergas": self.ergas,
                "ssim": self.ssim, "uiqi": self.uiqi}

    def to_json(self) -> str:
        return json.dumps({**self.summary(), "sam_skipped": self.sam_skipped, "bands": self.bands},
                          sort_keys=True, indent=2)

    def write_csv(self, path) -> None:
        nb = len(next(iter(self.bands.values()), []))
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["metric", "value", *(f"band_{b}" for b in range(nb))])
            for name, value in self.summary().items():
                per_band = self.bands.get(name, [""] * nb)
                out.writerow([name, repr(value), *(repr(v) if v != "" else "" for v in per_band)])
            if "rmse" in self.bands:
                rm = self.bands["rmse"]
                out.writerow(["rmse", repr(float(np.sqrt(np.mean(np.square(rm))))), *map(repr, rm)])


def evaluate(ref, est, ratio: float) -> MetricReport:
    ref, est = _pair(ref, est)
    angle, skipped = sam(ref, est, return_skipped=True)
    return MetricReport(
        psnr=psnr(ref, est),
        sam=angle,
        ergas=ergas(ref, est, ratio),
        ssim=ssim(ref, est),
        uiqi=uiqi(ref, est),
        bands={
            "psnr": [float(v) for v in psnr_bands(ref, est)],
            "ssim": [float(v) for v in ssim_bands(ref, est)],
            "uiqi": [float(v) for v in uiqi_bands(ref, est)],
            "rmse": [float(v) for v in rmse_bands(ref, est)],
        },
        sam_skipped=skipped,
    )


def residual_map(ref, est) -> np.ndarray:
    """Per-pixel RMSE across bands."""
    ref, est = _pair(ref, est)
    return np.sqrt(((ref - est) ** 2).mean(axis=0))


def write_pgm(path, img: np.ndarray, vmax: float = 0.1) -> None:
    """8-bit binary PGM on a fixed [0, vmax] scale."""
    scaled = np.clip(np.asarray(img, dtype=np.float64) / vmax, 0.0, 1.0)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pix.tobytes())
