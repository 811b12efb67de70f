"""Linear mixing model and the two degradation operators, in plain numpy.

Conventions used across the package:

* cubes are ``(bands, height, width)`` arrays;
* abundances are cubes with ``K`` channels, i.e. the 2-D matrix ``S``
  (pixels x K) stored channel-first;
* endmembers ``A`` are ``(K, L)``; the SRF ``R`` is ``(L, l)``;
* the PSF is an ``r x r`` kernel applied per band on disjoint ``r x r`` blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class HsiCube:
    data: np.ndarray
    wavelengths: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"cube must be 3-D (bands, height, width), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains non-finite values")
        if self.wavelengths is not None:
            wl = np.asarray(self.wavelengths, dtype=np.float64)
            if wl.shape != (self.bands,):
                raise ValueError(f"expected {self.bands} wavelengths, got {wl.shape}")
            if np.any(np.diff(wl) <= 0):
                raise ValueError("wavelengths must be strictly increasing")
            self.wavelengths = wl

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def as_matrix(cube: np.ndarray) -> np.ndarray:
    """Pixels stacked row by row: ``(H*W, bands)``."""
    return cube.reshape(cube.shape[0], -1).T


def as_cube(mat: np.ndarray, height: int, width: int) -> np.ndarray:
    return np.ascontiguousarray(mat.T.reshape(mat.shape[1], height, width))


def normalize_cube(cube: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale by the global maximum so values lie in [0, 1]."""
    peak = float(np.max(cube))
    if peak <= 0:
        raise ValueError("cube has no positive values")
    return cube / peak, peak


def mix(abundances: np.ndarray, endmembers: np.ndarray) -> np.ndarray:
    """``Z = S A`` with abundances as a (K, H, W) cube and ``A`` as (K, L)."""
    if abundances.shape[0] != endmembers.shape[0]:
        raise ValueError(f"abundances have {abundances.shape[0]} channels, "
                         f"endmembers have {endmembers.shape[0]} rows")
    return np.einsum("khw,kl->lhw", abundances, endmembers)


def apply_srf(cube: np.ndarray, srf: np.ndarray) -> np.ndarray:
    if cube.shape[0] != srf.shape[0]:
        raise ValueError(f"cube has {cube.shape[0]} bands, SRF expects {srf.shape[0]}")
    return np.einsum("lhw,lm->mhw", cube, srf)


def apply_psf(cube: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    r = kernel.shape[0]
    if kernel.shape != (r, r):
        raise ValueError(f"PSF kernel must be square, got {kernel.shape}")
    b, h, w = cube.shape
    if h % r or w % r:
        raise ValueError(f"extent {h}x{w} is not divisible by ratio {r}")
    blocks = cube.reshape(b, h // r, r, w // r, r)
    return np.einsum("birjs,rs->bij", blocks, kernel)


def upsample_bicubic(cube: np.ndarray, ratio: int) -> np.ndarray:
    """Naive fusion baseline: cubic-spline upsampling of the LR-HSI alone.

    ``grid_mode`` aligns pixel areas, so each LR pixel maps onto its r x r block.
    """
    return ndimage.zoom(np.asarray(cube, dtype=np.float64), (1, ratio, ratio), order=3,
                        mode="reflect", grid_mode=True)


def lrmsi_consistency(lr_hsi: np.ndarray, hr_msi: np.ndarray,
                      srf: np.ndarray, kernel: np.ndarray) -> float:
    """Mean absolute gap between the two routes to the low-resolution MSI."""
    u_hs = apply_srf(lr_hsi, srf)
    u_ms = apply_psf(hr_msi, kernel)
    if u_hs.shape != u_ms.shape:
        raise ValueError(f"inconsistent shapes {u_hs.shape} vs {u_ms.shape}")
    return float(np.mean(np.abs(u_hs - u_ms)))


@dataclass
class ConstraintReport:
    anc_ok: bool
    asc_ok: bool
    endmember_ok: bool
    anc_violation: float
    asc_violation: float
    endmember_violation: float

    @property
    def ok(self) -> bool:
        return self.anc_ok and self.asc_ok and self.endmember_ok


def check_constraints(abundances: np.ndarray, endmembers: np.ndarray,
                      tol: float = 1e-5) -> ConstraintReport:
    anc = float(max(0.0, -np.min(abundances)))
    asc = float(np.max(np.abs(abundances.sum(axis=0) - 1.0)))
    end = float(max(0.0, -np.min(endmembers)))
    return ConstraintReport(anc <= tol, asc <= tol, end <= tol, anc, asc, end)


def validate_srf(srf: np.ndarray, tol: float = 1e-6) -> None:
    if np.any(srf < 0):
        raise ValueError("SRF has negative entries")
    if np.any(np.abs(srf.sum(axis=0) - 1.0) > tol):
        raise ValueError("SRF columns must sum to one")


def validate_psf(kernel: np.ndarray, tol: float = 1e-6) -> None:
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError("PSF kernel must be square")
    if np.any(kernel < 0):
        raise ValueError("PSF kernel has negative entries")
    if abs(kernel.sum() - 1.0) > tol:
        raise ValueError("PSF kernel must sum to one")
