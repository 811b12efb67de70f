"""Coupled NMF fusion with known degradation operators.

Used as a classical, gradient-free reference. Matrices follow the usual
unmixing orientation: a cube becomes ``V`` of shape (bands, pixels) and
``V ~ W @ H`` with endmembers ``W`` (bands x K) and abundances ``H`` (K x pixels).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .mixing import apply_psf

log = logging.getLogger(__name__)

TINY = 1e-12


@dataclass
class CnmfConfig:
    K: int = 4
    outer_iterations: int = 4
    inner_iterations: int = 200
    tol: float = 1e-6
    asc_weight: float = 1.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("CNMF needs K >= 2")
        if self.outer_iterations < 1 or self.inner_iterations < 1:
            raise ValueError("iteration counts must be positive")


def init_endmembers(x: np.ndarray, K: int) -> np.ndarray:
    """Purest-pixel selection: repeatedly take the pixel with the largest residual
    norm after projecting out the spectra already chosen. Returns ``A`` (K x L)."""
    pixels = x.reshape(x.shape[0], -1).T.astype(np.float64)
    resid = pixels.copy()
    chosen: list[int] = []
    for _ in range(K):
        norms = np.einsum("ij,ij->i", resid, resid)
        idx = int(np.argmax(norms))
        chosen.append(idx)
        basis, _ = np.linalg.qr(pixels[chosen].T)
        resid = pixels - (pixels @ basis) @ basis.T
    return np.maximum(pixels[chosen], 0.0)


def nmf_update(V: np.ndarray, W: np.ndarray, H: np.ndarray, mode: str) -> np.ndarray:
    """One Lee-Seung multiplicative step for ``||V - W H||_F^2`` on ``W`` or ``H``."""
    if mode == "H":
        return H * (W.T @ V) / (W.T @ W @ H + TINY)
    if mode == "W":
        return W * (V @ H.T) / (W @ H @ H.T + TINY)
    raise ValueError(f"mode must be 'H' or 'W', got {mode!r}")


def _objective(V, W, H) -> float:
    r = V - W @ H
    return float(np.einsum("ij,ij->", r, r))


def _augment(V, W, weight):
    """Append a constant row so abundance updates also fit sum-to-one."""
    return (np.vstack([V, np.full((1, V.shape[1]), weight)]),
            np.vstack([W, np.full((1, W.shape[1]), weight)]))


def _run(V, W, H, mode, iterations, tol):
    prev = _objective(V, W, H)
    for _ in range(iterations):
        if mode == "H":
            H = nmf_update(V, W, H, "H")
        else:
            W = nmf_update(V, W, H, "W")
        cur = _objective(V, W, H)
        if prev - cur <= tol * max(prev, TINY):
            break
        prev = cur
    return W, H


def _renormalize(H):
    return H / np.maximum(H.sum(axis=0, keepdims=True), TINY)


@dataclass
class CnmfResult:
    z_hat: np.ndarray
    endmembers: np.ndarray
    abundances: np.ndarray
    objective: list[float]
    converged: bool


def coupled_objective(x, y, A, S, kernel, srf) -> float:
    """``||X - C S A||^2 + ||Y - S A R||^2`` with ``S`` as a (K, H, W) cube."""
    z = np.einsum("khw,kl->lhw", S, A)
    rx = x - apply_psf(z, kernel)
    ry = y - np.einsum("lhw,lm->mhw", z, srf)
    return float((rx ** 2).sum() + (ry ** 2).sum())


def cnmf_fuse(x: np.ndarray, y: np.ndarray, kernel: np.ndarray, srf: np.ndarray,
              config: CnmfConfig | None = None) -> CnmfResult:
    """Alternately unmix the LR-HSI for endmembers (abundances fixed to the
    blurred HR abundances) and the HR-MSI for abundances (endmembers fixed to
    their spectrally degraded version)."""
    config = config or CnmfConfig()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    L, h, w = x.shape
    l, H, W_ = y.shape
    r = kernel.shape[0]
    if (H, W_) != (h * r, w * r) or srf.shape != (L, l):
        raise ValueError("observations and operators have inconsistent shapes")
    K = config.K
    Vx = x.reshape(L, -1)
    Vy = y.reshape(l, -1)

    # Initial HSI unmixing: purest-pixel endmembers, then alternate on X alone.
    Wh = init_endmembers(x, K).T
    Hh = np.full((K, h * w), 1.0 / K)
    for _ in range(config.outer_iterations):
        Vxa, Wha = _augment(Vx, Wh, config.asc_weight)
        _, Hh = _run(Vxa, Wha, Hh, "H", config.inner_iterations, config.tol)
        Wh, Hh = _run(Vx, Wh, Hh, "W", config.inner_iterations, config.tol)
    Hh = _renormalize(Hh)

    # Upsample LR abundances as the starting point for the MSI unmixing.
    Hm = np.repeat(np.repeat(Hh.reshape(K, h, w), r, axis=1), r, axis=2).reshape(K, -1)
    history: list[float] = []
    best = None
    converged = False
    for _ in range(config.outer_iterations):
        Vya, Wma = _augment(Vy, srf.T @ Wh, config.asc_weight)
        _, Hm = _run(Vya, Wma, Hm, "H", config.inner_iterations, config.tol)
        Hm = _renormalize(Hm)
        S_lr = apply_psf(Hm.reshape(K, H, W_), kernel).reshape(K, -1)
        Wh, _ = _run(Vx, Wh, S_lr, "W", config.inner_iterations, config.tol)
        obj = coupled_objective(x, y, Wh.T, Hm.reshape(K, H, W_), kernel, srf)
        if history and obj > history[-1] * (1 + 1e-9):
            log.debug("coupled objective rose from %g to %g", history[-1], obj)
        history.append(obj)
        if best is None or obj < best[0]:
            best = (obj, Wh.copy(), Hm.copy())
        if len(history) > 1 and 0 <= history[-2] - obj <= config.tol * max(history[-2], TINY):
            converged = True
            break
    if not converged:
        log.info("CNMF stopped at the iteration limit before converging")
    _, Wh, Hm = best
    A = Wh.T
    S = Hm.reshape(K, H, W_)
    return CnmfResult(np.einsum("khw,kl->lhw", S, A), A, S, history, converged)
