"""Cube files, observation simulation and synthetic ground-truth scenes."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .mixing import HsiCube, apply_psf, apply_srf, mix

# Consumer RGB channels are roughly 100 nm wide at half maximum.
DEFAULT_SRF_FWHM = 100.0

CUBE_KEYS = {"bands", "height", "width", "dtype", "layout", "endianness"}


class CubeFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# cube files: one JSON header line, then little-endian float32 band-sequential payload


def save_cube(path, cube) -> None:
    if not isinstance(cube, HsiCube):
        cube = HsiCube(cube)
    header = {
        "bands": cube.bands,
        "height": cube.height,
        "width": cube.width,
        "dtype": "f32",
        "layout": "band-sequential",
        "endianness": "little",
    }
    if cube.wavelengths is not None:
        header["wavelengths"] = [float(w) for w in cube.wavelengths]
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_cube(path) -> HsiCube:
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n")
    if cut < 0:
        raise CubeFormatError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:cut])
    except json.JSONDecodeError as exc:
        raise CubeFormatError(f"{path}: bad header: {exc}") from None
    missing = CUBE_KEYS - header.keys()
    if missing:
        raise CubeFormatError(f"{path}: header lacks {sorted(missing)}")
    if header["dtype"] != "f32" or header["endianness"] != "little" \
            or header["layout"] != "band-sequential":
        raise CubeFormatError(f"{path}: unsupported encoding {header}")
    shape = (int(header["bands"]), int(header["height"]), int(header["width"]))
    payload = raw[cut + 1:]
    expected = shape[0] * shape[1] * shape[2] * 4
    if len(payload) != expected:
        raise CubeFormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    return HsiCube(data, header.get("wavelengths"))


# ---------------------------------------------------------------------------
# operators


def gaussian_psf_kernel(ratio: int, sigma: float = 0.5) -> np.ndarray:
    """``ratio x ratio`` isotropic Gaussian centred on the block, unit sum."""
    if ratio < 1:
        raise ValueError("ratio must be positive")
    offsets = np.arange(ratio) - (ratio - 1) / 2.0
    g = np.exp(-offsets ** 2 / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def synthetic_srf(wavelengths: np.ndarray, centers=None, fwhm: float = DEFAULT_SRF_FWHM) -> np.ndarray:
    """Gaussian band responses, one column per MS channel, columns sum to one.

    The default centres mimic blue/green/red channels of a consumer camera.
    """
    wl = np.asarray(wavelengths, dtype=np.float64)
    if centers is None:
        centers = (460.0, 540.0, 620.0)
    sigma = fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0)))
    srf = np.exp(-(wl[:, None] - np.asarray(centers)[None, :]) ** 2 / (2.0 * sigma ** 2))
    return srf / srf.sum(axis=0, keepdims=True)


def load_srf_csv(path, wavelengths=None, max_gap: float = 10.0) -> np.ndarray:
    """Read an SRF table (first column wavelength in nm, one column per channel).

    When ``wavelengths`` is given, each cube band takes the nearest table row;
    a band farther than ``max_gap`` nm from every row is an error.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or len(rows[0]) < 2:
        raise ValueError(f"{path}: need a header and at least one data row")
    table = np.array([[float(v) for v in row] for row in rows[1:] if row], dtype=np.float64)
    grid, resp = table[:, 0], table[:, 1:]
    if np.any(resp < 0):
        raise ValueError(f"{path}: negative responses")
    if wavelengths is not None:
        wl = np.asarray(wavelengths, dtype=np.float64)
        idx = np.abs(wl[:, None] - grid[None, :]).argmin(axis=1)
        gap = np.abs(grid[idx] - wl)
        if np.any(gap > max_gap):
            worst = int(np.argmax(gap))
            raise ValueError(f"{path}: band at {wl[worst]} nm is {gap[worst]:.2f} nm from the table")
        resp = resp[idx]
    sums = resp.sum(axis=0)
    if np.any(sums == 0):
        raise ValueError(f"{path}: channel with zero total response")
    return resp / sums


def save_srf_csv(path, srf: np.ndarray, wavelengths, names=None) -> None:
    names = names or [f"ch{j}" for j in range(srf.shape[1])]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["wavelength_nm", *names])
        for w, row in zip(wavelengths, srf):
            out.writerow([repr(float(w)), *(repr(float(v)) for v in row)])


def save_matrix_csv(path, mat: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        for row in np.atleast_2d(mat):
            out.writerow([repr(float(v)) for v in row])


def load_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])


# ---------------------------------------------------------------------------
# simulation


def add_noise(cube: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    power = np.mean(cube.astype(np.float64) ** 2)
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0))
    return cube + rng.normal(0.0, sigma, cube.shape)


def simulate_pair(z: np.ndarray, srf: np.ndarray, ratio: int, sigma: float = 0.5,
                  snr_db: float | None = None, seed: int = 0):
    """Degrade a high-resolution HSI into (low-res HSI, high-res MSI)."""
    if z.shape[1] % ratio or z.shape[2] % ratio:
        raise ValueError(f"extent {z.shape[1]}x{z.shape[2]} is not divisible by ratio {ratio}")
    x = apply_psf(z, gaussian_psf_kernel(ratio, sigma))
    y = apply_srf(z, srf)
    if snr_db is not None:
        rng = np.random.default_rng(seed)
        x = add_noise(x, snr_db, rng)
        y = add_noise(y, snr_db, rng)
    return x, y


def crop_to_ratio(cube: np.ndarray, ratio: int) -> np.ndarray:
    """Drop trailing rows/columns so both extents divide by ``ratio``."""
    h = cube.shape[1] - cube.shape[1] % ratio
    w = cube.shape[2] - cube.shape[2] % ratio
    return cube[:, :h, :w]


@dataclass
class SceneSpec:
    K: int = 4
    L: int = 31
    l: int = 3
    H: int = 64
    W: int = 64
    ratio: int = 8
    eta: float = 0.8
    smoothing: float = 1.0
    cell: int = 4
    wl_min: float = 400.0
    wl_max: float = 700.0
    seed: int = 0
    snr_db: float | None = None

    def __post_init__(self):
        if self.H % self.ratio or self.W % self.ratio:
            raise ValueError(f"scene {self.H}x{self.W} is not divisible by ratio {self.ratio}")
        if self.K < 1 or self.L < 1 or self.l < 1:
            raise ValueError("K, L and l must be positive")
        if self.cell < 1 or self.smoothing < 0:
            raise ValueError("cell must be >= 1 and smoothing >= 0")

    @property
    def wavelengths(self) -> np.ndarray:
        return np.linspace(self.wl_min, self.wl_max, self.L)


def random_endmembers(K: int, wavelengths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Smooth non-negative spectra built from 2-4 Gaussian bumps each."""
    span = wavelengths[-1] - wavelengths[0]
    out = np.empty((K, wavelengths.size))
    for k in range(K):
        spec = np.full(wavelengths.size, 0.05)
        for _ in range(rng.integers(2, 5)):
            c = rng.uniform(wavelengths[0], wavelengths[-1])
            width = rng.uniform(0.08, 0.3) * span
            spec += rng.uniform(0.2, 1.0) * np.exp(-(wavelengths - c) ** 2 / (2 * width ** 2))
        out[k] = spec
    return out


def random_abundances(K: int, H: int, W: int, eta: float, smoothing: float,
                      rng: np.random.Generator, cell: int = 1) -> np.ndarray:
    """Dirichlet(eta) abundances drawn on a lattice with spacing ``cell``,
    bilinearly interpolated (periodic) to HxW, then Gaussian-smoothed.

    Both steps are convex combinations, so every pixel stays on the simplex.
    ``cell=1`` is a plain per-pixel draw.
    """
    gh, gw = -(-H // cell), -(-W // cell)
    grid = rng.dirichlet(np.full(K, eta), size=(gh, gw)).transpose(2, 0, 1)
    if cell > 1:
        rows = np.arange(H) / cell
        cols = np.arange(W) / cell
        r0, c0 = np.floor(rows).astype(int), np.floor(cols).astype(int)
        fr, fc = (rows - r0)[:, None], (cols - c0)[None, :]
        r1, c1 = (r0 + 1) % gh, (c0 + 1) % gw
        s = ((1 - fr) * (1 - fc) * grid[:, r0][:, :, c0] + (1 - fr) * fc * grid[:, r0][:, :, c1]
             + fr * (1 - fc) * grid[:, r1][:, :, c0] + fr * fc * grid[:, r1][:, :, c1])
    else:
        s = grid
    if smoothing > 0:
        s = np.stack([gaussian_filter(ch, smoothing, mode="wrap") for ch in s])
    return s / s.sum(axis=0, keepdims=True)


def synth_scene(spec: SceneSpec):
    """Ground-truth scene obeying the linear mixing model exactly.

    Returns ``(Z, S, A)`` with ``Z = mix(S, A)`` scaled into [0, 1].
    """
    rng = np.random.default_rng(spec.seed)
    A = random_endmembers(spec.K, spec.wavelengths, rng)
    S = random_abundances(spec.K, spec.H, spec.W, spec.eta, spec.smoothing, rng, spec.cell)
    z = mix(S, A)
    peak = z.max()
    A = A / peak
    return mix(S, A), S, A
