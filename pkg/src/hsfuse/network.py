"""Coupled unmixing autoencoders with cross-attention and learnable PSF/SRF layers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class NetworkConfig:
    K: int
    L: int
    l: int
    ratio: int
    lr_height: int
    lr_width: int
    widths: tuple[int, ...] | None = None
    msi_kernels: tuple[int, ...] = (7, 5, 3)
    slope: float = 0.2
    attn_kernel: int = 3
    cross_attention: bool = True
    clamp: bool = True

    def __post_init__(self):
        if self.widths is None:
            self.widths = (64, 32, self.K)
        self.widths = tuple(int(w) for w in self.widths)
        self.msi_kernels = tuple(int(k) for k in self.msi_kernels)
        if len(self.widths) < 2:
            raise ValueError("encoders need at least one block before the projection")
        if self.widths[-1] != self.K:
            raise ValueError(f"last encoder width must equal K={self.K}, got {self.widths[-1]}")
        if len(self.msi_kernels) != len(self.widths):
            raise ValueError("one MSI kernel size per encoder stage")
        if any(b > a for a, b in zip(self.msi_kernels, self.msi_kernels[1:])):
            raise ValueError("MSI encoder kernel sizes must be non-increasing")
        if any(k % 2 == 0 for k in self.msi_kernels) or self.attn_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd for same padding")
        if not 0 < self.slope < 1:
            raise ValueError("leaky slope must lie in (0, 1)")

    @property
    def hsi_kernels(self) -> tuple[int, ...]:
        return (1,) * len(self.widths)

    @property
    def attn_channels(self) -> int:
        return self.widths[-2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["msi_kernels"] = list(self.msi_kernels)
        return d


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor, in checkpoint order."""
    shapes: dict[str, tuple[int, ...]] = {}
    for branch, cin, kernels in (("f_en", cfg.L, cfg.hsi_kernels), ("g_en", cfg.l, cfg.msi_kernels)):
        prev = cin
        for i, (width, k) in enumerate(zip(cfg.widths, kernels)):
            if i == len(cfg.widths) - 1 and cfg.cross_attention:
                prev *= 2
            shapes[f"{branch}.{i}.weight"] = (width, prev, k, k)
            shapes[f"{branch}.{i}.bias"] = (width,)
            prev = width
    if cfg.cross_attention:
        c = cfg.attn_channels
        shapes["attn.u"] = (c, cfg.lr_height, cfg.lr_width)
        shapes["attn.v"] = (1, c, cfg.attn_kernel, cfg.attn_kernel)
    shapes["f_de"] = (cfg.K, cfg.L)
    shapes["g_de"] = (cfg.K, cfg.l)
    shapes["srf"] = (cfg.L, cfg.l)
    shapes["psf"] = (cfg.ratio, cfg.ratio)
    return shapes


# Parameters kept non-negative by projection after every optimizer step.
NONNEGATIVE = ("f_de", "g_de", "srf", "psf")


@dataclass
class Outputs:
    s_hs: Tensor
    s_ms: Tensor
    x_rec: Tensor
    y_rec: Tensor
    z_hat: Tensor
    x_hat: Tensor | None = None
    y_hat: Tensor | None = None
    u_hs: Tensor | None = None
    u_ms: Tensor | None = None


def cross_attention(f: Tensor, g: Tensor, u: Tensor, v: Tensor, ratio: int):
    """Swap channel statistics of the HSI features and spatial statistics of the MSI features.

    ``f`` is (C, h, w), ``g`` is (C, H, W). The spatial attention lives on the
    high-resolution grid, so it is average-pooled by ``ratio`` and rescaled
    by ``ratio**2`` to stay a distribution over the h*w positions.
    """
    c = f.shape[0]
    if g.shape[0] != c:
        raise ValueError(f"branch channel counts differ: {c} vs {g.shape[0]}")
    if g.shape[1] != ratio * f.shape[1] or g.shape[2] != ratio * f.shape[2]:
        raise ValueError(f"feature extents {f.shape} and {g.shape} disagree with ratio {ratio}")
    o = T.reduce_sum(T.mul(u, f), axis=(1, 2), keepdims=True)
    s_map = T.conv2d(g, v, padding=v.shape[-1] // 2)
    chan = T.softmax(o, "channel")
    spat = T.softmax(s_map, "spatial")
    pooled = T.scale(T.avg_pool(spat, ratio), ratio * ratio)
    f_out = T.concat_channels(f, T.mul(f, pooled))
    g_out = T.concat_channels(g, T.mul(g, chan))
    return f_out, g_out


def decode(abundance: Tensor, kernel: Tensor) -> Tensor:
    return T.channel_matmul(abundance, kernel)


def srf_layer(z: Tensor, raw: Tensor) -> Tensor:
    return T.channel_matmul(z, T.normalize_sum(raw, axis=0))


def psf_layer(z: Tensor, raw: Tensor) -> Tensor:
    return T.block_filter(z, T.normalize_sum(raw))


class Network:
    def __init__(self, config: NetworkConfig, params: dict[str, Tensor]):
        shapes = param_shapes(config)
        if list(params) != list(shapes):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ValueError(f"{name}: expected {shape}, got {params[name].shape}")
        self.config = config
        self.params = params

    # -- building blocks -------------------------------------------------

    def _block(self, branch: str, i: int, x: Tensor) -> Tensor:
        w = self.params[f"{branch}.{i}.weight"]
        b = self.params[f"{branch}.{i}.bias"]
        return T.conv2d(x, w, b, padding=w.shape[-1] // 2)

    def _trunk(self, branch: str, x: Tensor) -> Tensor:
        for i in range(len(self.config.widths) - 1):
            x = T.leaky_relu(self._block(branch, i, x), self.config.slope)
        return x

    def _head(self, branch: str, x: Tensor) -> Tensor:
        x = self._block(branch, len(self.config.widths) - 1, x)
        return T.clamp01(x) if self.config.clamp else T.softmax(x, "channel")

    def _check_inputs(self, x: Tensor | None, y: Tensor | None) -> None:
        c = self.config
        if x is not None and x.shape != (c.L, c.lr_height, c.lr_width):
            raise ValueError(f"LR-HSI shape {x.shape} does not match config")
        if y is not None and y.shape != (c.l, c.ratio * c.lr_height, c.ratio * c.lr_width):
            raise ValueError(f"HR-MSI shape {y.shape} does not match config")

    # -- public operations -----------------------------------------------

    def encode(self, x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        """Abundance maps for both branches; cross-attention couples them if enabled."""
        self._check_inputs(x, y)
        f = self._trunk("f_en", x)
        g = self._trunk("g_en", y)
        if self.config.cross_attention:
            f, g = cross_attention(f, g, self.params["attn.u"], self.params["attn.v"],
                                   self.config.ratio)
        return self._head("f_en", f), self._head("g_en", g)

    def encode_hsi(self, x: Tensor) -> Tensor:
        if self.config.cross_attention:
            raise ValueError("with cross-attention the encoders must run as a pair; use encode()")
        self._check_inputs(x, None)
        return self._head("f_en", self._trunk("f_en", x))

    def encode_msi(self, y: Tensor, x: Tensor | None = None) -> Tensor:
        """MSI abundances. ``x`` is required when cross-attention is enabled."""
        if self.config.cross_attention:
            if x is None:
                raise ValueError("cross-attention needs the LR-HSI to encode the MSI")
            return self.encode(x, y)[1]
        self._check_inputs(None, y)
        return self._head("g_en", self._trunk("g_en", y))

    def fuse(self, y: Tensor, x: Tensor | None = None) -> Tensor:
        return decode(self.encode_msi(y, x), self.params["f_de"])

    def srf(self) -> np.ndarray:
        raw = self.params["srf"].data
        return raw / raw.sum(axis=0, keepdims=True)

    def psf(self) -> np.ndarray:
        raw = self.params["psf"].data
        return raw / raw.sum()

    def forward(self, x: Tensor, y: Tensor, consistency: bool = True) -> Outputs:
        s_hs, s_ms = self.encode(x, y)
        out = Outputs(
            s_hs=s_hs,
            s_ms=s_ms,
            x_rec=decode(s_hs, self.params["f_de"]),
            y_rec=decode(s_ms, self.params["g_de"]),
            z_hat=decode(s_ms, self.params["f_de"]),
        )
        if consistency:
            out.x_hat, out.y_hat, out.u_hs, out.u_ms = self.consistency_outputs(x, y, out.z_hat)
        return out

    def consistency_outputs(self, x: Tensor, y: Tensor, z_hat: Tensor):
        srf, psf = self.params["srf"], self.params["psf"]
        return psf_layer(z_hat, psf), srf_layer(z_hat, srf), srf_layer(x, srf), psf_layer(y, psf)

    def project(self) -> None:
        for name in NONNEGATIVE:
            np.maximum(self.params[name].data, 0.0, out=self.params[name].data)

    def copy(self) -> "Network":
        return Network(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                                     for k, v in self.params.items()})

    # -- checkpoints -------------------------------------------------------

    def save(self, path, step: int = 0, extra: dict | None = None) -> None:
        header = {"format": "hsfuse-checkpoint", "config": self.config.to_dict(), "step": int(step)}
        if extra:
            header["extra"] = extra
        write_arrays(path, header, {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> tuple["Network", dict]:
        header, arrays = read_arrays(path)
        if header.get("format") != "hsfuse-checkpoint":
            raise ValueError(f"{path}: not a network checkpoint")
        cfg = NetworkConfig(**header["config"])
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(cfg, params), header


def write_arrays(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """JSON header line, then each array as little-endian float32 in header order."""
    header = dict(header)
    header["tensors"] = [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()]
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    cut = raw.find(b"\n")
    if cut < 0:
        raise ValueError(f"{path}: missing header line")
    header = json.loads(raw[:cut])
    offset = cut + 1
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 4
        chunk = raw[offset:offset + n]
        if len(chunk) != n:
            raise ValueError(f"{path}: payload truncated at {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(np.float32)
        offset += n
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return header, arrays
