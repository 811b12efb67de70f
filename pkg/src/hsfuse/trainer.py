"""Unsupervised end-to-end training of the coupled network."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from . import tensor as T
from .cnmf import CnmfConfig, cnmf_fuse
from .losses import LossWeights, compute_losses
from .network import Network, NetworkConfig, Outputs, param_shapes, read_arrays, write_arrays
from .tensor import AdamState, Tape, Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "L_R", "L_ASC", "L_S", "L_C", "total", "lr", "val_total")


@dataclass
class ArchSpec:
    """Architecture choices that do not depend on the data shapes."""

    K: int = 4
    widths: tuple[int, ...] | None = None
    msi_kernels: tuple[int, ...] = (7, 5, 3)
    slope: float = 0.2
    attn_kernel: int = 3

    def build(self, L: int, l: int, ratio: int, lr_height: int, lr_width: int,
              cross_attention: bool = True, clamp: bool = True) -> NetworkConfig:
        return NetworkConfig(K=self.K, L=L, l=l, ratio=ratio, lr_height=lr_height,
                             lr_width=lr_width, widths=self.widths, msi_kernels=self.msi_kernels,
                             slope=self.slope, attn_kernel=self.attn_kernel,
                             cross_attention=cross_attention, clamp=clamp)


@dataclass
class TrainConfig:
    epochs: int = 10000
    lr: float = 0.005
    decay_start: int = 2000
    decay_end: int = 10000
    decay_step: int = 1000
    decay_floor: float = 0.1
    warmup: int = 0
    seed: int = 0
    use_clamp: bool = True
    use_ssc: bool = True
    use_ca: bool = True
    patience: int = 500
    min_delta: float = 1e-5
    val_fraction: float = 0.1
    head_scale: float = 0.1
    arch: ArchSpec = field(default_factory=ArchSpec)
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.epochs <= self.decay_start:
            raise ValueError("epochs must exceed the decay start")
        if self.decay_end <= self.decay_start or self.decay_step < 1:
            raise ValueError("bad decay window")
        if self.patience >= self.epochs:
            raise ValueError("patience must be shorter than the run")
        if not 0 <= self.warmup <= self.decay_start:
            raise ValueError("warmup must lie in [0, decay_start]")
        if self.head_scale <= 0:
            raise ValueError("head_scale must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")

    def network_config(self, x_shape, y_shape) -> NetworkConfig:
        L, h, w = x_shape
        l, H, W = y_shape
        if H % h or W % w or H // h != W // w:
            raise ValueError(f"HR extent {H}x{W} is not an integer multiple of LR extent {h}x{w}")
        return self.arch.build(L, l, H // h, h, w, cross_attention=self.use_ca, clamp=self.use_clamp)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Optional linear warmup, constant rate, then a linear decay to
    ``decay_floor * lr`` taken in drop-steps."""
    if epoch < config.warmup:
        return config.lr * (epoch + 1) / config.warmup
    if epoch < config.decay_start:
        return config.lr
    stepped = config.decay_start + (epoch - config.decay_start) // config.decay_step * config.decay_step
    frac = min(1.0, (stepped - config.decay_start) / (config.decay_end - config.decay_start))
    return config.lr * (1.0 - (1.0 - config.decay_floor) * frac)


def init_weights(cfg: NetworkConfig, seed: int, dtype=np.float32,
                 head_scale: float = 0.1) -> Network:
    """Kaiming-normal convolutions; uniform non-negative decoders and operator layers.

    The abundance head (last encoder stage) gets its Kaiming draw multiplied
    by ``head_scale`` so every map starts inside the clamp's linear range.
    """
    rng = np.random.default_rng([seed, 0])
    params: dict[str, Tensor] = {}
    last = len(cfg.widths) - 1
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".weight") or name in ("attn.u", "attn.v"):
            fan_in = int(np.prod(shape[1:]))
            arr = rng.normal(0.0, T.kaiming_std(fan_in, cfg.slope), shape)
            if name.endswith(f".{last}.weight"):
                arr *= head_scale
        elif name.endswith(".bias"):
            # Final encoder stage starts every abundance at 1/K so ASC holds at init.
            arr = np.full(shape, 1.0 / cfg.K if name.endswith(f".{last}.bias") else 0.0)
        elif name in ("srf", "psf"):
            # Flat response / box filter. Data only constrain the SRF inside the
            # span of the scene spectra, so random init noise would never decay.
            arr = np.ones(shape)
        else:
            arr = rng.uniform(0.0, 1.0, shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    net = Network(cfg, params)
    net.project()
    return net


def validation_masks(x_shape, y_shape, fraction: float, seed: int):
    """Fixed held-out pixel masks (1 = validation) for the LR and HR grids."""
    rng = np.random.default_rng([seed, 1])
    masks = []
    for shape in (x_shape, y_shape):
        n = shape[1] * shape[2]
        k = max(1, int(round(fraction * n)))
        m = np.zeros(n, dtype=np.float32)
        m[rng.choice(n, size=k, replace=False)] = 1.0
        masks.append(m.reshape(shape[1], shape[2]))
    return masks[0], masks[1]


@dataclass
class TrainState:
    epoch: int
    adam: AdamState
    best_val: float
    best_epoch: int
    best_params: dict[str, np.ndarray]
    since_best: int = 0
    stopped: bool = False

    def save(self, path, network: Network) -> None:
        arrays = {f"param/{k}": v.data for k, v in network.params.items()}
        arrays.update({f"best/{k}": v for k, v in self.best_params.items()})
        arrays.update({f"m/{k}": v for k, v in self.adam.m.items()})
        arrays.update({f"v/{k}": v for k, v in self.adam.v.items()})
        header = {
            "format": "hsfuse-train-state",
            "config": network.config.to_dict(),
            "epoch": self.epoch,
            "adam_step": self.adam.step,
            "best_val": repr(self.best_val),
            "best_epoch": self.best_epoch,
            "since_best": self.since_best,
            "stopped": self.stopped,
        }
        write_arrays(path, header, arrays)

    @classmethod
    def load(cls, path) -> tuple["TrainState", Network]:
        header, arrays = read_arrays(path)
        if header.get("format") != "hsfuse-train-state":
            raise ValueError(f"{path}: not a training state file")
        cfg = NetworkConfig(**header["config"])

        def group(prefix):
            return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

        net = Network(cfg, {k: Tensor(v, requires_grad=True) for k, v in group("param/").items()})
        adam = AdamState(step=header["adam_step"], m=group("m/"), v=group("v/"))
        state = cls(epoch=header["epoch"], adam=adam, best_val=float(header["best_val"]),
                    best_epoch=header["best_epoch"], best_params=group("best/"),
                    since_best=header["since_best"], stopped=header["stopped"])
        return state, net


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    network: Network
    z_hat: np.ndarray
    log: list[dict]
    state: TrainState
    current: Network


def _detach(out: Outputs) -> Outputs:
    return Outputs(**{k: (None if v is None else Tensor(v.data))
                      for k, v in vars(out).items()})


def _best_network(net: Network, state: TrainState) -> Network:
    best = net.copy()
    for k, v in state.best_params.items():
        best.params[k].data[...] = v
    return best


def train(x: np.ndarray, y: np.ndarray, config: TrainConfig,
          state: TrainState | None = None, network: Network | None = None,
          until: int | None = None, log_every: int = 500) -> TrainResult:
    """Fit the network to one (LR-HSI, HR-MSI) pair.

    Pass ``state``/``network`` from a previous call (or ``TrainState.load``)
    to resume; ``until`` stops early at that epoch so a run can be split.
    """
    xt = Tensor(np.asarray(x, dtype=np.float32))
    yt = Tensor(np.asarray(y, dtype=np.float32))
    val_lr, val_hr = validation_masks(xt.shape, yt.shape, config.val_fraction, config.seed)
    train_lr, train_hr = 1.0 - val_lr, 1.0 - val_hr
    if network is None:
        network = init_weights(config.network_config(xt.shape, yt.shape), config.seed,
                               head_scale=config.head_scale)
    if state is None:
        state = TrainState(epoch=0, adam=AdamState(), best_val=math.inf, best_epoch=-1,
                           best_params={k: v.data.copy() for k, v in network.params.items()})
    stop = config.epochs if until is None else min(until, config.epochs)
    history: list[dict] = []
    names = list(network.params)

    while state.epoch < stop and not state.stopped:
        epoch = state.epoch
        lr = lr_at(epoch, config)
        try:
            with Tape() as tape:
                out = network.forward(xt, yt, consistency=config.use_ssc)
                parts = compute_losses(out, xt, yt, config.loss, train_lr, train_hr)
            val = compute_losses(_detach(out), xt, yt, config.loss, val_lr, val_hr).total.item()
            T.backward(parts.total, tape)
        except T.NonFiniteError as exc:
            raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
        row = {"epoch": epoch, **parts.values(), "lr": lr, "val_total": val}
        if not all(math.isfinite(v) for v in row.values()):
            raise TrainingDiverged(f"epoch {epoch}: non-finite loss {row}")
        history.append(row)

        if val < state.best_val - config.min_delta:
            state.best_val = val
            state.best_epoch = epoch
            state.since_best = 0
            state.best_params = {k: v.data.copy() for k, v in network.params.items()}
        else:
            state.since_best += 1

        grads = {k: network.params[k].grad for k in names if network.params[k].grad is not None}
        T.adam_step(network.params, grads, state.adam, lr)
        for p in network.params.values():
            p.grad = None
        network.project()
        state.epoch += 1
        if log_every and epoch % log_every == 0:
            log.info("epoch %d total %.5f val %.5f lr %.5f", epoch, row["total"], val, lr)
        if state.since_best >= config.patience:
            state.stopped = True
            log.info("early stop at epoch %d (best %d)", epoch, state.best_epoch)

    best = _best_network(network, state)
    z_hat = best.fuse(yt, xt if best.config.cross_attention else None).data
    return TrainResult(network=best, z_hat=z_hat, log=history, state=state, current=network)


def write_log(path, rows: list[dict], append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="") as fh:
        out = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        if not append:
            out.writeheader()
        for row in rows:
            out.writerow({k: (row[k] if k == "epoch" else repr(float(row[k]))) for k in LOG_COLUMNS})


def fused_metrics(ref: np.ndarray, result: TrainResult, ratio: int, seconds: float) -> dict:
    """The per-run metrics record: five quality indices plus run length and wall time."""
    report = metrics.evaluate(ref, result.z_hat, ratio)
    return {**report.summary(), "epochs_run": result.state.epoch, "seconds": seconds}


def worker_count(jobs: int) -> int:
    """Parallel workers for independent runs, capped by ``HSFUSE_THREADS``."""
    cap = os.environ.get("HSFUSE_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    if limit < 1:
        raise ValueError("HSFUSE_THREADS must be a positive integer")
    return max(1, min(limit, jobs))


def _map(fn, jobs: list, workers: int | None = None) -> list:
    workers = worker_count(len(jobs)) if workers is None else workers
    if workers == 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


GRID = {
    "alpha": (0.01, 0.1, 1.0),
    "beta": (1e-5, 1e-4, 1e-3),
    "gamma": (0.1, 1.0, 10.0),
}


def validation_loss(network: Network, x, y, config: TrainConfig,
                    weights: LossWeights | None = None) -> float:
    """Total loss on the held-out pixels, optionally under different weights."""
    xt = Tensor(np.asarray(x, dtype=np.float32))
    yt = Tensor(np.asarray(y, dtype=np.float32))
    val_lr, val_hr = validation_masks(xt.shape, yt.shape, config.val_fraction, config.seed)
    out = network.forward(xt, yt, consistency=config.use_ssc)
    return compute_losses(out, xt, yt, weights or config.loss, val_lr, val_hr).total.item()


def _grid_cell(job) -> dict:
    x, y, config, reference = job
    res = train(x, y, config, log_every=0)
    w = config.loss
    return {"alpha": w.alpha, "beta": w.beta, "gamma": w.gamma,
            "val_loss": validation_loss(res.network, x, y, config, reference),
            "best_epoch": res.state.best_epoch, "epochs_run": res.state.epoch}


def grid_search(x, y, base: TrainConfig, grid: dict | None = None,
                workers: int | None = None) -> tuple[LossWeights, list[dict]]:
    """Train every (alpha, beta, gamma) cell and keep the lowest validation loss.

    Each cell is scored under ``base.loss`` so scores are comparable across
    cells; ties go to the first cell in grid order.
    """
    grid = grid or GRID
    cells = [replace(base, loss=replace(base.loss, alpha=a, beta=b, gamma=g))
             for a in grid["alpha"] for b in grid["beta"] for g in grid["gamma"]]
    rows = _map(_grid_cell, [(x, y, c, base.loss) for c in cells], workers)
    best = min(range(len(rows)), key=lambda i: rows[i]["val_loss"])
    return cells[best].loss, rows


# (name, clamp, ssc, ca); the clamp-off arm swaps the clamp for a channel softmax.
ABLATION_ARMS = (
    ("clamp_off", False, False, False),
    ("none", True, False, False),
    ("ssc", True, True, False),
    ("ca", True, False, True),
    ("full", True, True, True),
)
ABLATION_COLUMNS = ("method", "clamp", "ssc", "ca", "psnr", "sam", "ergas", "ssim", "uiqi")
METRIC_KEYS = ("psnr", "sam", "ergas", "ssim", "uiqi")


def _ablation_arm(job) -> dict:
    x, y, ref, config = job
    start = time.perf_counter()
    res = train(x, y, config, log_every=0)
    return fused_metrics(ref, res, y.shape[1] // x.shape[1], time.perf_counter() - start)


@dataclass
class AblationTable:
    rows: list[dict]
    runs: list[dict]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
            out.writeheader()
            for row in self.rows:
                out.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k])
                              for k in ABLATION_COLUMNS})

    def median(self, arm: str, key: str = "psnr") -> float:
        return next(r[key] for r in self.rows if r["method"] == arm)


def run_ablation(x, y, ref, base: TrainConfig, seeds=(0,), operators=None,
                 workers: int | None = None) -> AblationTable:
    """Train the five arms for every seed and report per-arm medians.

    ``operators=(psf_kernel, srf)`` adds the known-operator CNMF row.
    """
    jobs, keys = [], []
    for name, clamp, ssc, ca in ABLATION_ARMS:
        for seed in seeds:
            jobs.append((x, y, ref, replace(base, seed=seed, use_clamp=clamp, use_ssc=ssc, use_ca=ca)))
            keys.append((name, clamp, ssc, ca, seed))
    results = _map(_ablation_arm, jobs, workers)
    runs = [{"method": k[0], "clamp": int(k[1]), "ssc": int(k[2]), "ca": int(k[3]), "seed": k[4], **r}
            for k, r in zip(keys, results)]
    rows = []
    if operators is not None:
        kernel, srf = operators
        fused = cnmf_fuse(x, y, kernel, srf, CnmfConfig(K=base.arch.K)).z_hat
        report = metrics.evaluate(ref, fused, y.shape[1] // x.shape[1])
        rows.append({"method": "cnmf", "clamp": "-", "ssc": "-", "ca": "-", **report.summary()})
    for name, clamp, ssc, ca in ABLATION_ARMS:
        mine = [r for r in runs if r["method"] == name]
        rows.append({"method": name, "clamp": int(clamp), "ssc": int(ssc), "ca": int(ca),
                     **{k: float(np.median([r[k] for r in mine])) for k in METRIC_KEYS}})
    return AblationTable(rows, runs)
