"""Command-line entry point: ``hsfuse simulate|train|fuse|evaluate|baseline|ablate``.

Machine-readable results (JSON) go to stdout, logs go to stderr. Any failure
prints one JSON line ``{"error": ..., "message": ...}`` on stderr and exits
nonzero.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .cnmf import CnmfConfig, cnmf_fuse
from .datasim import (DEFAULT_SRF_FWHM, SceneSpec, load_cube, load_matrix_csv, load_srf_csv, save_cube,
                      save_matrix_csv, save_srf_csv, simulate_pair, synth_scene, synthetic_srf,
                      gaussian_psf_kernel)
from .losses import LossWeights
from .mixing import HsiCube, upsample_bicubic
from .network import Network
from .tensor import Tensor
from .trainer import ArchSpec, TrainConfig, fused_metrics, run_ablation, train, write_log

log = logging.getLogger("hsfuse")

CONFIG_NAME = "config.txt"


class ConfigError(ValueError):
    pass


@dataclass
class SimOptions:
    psf_sigma: float = 0.5
    srf_fwhm: float = DEFAULT_SRF_FWHM


@dataclass
class AblateOptions:
    seeds: tuple[int, ...] = (0, 1, 2)


SECTIONS = {
    "scene": SceneSpec,
    "sim": SimOptions,
    "net": ArchSpec,
    "train": TrainConfig,
    "loss": LossWeights,
    "cnmf": CnmfConfig,
    "ablate": AblateOptions,
}
# Fields configured elsewhere: the top-level seed, the net/loss sections, net.K.
EXCLUDED = {"scene.seed", "train.seed", "train.arch", "train.loss", "cnmf.K"}


def _fields(section: str):
    return [f for f in dataclasses.fields(SECTIONS[section])
            if f"{section}.{f.name}" not in EXCLUDED]


def _defaults() -> dict[str, object]:
    out: dict[str, object] = {"seed": 0}
    for name, cls in SECTIONS.items():
        inst = cls()
        for f in _fields(name):
            out[f"{name}.{f.name}"] = getattr(inst, f.name)
    return out


def _annotation(key: str) -> str:
    if key == "seed":
        return "int"
    section, name = key.split(".", 1)
    return next(f.type for f in _fields(section) if f.name == name)


def _coerce(key: str, text: str):
    kind = str(_annotation(key)).replace(" ", "")
    text = text.strip()
    optional = kind.endswith("|None")
    if optional:
        kind = kind[: -len("|None")]
        if text.lower() in ("", "none"):
            return None
    try:
        if kind == "bool":
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple[int"):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    raise ConfigError(f"{key}: unsupported type {kind}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def read_config(path) -> dict[str, object]:
    """Parse ``key = value`` lines (``#`` comments) into typed values; unknown keys fail."""
    known = _defaults()
    out: dict[str, object] = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=_defaults)

    def section(self, name: str) -> dict[str, object]:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def scene(self) -> SceneSpec:
        return SceneSpec(seed=self.seed, **self.section("scene"))

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, arch=ArchSpec(**self.section("net")),
                           loss=LossWeights(**self.section("loss")), **self.section("train"))

    def cnmf_config(self) -> CnmfConfig:
        return CnmfConfig(K=int(self.values["net.K"]), **self.section("cnmf"))

    def dump(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.values.items()))

    def echo(self, out: Path) -> None:
        (out / CONFIG_NAME).write_text(self.dump())


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg.values.update(read_config(args.config))
    overrides = {
        "seed": args.seed,
        "scene.ratio": args.ratio,
        "train.epochs": args.epochs,
        "loss.alpha": args.alpha,
        "loss.beta": args.beta,
        "loss.gamma": args.gamma,
        "loss.epsilon": args.epsilon,
    }
    if args.k is not None:
        overrides["scene.K"] = overrides["net.K"] = args.k
    cfg.values.update({k: v for k, v in overrides.items() if v is not None})
    for key, value in args.set or ():
        if key not in cfg.values:
            raise ConfigError(f"unknown key {key!r}")
        cfg.values[key] = _coerce(key, value)
    return cfg


# -- helpers ---------------------------------------------------------------------


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(args) -> Path:
    if not args.data:
        raise ConfigError("--data is required (a directory written by 'simulate')")
    data = Path(args.data)
    if not (data / "X.cube").is_file() or not (data / "Y.cube").is_file():
        raise FileNotFoundError(f"{data}: missing X.cube or Y.cube")
    return data


def _ratio(x: np.ndarray, y: np.ndarray) -> int:
    if y.shape[1] % x.shape[1] or y.shape[1] // x.shape[1] != y.shape[2] // x.shape[2]:
        raise ValueError(f"HR extent {y.shape[1:]} is not an integer multiple of LR extent {x.shape[1:]}")
    return y.shape[1] // x.shape[1]


def _reference(data: Path):
    path = data / "Z.cube"
    return load_cube(path).data.astype(np.float64) if path.is_file() else None


# -- commands --------------------------------------------------------------------


def cmd_simulate(args, cfg: RunConfig) -> dict:
    spec = cfg.scene()
    sim = SimOptions(**cfg.section("sim"))
    out = _out_dir(args)
    z, s, a = synth_scene(spec)
    wl = spec.wavelengths
    srf = synthetic_srf(wl, fwhm=sim.srf_fwhm)
    kernel = gaussian_psf_kernel(spec.ratio, sim.psf_sigma)
    x, y = simulate_pair(z, srf, spec.ratio, sigma=sim.psf_sigma, snr_db=spec.snr_db, seed=spec.seed)
    save_cube(out / "Z.cube", HsiCube(z, wl))
    save_cube(out / "X.cube", HsiCube(x, wl))
    save_cube(out / "Y.cube", HsiCube(y))
    save_cube(out / "S_gt.cube", HsiCube(s))
    save_cube(out / "A_gt.cube", HsiCube(a.T[:, :, None], wl))
    save_srf_csv(out / "srf.csv", srf, wl)
    save_matrix_csv(out / "psf.csv", kernel)
    cfg.echo(out)
    manifest = {
        "files": ["Z.cube", "X.cube", "Y.cube", "S_gt.cube", "A_gt.cube", "srf.csv", "psf.csv",
                  CONFIG_NAME],
        "shapes": {"Z": list(z.shape), "X": list(x.shape), "Y": list(y.shape),
                   "S_gt": list(s.shape), "A_gt": [a.shape[1], a.shape[0], 1]},
        "ratio": spec.ratio,
        "seed": spec.seed,
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_train(args, cfg: RunConfig) -> dict:
    data = _data_dir(args)
    out = _out_dir(args)
    x_cube = load_cube(data / "X.cube")
    x = x_cube.data
    y = load_cube(data / "Y.cube").data
    config = cfg.train_config()
    cfg.echo(out)
    start = time.perf_counter()
    res = train(x, y, config)
    seconds = time.perf_counter() - start
    res.network.save(out / "weights.ckpt", step=res.state.best_epoch)
    res.state.save(out / "state.ckpt", res.current)
    save_cube(out / "Z_hat.cube", HsiCube(res.z_hat, x_cube.wavelengths))
    write_log(out / "train_log.csv", res.log)
    save_matrix_csv(out / "srf_learned.csv", res.network.srf())
    save_matrix_csv(out / "psf_learned.csv", res.network.psf())
    ref = _reference(data)
    if ref is None:
        summary = {"epochs_run": res.state.epoch, "seconds": seconds}
    else:
        summary = fused_metrics(ref, res, _ratio(x, y), seconds)
    _write_json(out / "metrics.json", summary)
    return {**summary, "best_epoch": res.state.best_epoch}


def cmd_fuse(args, cfg: RunConfig) -> dict:
    if not args.weights or not args.y:
        raise ConfigError("fuse needs --weights and --y")
    out = _out_dir(args)
    net, _ = Network.load(args.weights)
    y = Tensor(load_cube(args.y).data)
    x = None
    if net.config.cross_attention:
        if not args.x:
            raise ConfigError("this network uses cross-attention; pass the LR-HSI with --x")
        x = Tensor(load_cube(args.x).data)
    z_hat = net.fuse(y, x).data
    save_cube(out / "Z_hat.cube", HsiCube(z_hat))  # wavelengths are not stored in the weights
    return {"output": str(out / "Z_hat.cube"), "shape": list(z_hat.shape)}


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    if not args.ref or not args.est:
        raise ConfigError("evaluate needs --ref and --est")
    ref = load_cube(args.ref).data
    est = load_cube(args.est).data
    ratio = int(cfg.values["scene.ratio"])
    report = metrics.evaluate(ref, est, ratio)
    if args.out:
        out = _out_dir(args)
        _write_json(out / "metrics.json", json.loads(report.to_json()))
        report.write_csv(out / "metrics.csv")
        diff = np.abs(ref.astype(np.float64) - est.astype(np.float64))
        for b, band in enumerate(diff):
            metrics.write_pgm(out / f"residual_band{b:03d}.pgm", band)
        metrics.write_pgm(out / "residual_rmse.pgm", metrics.residual_map(ref, est))
    return report.summary()


def cmd_baseline(args, cfg: RunConfig) -> dict:
    data = _data_dir(args)
    out = _out_dir(args)
    x = load_cube(data / "X.cube")
    y = load_cube(data / "Y.cube").data
    srf = load_srf_csv(data / "srf.csv", x.wavelengths)
    kernel = load_matrix_csv(data / "psf.csv")
    cfg.echo(out)
    ratio = _ratio(x.data, y)
    start = time.perf_counter()
    if args.method == "bicubic":
        z_hat = upsample_bicubic(x.data, ratio)
        summary: dict = {"method": "bicubic"}
    else:
        res = cnmf_fuse(x.data, y, kernel, srf, cfg.cnmf_config())
        z_hat = res.z_hat
        summary = {"method": "cnmf", "converged": res.converged}
    summary["seconds"] = time.perf_counter() - start
    save_cube(out / "Z_hat.cube", HsiCube(z_hat.astype(np.float32), x.wavelengths))
    ref = _reference(data)
    if ref is not None:
        summary.update(metrics.evaluate(ref, z_hat, ratio).summary())
    _write_json(out / "metrics.json", summary)
    return summary


def cmd_ablate(args, cfg: RunConfig) -> dict:
    data = _data_dir(args)
    out = _out_dir(args)
    ref = _reference(data)
    if ref is None:
        raise FileNotFoundError(f"{data}: ablation needs the reference Z.cube")
    x = load_cube(data / "X.cube")
    y = load_cube(data / "Y.cube").data
    operators = (load_matrix_csv(data / "psf.csv"), load_srf_csv(data / "srf.csv", x.wavelengths))
    cfg.echo(out)
    table = run_ablation(x.data, y, ref, cfg.train_config(), seeds=cfg.values["ablate.seeds"],
                         operators=operators)
    table.write_csv(out / "ablation.csv")
    with open(out / "runs.csv", "w", newline="") as fh:
        cols = ["method", "clamp", "ssc", "ca", "seed", "psnr", "sam", "ergas", "ssim", "uiqi",
                "epochs_run"]
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(table.runs)
    return {"rows": table.rows}


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "ablate": cmd_ablate,
}


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value


class _Parser(argparse.ArgumentParser):
    """Usage errors become ConfigError so they share the one-line error format."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--ratio", type=int)
    common.add_argument("--k", type=int, help="number of endmembers")
    common.add_argument("--epochs", type=int)
    common.add_argument("--alpha", type=float, help="ASC loss weight")
    common.add_argument("--beta", type=float, help="sparsity loss weight")
    common.add_argument("--gamma", type=float, help="consistency loss weight")
    common.add_argument("--epsilon", type=float, help="sparsity target")
    common.add_argument("--set", action="append", type=_key_value, metavar="KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("--data", help="experiment directory written by 'simulate'")
    common.add_argument("--weights", help="network checkpoint")
    common.add_argument("--x", help="LR-HSI cube")
    common.add_argument("--y", help="HR-MSI cube")
    common.add_argument("--ref", help="reference cube")
    common.add_argument("--est", help="estimated cube")
    common.add_argument("--method", choices=("cnmf", "bicubic"), default="cnmf",
                        help="baseline: coupled NMF with known operators, or bicubic upsampling")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="hsfuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        sys.stderr.write(json.dumps({"error": "UsageError", "message": str(exc)}) + "\n")
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        _emit(COMMANDS[args.command](args, cfg))
    except Exception as exc:  # noqa: BLE001 -- every failure becomes one parsable line
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
