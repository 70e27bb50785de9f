"""Command-line experiment runner.

Usage: ``imsnn <subcommand> [--config PATH] [--out DIR] [--seed N] [--limit N]
[--variant imsnn|snn|imsnn_c] [--offline]``

Exit codes:
    0  success
    1  unexpected internal error
    2  invalid command line or run configuration
    3  dataset error (download, cache miss, checksum, parse)
    4  degenerate run (no sample produced a usable output)
    5  a verification subcommand (demo, gradcheck) reported FAIL
"""

import argparse
import csv
import dataclasses
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .backprop import SuppressionMode, backward
from .dataio import DatasetError, IdxParseError, load_dataset
from .dynamics import DegenerateOutputError
from .encoding import EncoderConfig
from .network import (
    VARIANTS,
    ArchitectureError,
    forward_pass,
    init_network,
    load_network,
    parse_architecture,
    save_network,
)
from .oracle import demo_single_neuron, fd_check_last_layer, random_check_case
from .training import CsvSink, TrainConfig, cross_entropy, evaluate, train

log = logging.getLogger("imsnn")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_DATASET, EXIT_DEGENERATE, EXIT_FAILED = 0, 1, 2, 3, 4, 5
SUMMARY_KIND = "imsnn-run-summary"


class ConfigError(ValueError):
    pass


class DegenerateRunError(RuntimeError):
    pass


@dataclass
class EncoderSettings:
    scheme: str = "deterministic"
    rate_min: float = 28.5
    rate_max: float = 100.0
    seed: int = 0


@dataclass
class RunConfig:
    """Every knob of a run. Defaults follow the reference experiments."""

    dataset: str = "mnist"
    architecture: str = "784-500-10"
    variant: str = "imsnn"
    encoder: EncoderSettings = field(default_factory=EncoderSettings)
    T: int = 100
    dt: float = 1.0
    beta: float = 0.99
    theta: float = 1.0
    surrogate_a: float = 10.0
    loss_guard: float = 1e-12
    lr: float = 1e-4
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    limit: int | None = None  # training subset size
    test_limit: int | None = None  # test subset size
    cache_dir: str | None = None
    output_dir: str = "runs/latest"
    offline: bool = False

    def validate(self):
        if self.dataset not in ("mnist", "fashion_mnist"):
            raise ConfigError(f"dataset must be mnist or fashion_mnist, got {self.dataset!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {', '.join(VARIANTS)}, got {self.variant!r}")
        for name in ("limit", "test_limit"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, int) or value < 1):
                raise ConfigError(f"{name} must be a positive integer")
        try:
            parse_architecture(self.architecture)
        except ArchitectureError as exc:
            raise ConfigError(f"architecture {self.architecture!r}: {exc}") from exc
        if self.surrogate_a <= 0:
            raise ConfigError("surrogate_a must be positive")
        try:
            self.train_config()
            self.encoder_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def train_config(self):
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, beta=self.beta,
                           theta=self.theta, T=self.T, variant=self.variant, seed=self.seed,
                           surrogate_a=self.surrogate_a, loss_guard=self.loss_guard)

    def encoder_config(self):
        e = self.encoder
        return EncoderConfig(T=self.T, dt=self.dt, rate_min=e.rate_min, rate_max=e.rate_max,
                             scheme=e.scheme, seed=e.seed)

    def to_dict(self):
        return asdict(self)


def _check_type(name, value, default):
    kind = type(default)
    if isinstance(value, bool) != isinstance(default, bool):
        raise ConfigError(f"{name} has the wrong type")
    if default is None or value is None:
        return value
    if kind is float and isinstance(value, int):
        return float(value)
    if not isinstance(value, kind):
        raise ConfigError(f"{name} must be {kind.__name__}, got {type(value).__name__}")
    return value


def config_from_dict(doc):
    """Build a RunConfig from a JSON object, rejecting unknown keys.

    A run summary written by this tool is also accepted; its config echo is used.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    if doc.get("kind") == SUMMARY_KIND:
        doc = doc["config"]
    defaults = RunConfig()
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = {}
    for key, value in doc.items():
        if key == "encoder":
            if not isinstance(value, dict):
                raise ConfigError("encoder must be an object")
            enc_known = {f.name for f in dataclasses.fields(EncoderSettings)}
            bad = sorted(set(value) - enc_known)
            if bad:
                raise ConfigError(f"unknown encoder keys: {', '.join(bad)}")
            enc_defaults = EncoderSettings()
            values[key] = EncoderSettings(**{k: _check_type(f"encoder.{k}", v, getattr(enc_defaults, k))
                                             for k, v in value.items()})
        elif key in ("limit", "test_limit", "cache_dir"):
            values[key] = value
        else:
            values[key] = _check_type(key, value, getattr(defaults, key))
    return RunConfig(**values)


def load_run_config(path=None, overrides=None):
    doc = {}
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = config_from_dict(doc)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def version_string():
    """Package version plus ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def emit_results(records, output_dir, cfg, net=None, wall_time=None, extra=None):
    """Write metrics.csv, summary.json and (if given) model.json into ``output_dir``."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_hidden = len(records[0].kappa_n_layers) if records else 0
    metrics = out / "metrics.csv"
    sink = CsvSink(metrics, n_hidden)
    for rec in records:
        sink(rec)
    final = {}
    for rec in records:
        final[rec.split] = {"epoch": rec.epoch, "kappa_a": rec.kappa_a, "kappa_n_layers": rec.kappa_n_layers,
                            "kappa_n": rec.kappa_n, "loss": rec.loss, "degenerate": rec.degenerate,
                            "suppressed_fraction": rec.suppressed_fraction}
    summary = {"kind": SUMMARY_KIND, "version": version_string(), "config": cfg.to_dict(),
               "wall_time_s": wall_time, "final": final}
    summary.update(extra or {})
    _write_json(out / "summary.json", summary)
    if net is not None:
        save_network(net, out / "model.json")
    return out


def _datasets(cfg):
    train_set = load_dataset(cfg.dataset, "train", cfg.cache_dir, cfg.offline, limit=cfg.limit)
    test_set = load_dataset(cfg.dataset, "test", cfg.cache_dir, cfg.offline, limit=cfg.test_limit)
    return train_set, test_set


def _run_training(cfg, out_dir):
    train_set, test_set = _datasets(cfg)
    net = init_network(cfg.architecture, seed=cfg.seed, variant=cfg.variant, beta=cfg.beta, theta=cfg.theta)
    t0 = time.perf_counter()
    net, records = train(net, train_set, cfg.train_config(), test_set, encoder=cfg.encoder_config())
    wall = time.perf_counter() - t0
    if any(r.degenerate == r.samples for r in records):
        emit_results(records, out_dir, cfg, net, wall)
        raise DegenerateRunError("every sample of an epoch had nonpositive output potentials")
    emit_results(records, out_dir, cfg, net, wall)
    return net, records


def cmd_train(args, cfg):
    _, records = _run_training(cfg, cfg.output_dir)
    final = records[-1]
    print(f"{final.split} kappa_a={final.kappa_a:.2f} kappa_n={final.kappa_n:.4f} -> {cfg.output_dir}")
    return EXIT_OK


def cmd_eval(args, cfg):
    if not args.model:
        raise ConfigError("eval needs --model PATH")
    try:
        net = load_network(args.model)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load model {args.model}: {exc}") from exc
    cfg.architecture, cfg.variant = net.architecture, args.variant or net.variant
    split = args.split
    data = load_dataset(cfg.dataset, split, cfg.cache_dir, cfg.offline,
                        limit=cfg.limit if split == "train" else cfg.test_limit)
    t0 = time.perf_counter()
    rec = evaluate(net, data, cfg.train_config(), cfg.encoder_config(), epoch=0, split=split)
    if rec.degenerate == rec.samples:
        raise DegenerateRunError("every sample had nonpositive output potentials")
    emit_results([rec], cfg.output_dir, cfg, wall_time=time.perf_counter() - t0,
                 extra={"model": str(args.model)})
    print(f"{split} kappa_a={rec.kappa_a:.2f} kappa_n={rec.kappa_n:.4f}")
    return EXIT_OK


def cmd_demo(args, cfg):
    res = demo_single_neuron()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    res.write_csv(out / "demo_rasters.csv")
    verdict = "PASS" if res.verdict else "FAIL"
    _write_json(out / "demo.json", {"verdict": verdict, "spike_counts": res.counts,
                                    "inflow_per_spike": res.inflow_per_spike,
                                    "version": version_string()})
    names = list(res.rasters)
    print(f"{verdict}: raster({names[0]}) == raster({names[1]}): "
          f"{bool(np.array_equal(res.rasters[names[0]], res.rasters[names[1]]))}")
    for name, count in res.counts.items():
        print(f"  {name}: {count} spikes, inflow per spike {res.inflow_per_spike[name]:.12f}")
    return EXIT_OK if res.verdict else EXIT_FAILED


def cmd_ablate(args, cfg):
    rows = []
    root = Path(cfg.output_dir)
    for variant in ("imsnn", "snn", "imsnn_c"):
        vcfg = dataclasses.replace(cfg, variant=variant, output_dir=str(root / variant))
        log.info("training variant %s", variant)
        _, records = _run_training(vcfg, vcfg.output_dir)
        test = [r for r in records if r.split == "test"][-1]
        rows.append({"variant": variant, "kappa_a": test.kappa_a, "kappa_n": test.kappa_n,
                     "kappa_n_layers": test.kappa_n_layers})
    with open(root / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "kappa_a", "kappa_n"])
        for r in rows:
            w.writerow([r["variant"], repr(r["kappa_a"]), repr(r["kappa_n"])])
    k = {r["variant"]: r["kappa_n"] for r in rows}
    ordered = k["imsnn"] < k["snn"] < k["imsnn_c"]
    _write_json(root / "ablation.json", {"rows": rows, "ordering_imsnn_snn_imsnn_c": ordered,
                                         "config": cfg.to_dict(), "version": version_string()})
    print(f"{'variant':<9} {'kappa_a':>8} {'kappa_n':>9}")
    for r in rows:
        print(f"{r['variant']:<9} {r['kappa_a']:8.2f} {r['kappa_n']:9.4f}")
    print(f"ordering imsnn < snn < imsnn_c: {ordered}")
    return EXIT_OK


def _gradient_dump(res, fwd):
    """Per layer and time step, the spike, ISI and potential gradients of sample 0."""
    dump = {}
    for li, (e, g, d) in enumerate(zip(res.eps, res.grad_phi, res.delta)):
        if e is None and d is None:
            continue
        layer = {}
        for t in range(fwd.traces[li].T):
            entry = {}
            if e is not None:
                entry["eps"] = e[0, t].ravel().tolist()
                entry["grad_phi"] = g[0, t].ravel().tolist()
            if d is not None:
                entry["delta"] = d[0, t].ravel().tolist()
            layer[str(t + 1)] = entry
        dump[f"layer{li}"] = layer
    dump["height_grads"] = {f"bank{i}": g.tolist() for i, g in enumerate(res.grads)}
    return dump


def cmd_gradcheck(args, cfg):
    net, raster, label = random_check_case(args.arch, args.steps, cfg.seed, variant=cfg.variant,
                                           beta=cfg.beta, theta=cfg.theta)
    rep = fd_check_last_layer(net, raster, label, step=args.step, n_coords=args.coords, seed=cfg.seed,
                              tolerance=args.tolerance)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(rep.to_json() + "\n")
    if args.verbose:
        fwd = forward_pass(net, raster)
        _, seed_grad = cross_entropy(fwd.output[0], label)
        res = backward(net, fwd, seed_grad[None], SuppressionMode.for_variant(cfg.variant), cfg.surrogate_a)
        _write_json(out / "gradients.json", _gradient_dump(res, fwd))
    if not rep.valid:
        print(f"INVALID: {rep.invalid_reason}")
        return EXIT_OK
    verdict = "PASS" if rep.ok else "FAIL"
    print(f"{verdict}: {len(rep.coords)} coordinates, max relative error {rep.max_rel_err:.3e} "
          f"(tolerance {rep.tolerance:g}){' [truncation-dominated]' if rep.truncation_dominated else ''}")
    return EXIT_OK if rep.ok else EXIT_FAILED


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "demo": cmd_demo, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}


def build_parser():
    parser = argparse.ArgumentParser(prog="imsnn", description="ISI-modulated spiking network experiments")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument("--seed", type=int)
    common.add_argument("--limit", type=int, help="training subset size")
    common.add_argument("--test-limit", type=int, help="test subset size")
    common.add_argument("--variant", choices=VARIANTS)
    common.add_argument("--epochs", type=int)
    common.add_argument("--offline", action="store_true", default=None, help="never download")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train a network")
    ev = sub.add_parser("eval", parents=[common], help="evaluate a saved model")
    ev.add_argument("--model", help="model.json written by train")
    ev.add_argument("--split", choices=("train", "test"), default="test")
    sub.add_parser("demo", parents=[common], help="single-neuron synapse demonstration")
    sub.add_parser("ablate", parents=[common], help="train imsnn, snn and imsnn_c with one seed")
    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of output heights")
    gc.add_argument("--arch", default="10-5-3")
    gc.add_argument("--steps", type=int, default=20, help="simulation length T")
    gc.add_argument("--step", type=float, default=1e-6, help="finite-difference step")
    gc.add_argument("--coords", type=int, default=50)
    gc.add_argument("--tolerance", type=float, default=1e-6)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    overrides = {"output_dir": args.out, "seed": args.seed, "limit": args.limit,
                 "test_limit": args.test_limit, "variant": args.variant, "epochs": args.epochs,
                 "offline": args.offline}
    try:
        cfg = load_run_config(args.config, overrides)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ArchitectureError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, IdxParseError) as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except (DegenerateRunError, DegenerateOutputError) as exc:
        print(f"degenerate run: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE


if __name__ == "__main__":
    sys.exit(main())
