"""Command line entry point: ``nanonet {ingest,train,crossval,explore,bench}``.

Exit codes: 0 success, 1 usage error, 2 data/parse error, 3 no feasible
candidate found by ``explore``.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .arch import ArchError, ArchSpec, build_reference, count_params, load_spec, save_spec
from .bench import BenchError, measure, measure_batched
from .data import (AugmentConfig, DataError, IngestStats, ingest_ckplus, make_folds, read_cache,
                   synth_dataset, write_cache)
from .explorer import Constraints, MutationRates, SearchConfig, explore
from .trainer import (CheckpointError, TrainConfig, cross_validate, evaluate, load_checkpoint,
                      save_checkpoint, train)

logger = logging.getLogger("nanonet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# built-in defaults; CLI flags override config-file values which override these
DEFAULTS = {
    "seed": 0, "threads": None, "out": "nanonet_out", "size": 48,
    "arch": "nano-b", "input_size": 48, "data": "synth", "synth_subjects": 20,
    "synth_per_subject": 21, "epochs": 200, "batch_size": 32, "lr": 1e-3, "no_augment": False,
    "no_val": False, "k": 10, "fold_workers": 1,
    "seed_arch": "nano-b", "min_accuracy": 0.92, "max_params": 1_000_000, "iterations": 10,
    "population": 4, "proxy_epochs": 40, "proxy_subset": None, "rates": None,
    "width_choices": None, "coeffs": "2,0.5,0.5", "warm_start": False,
    "runs": 50, "warmup": 5, "watts": None, "batched": False, "report": None,
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="BLAS threads (env NANONET_THREADS)")
    p.add_argument("--config", help="JSON file of option overrides")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_opts(p):
    p.add_argument("--data", help="'synth' or a dataset cache written by 'ingest'")
    p.add_argument("--synth-subjects", type=int)
    p.add_argument("--synth-per-subject", type=int)


def _arch_opts(p, name="--arch"):
    p.add_argument(name, help="nano-a, nano-b or an architecture JSON file")
    p.add_argument("--input-size", type=int, help="input resolution of nano-a/nano-b")


def _train_opts(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--no-augment", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nanonet", description="Train, evaluate, explore and benchmark compact expression CNNs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="read CK+ into a dataset cache")
    _common(p)
    p.add_argument("--ckplus-root", required=True)
    p.add_argument("--out-cache")
    p.add_argument("--size", type=int)

    p = sub.add_parser("train", help="train one model")
    _common(p)
    _arch_opts(p)
    _data_opts(p)
    _train_opts(p)
    p.add_argument("--no-val", action="store_true", default=None,
                   help="train on all samples instead of a subject-independent 80/20 split")

    p = sub.add_parser("crossval", help="subject-independent k-fold cross-validation")
    _common(p)
    _arch_opts(p)
    _data_opts(p)
    _train_opts(p)
    p.add_argument("--k", type=int)
    p.add_argument("--fold-workers", type=int)

    p = sub.add_parser("explore", help="constrained architecture exploration")
    _common(p)
    _arch_opts(p, "--seed-arch")
    _data_opts(p)
    p.add_argument("--min-accuracy", type=float)
    p.add_argument("--max-params", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--population", type=int)
    p.add_argument("--proxy-epochs", type=int)
    p.add_argument("--proxy-subset", type=int)
    p.add_argument("--rates", help="e.g. channels=0.5,edge=0.2,kernel=0.2,block=0.1")
    p.add_argument("--width-choices", help="comma-separated widths for the channel knob")
    p.add_argument("--coeffs", help="alpha,beta,gamma of the score")
    p.add_argument("--warm-start", action="store_true", default=None)

    p = sub.add_parser("bench", help="batch-1 latency, FPS and images/s/watt")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--runs", type=int)
    p.add_argument("--warmup", type=int)
    p.add_argument("--watts", type=float)
    p.add_argument("--batched", action="store_true", default=None)
    p.add_argument("--report", help="write the JSON report here as well as to stdout")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read config file {args.config!r}: {exc}") from exc
        unknown = set(file_cfg) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config key(s) {sorted(unknown)}")
        cfg.update(file_cfg)
    for key, value in vars(args).items():
        if value is not None and key not in ("config", "verbose"):
            cfg[key] = value
    if cfg["threads"] is None and os.environ.get("NANONET_THREADS"):
        cfg["threads"] = int(os.environ["NANONET_THREADS"])
    return cfg


@contextlib.contextmanager
def thread_limit(n: int | None):
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(n)):
        yield


def resolve_arch(value: str, input_size: int) -> ArchSpec:
    if value in ("nano-a", "nano_a", "nano_a_like"):
        return build_reference("nano_a_like", input_size)
    if value in ("nano-b", "nano_b", "nano_b_like"):
        return build_reference("nano_b_like", input_size)
    if not Path(value).exists():
        raise DataError(f"architecture file {value!r} not found")
    return load_spec(value)


def load_samples(cfg: dict, spec: ArchSpec):
    _, h, w = spec.input_shape
    if cfg["data"] == "synth":
        if h != w:
            raise UsageError("synthetic data needs a square input")
        return synth_dataset(cfg["synth_subjects"], cfg["synth_per_subject"], cfg["seed"], h)
    samples = read_cache(cfg["data"])
    if samples and samples[0].image.shape[2:] != (h, w):
        raise DataError(f"cache images are {samples[0].image.shape[2:]}, architecture expects {(h, w)}")
    return samples


def train_config(cfg: dict) -> TrainConfig:
    base = TrainConfig(seed=cfg["seed"], base_lr=cfg["lr"], batch_size=cfg["batch_size"],
                       augment=None if cfg["no_augment"] else AugmentConfig())
    return base.with_epochs(cfg["epochs"])


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(out: Path, command: str, cfg: dict, artifacts: dict, started: str,
                   spec: ArchSpec | None = None) -> Path:
    manifest = {"command": command, "config": cfg, "seed": cfg.get("seed"),
                "artifacts": {k: str(v) for k, v in artifacts.items()},
                "artifact_sha256": {k: _sha256_file(v) for k, v in artifacts.items()
                                    if Path(v).is_file()},
                "arch_hash": spec.content_hash() if spec is not None else None,
                "started": started, "finished": _now(), "argv": sys.argv[1:]}
    path = out / f"manifest-{command}.json"
    _write_json(path, manifest)
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _table(rows, headers) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(headers, *rows)]
    line = lambda r: "  ".join(str(x).rjust(w) for x, w in zip(r, widths))  # noqa: E731
    return "\n".join([line(headers), line(["-" * w for w in widths])] + [line(r) for r in rows])


# --------------------------------------------------------------------------
# commands

def cmd_ingest(cfg, out: Path, started):
    cache = Path(cfg.get("out_cache") or out / "ckplus.f32")
    stats = IngestStats()
    samples = ingest_ckplus(cfg["ckplus_root"], cfg["size"], stats=stats)
    if not samples:
        raise DataError("no labeled sequences found")
    sidecar = write_cache(samples, cache)
    summary = {"samples": stats.samples, "sequences": stats.labeled_sequences,
               "subjects": stats.subjects, "unlabeled_skipped": stats.unlabeled_skipped,
               "bad_label_skipped": stats.bad_label_skipped,
               "short_sequences": stats.short_sequences, "cache": str(cache),
               "cache_sha256": _sha256_file(cache)}
    print(f"{stats.samples} samples / {stats.labeled_sequences} sequences / {stats.subjects} subjects")
    print(json.dumps(summary, sort_keys=True))
    write_manifest(out, "ingest", cfg, {"cache": cache, "index": sidecar}, started)
    return EXIT_OK


def cmd_train(cfg, out: Path, started):
    spec = resolve_arch(cfg["arch"], cfg["input_size"])
    samples = load_samples(cfg, spec)
    tcfg = train_config(cfg)
    if cfg["no_val"] or len({s.subject_id for s in samples}) < 5:
        train_s, val_s = samples, []
    else:
        train_s, val_s = make_folds(samples, 5, cfg["seed"]).split(samples, 0)
    state, history = train(spec, train_s, val_s or None, tcfg,
                           on_epoch=lambda r: logger.info("epoch %(epoch)d loss %(loss).4f", r))
    ckpt = out / "model.ckpt"
    save_checkpoint(state, ckpt)
    metrics = {"arch": spec.name, "params": count_params(spec).param_count,
               "train_samples": len(train_s), "val_samples": len(val_s),
               "history": history, "train_config": tcfg.to_dict()}
    if val_s:
        acc, conf = evaluate(state, val_s)
        metrics.update(val_accuracy=acc, confusion=conf.tolist())
    mpath = out / "train_metrics.json"
    _write_json(mpath, metrics)
    save_spec(spec, out / "arch.json")
    print(json.dumps({k: v for k, v in metrics.items() if k != "history"}, sort_keys=True))
    write_manifest(out, "train", cfg, {"checkpoint": ckpt, "metrics": mpath}, started, spec)
    return EXIT_OK


def cmd_crossval(cfg, out: Path, started):
    spec = resolve_arch(cfg["arch"], cfg["input_size"])
    samples = load_samples(cfg, spec)
    tcfg = train_config(cfg)
    result = cross_validate(spec, samples, cfg["k"], tcfg, workers=cfg["fold_workers"])
    rows = [(f + 1, n, f"{a:.4f}") for f, (a, n) in
            enumerate(zip(result.fold_accuracies, result.test_counts))]
    print(_table(rows + [("mean", sum(result.test_counts), f"{result.mean:.4f}")],
                 ("fold", "test", "accuracy")), file=sys.stderr)
    report = {"arch": spec.name, "params": count_params(spec).param_count, **result.to_dict(),
              "fold_subjects": [sorted(result.plan.test_subjects(f)) for f in range(result.plan.k)],
              "train_config": tcfg.to_dict()}
    path = out / "crossval.json"
    _write_json(path, report)
    print(json.dumps({k: report[k] for k in ("arch", "k", "fold_accuracies", "mean_accuracy")}))
    write_manifest(out, "crossval", cfg, {"metrics": path}, started, spec)
    return EXIT_OK


def _parse_rates(text):
    if not text:
        return MutationRates()
    vals = {}
    for part in text.split(","):
        key, _, val = part.partition("=")
        vals[key.strip()] = float(val)
    base = {k: 0.0 for k in MutationRates().as_dict()}
    unknown = set(vals) - set(base)
    if unknown:
        raise UsageError(f"unknown mutation knob(s) {sorted(unknown)}")
    base.update(vals)
    return MutationRates(**base)


def cmd_explore(cfg, out: Path, started):
    seed_spec = resolve_arch(cfg["seed_arch"], cfg["input_size"])
    samples = load_samples(cfg, seed_spec)
    try:
        coeffs = tuple(float(c) for c in str(cfg["coeffs"]).split(","))
        widths = (tuple(int(w) for w in str(cfg["width_choices"]).split(","))
                  if cfg["width_choices"] else None)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if len(coeffs) != 3:
        raise UsageError("--coeffs needs three comma-separated numbers")
    scfg = SearchConfig(iterations=cfg["iterations"], population=cfg["population"],
                        rates=_parse_rates(cfg["rates"]), width_choices=widths,
                        proxy_epochs=cfg["proxy_epochs"], proxy_subset=cfg["proxy_subset"],
                        seed=cfg["seed"], coeffs=coeffs, warm_start=bool(cfg["warm_start"]))
    constraints = Constraints(cfg["min_accuracy"], cfg["max_params"])
    log_path = out / "explore_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    result = explore(seed_spec, samples, constraints, scfg, log_path=log_path)
    artifacts = {"log": log_path}
    summary = {"evaluated": len(result.log), "feasible": len(result.archive),
               "best_u_trace": result.best_u_trace}
    if result.best is not None:
        best_path = out / "best_arch.json"
        save_spec(replace(result.best.spec, name=f"{seed_spec.name}-explored"), best_path)
        artifacts["best_arch"] = best_path
        summary["best"] = {"accuracy": result.best.accuracy, "params": result.best.params,
                           "macs": result.best.macs, "u_score": result.best.u_score,
                           "arch": str(best_path)}
        code = EXIT_OK
    else:
        if result.infeasible_best is not None:
            path = out / "infeasible_best_arch.json"
            save_spec(result.infeasible_best.spec, path)
            artifacts["infeasible_best_arch"] = path
            summary["infeasible_best"] = {"accuracy": result.infeasible_best.accuracy,
                                          "params": result.infeasible_best.params}
        print("no feasible candidate", file=sys.stderr)
        code = EXIT_INFEASIBLE
    print(json.dumps(summary, sort_keys=True))
    write_manifest(out, "explore", cfg, artifacts, started, seed_spec)
    return code


def cmd_bench(cfg, out: Path, started):
    if cfg["runs"] < 10:
        raise BenchError("runs >= 10 required")
    if cfg["watts"] is not None and not cfg["watts"] > 0:
        raise BenchError("--watts must be positive")
    state = load_checkpoint(cfg["checkpoint"])
    report = measure(state, warmup=cfg["warmup"], runs=cfg["runs"], watts=cfg["watts"])
    doc = report.to_dict()
    if cfg["batched"]:
        doc["batched_images_per_sec"] = measure_batched(state)
    text = json.dumps(doc, indent=1)
    print(text)
    lat = report.latency_ms
    print(_table([(f"{lat['mean']:.3f}", f"{lat['p50']:.3f}", f"{lat['p95']:.3f}",
                   f"{report.fps:.1f}",
                   "-" if report.images_per_sec_per_watt is None else f"{report.images_per_sec_per_watt:.2f}")],
                 ("mean ms", "p50 ms", "p95 ms", "FPS", "img/s/W")), file=sys.stderr)
    artifacts = {}
    if cfg["report"]:
        Path(cfg["report"]).write_text(text + "\n", encoding="utf-8")
        artifacts["report"] = cfg["report"]
    write_manifest(out, "bench", cfg, artifacts, started, state.spec)
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "train": cmd_train, "crossval": cmd_crossval,
            "explore": cmd_explore, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = _now()
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        with thread_limit(cfg["threads"]):
            return COMMANDS[args.command](cfg, out, started)
    except (DataError, ArchError, CheckpointError, OSError) as exc:
        print(f"nanonet: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ValueError) as exc:
        print(f"nanonet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
