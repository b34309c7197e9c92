"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data/shape error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, pipeline
from .checkpoint import CheckpointError, QuantizedCheckpoint, act_hook
from .config import ConfigError, ExperimentConfig, load_config
from .hdrq import distance_penalty
from .merge import STRATEGIES, _merge_acts, run_merge
from .nnet import CrossEntropy, DimensionError, accuracy, make_objective
from .synthdata import DomainSpecError, write_csv

log = logging.getLogger("hdrqlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_IO = 0, 2, 3, 4


class ProvenanceError(ValueError):
    pass


def _rotation(value: str) -> float:
    v = value[3:] if value.startswith("rot") else value
    return float(v)


def _load_ck(path) -> QuantizedCheckpoint:
    return checkpoint.load(path)


def _target_batches(cfg: ExperimentConfig, rotations, seed: int, split: str = "test"):
    return {pipeline.domain_id(r): getattr(pipeline.make_dataset(cfg, r, seed), split) for r in rotations}


def _write_json(path: Path, obj) -> None:
    checkpoint.atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rots = [cfg.data.source_rotation, *cfg.data.target_rotations]
    for r in rots:
        data = pipeline.make_dataset(cfg, r, args.seed)
        name = pipeline.domain_id(r)
        write_csv(data.train, out / f"{name}_train.csv")
        write_csv(data.test, out / f"{name}_test.csv")
        print(f"{name}: {len(data.train)} train / {len(data.test)} test -> {out}")
    return EXIT_OK


def cmd_train(args, cfg: ExperimentConfig) -> int:
    net, data = pipeline.train_source(cfg, args.seed)
    h = checkpoint.save(net, args.out)
    acc = accuracy(net, data.test)
    print(f"source test accuracy {acc:.4f}")
    print(f"wrote {args.out} (hash {h:016x})")
    return EXIT_OK


def cmd_adapt(args, cfg: ExperimentConfig) -> int:
    src_bytes = Path(args.source).read_bytes()
    source = checkpoint.from_bytes(src_bytes).to_network()
    src_hash = checkpoint.content_hash(src_bytes)
    rot = _rotation(args.target)
    net, data = pipeline.adapt(source, cfg, rot, args.seed)
    checkpoint.save(net, args.out, source_hash=src_hash)
    report = {
        "target": pipeline.domain_id(rot),
        "source_accuracy": accuracy(source, data.test),
        "adapted_accuracy": accuracy(net, data.test),
        "distance_to_source": float(np.sqrt(distance_penalty(net, source))),
        "source_hash": f"{src_hash:016x}",
    }
    _write_json(Path(str(args.out) + ".json"), report)
    print(f"{report['target']}: accuracy {report['source_accuracy']:.4f} -> {report['adapted_accuracy']:.4f}, "
          f"||theta - theta_src|| = {report['distance_to_source']:.4f}")
    return EXIT_OK


def cmd_quantize(args, cfg: ExperimentConfig) -> int:
    adapted_ck = _load_ck(args.checkpoint)
    src_bytes = Path(args.source).read_bytes()
    source = checkpoint.from_bytes(src_bytes).to_network()
    src_hash = checkpoint.content_hash(src_bytes)
    if adapted_ck.source_hash not in (0, src_hash):
        log.warning("adapted checkpoint was not derived from %s", args.source)
    adapted = adapted_ck.to_network()
    rot = _rotation(args.target)
    data = pipeline.make_dataset(cfg, rot, args.seed)
    result = pipeline.quantize(adapted, source, data, cfg, args.seed)
    checkpoint.save(result.quantized, args.out, source_hash=src_hash)
    result.write_trace(Path(str(args.out) + ".trace.csv"))
    fp_acc = accuracy(adapted, data.test)
    q_acc = pipeline.checkpoint_accuracy(result.quantized, data.test)
    _write_json(Path(str(args.out) + ".json"), {
        "target": pipeline.domain_id(rot), "method": cfg.ptq.method,
        "weight_bits": cfg.ptq.weight_bits, "act_bits": cfg.ptq.act_bits,
        "fp_accuracy": fp_acc, "quantized_accuracy": q_acc,
        "distance_to_source": result.distance_to_source, "final_loss": result.final_loss,
        "source_hash": f"{src_hash:016x}",
    })
    print(f"{cfg.ptq.method} W{cfg.ptq.weight_bits}A{cfg.ptq.act_bits}: accuracy {fp_acc:.4f} (fp) -> "
          f"{q_acc:.4f} (quantized), distance to source {result.distance_to_source:.4f}")
    return EXIT_OK


def cmd_merge(args, cfg: ExperimentConfig) -> int:
    if len(args.checkpoints) < 2:
        raise ConfigError("merge needs at least two checkpoints")
    strategy = args.strategy or cfg.merge.strategy
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}")
    cks = [_load_ck(p) for p in args.checkpoints]
    hashes = {ck.source_hash for ck in cks}
    if len(hashes) > 1 and not args.allow_mixed_source:
        raise ProvenanceError("checkpoints come from different source models "
                              "(pass --allow-mixed-source to merge anyway)")
    rots = [_rotation(t) for t in args.targets.split(",")] if args.targets else list(cfg.data.target_rotations)
    evalb = _target_batches(cfg, rots, args.seed)
    rng = np.random.default_rng(pipeline.derive_seed(args.seed, "merge", strategy))
    report = run_merge(cks, strategy, n_candidates=cfg.merge.n_candidates, rng=rng,
                       symmetric=cfg.merge.symmetric, jobs=args.jobs, eval_batches=evalb)
    checkpoint.save(report.chosen.checkpoint, args.out)
    _write_json(Path(str(args.out) + ".json"), report.to_dict())
    report.write_scores_csv(Path(str(args.out) + ".scores.csv"))
    for name, acc in report.per_domain_metric.items():
        print(f"{name}: accuracy {acc:.4f}")
    print(f"strategy={strategy} harmonic_mean={report.harmonic_mean:.4f} chosen_score={report.chosen.score:.6f}")
    return EXIT_OK


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    ck = _load_ck(args.checkpoint)
    rots = [_rotation(t) for t in args.targets.split(",")] if args.targets else list(cfg.data.target_rotations)
    accs = {}
    for name, batch in _target_batches(cfg, rots, args.seed).items():
        accs[name] = pipeline.checkpoint_accuracy(ck, batch)
        print(f"{name}: accuracy {accs[name]:.4f}")
    if args.out:
        _write_json(Path(args.out), accs)
    return EXIT_OK


def _analysis_loss(cfg: ExperimentConfig, cks):
    if cfg.analysis.loss == "cross_entropy":
        return CrossEntropy(act_hook(_merge_acts(cks)))
    return make_objective(cfg.analysis.loss)


def _eval_batch(cfg, args):
    if cfg.analysis.loss != "cross_entropy":
        return None
    rot = _rotation(args.target) if args.target else cfg.data.target_rotations[0]
    return pipeline.make_dataset(cfg, rot, args.seed).test


def cmd_barrier(args, cfg: ExperimentConfig) -> int:
    cks = [_load_ck(args.a), _load_ck(args.b)]
    rep = analysis.error_barrier(cks[0].to_network(), cks[1].to_network(), _eval_batch(cfg, args),
                                 cfg.analysis.grid_n, _analysis_loss(cfg, cks))
    rep.write_csv(args.out)
    print(f"barrier={rep.barrier:.9g} endpoints=({rep.endpoint_losses[0]:.6g}, {rep.endpoint_losses[1]:.6g}) "
          f"grid_n={len(rep.lambdas)}")
    return EXIT_OK


def cmd_surface(args, cfg: ExperimentConfig) -> int:
    cks = [_load_ck(args.a), _load_ck(args.b)]
    origin = _load_ck(args.origin).to_network()
    r = cfg.analysis.resolution
    grid = analysis.surface_grid(origin, cks[0].to_network(), cks[1].to_network(), _eval_batch(cfg, args),
                                 (r, r), loss=_analysis_loss(cfg, cks))
    grid.write_csv(args.out)
    print(f"surface {r}x{r}: min={grid.grid.min():.6g} max={grid.grid.max():.6g}")
    return EXIT_OK


REPORT_FIELDS = ["seed", "method", "bits", "target_acc_mean", "distance_mean", "barrier",
                 "hmean_naive", "hmean_sampled", "hmean_random", "sampled_score", "naive_score"]


def _run_seed(job):
    cfg, seed = job
    return [r.row() for r in pipeline.run_seed(cfg, seed)]


def run_report(cfg: ExperimentConfig, master_seed: int, jobs: int = 1) -> list[dict]:
    seeds = [pipeline.derive_seed(master_seed, "report", str(i)) % (2**32) for i in range(cfg.analysis.seeds)]
    work = [(cfg, s) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            chunks = list(pool.map(_run_seed, work))
    else:
        chunks = [_run_seed(w) for w in work]
    return [row for chunk in chunks for row in chunk]


def summarize(rows: list[dict]) -> list[dict]:
    out = []
    keys = sorted({(r["bits"], r["method"]) for r in rows}, key=lambda k: (-k[0], k[1]))
    for bits, method in keys:
        sel = [r for r in rows if r["bits"] == bits and r["method"] == method]
        summary = {"bits": bits, "method": method, "n": len(sel)}
        for f in REPORT_FIELDS[3:]:
            vals = np.array([r[f] for r in sel])
            summary[f"{f}_mean"] = float(vals.mean())
            summary[f"{f}_var"] = float(vals.var(ddof=1)) if len(vals) > 1 else 0.0
        out.append(summary)
    return out


def _write_rows(path: Path, rows: list[dict], fields) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    checkpoint.atomic_write(path, buf.getvalue().encode())


def cmd_report(args, cfg: ExperimentConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_report(cfg, args.seed, args.jobs)
    _write_rows(out / "runs.csv", rows, REPORT_FIELDS)
    summary = summarize(rows)
    _write_rows(out / "summary.csv", summary, list(summary[0].keys()))
    for s in summary:
        print(f"W{s['bits']} {s['method']:<10} acc={s['target_acc_mean_mean']:.4f} "
              f"barrier={s['barrier_mean']:.4f} hmean(sampled)={s['hmean_sampled_mean']:.4f} "
              f"hmean(naive)={s['hmean_naive_mean']:.4f} dist={s['distance_mean_mean']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file")
    common.add_argument("--seed", type=int, default=0, help="master seed (u64)")
    common.add_argument("--jobs", type=int, default=1, help="worker count")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hdrqlab", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write domain datasets as CSV")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train the source model")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("adapt", parents=[common], help="fine-tune the source on a target domain")
    s.add_argument("source")
    s.add_argument("--target", required=True, help="target rotation in degrees (or rotNN)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("quantize", parents=[common], help="post-training quantization")
    s.add_argument("checkpoint")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("merge", parents=[common], help="merge quantized checkpoints")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--strategy", choices=STRATEGIES)
    s.add_argument("--targets", help="comma-separated target rotations to evaluate on")
    s.add_argument("--allow-mixed-source", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint per target domain")
    s.add_argument("checkpoint")
    s.add_argument("--targets")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    for name, fn, help_ in (("barrier", cmd_barrier, "loss along the linear path as CSV"),
                            ("surface", cmd_surface, "loss on a 2-D plane as CSV")):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("a")
        s.add_argument("b")
        s.add_argument("--target")
        s.add_argument("--out", required=True)
        if name == "surface":
            s.add_argument("--origin", required=True, help="checkpoint at the plane origin")
        s.set_defaults(func=fn)

    s = sub.add_parser("report", parents=[common], help="multi-seed desk experiment")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_report)
    return p


NEEDS_DATA = {"gen-data", "train", "adapt", "quantize", "report"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        required = ("data",) if args.command in NEEDS_DATA else ()
        cfg = load_config(args.config, required) if args.config else ExperimentConfig()
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ProvenanceError, CheckpointError, DimensionError, DomainSpecError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
