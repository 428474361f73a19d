"""Command line front end: generate streams, run the engine, inspect reports."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import (EngineConfig, apply_overrides, default_benchmark_config,
                     load_config, parse_config_text)
from .evaluation import aggregate, evaluate_stage
from .harness import (SCHEMA_VERSION, Stream, StreamSpec, generate_stream,
                      largest_remainder, load_embeddings, load_embeddings_text,
                      load_report, report_json, save_embeddings,
                      save_embeddings_text, save_report)
from .pipeline import run_stream


def _spec_from_args(args) -> StreamSpec:
    if args.classes is not None:
        # derive the class blocks: the known fraction first, the rest split
        # evenly over the incremental stages
        n_known = int(round(args.known_fraction * args.classes))
        if not 0 < n_known < args.classes:
            raise ValueError("known fraction leaves no known or no novel classes")
        rest = args.classes - n_known
        novel = tuple(largest_remainder(rest, [1 / 3] * 3))
    else:
        n_known = args.n_known
        novel = tuple(int(p) for p in args.novel_per_stage.split(",") if p.strip())
    return StreamSpec(
        n_known=n_known,
        novel_per_stage=novel,
        samples_per_class=args.samples_per_class,
        dim=args.dim,
        center_scale=args.center_scale,
        cluster_std=args.cluster_std,
    )


def cmd_generate(args) -> int:
    spec = _spec_from_args(args)
    stream = generate_stream(spec, args.seed)
    os.makedirs(args.out, exist_ok=True)
    ext = "txt" if args.format == "text" else "emb"
    save = save_embeddings_text if args.format == "text" else save_embeddings
    files = {}
    for stage, (X, y) in enumerate(stream.train_batches):
        name = f"stage_{stage}.{ext}"
        save(os.path.join(args.out, name), X, y)
        files[f"stage_{stage}"] = name
    test_name = f"test.{ext}"
    save(os.path.join(args.out, test_name), stream.test_X, stream.test_y)
    files["test"] = test_name
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": args.seed,
        "format": args.format,
        "n_stages": spec.n_stages,
        "spec": {
            "n_known": spec.n_known,
            "novel_per_stage": list(spec.novel_per_stage),
            "samples_per_class": spec.samples_per_class,
            "dim": spec.dim,
            "center_scale": spec.center_scale,
            "cluster_std": spec.cluster_std,
            "split_table": [list(r) for r in spec.split_table],
        },
        "files": files,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    total = sum(len(X) for X, _ in stream.train_batches)
    print(f"wrote {spec.n_stages} train stages ({total} samples) "
          f"and {len(stream.test_X)} test samples to {args.out}")
    return 0


def _load_stream(data_dir: str) -> Stream:
    with open(os.path.join(data_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError("unsupported manifest schema version")
    raw = manifest["spec"]
    spec = StreamSpec(
        n_known=raw["n_known"],
        novel_per_stage=tuple(raw["novel_per_stage"]),
        samples_per_class=raw["samples_per_class"],
        dim=raw["dim"],
        center_scale=raw["center_scale"],
        cluster_std=raw["cluster_std"],
        split_table=tuple(tuple(r) for r in raw["split_table"]),
    )
    loader = load_embeddings_text if manifest["format"] == "text" else load_embeddings
    batches = []
    appeared = []
    seen: set = set()
    for stage in range(manifest["n_stages"]):
        path = os.path.join(data_dir, manifest["files"][f"stage_{stage}"])
        X, y = loader(path)
        if y is None:
            raise ValueError(f"stage {stage} file lacks labels")
        batches.append((X, y))
        seen |= set(y.tolist())
        appeared.append(sorted(seen))
    test_X, test_y = loader(os.path.join(data_dir, manifest["files"]["test"]))
    if test_y is None:
        raise ValueError("test file lacks labels")
    return Stream(
        spec=spec,
        train_batches=batches,
        test_X=test_X,
        test_y=test_y,
        appeared_by_stage=appeared,
        known_classes=sorted(set(batches[0][1].tolist())),
        centers=np.zeros((spec.n_classes, spec.dim)),
    )


def _config_from_args(args) -> EngineConfig:
    cfg = default_benchmark_config(args.seed) if args.preset == "benchmark" \
        else EngineConfig(seed=args.seed)
    if args.config:
        cfg = load_config(args.config, cfg)
    text = "\n".join(args.set or [])
    if text:
        cfg = parse_config_text(text, cfg)
    overrides = {"seed": args.seed}
    if args.no_ied:
        overrides["ied"] = False
    if args.no_jdn:
        overrides["jdn"] = False
    if args.no_cio:
        overrides["cio"] = False
    return apply_overrides(cfg, overrides)


def _print_summary(report: dict) -> None:
    summary = report.get("summary", {})
    if summary:
        for key in ("m_o", "m_d", "m_f"):
            v = summary.get(key)
            print(f"{key} = {v:.4f}" if isinstance(v, float) else f"{key} = {v}")
    for stage in report["stages"]:
        m = stage["metrics"]
        parts = [f"stage {stage['stage']}:"]
        parts.append(f"estimate={stage['estimated_total_classes']}")
        for key in ("overall", "known_accuracy", "novel_accuracy"):
            if key in m:
                parts.append(f"{key}={m[key]:.4f}")
        print(" ".join(parts))


def cmd_run(args) -> int:
    cfg = _config_from_args(args)
    if args.data:
        stream = _load_stream(args.data)
    else:
        stream = generate_stream(_spec_from_args(args), args.seed)
    report = run_stream(cfg, stream)
    if args.out:
        save_report(args.out, report)
        print(f"report written to {args.out}")
    _print_summary(report)
    return 0


def _recompute_summary(report: dict):
    """Re-derive run metrics from the per-stage predictions, when stored."""
    staged = [s for s in report.get("stages", []) if "predictions" in s]
    if not staged:
        return None
    base = next((s for s in staged if s["stage"] == 0), None)
    if base is None:
        return None
    known = sorted(set(base["predictions"]["true"]))
    metrics = []
    for s in sorted(staged, key=lambda s: s["stage"]):
        p = s["predictions"]
        metrics.append(evaluate_stage(np.asarray(p["true"]),
                                      np.asarray(p["predicted"]),
                                      known, s["stage"]))
    return aggregate(metrics).as_dict()


def cmd_evaluate(args) -> int:
    report = load_report(args.report)
    summary = _recompute_summary(report)
    if summary is None:
        summary = report.get("summary")
        if not summary:
            print("report has no predictions or summary metrics", file=sys.stderr)
            return 1
        print("note: no stored predictions, using saved summary", file=sys.stderr)
    for key in ("m_o", "m_d", "m_f"):
        v = summary.get(key)
        print(f"{key} = {v:.6f}" if isinstance(v, float) else f"{key} = {v}")
    failures = []
    if args.min_mo is not None and summary.get("m_o", 0.0) < args.min_mo:
        failures.append(f"m_o below {args.min_mo}")
    if args.min_md is not None and (summary.get("m_d") or 0.0) < args.min_md:
        failures.append(f"m_d below {args.min_md}")
    if args.max_mf is not None and summary.get("m_f", 1.0) > args.max_mf:
        failures.append(f"m_f above {args.max_mf}")
    for f in failures:
        print(f"FAIL {f}", file=sys.stderr)
    return 1 if failures else 0


def cmd_report(args) -> int:
    report = load_report(args.report)
    if args.canonical:
        sys.stdout.write(report_json(report, include_timing=False) + "\n")
        return 0
    print(f"run seed {report.get('seed')} "
          f"({len(report.get('stages', []))} stages)")
    _print_summary(report)
    for stage in report["stages"]:
        c = stage["counts"]
        s = stage["storage"]
        print(f"stage {stage['stage']}: train={c['train']} "
              f"known={c['predicted_known']} novel={c['predicted_novel']} "
              f"discarded={c['discarded']} "
              f"pool_bytes={s['static_pool_bytes'] + s['dynamic_pool_bytes']}")
        for note in stage.get("notes", []):
            print(f"  note: {note}")
    return 0


def _add_stream_args(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=None,
                   help="total class count; wins over --n-known/--novel-per-stage")
    p.add_argument("--known-fraction", type=float, default=0.7,
                   help="share of --classes that is labeled up front")
    p.add_argument("--n-known", type=int, default=14)
    p.add_argument("--novel-per-stage", default="2,2,2",
                   help="comma list of new classes per incremental stage")
    p.add_argument("--samples-per-class", type=int, default=60)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--center-scale", type=float, default=1.0)
    p.add_argument("--cluster-std", type=float, default=0.15)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ccdkit",
        description="continual category discovery over embedding streams")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a labeled/unlabeled stream")
    _add_stream_args(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--format", choices=("binary", "text"), default="binary")
    g.set_defaults(fn=cmd_generate)

    r = sub.add_parser("run", help="run the engine over a stream")
    _add_stream_args(r)
    r.add_argument("--data", help="directory written by generate; omit to synthesize")
    r.add_argument("--config", help="key=value config file")
    r.add_argument("--preset", choices=("default", "benchmark"), default="benchmark")
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="config override, repeatable")
    r.add_argument("--no-ied", action="store_true",
                   help="disable discriminative embedding training")
    r.add_argument("--no-jdn", action="store_true",
                   help="disable pooled joint discovery")
    r.add_argument("--no-cio", action="store_true",
                   help="disable the orthogonal incremental classifier")
    r.add_argument("--out", help="write the run report JSON here")
    r.set_defaults(fn=cmd_run)

    e = sub.add_parser("evaluate", help="print metrics from a run report")
    e.add_argument("--report", required=True)
    e.add_argument("--min-mo", type=float, default=None)
    e.add_argument("--min-md", type=float, default=None)
    e.add_argument("--max-mf", type=float, default=None)
    e.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="render a saved run report")
    p.add_argument("--report", required=True)
    p.add_argument("--canonical", action="store_true",
                   help="emit canonical JSON with timing removed")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
