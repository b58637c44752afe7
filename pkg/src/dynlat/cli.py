"""Command-line harness: data generation, training, decoding, sweeps, reports.

Subcommands:

    gen-data   draw a synthetic dataset to a JSONL file
    train      train a model (optionally with segment cropping) to a checkpoint
    decode     offline greedy decoding of a dataset
    stream     chunked streaming decode under one revision policy
    sweep      evaluate a grid of revision policies, emit report + series + figure
    report     join sweep reports by latency and compute relative improvements

Every command is reproducible from its flags and seed; result files contain
no timestamps (the per-row ``wall_clock_s`` measurement is the one volatile
field). Exit codes: 0 success, 1 usage/config error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

import dynlat
from dynlat import checkpoint as ckpt
from dynlat import data as dataio
from dynlat import reporting
from dynlat.errors import ConfigError, DynlatError, NumericError, TrainingDiverged
from dynlat.model import EncoderConfig, PredictionNetConfig, desk_config, init_model, wide_lookahead_config
from dynlat.numerics import SeededRng
from dynlat.revision import RevisionPolicy, algorithmic_latency
from dynlat.training import (
    SyntheticTaskSpec,
    TrainConfig,
    evaluate,
    gen_synthetic,
    stream_utterance,
    train,
)

RESULTS_TAG = "dynlat-results"

PRESET_CONFIGS = {
    "desk": desk_config,
    "wide-lookahead": wide_lookahead_config,
}


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1; reserve 2 for numeric failures
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _load_model_config(args) -> tuple:
    if args.model_config:
        with open(args.model_config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
        return EncoderConfig.from_dict(raw["encoder"]), PredictionNetConfig.from_dict(raw["predictor"])
    return PRESET_CONFIGS[args.preset]()


def _write_results(path, header: dict, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(reporting.canonical_json({"format": RESULTS_TAG, "version": 1, **header}) + "\n")
        for row in sorted(rows, key=lambda r: r["id"]):
            fh.write(reporting.canonical_json(row) + "\n")


def cmd_gen_data(args) -> int:
    spec = SyntheticTaskSpec(
        vocab_size=args.vocab,
        frames_per_token=args.frames_per_token,
        feature_dim=args.feature_dim,
        noise_sigma=args.noise_sigma,
        min_label_len=args.min_len,
        max_label_len=args.max_len,
    )
    utts = gen_synthetic(spec, args.n, args.seed)
    dataio.write_dataset(args.out, utts, spec, args.seed)
    mean_frames = sum(len(u.features) for u in utts) / len(utts)
    print(f"wrote {len(utts)} utterances to {args.out} (mean {mean_frames:.1f} frames, vocab {spec.vocab_size})")
    return 0


def cmd_train(args) -> int:
    enc_cfg, pred_cfg = _load_model_config(args)
    dataset, _ = dataio.read_dataset(args.data)
    model = init_model(enc_cfg, pred_cfg, SeededRng(args.seed).child("init"))
    cfg = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        num_segments=args.segments,
        seed=args.seed,
    )
    curve = train(model, dataset, cfg)
    ckpt.save_model(args.out, model)
    loss_log = Path(args.loss_log) if args.loss_log else Path(str(args.out) + ".loss.csv")
    with loss_log.open("w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(curve):
            fh.write(f"{i},{loss!r}\n")
    print(f"trained {cfg.steps} steps (segments={cfg.num_segments}); final loss {curve[-1]:.4f}")
    print(f"checkpoint: {args.out}")
    print(f"loss curve: {loss_log}")
    return 0


def cmd_decode(args) -> int:
    model = ckpt.load_model(args.checkpoint)
    dataset, _ = dataio.read_dataset(args.data)
    result = evaluate(model, dataset)
    header = {
        "mode": "offline",
        "checkpoint": str(args.checkpoint),
        "mean_cer": result.mean_cer,
        "utterances": len(result.per_utterance),
    }
    if args.out:
        _write_results(args.out, header, result.per_utterance)
        print(f"results: {args.out}")
    print(f"offline mean CER: {result.mean_cer:.4f} over {len(dataset)} utterances")
    return 0


def _policy_from_args(args) -> RevisionPolicy:
    return RevisionPolicy(
        chunk_frames=args.chunk_frames,
        encoder_revise=args.encoder_revise,
        decoder_revise=args.decoder_revise,
    )


def cmd_stream(args) -> int:
    model = ckpt.load_model(args.checkpoint)
    dataset, _ = dataio.read_dataset(args.data)
    policy = _policy_from_args(args)
    policy.validate(model.encoder.stride_product)
    rows = []
    from dynlat.training import cer as cer_fn

    for utt in dataset:
        hyp, session = stream_utterance(model, policy, utt.features)
        if args.trace:
            for event in session.trace():
                print(reporting.canonical_json({"utterance": utt.uid, **event}))
        rows.append(
            {
                "id": utt.uid,
                "cer": cer_fn(utt.labels, hyp.tokens),
                "ref_len": len(utt.labels),
                "hyp": list(hyp.tokens),
            }
        )
    mean_cer = sum(r["cer"] for r in rows) / len(rows)
    latency = algorithmic_latency(policy)
    header = {
        "mode": "streaming",
        "checkpoint": str(args.checkpoint),
        "policy": {
            "chunk_frames": policy.chunk_frames,
            "encoder_revise": policy.encoder_revise,
            "decoder_revise": policy.decoder_revise,
        },
        "latency_ms": latency,
        "mean_cer": mean_cer,
        "utterances": len(rows),
    }
    if args.out:
        _write_results(args.out, header, rows)
        print(f"results: {args.out}")
    print(
        f"streaming mean CER: {mean_cer:.4f} at latency {latency:.0f} ms "
        f"(chunk={policy.chunk_frames}, enc_rev={policy.encoder_revise}, dec_rev={policy.decoder_revise})"
    )
    return 0


def cmd_sweep(args) -> int:
    with open(args.config, "r", encoding="utf-8") as fh:
        config = json.load(fh)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if "checkpoints" in config:
        entries = [(e["name"], e["path"]) for e in config["checkpoints"]]
    elif "checkpoint" in config:
        entries = [(Path(config["checkpoint"]).stem, config["checkpoint"])]
    else:
        raise ConfigError("sweep config needs 'checkpoint' or 'checkpoints'")
    grid = config.get("grid", {})
    re_list = grid.get("encoder_revise", [0])
    rd_list = grid.get("decoder_revise", [0])
    cf_list = grid.get("chunk_frames", [40])
    if not (re_list and rd_list and cf_list):
        raise ConfigError("sweep grid lists must be non-empty")
    dataset_path = config.get("dataset")
    if not dataset_path:
        raise ConfigError("sweep config needs 'dataset'")
    for _, path in entries:
        if not Path(path).exists():
            raise ConfigError(f"checkpoint not found: {path}")
    dataset, _ = dataio.read_dataset(dataset_path)
    seed = config.get("seed", 0)
    digest = reporting.config_hash(config)

    rows_by_model = {}
    for name, path in entries:
        model = ckpt.load_model(path)
        rows = []
        for cf in cf_list:
            for enc_rev in re_list:
                for dec_rev in rd_list:
                    policy = RevisionPolicy(chunk_frames=cf, encoder_revise=enc_rev, decoder_revise=dec_rev)
                    started = time.perf_counter()
                    try:
                        result = evaluate(model, dataset, policy)
                        rows.append(
                            reporting.SweepRow(
                                model=name,
                                encoder_revise=enc_rev,
                                decoder_revise=dec_rev,
                                chunk_frames=cf,
                                latency_ms=algorithmic_latency(policy),
                                mean_cer=result.mean_cer,
                                utterances=len(result.per_utterance),
                                wall_clock_s=round(time.perf_counter() - started, 3),
                            )
                        )
                    except DynlatError as exc:
                        rows.append(
                            reporting.SweepRow(
                                model=name,
                                encoder_revise=enc_rev,
                                decoder_revise=dec_rev,
                                chunk_frames=cf,
                                latency_ms=algorithmic_latency(policy),
                                mean_cer=None,
                                utterances=0,
                                wall_clock_s=round(time.perf_counter() - started, 3),
                                error=str(exc),
                            )
                        )
        report = reporting.SweepReport(
            metadata={
                "model": name,
                "checkpoint": str(path),
                "dataset": str(dataset_path),
                "config_hash": digest,
                "seed": seed,
                "code_version": dynlat.__version__,
            },
            rows=rows,
        )
        report_path = out_dir / f"{name}.report.jsonl"
        reporting.write_report(report_path, report)
        reporting.write_series(out_dir / f"{name}.series.csv", rows)
        rows_by_model[name] = rows
        print(f"{name}: {len(rows)} grid points -> {report_path}")
        for row in rows:
            status = f"CER {row.mean_cer:.4f}" if row.error is None else f"ERROR {row.error}"
            print(
                f"  enc_rev={row.encoder_revise} dec_rev={row.decoder_revise} "
                f"chunk={row.chunk_frames} latency={row.latency_ms:.0f}ms {status}"
            )
    figure_path = out_dir / "cer_vs_revisions.png"
    reporting.render_sweep_figure(figure_path, rows_by_model)
    print(f"figure: {figure_path}")
    return 0


def cmd_report(args) -> int:
    reports = [reporting.read_report(p) for p in args.reports]
    names = args.names.split(",") if args.names else [str(rep.metadata.get("model", f"report{i}")) for i, rep in enumerate(reports)]
    if len(names) != len(reports):
        raise ConfigError(f"{len(names)} names for {len(reports)} reports")
    joined = reporting.compare_reports(reports, names)
    print(reporting.format_comparison_table(joined, names))
    unmatched = [e["latency_ms"] for e in joined if e.get("unmatched")]
    if unmatched:
        print(f"note: latencies missing from the base report: {unmatched}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    comparison_path = out_dir / "comparison.jsonl"
    with comparison_path.open("w", encoding="utf-8") as fh:
        fh.write(reporting.canonical_json({"format": "dynlat-comparison", "version": 1, "reports": names}) + "\n")
        for entry in joined:
            fh.write(reporting.canonical_json(entry) + "\n")
    reporting.render_comparison_figure(out_dir / "cer_by_latency.png", joined, names)
    print(f"comparison: {comparison_path}")
    print(f"figure: {out_dir / 'cer_by_latency.png'}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="dynlat", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="draw a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of utterances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", type=int, default=16)
    p.add_argument("--frames-per-token", type=int, default=4)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--min-len", type=int, default=2)
    p.add_argument("--max-len", type=int, default=10)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model to a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=400)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--segments", type=int, default=0, help="segment-cropping count; 0, 3, and 5 are the stock presets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", choices=sorted(PRESET_CONFIGS), default="desk")
    p.add_argument("--model-config", help="JSON file with encoder/predictor config (overrides --preset)")
    p.add_argument("--loss-log", help="loss curve CSV path (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="offline greedy decoding")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("stream", help="streaming decode under one revision policy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--chunk-frames", type=int, default=40)
    p.add_argument("--encoder-revise", type=int, default=0)
    p.add_argument("--decoder-revise", type=int, default=0)
    p.add_argument("--trace", action="store_true", help="print one JSON event per decode step")
    p.add_argument("--out")
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("sweep", help="evaluate a policy grid")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out-dir", default="sweep-out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="compare sweep reports by latency")
    p.add_argument("reports", nargs="+")
    p.add_argument("--names", help="comma-separated display names (default: report metadata)")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TrainingDiverged, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DynlatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
