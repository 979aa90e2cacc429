"""Command-line entry points: benchmarks, sweeps, the admission replay, synth.

Results always land in two files, ``<out>.csv`` and ``<out>.json``, carrying
identical rows; the CSV is the primary artifact, the JSON a convenience
mirror for scripting.
"""

import argparse
import sys

from .domain import ConfigError, PipelineConfig, config_from_mapping, config_keys, parse_kv, validate_config
from .frontend import default_lexicon
from .harness import (
    HarnessError,
    LoadProfile,
    bench_row,
    load_texts,
    replay_admission_scenario,
    write_csv,
    write_json,
)
from .scheduler import CostModel, cost_model_keys
from .synthesis import synthesize_chunks
from .vocoder import write_wav


def load_settings(path: str | None) -> tuple[PipelineConfig, CostModel]:
    """Reads pipeline and cost settings from one key-value file.

    Unknown keys are an error so typos fail loudly instead of silently
    benchmarking the defaults.
    """
    if path is None:
        return validate_config(PipelineConfig()), CostModel.default()
    with open(path, "r", encoding="utf-8") as fh:
        mapping = parse_kv(fh.read())
    unknown = set(mapping) - config_keys() - cost_model_keys()
    if unknown:
        raise ConfigError(f"unknown settings key(s): {sorted(unknown)}")
    cfg = config_from_mapping(mapping)
    if any(key in mapping for key in cost_model_keys()):
        cost = CostModel.from_mapping(mapping)
    else:
        cost = CostModel.default()
    return cfg, cost


def _add_shared_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value settings file (pipeline + costs)")
    parser.add_argument("--duration", type=float, default=30.0, help="seconds of trace per run")
    parser.add_argument("--text-class", default="mixed", choices=("short", "medium", "long", "mixed"))
    parser.add_argument("--texts", help="alternative class<TAB>text fixture file")
    parser.add_argument(
        "--pipeline", default="incremental", choices=("incremental", "baseline", "both")
    )
    parser.add_argument("--warmup", type=float, default=5.0, help="seconds of requests to discard")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="results", help="output basename; writes <out>.csv and <out>.json")


def _run_rows(args, qps_values: list[int]) -> int:
    cfg, cost = load_settings(args.config)
    fixtures = load_texts(args.texts) if args.texts else None
    pipelines = ("incremental", "baseline") if args.pipeline == "both" else (args.pipeline,)
    rows = []
    for qps in qps_values:
        for pipeline in pipelines:
            profile = LoadProfile(
                qps=qps, duration_seconds=args.duration, text_class=args.text_class, seed=args.seed
            )
            row = bench_row(
                pipeline, profile, cfg, cost, warmup_seconds=args.warmup, fixtures=fixtures
            )
            rows.append(row)
            print(
                f"{pipeline} qps={qps} class={args.text_class}: "
                f"fcl_mean={row['fcl_mean']:.4f}s lcl_mean={row['lcl_mean']:.4f}s "
                f"rtf_mean={row['rtf_mean']:.4f} over {row['requests']} requests"
            )
    write_csv(rows, args.out + ".csv")
    write_json(rows, args.out + ".json")
    print(f"wrote {args.out}.csv and {args.out}.json")
    return 0


def _cmd_bench(args) -> int:
    return _run_rows(args, [args.qps])


def _cmd_sweep(args) -> int:
    if args.qps_stop < args.qps_start or args.qps_step < 1:
        raise ValueError("sweep needs qps_stop >= qps_start and qps_step >= 1")
    return _run_rows(args, list(range(args.qps_start, args.qps_stop + 1, args.qps_step)))


def _cmd_replay(args) -> int:
    cfg, _ = load_settings(args.config)
    reports = replay_admission_scenario(cfg)
    print("step  frontend      decoder            completed")
    for report in reports:
        print(
            f"{report.step_index:>4}  "
            f"{str(list(report.frontend_ids)):<12}  "
            f"{str(list(report.decoder_ids)):<17}  "
            f"{list(report.completed_ids)}"
        )
    return 0


def _cmd_synth(args) -> int:
    cfg, _ = load_settings(args.config)
    result = synthesize_chunks(args.text, default_lexicon(), cfg)
    write_wav(args.out, result.samples, cfg.sample_rate)
    seconds = result.sample_count / cfg.sample_rate
    print(f"wrote {args.out}: {result.sample_count} samples "
          f"({seconds:.3f}s at {cfg.sample_rate} Hz, {len(result.chunks)} chunks)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incrtts", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run one load profile and write result rows")
    bench.add_argument("--qps", type=int, required=True)
    _add_shared_flags(bench)
    bench.set_defaults(func=_cmd_bench)

    sweep = sub.add_parser("sweep", help="run a range of qps values")
    sweep.add_argument("--qps-start", type=int, required=True)
    sweep.add_argument("--qps-stop", type=int, required=True)
    sweep.add_argument("--qps-step", type=int, default=10)
    _add_shared_flags(sweep)
    sweep.set_defaults(func=_cmd_sweep)

    replay = sub.add_parser(
        "replay", help="print the scripted four-request admission timeline"
    )
    replay.add_argument("--config", help="key = value settings file")
    replay.set_defaults(func=_cmd_replay)

    synth = sub.add_parser("synth", help="synthesize one text to a WAV file")
    synth.add_argument("--text", required=True)
    synth.add_argument("--out", default="out.wav")
    synth.add_argument("--config", help="key = value settings file")
    synth.set_defaults(func=_cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, HarnessError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
