"""Command-line surface.

Subcommands: train-source, run, sweep, replay-trace, plot, dump-stream.
Exit codes: 0 success, 1 replay mismatch, 2 configuration error,
3 numeric/training failure. Errors also emit one machine-readable JSON
line on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .config import config_hash, config_json, load_config_file, policy_config_from_section, run_config_from_document
from .errors import ConfigError, DriftlabError, NumericError
from .flip import FlipConfig
from .harness import run_experiment, sweep, train_source_model
from .model import classification_accuracy
from .policies import replay_columns
from .stream import StreamState, make_source_dataset
from .tracefile import atomic_write_text, read_trace, write_events, write_sweep_table, write_trace
from .svgplot import write_svg

EXIT_OK = 0
EXIT_REPLAY_MISMATCH = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _error_line(category: str, message: str, **extra) -> None:
    payload = {"error": category, "message": message}
    payload.update(extra)
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to the JSON run config")
    common.add_argument("--seed-override", type=int, default=None, help="replace the master seed")
    common.add_argument("--out-dir", default=".", help="directory for output files")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="driftlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-source", parents=[common], help="train and checkpoint the source model")
    p.add_argument("--out", help="checkpoint path (default <out-dir>/source.ckpt)")

    p = sub.add_parser("run", parents=[common], help="run one adaptation experiment")
    p.add_argument("--checkpoint", help="source checkpoint; trained in-process when omitted")
    p.add_argument("--trace-name", default="trace.csv")

    p = sub.add_parser("sweep", parents=[common], help="grid of runs over config overrides")
    p.add_argument("--grid", required=True, help="JSON object or path to one: {dotted.key: [values]}")
    p.add_argument("--threads", type=int, default=1, help="concurrent sweep cells")
    p.add_argument("--out", help="results table path (default <out-dir>/sweep.csv)")

    p = sub.add_parser("replay-trace", parents=[common], help="recompute trigger columns from lf_raw")
    p.add_argument("--trace", required=True)

    p = sub.add_parser("plot", parents=[common], help="render trace charts to SVG")
    p.add_argument("traces", nargs="+", help="trace CSV paths")
    p.add_argument("--out", help="SVG path (default <out-dir>/plot.svg)")
    p.add_argument("--window", type=int, default=500)

    p = sub.add_parser("dump-stream", parents=[common], help="write the first N stream batches as CSV")
    p.add_argument("--n", type=int, default=10, help="number of batches")
    p.add_argument("--out", help="CSV path (default <out-dir>/stream.csv)")
    return parser


def _load_config(args) -> "RunConfig":
    if not args.config:
        raise ConfigError("--config is required for this command")
    return load_config_file(args.config, seed_override=args.seed_override)


def cmd_train_source(args) -> int:
    config = _load_config(args)
    model = train_source_model(config)
    sampler = config.build_sampler()
    src = config.source_section
    x, y = make_source_dataset(sampler, src["num_samples"], src["seed"])
    acc = classification_accuracy(model, x, y)
    out = args.out or os.path.join(args.out_dir, "source.ckpt")
    ckpt.save_checkpoint(model, out)
    print(f"source model trained: clean accuracy {acc:.4f}")
    print(f"checkpoint written: {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    config = _load_config(args)
    source_model = None
    if args.checkpoint:
        source_model = ckpt.load_checkpoint(args.checkpoint)
        if source_model.arch != config.arch:
            raise ConfigError("checkpoint architecture does not match the config architecture")
    trace_path = os.path.join(args.out_dir, args.trace_name)
    events_path = os.path.join(args.out_dir, "triggers.jsonl")
    try:
        record = run_experiment(config, source_model)
    except NumericError as e:
        partial = getattr(e, "partial_record", None)
        if partial is not None and len(partial):
            write_trace(trace_path, partial)
            write_events(events_path, partial.events, config.echo)
        raise
    write_trace(trace_path, record)
    write_events(events_path, record.events, config.echo)
    print(f"steps: {len(record)}")
    print(f"mean accuracy: {record.mean_accuracy:.4f}")
    print(f"triggers: {record.num_triggers}")
    print(f"trace written: {trace_path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_config(args)
    grid_arg = args.grid
    if os.path.exists(grid_arg):
        with open(grid_arg) as fh:
            grid = json.load(fh)
    else:
        try:
            grid = json.loads(grid_arg)
        except json.JSONDecodeError:
            raise ConfigError(f"--grid is neither a file nor valid JSON: {grid_arg}")
    if not isinstance(grid, dict):
        raise ConfigError("--grid must be a JSON object of {dotted.key: [values]}")
    cells = sweep(config.echo, grid, threads=max(1, args.threads))
    out = args.out or os.path.join(args.out_dir, "sweep.csv")
    write_sweep_table(out, cells, config.echo)
    ok = sum(1 for c in cells if c.status == "ok")
    print(f"sweep cells: {len(cells)} ({ok} ok)")
    print(f"table written: {out}")
    return EXIT_OK


def cmd_replay_trace(args) -> int:
    meta = read_trace(args.trace)
    if args.config:
        echo = load_config_file(args.config, seed_override=args.seed_override).echo
    else:
        echo = meta.get("config")
        if not echo:
            raise ConfigError("trace has no embedded config; pass --config")
        echo = run_config_from_document(echo).echo
    cols = meta["columns"]
    flip_cfg = FlipConfig(**echo["flip"])
    policy_cfg = policy_config_from_section(echo["policy"])
    smoothed, min_est, armed, triggered = replay_columns(
        [float(v) for v in cols["lf_raw"]], policy_cfg, flip_cfg, echo["seed"]
    )
    for i in range(len(cols["lf_raw"])):
        same = (
            smoothed[i] == cols["lf_smoothed"][i]
            and min_est[i] == cols["min_estimate"][i]
            and triggered[i] == bool(cols["triggered"][i])
        )
        if not same:
            step = int(cols["step"][i])
            print(f"replay diverges at step {step}")
            print(
                f"  recorded: smoothed={cols['lf_smoothed'][i]!r} min={cols['min_estimate'][i]!r} "
                f"triggered={bool(cols['triggered'][i])}"
            )
            print(f"  replayed: smoothed={smoothed[i]!r} min={min_est[i]!r} triggered={triggered[i]}")
            return EXIT_REPLAY_MISMATCH
    print(f"replay matches: {len(smoothed)} steps, {sum(triggered)} triggers")
    return EXIT_OK


def cmd_plot(args) -> int:
    traces = []
    for path in args.traces:
        meta = read_trace(path)
        label = os.path.splitext(os.path.basename(path))[0]
        traces.append((label, meta["columns"]))
    if args.window < 1:
        raise ConfigError("--window must be >= 1")
    out = args.out or os.path.join(args.out_dir, "plot.svg")
    write_svg(out, traces, window=args.window)
    print(f"svg written: {out}")
    return EXIT_OK


def cmd_dump_stream(args) -> int:
    config = _load_config(args)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    schedule = config.build_schedule()
    sampler = config.build_sampler()
    stream = StreamState(schedule, sampler, config.stream_section["seed"])
    batch_size = config.stream_section["batch_size"]
    dim = config.arch.input_dim
    lines = [
        "# driftlab-stream v1",
        f"# config-hash: {config_hash(config.echo)}",
        f"# config: {config_json(config.echo)}",
        "step,label," + ",".join(f"f{i}" for i in range(dim)),
    ]
    for _ in range(min(args.n, schedule.total_steps)):
        batch = stream.sample_batch(batch_size)
        for row in range(batch.size):
            feats = ",".join(repr(float(v)) for v in batch.features[row])
            lines.append(f"{batch.step_index + 1},{int(batch.labels[row])},{feats}")
    out = args.out or os.path.join(args.out_dir, "stream.csv")
    atomic_write_text(out, "\n".join(lines) + "\n")
    print(f"stream dump written: {out}")
    return EXIT_OK


_COMMANDS = {
    "train-source": cmd_train_source,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "replay-trace": cmd_replay_trace,
    "plot": cmd_plot,
    "dump-stream": cmd_dump_stream,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        _error_line("config", str(e))
        return EXIT_CONFIG
    except NumericError as e:
        _error_line("numeric", str(e), step=e.step)
        return EXIT_NUMERIC
    except DriftlabError as e:
        _error_line("error", str(e))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
