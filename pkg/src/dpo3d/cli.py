"""dpo3d command line: gen, pretrain, adapt, ablate, sweep, eval.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import config as cfgmod
from . import experiments as ex
from . import storage
from .config import ConfigError, RunConfig

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="INI run configuration")
    p.add_argument("--preset", help="named preset shipped with the package")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--pretty", action="store_true", help="print a readable table")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dpo3d", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write the source set and the shifted test stream")
    _common(p)

    p = sub.add_parser("pretrain", help="pretrain the source detector")
    _common(p)
    p.add_argument("--data", type=Path, help="source scene container (default: OUT/source.dpo1)")

    p = sub.add_parser("adapt", help="adapt a checkpoint over a test stream")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="default: OUT/theta_s.dpow")
    p.add_argument("--stream", type=Path, help="default: OUT/stream.dpo1")
    p.add_argument("--no-adapt", action="store_true", help="inference only baseline")
    p.add_argument("--c-stop", type=float, help="override [adapt] c_stop")

    p = sub.add_parser("ablate", help="ablation table over seeds")
    _common(p)
    p.add_argument("--seeds", help="comma separated seeds (default: [run] seeds)")

    p = sub.add_parser("sweep", help="one adaptation run per parameter value")
    _common(p)
    p.add_argument("--param", required=True, choices=ex.SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma separated values")

    p = sub.add_parser("eval", help="evaluate a checkpoint without adapting")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="default: OUT/theta_s.dpow")
    p.add_argument("--data", type=Path, help="scene container (default: OUT/stream.dpo1)")
    return ap


def _config(args) -> RunConfig:
    if args.config and args.preset:
        raise UsageError("give either --config or --preset, not both")
    if args.config:
        cfg = cfgmod.load(args.config)
    else:
        cfg = cfgmod.load_preset(args.preset or "composite-heavy")
    if args.seed is not None:
        cfg = cfgmod.with_seed(cfg, args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(text: str, rows=None, columns=None, pretty: bool = False) -> None:
    if pretty and rows:
        widths = [max(len(c), *(len(ex._fmt(r[c])) for r in rows)) for c in columns]
        print("  ".join(c.ljust(w) for c, w in zip(columns, widths)))
        for r in rows:
            print("  ".join(ex._fmt(r[c]).ljust(w) for c, w in zip(columns, widths)))
    else:
        sys.stdout.write(text)


def _flatten_cfg(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    return json.loads(json.dumps(d, default=str))


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    meta = {"config": _flatten_cfg(cfg), "seed": cfg.seed}
    src = ex.source_scenes(cfg, cfg.seed)
    storage.write_scenes(out / "source.dpo1", src, {**meta, "role": "source"})
    stream = ex.test_stream(cfg, cfg.seed)
    flat = [s for b in stream for s in b]
    storage.write_scenes(out / "stream.dpo1", flat,
                         {**meta, "role": "stream", "batch_size": cfg.batch_size})
    print(f"wrote {len(src)} source scenes and {len(flat)} stream scenes to {out}")
    return EXIT_OK


def _check_grid(scenes, cfg: RunConfig) -> None:
    shape = scenes[0].bev.values.shape
    want = (cfg.gen.height, cfg.gen.width, cfg.gen.channels)
    if shape != want:
        raise UsageError(f"scene grid {shape} does not match config grid {want}")


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    scenes, _ = storage.read_scenes(args.data or out / "source.dpo1")
    _check_grid(scenes, cfg)
    from .detector import pretrain
    params = pretrain(scenes, cfg.train)
    storage.write_params(out / "theta_s.dpow", params)
    r = ex.evaluate_params(params, ex.source_eval_scenes(cfg, cfg.seed),
                           cfg.adapt.eval_score_thresh, cfg.adapt.nms_thresh)
    print(f"source AP_3D {r.ap_3d * 100:.2f} AP_BEV {r.ap_bev * 100:.2f}")
    return EXIT_OK


def _batches(scenes, batch_size: int):
    return [scenes[i:i + batch_size] for i in range(0, len(scenes), batch_size)]


def _load_params(path: Path, cfg: RunConfig):
    params = storage.read_params(path)
    if params.channels != cfg.gen.channels:
        raise UsageError(f"checkpoint has {params.channels} channels, config has {cfg.gen.channels}")
    return params


def cmd_adapt(args) -> int:
    cfg = _config(args)
    if args.c_stop is not None:
        cfg = cfgmod.with_adapt(cfg, c_stop=args.c_stop)
    if args.no_adapt:
        cfg = cfgmod.with_adapt(cfg, adapt=False)
    out = _out_dir(args, cfg)
    params = _load_params(args.checkpoint or out / "theta_s.dpow", cfg)
    scenes, meta = storage.read_scenes(args.stream or out / "stream.dpo1")
    _check_grid(scenes, cfg)
    stream = _batches(scenes, int(meta.get("batch_size", cfg.batch_size)))
    method = "no-adapt" if args.no_adapt else "dpo"
    with open(out / "log.jsonl", "w") as log:
        def write(rec):
            log.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        result = ex.run_variant(params, stream, cfg.adapt, method, cfg.seed, on_batch=write)
    (out / "report.json").write_text(json.dumps(result.report.to_dict(), indent=2) + "\n")
    row = {"method": method, "ap_3d": result.ap_3d, "ap_bev": result.ap_bev,
           "closed_gap_3d": float("nan"), "closed_gap_bev": float("nan"),
           "stop_batch": "none" if result.stop_batch is None else result.stop_batch}
    cols = ("method", "ap_3d", "ap_bev", "closed_gap_3d", "closed_gap_bev", "stop_batch")
    text = ex.rows_to_csv([row], cols)
    (out / "metrics.csv").write_text(text)
    _emit(text, [row], cols, args.pretty)
    return EXIT_OK


def _parse_list(text: str, conv):
    try:
        return [conv(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def cmd_ablate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    seeds = _parse_list(args.seeds, int) if args.seeds else None
    table = ex.run_ablation(cfg, seeds, log=lambda m: print(m, file=sys.stderr))
    (out / "ablation.csv").write_text(table.to_csv())
    (out / "ablation_runs.csv").write_text(table.runs_csv())
    _emit(table.to_csv(), table.rows(), ex.CSV_COLUMNS, args.pretty)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    values = _parse_list(args.values, float)
    if not values:
        raise UsageError("--values is empty")
    text = ex.run_sweep(cfg, args.param, values)
    (out / f"sweep_{args.param}.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    params = _load_params(args.checkpoint or out / "theta_s.dpow", cfg)
    scenes, _ = storage.read_scenes(args.data or out / "stream.dpo1")
    _check_grid(scenes, cfg)
    r = ex.evaluate_params(params, scenes, cfg.adapt.eval_score_thresh, cfg.adapt.nms_thresh)
    row = {"method": "eval", "ap_3d": r.ap_3d * 100, "ap_bev": r.ap_bev * 100,
           "tp": r.tp, "fp": r.fp, "fn": r.fn}
    cols = ("method", "ap_3d", "ap_bev", "tp", "fp", "fn")
    text = ex.rows_to_csv([row], cols)
    (out / "eval.csv").write_text(text)
    _emit(text, [row], cols, args.pretty)
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "adapt": cmd_adapt,
            "ablate": cmd_ablate, "sweep": cmd_sweep, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"dpo3d: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, storage.FormatError) as exc:
        print(f"dpo3d: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"dpo3d: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
