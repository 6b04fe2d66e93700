"""Command-line entry point: ``qconsol {run,ablate,schedule,render-field,metrics}``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numeric failure,
4 file or format problems, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, DomainError, FormatError, NumericError, QConsolError
from .store import (MODES, RunConfig, SeedConfig, apply_overrides, dump_queries, load_checkpoint,
                    load_queries, parse_config)

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


def _add_common(p: argparse.ArgumentParser, out_default: str | None = "runs/latest"):
    p.add_argument("--config", metavar="PATH",
                   help="JSON run configuration (default: the desk profile defaults)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override applied to the configuration document; repeatable")
    p.add_argument("--threads", type=int, default=1, metavar="N",
                   help="per-view worker threads, 0 = one per core; never changes results")
    if out_default is not None:
        p.add_argument("--out", default=out_default, metavar="DIR", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qconsol", description="Multi-view query consolidation experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one consolidation pipeline and write its artifacts")
    _add_common(p)
    p.add_argument("--mode", choices=MODES, help="run mode (default: the configuration's mode)")
    p.add_argument("--no-figures", action="store_true", help="skip matplotlib PNG figures")

    p = sub.add_parser("ablate", help="run all four modes with shared seeds and compare them")
    _add_common(p, "runs/ablation")
    p.add_argument("--no-figures", action="store_true", help="skip matplotlib PNG figures")

    p = sub.add_parser("schedule", help="print the interval event program")
    _add_common(p, None)
    p.add_argument("--T", type=int, dest="T", help="total denoising steps (default: from config)")
    p.add_argument("--tau", type=int, help="half-interval length (default: from config)")

    p = sub.add_parser("render-field", help="render a saved query field from every configured camera")
    _add_common(p, "runs/render")
    p.add_argument("--checkpoint", required=True, metavar="PATH", help="qnerf.bin checkpoint")
    p.add_argument("--timestep", type=int, default=0, help="timestep recorded in the query dump")

    p = sub.add_parser("metrics", help="recompute metrics for a run directory")
    p.add_argument("--run", required=True, metavar="DIR", help="directory written by `qconsol run`")
    p.add_argument("--out", metavar="PATH", help="also write the CSV here")
    return parser


def _config(args) -> RunConfig:
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed JSON in {args.config}: {exc}") from exc
    else:
        doc = {"profile": "desk"}
    return parse_config(apply_overrides(doc, args.overrides))


def _seed_line(args) -> str:
    """Resolved seeds for failure reports, even when the rest of the configuration is invalid."""
    try:
        if getattr(args, "run", None):
            doc = json.loads((Path(args.run) / "run.json").read_text())["config"]
        elif args.config:
            doc = apply_overrides(json.loads(Path(args.config).read_text()), args.overrides)
        else:
            doc = apply_overrides({"profile": "desk"}, args.overrides)
        return SeedConfig.model_validate(doc.get("seeds", {})).summary()
    except Exception:
        return "seeds: unresolved (configuration could not be read)"


def _report_row(mode: str, art, report) -> dict:
    return {"mode": mode, "consistency": report.mean_consistency, "depth_rmse": report.depth_rmse,
            "feature_psnr": report.feature_psnr, "target_deviation": art.target_deviation()}


def cmd_run(args) -> int:
    from .pipeline import build_scenario, run_pipeline, write_run

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = build_scenario(cfg)
    with open(out / "events.log", "w") as log:
        def sink(line):
            log.write(line + "\n")
            log.flush()

        art = run_pipeline(sc, args.mode, threads=args.threads, on_event=sink)
    report = write_run(art, out, figures=not args.no_figures)
    print(f"mode={art.mode} consistency={report.mean_consistency:.6g} "
          f"depth_rmse={report.depth_rmse:.6g} feature_psnr={report.feature_psnr:.6g} out={out}")
    return EXIT_OK


def ablation_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_ablate(args) -> int:
    from .pipeline import build_scenario, run_pipeline, write_run

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sc = build_scenario(cfg)
    rows = []
    for mode in MODES:
        art = run_pipeline(sc, mode, threads=args.threads)
        report = write_run(art, out / mode, figures=not args.no_figures)
        rows.append(_report_row(mode, art, report))
    text = ablation_csv(rows)
    (out / "ablation.csv").write_text(text)
    (out / "ablation.json").write_text(json.dumps(
        {"modes": list(MODES), "seeds": cfg.seeds.model_dump()}, indent=2, sort_keys=True) + "\n")
    if not args.no_figures:
        from .plotting import plot_ablation
        plot_ablation(rows, out / "ablation.png")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_schedule(args) -> int:
    from .pipeline import build_schedule

    if args.T is not None and args.tau is not None and not args.config and not args.overrides:
        T, tau = args.T, args.tau
    else:
        cfg_args = argparse.Namespace(**vars(args))
        cfg_args.overrides = list(args.overrides)
        if args.T is not None:
            cfg_args.overrides.append(f"T={args.T}")
        if args.tau is not None:
            cfg_args.overrides.append(f"tau={args.tau}")
        cfg = _config(cfg_args)
        T, tau = cfg.T, cfg.tau
    for line in build_schedule(T, tau).lines():
        print(line)
    return EXIT_OK


def cmd_render_field(args) -> int:
    from .metrics import to_gray, write_pgm
    from .pipeline import cameras_from_config
    from .plotting import plot_query_grid
    from .qfield import render_all_queries, single_threaded

    cfg = _config(args)
    field = load_checkpoint(args.checkpoint)
    if [(l.resolution, l.channels) for l in field.layers] != [(l.resolution, l.channels) for l in cfg.layers]:
        raise ConfigError("checkpoint layers do not match the configured layers", key="layers")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with single_threaded():
        qs = render_all_queries(field, cameras_from_config(cfg), cfg.sampling.n_samples, args.timestep)
    dump_queries(qs, out / "queries.bin")
    for spec, m in zip(cfg.layers, qs.maps):
        for v in range(qs.n_views):
            write_pgm(out / f"view{v}_layer{spec.layer_id}.pgm", to_gray(m[v]))
    plot_query_grid(qs, out / "queries.png")
    print(f"rendered {qs.n_views} views x {len(qs.maps)} layers to {out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    from .metrics import consistency_from, correspondences, depth_rmse
    from .pipeline import build_scenario

    run = Path(args.run)
    manifest = json.loads((run / "run.json").read_text())
    cfg = parse_config(manifest["config"])
    sc = build_scenario(cfg)
    layers = [(l.resolution, l.channels) for l in cfg.layers]
    corr = correspondences(sc.edited, sc.cameras, cfg.sampling.metric_points, cfg.seeds.sampling)
    rows = []
    for d in sorted(run.glob("interval_*"), key=lambda p: int(p.name.split("_")[1])):
        qs = load_queries(d / "queries.bin", layers)
        field = load_checkpoint(d / "qnerf.bin")
        cons = consistency_from(qs, corr, sc.cameras)
        rows.append({"interval_index": d.name.split("_")[1], "timestep": qs.timestep,
                     **{f"consistency_layer_{l.layer_id}": c for l, c in zip(cfg.layers, cons)},
                     "depth_rmse": depth_rmse(field, sc.supervision, sc.cameras, cfg.sampling.n_samples)})
    final = load_queries(run / "final" / "queries.bin", layers)
    cons = consistency_from(final, corr, sc.cameras)
    rows.append({"interval_index": "final", "timestep": final.timestep,
                 **{f"consistency_layer_{l.layer_id}": c for l, c in zip(cfg.layers, cons)},
                 "depth_rmse": rows[-1]["depth_rmse"] if rows else float("nan")})
    text = ablation_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "ablate": cmd_ablate, "schedule": cmd_schedule,
            "render-field": cmd_render_field, "metrics": cmd_metrics}


def _classify(exc: BaseException) -> tuple[int, str]:
    if isinstance(exc, (ConfigError, DomainError)):
        return EXIT_CONFIG, "configuration error"
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC, "numeric error"
    if isinstance(exc, (OSError, FormatError)):
        return EXIT_IO, "i/o error"
    return EXIT_OTHER, "error"


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (QConsolError, OSError) as exc:
        code, kind = _classify(exc)
        print(f"qconsol {args.command}: {kind}: {exc}", file=sys.stderr)
        print(_seed_line(args), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
