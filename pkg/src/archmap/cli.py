"""Command line interface: ``archmap <subcommand> ...``.

Subcommands: flatten, render, infer, eval, ablate, pipeline, synth.
Exit status is 0 on success and nonzero with a diagnostic on stderr otherwise.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import evaluation, pipeline, synthetic
from .config import ConfigError, PipelineConfig, load_config
from .dkb import OntologyInvalid, load_ontology
from .mesh_io import StlError, read_stl
from .render import VIEW_ORDER, view_filename
from .vlm_infer import arch_name

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _fail(msg: str, code: int = EXIT_FAILED) -> int:
    print(f"archmap: error: {msg}", file=sys.stderr)
    return code


def _config(args) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    variant = cfg.variant
    if getattr(args, "render_mode", None):
        variant = dataclasses.replace(variant, render_mode=args.render_mode)
    if getattr(args, "no_flatten", False):
        variant = dataclasses.replace(variant, flatten_enabled=False)
    if getattr(args, "no_dkb", False):
        variant = dataclasses.replace(variant, dkb_enabled=False)
    cfg = dataclasses.replace(cfg, variant=variant)
    if getattr(args, "mode", None):
        cfg = dataclasses.replace(cfg, backend=dataclasses.replace(cfg.backend, mode=args.mode))
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "concurrency", None):
        cfg = dataclasses.replace(cfg, backend=dataclasses.replace(cfg.backend, max_concurrency=args.concurrency))
    return cfg


def _read_mesh(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return read_stl(path)


def _case_and_arch(path: Path, override: str | None) -> tuple[str, str]:
    case, arch = pipeline.split_case_name(path.name.split(".")[0])
    arch = override or arch
    if arch is None:
        raise ValueError(f"cannot tell the arch from {path.name!r}; name it *_upper or *_lower or pass --arch")
    return case, arch_name(arch)


def cmd_flatten(args) -> int:
    cfg = _config(args)
    geom = pipeline.prepare_geometry(_read_mesh(Path(args.input)), cfg)
    flat = geom.flat(cfg)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(flat.to_stl_bytes())
    c = geom.curve
    print(f"theta_star = {c.theta_star:.4f} deg")
    print(f"a = {c.a:.9g}  b = {c.b:.9g}  c = {c.c:.9g}")
    print(f"rms_residual = {c.rms_residual:.6g}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = _config(args)
    path = Path(args.input)
    case, arch = _case_and_arch(path, args.arch)
    geom = pipeline.prepare_geometry(_read_mesh(path), cfg)
    images = geom.views(cfg, arch)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for view, png in zip(VIEW_ORDER, images):
        p = outdir / view_filename(case, arch, view, cfg.variant.render_mode)
        p.write_bytes(png)
        print(f"wrote {p}")
    return EXIT_OK


def _run_cases(cases, cfg, outdir: Path) -> tuple[int, int]:
    results = pipeline.run_batch(cases, cfg, outdir)
    failed = 0
    for r in results:
        if r is None:
            continue
        if r.ok:
            print(f"{r.case}_{r.arch}: json_valid={r.outcome.json_valid} "
                  f"violations={len(r.outcome.violations)} latency={r.outcome.latency:.3f}s")
        else:
            failed += 1
            print(f"{r.case}_{r.arch}: FAILED {r.error['type']}: {r.error['message']}", file=sys.stderr)
    return len(results), failed


def cmd_infer(args) -> int:
    cfg = _config(args)
    case_dir = Path(args.case_dir)
    cases = pipeline.discover_cases(case_dir, args.arch, cfg.variant.render_mode)
    if not cases:
        return _fail(f"no cases: no meshes or rendered views in {case_dir}")
    outdir = Path(args.out or case_dir)
    total, failed = _run_cases(cases, cfg, outdir)
    print(f"{total - failed}/{total} cases succeeded; reports in {outdir}")
    return EXIT_FAILED if failed == total else EXIT_OK


def cmd_eval(args) -> int:
    ontology = load_ontology(args.ontology) if args.ontology else load_ontology()
    records = pipeline.evaluate_directory(args.reports, args.gt, ontology)
    for r in records:
        r.variant = args.variant or ""
    pipeline.write_metrics(records, args.outdir)
    print(f"evaluated {len(records)} arch records; metrics in {args.outdir}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    dataset = Path(args.dataset)
    cases = pipeline.discover_cases(dataset, args.arch, cfg.variant.render_mode)
    if not cases:
        return _fail(f"no cases in {dataset}")
    outdir = Path(args.out)
    total, failed = _run_cases(cases, cfg, outdir)
    gt_dir = Path(args.gt or cfg.eval.gt_dir or dataset)
    records = pipeline.evaluate_directory(outdir, gt_dir, load_ontology(cfg.ontology or None),
                                          variant=pipeline.variant_name(cfg))
    summaries = pipeline.write_metrics(records, outdir)
    for s in summaries:
        print(f"{s.group}: n={s.n} JsonValid={s.means['JsonValid']:.1f} HallucRate={s.means['HallucRate']:.1f} "
              f"Acc={s.means['Acc']:.2f}")
    return EXIT_FAILED if failed == total else EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    summaries = pipeline.run_ablation_grid(args.dataset, cfg, args.out, gt_dir=args.gt, resume=not args.fresh)
    by_name = {s.group["variant"]: s for s in summaries}
    for name, *_ in evaluation.VARIANTS:
        s = by_name.get(name)
        if s is not None:
            print(f"{name:28s} Acc={s.means['Acc']:.2f} MacroF1={s.means['MacroF1']:.2f} "
                  f"JsonValid={s.means['JsonValid']:.1f} Halluc={s.means['HallucRate']:.1f}")
    print(f"wrote {Path(args.out) / 'ablation_summary.csv'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    paths = synthetic.write_dataset(args.outdir, args.cases, args.seed)
    print(f"wrote {len(paths)} meshes with ground truth to {args.outdir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="archmap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, arch=True):
        p.add_argument("--config", help="TOML configuration file")
        if arch:
            p.add_argument("--arch", choices=["upper", "lower"], help="override the arch taken from the file name")

    p = sub.add_parser("flatten", help="fit the arch and write the flattened mesh")
    p.add_argument("input")
    p.add_argument("output")
    common(p, arch=False)
    p.set_defaults(func=cmd_flatten)

    p = sub.add_parser("render", help="render front/back/bottom views")
    p.add_argument("input")
    p.add_argument("outdir")
    p.add_argument("--mode", dest="render_mode", choices=["ssp", "uvp"])
    p.add_argument("--no-flatten", action="store_true")
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("infer", help="structured inference for every case in a directory")
    p.add_argument("case_dir")
    p.add_argument("--out", help="report directory (default: the case directory)")
    p.add_argument("--mode", choices=["thinking", "non-thinking"])
    p.add_argument("--render-mode", choices=["ssp", "uvp"])
    p.add_argument("--no-flatten", action="store_true")
    p.add_argument("--no-dkb", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--concurrency", type=int)
    common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics from report and ground-truth directories")
    p.add_argument("reports")
    p.add_argument("gt")
    p.add_argument("outdir")
    p.add_argument("--ontology")
    p.add_argument("--variant", default="")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="infer + eval in one run")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--gt")
    p.add_argument("--mode", choices=["thinking", "non-thinking"])
    p.add_argument("--render-mode", choices=["ssp", "uvp"])
    p.add_argument("--no-flatten", action="store_true")
    p.add_argument("--no-dkb", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--concurrency", type=int)
    common(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("ablate", help="run all eight variants and write ablation_summary.csv")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--gt")
    p.add_argument("--seed", type=int)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--fresh", action="store_true", help="ignore persisted per-case outcomes")
    common(p, arch=False)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="write a synthetic dataset with ground truth")
    p.add_argument("outdir")
    p.add_argument("--cases", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail(str(exc) if "not found" in str(exc) else f"file not found: {exc}")
    except StlError as exc:
        return _fail(f"{type(exc).__name__}: {exc}")
    except evaluation.LengthMismatch as exc:
        return _fail(f"unmatched cases: {exc}")
    except pipeline.NoCases as exc:
        return _fail(str(exc))
    except (ConfigError, OntologyInvalid, ValueError) as exc:
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
