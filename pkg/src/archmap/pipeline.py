"""End-to-end orchestration: mesh -> fit -> flatten -> render -> infer -> report.

Per-case report documents are deterministic (latency is kept in memory only),
so re-running over unchanged inputs rewrites identical bytes.
"""
from __future__ import annotations

import csv
import json
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import dkb, evaluation
from .arch_fit import ArchCurve, fit_mesh
from .config import PipelineConfig
from .dkb import DentalOntology, StructuredReport
from .flatten import FlattenedMesh, flatten_mesh, sampling_for_points
from .mesh_io import TriangleMesh, read_stl
from .render import VIEW_ORDER, encode_png, render_views, view_filename
from .vlm_infer import (
    Backend,
    HttpBackend,
    InferenceOutcome,
    MockBackend,
    arch_name,
    request_from_images,
    run_inference,
)

_CASE_RE = re.compile(r"^(?P<case>.+)_(?P<arch>upper|lower)$")
_VIEW_RE = re.compile(r"^(?P<case>.+)_(?P<arch>upper|lower)_front_(?P<mode>ssp|uvp)\.png$")
REPORT_SUFFIX = ".report.json"
GT_SUFFIX = ".gt.json"


class NoCases(ValueError):
    pass


def split_case_name(stem: str) -> tuple[str, str | None]:
    """``case_upper`` -> ("case", "upper"); no recognised suffix -> (stem, None)."""
    m = _CASE_RE.match(stem)
    return (m["case"], m["arch"]) if m else (stem, None)


def arch_from_filename(path: str | Path) -> str:
    _, arch = split_case_name(Path(path).name.split(".")[0])
    if arch is None:
        raise ValueError(f"cannot tell the arch from {Path(path).name!r}; name it *_upper or *_lower or pass --arch")
    return arch


@dataclass(frozen=True)
class CaseInput:
    case: str
    arch: str
    mesh_path: Path | None = None
    view_paths: tuple[Path, ...] = ()

    @property
    def key(self) -> str:
        return f"{self.case}_{self.arch}"


def discover_cases(directory: str | Path, arch_override: str | None = None,
                   render_mode: str = "ssp") -> list[CaseInput]:
    """Cases in a directory.

    A ``manifest.csv`` with columns ``case,arch,mesh`` takes precedence.
    Otherwise every ``*.stl`` (except ``*.flat.stl``) is a case, and failing
    that every complete set of rendered views ``<case>_<arch>_<view>_<mode>.png``.
    """
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"directory not found: {d}")
    manifest = d / "manifest.csv"
    cases: list[CaseInput] = []
    if manifest.is_file():
        with manifest.open(newline="") as fh:
            for row in csv.DictReader(fh):
                mesh = d / row["mesh"]
                arch = arch_override or row.get("arch") or arch_from_filename(mesh)
                cases.append(CaseInput(row["case"], arch_name(arch), mesh))
        return cases
    for p in sorted(d.glob("*.stl")):
        if p.name.endswith(".flat.stl"):
            continue
        case, arch = split_case_name(p.stem)
        arch = arch_override or arch
        if arch is None:
            raise ValueError(f"cannot tell the arch from {p.name!r}; name it *_upper or *_lower or pass --arch")
        cases.append(CaseInput(case, arch_name(arch), p))
    if cases:
        return cases
    for p in sorted(d.glob(f"*_front_{render_mode}.png")):
        m = _VIEW_RE.match(p.name)
        if not m:
            continue
        views = tuple(d / view_filename(m["case"], m["arch"], v, render_mode) for v in ("front", "back", "bottom"))
        if all(v.is_file() for v in views):
            cases.append(CaseInput(m["case"], arch_override or m["arch"], None, views))
    return cases


# ---------------------------------------------------------------- geometry


@dataclass
class Geometry:
    """Fit and both render targets of one mesh, computed once and shared by variants."""

    mesh: TriangleMesh
    curve: ArchCurve
    framed: TriangleMesh
    _flat: FlattenedMesh | None = None
    _views: dict = field(default_factory=dict)

    def flat(self, config: PipelineConfig) -> FlattenedMesh:
        if self._flat is None:
            sampling = sampling_for_points(self.curve, self.framed.vertices[:, 0], config.flatten.samples,
                                           config.flatten.padding)
            self._flat = flatten_mesh(self.framed, self.curve, sampling, in_frame=True)
        return self._flat

    def views(self, config: PipelineConfig, arch: str) -> tuple[bytes, bytes, bytes]:
        """PNG-encoded front/back/bottom views for the configured variant."""
        key = (arch, config.variant.render_mode, config.variant.flatten_enabled, config.render)
        if key not in self._views:
            target = self.flat(config) if config.variant.flatten_enabled else self.framed
            views = render_views(target, arch, config.variant.render_mode, config.render)
            self._views[key] = tuple(encode_png(img) for img in views.views)
        return self._views[key]


def prepare_geometry(mesh: TriangleMesh, config: PipelineConfig) -> Geometry:
    curve = fit_mesh(mesh, config.fit)
    return Geometry(mesh, curve, curve.transform_mesh(mesh))


def flatten_file(path: str | Path, config: PipelineConfig) -> tuple[ArchCurve, FlattenedMesh]:
    geom = prepare_geometry(read_stl(path), config)
    return geom.curve, geom.flat(config)


# ---------------------------------------------------------------- cases


def variant_name(config: PipelineConfig) -> str:
    v = config.variant
    for name, mode, flat, use_dkb in evaluation.VARIANTS:
        if (mode, flat, use_dkb) == (v.render_mode, v.flatten_enabled, v.dkb_enabled):
            return name
    raise ValueError(f"no named variant for {v}")


def make_backend(config: PipelineConfig, ontology: DentalOntology | None = None) -> Backend:
    b = config.backend
    if b.kind == "mock":
        return MockBackend(config.seed, b.corrupt, ontology)
    return HttpBackend(b.url, b.model_name, api_key_env=b.api_key_env or None, timeout_s=b.timeout_s,
                       thinking_flag=b.thinking_flag or None)


@dataclass
class CaseResult:
    case: str
    arch: str
    outcome: InferenceOutcome | None
    error: dict | None
    metadata: dict

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_document(self) -> dict:
        o = self.outcome
        return {
            "case": self.case,
            "arch": self.arch,
            "report": o.report.to_dict() if o and o.report else None,
            "validation": [v.to_dict() for v in o.violations] if o else [],
            "json_valid": bool(o and o.json_valid),
            "repair_applied": bool(o and o.repair_applied),
            "raw": o.raw if o else None,
            "error": self.error,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_document(), indent=2) + "\n"


def _base_metadata(config: PipelineConfig, backend: Backend) -> dict:
    mode = config.backend.mode
    return {
        "variant": variant_name(config),
        "render_mode": config.variant.render_mode,
        "flatten_enabled": config.variant.flatten_enabled,
        "dkb_enabled": config.variant.dkb_enabled,
        "backend": getattr(backend, "name", type(backend).__name__),
        "model_name": config.backend.model_name,
        "mode": mode,
        "mode_advisory": mode == "thinking" and not getattr(backend, "supports_thinking", False),
        "seed": config.seed,
        "config_fingerprint": config.fingerprint(),
        "aggregation": evaluation.AGGREGATION_NOTE,
    }


def run_case(case: CaseInput, config: PipelineConfig, backend: Backend, ontology: DentalOntology, *,
             geometry: dict | None = None, intermediates: Path | None = None) -> CaseResult:
    """One arch through the whole pipeline. Module errors become a failure record."""
    meta = _base_metadata(config, backend)
    meta["fit"] = None
    try:
        if case.mesh_path is not None:
            geom = geometry.get(case.key) if geometry is not None else None
            if geom is None:
                if not case.mesh_path.is_file():
                    raise FileNotFoundError(f"file not found: {case.mesh_path}")
                geom = prepare_geometry(read_stl(case.mesh_path), config)
                if geometry is not None:
                    geometry[case.key] = geom
            meta["fit"] = geom.curve.as_dict()
            images = geom.views(config, case.arch)
            if intermediates is not None:
                intermediates.mkdir(parents=True, exist_ok=True)
                for view, png in zip(VIEW_ORDER, images):
                    name = view_filename(case.case, case.arch, view, config.variant.render_mode)
                    (intermediates / name).write_bytes(png)
                if config.variant.flatten_enabled:
                    (intermediates / f"{case.key}.flat.stl").write_bytes(geom.flat(config).to_stl_bytes())
        else:
            images = tuple(p.read_bytes() for p in case.view_paths)
        request = request_from_images(images, case.arch, ontology, config.backend.mode,
                                      config.backend.model_name, dkb_enabled=config.variant.dkb_enabled,
                                      case_id=case.key)
        meta["image_sha256"] = request.image_digests()
        meta["prompt_sha256"] = request.prompt_digest()
        meta["request_digest"] = request.digest()
        outcome = run_inference(backend, request, ontology, dkb_enabled=config.variant.dkb_enabled,
                                attempts=config.backend.attempts, backoff_s=config.backend.backoff_s)
        return CaseResult(case.case, case.arch, outcome, None, meta)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a per-case record
        return CaseResult(case.case, case.arch, None, {"type": type(exc).__name__, "message": str(exc)}, meta)


def report_path(outdir: Path, case: CaseInput) -> Path:
    return outdir / f"{case.key}{REPORT_SUFFIX}"


def _resumable(path: Path, fingerprint: str) -> bool:
    if not path.is_file():
        return False
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return doc.get("error") is None and doc.get("metadata", {}).get("config_fingerprint") == fingerprint


def run_batch(cases: list[CaseInput], config: PipelineConfig, outdir: str | Path, *,
              backend: Backend | None = None, ontology: DentalOntology | None = None,
              resume: bool = False, geometry: dict | None = None) -> list[CaseResult | None]:
    """Run every case, writing one report file each as soon as it finishes.

    Returns results in input order; with ``resume`` cases whose report already
    exists with the same configuration fingerprint are skipped (entry None).
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    ontology = ontology or dkb.load_ontology(config.ontology or None)
    backend = backend or make_backend(config, ontology)
    fingerprint = config.fingerprint()
    intermediates = outdir / "intermediates" if config.save_intermediates else None
    lock = threading.Lock()
    if geometry is None:
        geometry = {}

    def work(case: CaseInput) -> CaseResult | None:
        path = report_path(outdir, case)
        if resume and _resumable(path, fingerprint):
            return None
        result = run_case(case, config, backend, ontology, geometry=geometry, intermediates=intermediates)
        with lock:
            path.write_text(result.to_json())
        return result

    workers = config.backend.max_concurrency
    if workers == 1:
        return [work(c) for c in cases]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(work, cases))


# ---------------------------------------------------------------- evaluation


def load_report_document(path: Path) -> tuple[StructuredReport | None, bool]:
    doc = json.loads(path.read_text())
    report = StructuredReport.from_dict(doc["report"]) if doc.get("report") else None
    return report, bool(doc.get("json_valid"))


def evaluate_directory(reports_dir: str | Path, gt_dir: str | Path, ontology: DentalOntology | None = None,
                       variant: str = "") -> list[evaluation.CaseRecord]:
    """Metric records for every report with a matching ground-truth file."""
    reports_dir, gt_dir = Path(reports_dir), Path(gt_dir)
    ontology = ontology or dkb.load_ontology()
    reports = {p.name[: -len(REPORT_SUFFIX)]: p for p in sorted(reports_dir.glob(f"*{REPORT_SUFFIX}"))}
    if not reports:
        raise NoCases(f"no cases: no *{REPORT_SUFFIX} files in {reports_dir}")
    unmatched = sorted(k for k in reports if not (gt_dir / f"{k}{GT_SUFFIX}").is_file())
    if unmatched:
        raise evaluation.LengthMismatch("no ground truth for: " + ", ".join(unmatched))
    records = []
    for key, path in reports.items():
        report, valid = load_report_document(path)
        gt = evaluation.load_ground_truth(gt_dir / f"{key}{GT_SUFFIX}")
        case, arch = split_case_name(key)
        records.append(evaluation.evaluate_case(case, arch or gt.arch, report, valid, gt, ontology,
                                                variant=variant))
    return records


def write_metrics(records: list[evaluation.CaseRecord], outdir: str | Path,
                  grouping=("variant", "arch")) -> list[evaluation.MetricSummary]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    summaries = evaluation.aggregate(records, grouping)
    (outdir / "metrics.csv").write_text(evaluation.summaries_to_csv(summaries))
    (outdir / "metrics_summary.json").write_text(evaluation.summaries_to_json(summaries))
    (outdir / "per_case_metrics.csv").write_text(evaluation.records_to_csv(records))
    return summaries


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-")


def run_ablation_grid(dataset: str | Path, config: PipelineConfig, outdir: str | Path, *,
                      backend: Backend | None = None, gt_dir: str | Path | None = None,
                      resume: bool = True) -> list[evaluation.MetricSummary]:
    """All eight variants over a dataset; writes ``ablation_summary.csv``.

    Fits and renders are shared across variants. Per-variant reports live in
    ``variants/<name>/`` and are reused on re-runs with unchanged settings.
    """
    dataset, outdir = Path(dataset), Path(outdir)
    gt_dir = Path(gt_dir or config.eval.gt_dir or dataset)
    cases = discover_cases(dataset, render_mode=config.variant.render_mode)
    if not cases:
        raise NoCases(f"no cases in {dataset}")
    ontology = dkb.load_ontology(config.ontology or None)
    backend = backend or make_backend(config, ontology)
    geometry: dict = {}
    records = []
    for name, mode, flat, use_dkb in evaluation.VARIANTS:
        cfg = config.with_variant(mode, flat, use_dkb)
        vdir = outdir / "variants" / _slug(name)
        run_batch(cases, cfg, vdir, backend=backend, ontology=ontology, resume=resume, geometry=geometry)
        records += evaluate_directory(vdir, gt_dir, ontology, variant=name)
    summaries = evaluation.aggregate(records, ("variant",))
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "ablation_summary.csv").write_text(evaluation.ablation_csv(summaries))
    (outdir / "ablation_summary.json").write_text(evaluation.summaries_to_json(summaries))
    (outdir / "ablation_per_case.csv").write_text(evaluation.records_to_csv(records))
    return summaries
