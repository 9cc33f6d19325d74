"""Acceptance suite: one test per headline criterion, each printing PASS/FAIL.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines inline;
they are also collected in the terminal summary of any pytest run.
"""
from __future__ import annotations

import csv
import json
import math
import time
from pathlib import Path

import jsonschema
import numpy as np
from scipy.integrate import quad

from archmap import dkb
from archmap.arch_fit import ArchCurve, estimate_arch, fit_mesh
from archmap.cli import main
from archmap.evaluation import (
    VARIANTS,
    ConfusionTable,
    macro_f1,
    map_detection_counts,
    rel_err_acc,
)
from archmap.flatten import arc_length, build_sampling, flatten_mesh, flatten_points
from archmap.mesh_io import TriangleMesh
from archmap.render import (
    Mesh,
    RenderConfig,
    canonical_cameras,
    horizontal_fov,
    normalize_for_render,
    rasterize_ssp,
    render_views,
)
from archmap.synthetic import ArchSpec, build_arch, write_dataset

from helpers import noisy_arch


def rel(x, y):
    return abs(x - y) / max(abs(y), 1e-300)


def test_arch_fit_recovery(acceptance):
    rng = np.random.default_rng(2024)
    ok, worst_time = 0, 0.0
    for _ in range(200):
        pts, truth = noisy_arch(rng)
        t0 = time.perf_counter()
        curve = estimate_arch(pts)
        worst_time = max(worst_time, time.perf_counter() - t0)
        good = abs(curve.theta_star - truth["theta"]) <= 0.5
        good &= all(rel(getattr(curve, k), truth[k]) <= 0.02 for k in "abc")
        ok += bool(good)
    acceptance("arch-fit recovery", ok >= 190 and worst_time < 1.0,
               f"{ok}/200 arches within 0.5 deg and 2% (need 190); slowest fit {worst_time:.3f}s")


def test_arc_length_oracle(acceptance):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        a = float(rng.uniform(-0.1, 0.1))
        b = float(rng.uniform(-2, 2))
        x0, x1 = np.sort(rng.uniform(-60, 60, 2))
        want, _ = quad(lambda x: math.sqrt(1 + (2 * a * x + b) ** 2), x0, x1, epsabs=0, epsrel=1e-13, limit=200)
        worst = max(worst, rel(arc_length(ArchCurve(0.0, a, b, 0.0), x0, x1), want))
    line = abs(arc_length(ArchCurve(0.0, 0.0, 1.0, 0.0), 0.0, 1.0) - math.sqrt(2))
    acceptance("arc-length oracle", worst <= 1e-9 and line <= 1e-12,
               f"max relative error vs quadrature {worst:.2e} over 1000 triples; |L - sqrt2| = {line:.1e}")


def test_flatten_isometry(acceptance):
    worst_d, worst_s, worst_rigid = 0.0, 0.0, 0.0
    rng = np.random.default_rng(3)
    for _ in range(20):
        c = ArchCurve(0.0, float(rng.uniform(0.005, 0.05)), float(rng.uniform(-0.5, 0.5)), float(rng.normal()))
        s = build_sampling(c, -35.0, 35.0, 4096)
        xs = np.sort(rng.uniform(-30, 30, 200))
        pts = np.column_stack([xs, c.y(xs), rng.normal(0, 5, 200)])
        flat = flatten_points(pts, s)
        span = np.ptp(pts[:, :2], axis=0).max()
        worst_d = max(worst_d, float(np.max(np.abs(flat[:, 1]))) / span)
        ds = np.diff(flat[:, 0])
        want = arc_length(c, xs[:-1], xs[1:])
        worst_s = max(worst_s, float(np.max(np.abs(ds - want) / want)))

        v = rng.uniform(-20, 20, (300, 3))
        mesh = TriangleMesh(v, rng.integers(0, 300, (200, 3)))
        straight = flatten_mesh(mesh, ArchCurve(0.0, 0.0, 0.0, 0.0), in_frame=True)
        shift = straight.vertices - v
        worst_rigid = max(worst_rigid, float(np.ptp(shift, axis=0).max()))
    ok = worst_d <= 1e-6 and worst_s <= 1e-8 and worst_rigid <= 1e-10
    acceptance("flatten isometry", ok,
               f"max |d|/span {worst_d:.1e}; max relative ds error {worst_s:.1e}; rigid spread {worst_rigid:.1e}")


def test_render_determinism_and_symmetry(acceptance):
    mesh = build_arch(ArchSpec(arch="upper", theta=-25.0, offset=(3.0, 1.0)))
    flat = flatten_mesh(mesh, fit_mesh(mesh))
    a = render_views(flat, "maxillary", "ssp")
    b = render_views(flat, "maxillary", "ssp")
    same = all(x.tobytes() == y.tobytes() for x, y in zip(a.views, b.views))

    norm = normalize_for_render(flat)
    mirrored = Mesh(norm.vertices * [1.0, 1.0, -1.0], norm.faces)
    upper = rasterize_ssp(norm, canonical_cameras("maxillary")[2])
    lower = rasterize_ssp(mirrored, canonical_cameras("mandibular")[2])
    mirror_ok = np.array_equal(upper, lower)

    # single triangle against an independent pinhole + edge-function oracle
    cfg = RenderConfig()
    tri = np.array([[0.6, 0.1, -0.5], [-0.8, 0.0, 0.1], [0.1, -0.3, 0.8]])
    img = rasterize_ssp(Mesh(tri, np.array([[0, 1, 2]])), canonical_cameras("upper")[0], cfg)
    f = (cfg.width / 2) / math.tan(horizontal_fov() / 2)
    depth = 2.6 - tri[:, 1]
    u = cfg.width / 2 + f * tri[:, 2] / depth
    v = cfg.height / 2 - f * tri[:, 0] / depth
    cy, cx = np.mgrid[0 : cfg.height, 0 : cfg.width] + 0.5
    e = [(u[(k + 1) % 3] - u[k]) * (cy - v[k]) - (v[(k + 1) % 3] - v[k]) * (cx - u[k]) for k in range(3)]
    expected = ((e[0] >= 0) & (e[1] >= 0) & (e[2] >= 0)) | ((e[0] <= 0) & (e[1] <= 0) & (e[2] <= 0))
    covered = np.any(img != np.asarray(cfg.background, dtype=np.uint8), axis=2)
    mismatched = int(np.sum(covered != expected))
    acceptance("render determinism and symmetry", same and mirror_ok and mismatched == 0,
               f"repeat identical={same}; mirror identical={mirror_ok}; "
               f"triangle coverage mismatches {mismatched} of {expected.size} pixels ({int(expected.sum())} covered)")


UPPER = [11, 12, 13, 14, 15, 16, 17, 21, 22, 23, 24, 25, 26, 27]


def violation_catalog(onto):
    """Ten crafted reports and the exact rule sets each must trigger."""
    A = dkb.Anomaly
    R = dkb.report_from_codes
    drop = lambda *gone: [c for c in UPPER if c not in gone]  # noqa: E731
    bad_counts = R("upper", UPPER, onto)
    bad_counts.anatomical_counts = {"anterior": 6, "premolar": 3, "molar": 5}
    combo = R("upper", drop(12) + [18], onto, third_molar_evidence=False)
    combo.teeth_number = 20
    invalid = R("upper", drop(27), onto)
    invalid.fdi_present = invalid.fdi_present + [29]
    invalid.teeth_number = 14
    invalid.anatomical_counts = {}
    invalid.size_counts = {}
    mixed = R("upper", [11, 21, 51, 61], onto, stage="mixed")
    return [
        (R("upper", UPPER, onto), set()),
        (R("upper", UPPER + [18], onto, third_molar_evidence=False), {"conditional-inclusion"}),
        (R("upper", drop(12) + [18], onto), {"numbering-continuity"}),
        (bad_counts, {"count-consistency"}),
        (invalid, {"fdi-validity"}),
        (R("upper", drop(16, 17, 27), onto), {"stage-count-range"}),
        (R("upper", drop(14), onto, anomalies=[A("extracted", 14, "")]), {"positional-annotation"}),
        (R("upper", drop(15, 25) + [55, 65], onto), {"morphology-stage"}),
        (mixed, {"stage-count-range"}),
        (combo, {"conditional-inclusion", "numbering-continuity", "count-consistency", "stage-count-range"}),
    ]


def test_dkb_conformance(acceptance):
    onto = dkb.load_ontology()
    regions = [len(onto.codes_in_region(r)) for r in dkb.REGIONS]
    sizes = [len(onto.codes_in_size(s)) for s in dkb.SIZES]
    catalog = violation_catalog(onto)
    wrong = []
    covered = set()
    for i, (report, expected) in enumerate(catalog):
        got = {v.rule_id for v in dkb.validate_report(report, onto)}
        covered |= got
        if got != expected:
            wrong.append(f"#{i}: {sorted(got)} != {sorted(expected)}")
    ok = regions == [12, 8, 12] and sizes == [12, 16, 4] and not wrong and covered == set(dkb.RULE_IDS)
    acceptance("DKB conformance", ok,
               f"regions {regions}, sizes {sizes}; catalog {len(catalog) - len(wrong)}/{len(catalog)} exact, "
               f"{len(covered)}/7 rule ids exercised" + (f"; {wrong}" if wrong else ""))


def test_metric_identities(acceptance):
    checks = []
    for re_pct, acc_pct in ((24.886, 75.114), (24.316, 75.684)):
        re, acc = rel_err_acc(100 + re_pct, 100)
        checks.append(abs(re - re_pct) <= 1e-3 and abs(acc - acc_pct) <= 1e-3)
    f1 = macro_f1(ConfusionTable.from_rows({"a": (8, 2, 0), "b": (5, 0, 5)}))
    f1_oracle = 100 * ((2 * 0.8 * 1.0 / 1.8) + (2 * 1.0 * 0.5 / 1.5)) / 2
    checks.append(abs(f1 - f1_oracle) <= 1e-6)
    rng = np.random.default_rng(11)
    diffs_ok = True
    for tp, fp, fn in rng.integers(0, 100, (1000, 3)):
        if tp + fn == 0:
            continue
        pred, gt, _, _ = map_detection_counts(int(tp), int(fp), int(fn))
        diffs_ok &= pred - gt == fp - fn
    checks.append(diffs_ok)
    acceptance("metric identities", all(checks),
               f"Acc rows {checks[0]}/{checks[1]}; macro-F1 {f1:.6f} vs {f1_oracle:.6f}; "
               f"Pred-GT=FP-FN on 1000 triples: {diffs_ok}")


def _pipeline_run(dataset: Path, out: Path, corrupt: dict[str, str]) -> tuple[list[dict], dict]:
    cfg = out.parent / f"{out.name}.toml"
    entries = ", ".join(f'{k} = "{v}"' for k, v in corrupt.items())
    cfg.write_text(f"seed = 3\n[backend]\nmax_concurrency = 4\ncorrupt = {{ {entries} }}\n")
    assert main(["pipeline", str(dataset), "--out", str(out), "--config", str(cfg)]) == 0
    docs = [json.loads(p.read_text()) for p in sorted(out.glob("*.report.json"))]
    summary = json.loads((out / "metrics_summary.json").read_text())
    return docs, summary


def _overall(docs, onto):
    valid = [d for d in docs if d["json_valid"]]
    halluc = sum(bool(dkb.vocabulary_problems(dkb.StructuredReport.from_dict(d["report"]), onto)) for d in valid)
    return 100.0 * len(valid) / len(docs), 100.0 * halluc / len(valid)


def test_end_to_end_mock(acceptance, tmp_path):
    t0 = time.perf_counter()
    dataset = tmp_path / "data"
    write_dataset(dataset, 10, seed=21)  # 10 subjects x 2 arches = 20 arch cases
    onto = dkb.load_ontology()
    schema = dkb.report_schema(onto)

    docs, _ = _pipeline_run(dataset, tmp_path / "clean", {})
    n_schema = 0
    for d in docs:
        try:
            jsonschema.validate(d["report"], schema)
            n_schema += 1
        except jsonschema.ValidationError:
            pass
    valid_clean, halluc_clean = _overall(docs, onto)

    corrupted = ["case001_upper", "case004_lower", "case007_upper"]
    docs_k, _ = _pipeline_run(dataset, tmp_path / "corrupt", {k: "hallucinate" for k in corrupted})
    valid_k, halluc_k = _overall(docs_k, onto)
    expected_k = 100.0 * len(corrupted) / len(docs_k)
    elapsed = time.perf_counter() - t0
    ok = (len(docs) == 20 and n_schema == 20 and valid_clean == 100.0 and halluc_clean == 0.0
          and valid_k == 100.0 and halluc_k == expected_k and elapsed < 120)
    acceptance("end-to-end with mock backend", ok,
               f"{n_schema}/{len(docs)} schema-valid; JsonValid {valid_clean:.0f}%; Halluc {halluc_clean:.1f}% clean, "
               f"{halluc_k:.1f}% with k={len(corrupted)} (expected {expected_k:.1f}%); {elapsed:.1f}s")


def test_ablation_grid(acceptance, tmp_path):
    dataset = tmp_path / "data"
    write_dataset(dataset, 3, seed=8)
    cfg = tmp_path / "abl.toml"
    cfg.write_text('[backend]\ncorrupt = { case000_upper = "hallucinate" }\n')
    out = tmp_path / "abl"
    assert main(["ablate", str(dataset), "--out", str(out), "--config", str(cfg)]) == 0
    rows = list(csv.DictReader(open(out / "ablation_summary.csv")))
    order_ok = [r["variant"] for r in rows] == [name for name, *_ in VARIANTS]
    stats = [k for k in rows[0] if k.endswith(("_mean", "_std"))]
    populated = all(r[k] != "" for r in rows for k in stats)

    def docs(slug):
        return {p.name: json.loads(p.read_text()) for p in sorted((out / "variants" / slug).glob("*.report.json"))}

    full, no_flat, no_dkb = docs("full"), docs("no-flatten"), docs("no-dkb")
    flat_ok = all(full[k]["metadata"]["fit"] == no_flat[k]["metadata"]["fit"]
                  and full[k]["metadata"]["image_sha256"] != no_flat[k]["metadata"]["image_sha256"]
                  and full[k]["metadata"]["prompt_sha256"] == no_flat[k]["metadata"]["prompt_sha256"]
                  for k in full)
    dkb_ok = all(full[k]["metadata"]["image_sha256"] == no_dkb[k]["metadata"]["image_sha256"]
                 and full[k]["metadata"]["prompt_sha256"] != no_dkb[k]["metadata"]["prompt_sha256"]
                 for k in full)
    key = "case000_upper.report.json"
    dkb_ok &= bool(full[key]["validation"]) and no_dkb[key]["validation"] == []
    acceptance("ablation grid", order_ok and populated and flat_ok and dkb_ok,
               f"{len(rows)} rows in order={order_ok}; mean/std populated={populated}; "
               f"No-Flatten alters renders only={flat_ok}; No-DKB alters prompt and validation only={dkb_ok}")
