from __future__ import annotations

import csv
import json
import re
import shutil
from dataclasses import replace
from pathlib import Path

import pytest

from archmap import dkb
from archmap.cli import main
from archmap.config import BackendConfig, ConfigError, PipelineConfig, config_from_dict, load_config
from archmap.evaluation import VARIANTS
from archmap.mesh_io import read_stl, write_stl
from archmap.pipeline import (
    CaseInput,
    discover_cases,
    evaluate_directory,
    prepare_geometry,
    run_ablation_grid,
    run_batch,
    run_case,
)
from archmap.synthetic import ArchSpec, build_arch, write_dataset
from archmap.vlm_infer import MockBackend, request_from_images


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    write_dataset(d, 2, seed=5)
    return d


@pytest.fixture(scope="module")
def fixture_stl(tmp_path_factory):
    d = tmp_path_factory.mktemp("one")
    spec = ArchSpec(arch="upper", a=0.028, theta=33.0, offset=(4.0, -9.0))
    mesh = build_arch(spec)
    path = d / "demo_upper.stl"
    write_stl(path, mesh.vertices, mesh.faces)
    return path, spec


def reports_in(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.glob("*.report.json"))}


class CountingBackend(MockBackend):
    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.calls = 0

    def complete(self, request):
        self.calls += 1
        return super().complete(request)


def test_run_case_matches_mock_emission(fixture_stl):
    path, _ = fixture_stl
    cfg = PipelineConfig(seed=11)
    onto = dkb.load_ontology()
    backend = MockBackend(11, ontology=onto)
    result = run_case(CaseInput("demo", "upper", path), cfg, backend, onto)
    assert result.ok
    out = result.outcome
    assert out.json_valid and out.violations == []
    geom = prepare_geometry(read_stl(path), cfg)
    req = request_from_images(geom.views(cfg, "upper"), "upper", onto)
    assert out.report == backend.report_for(req)
    assert result.metadata["request_digest"] == req.digest()


def test_corrupt_stl_becomes_failure_record(tmp_path, fixture_stl):
    shutil.copy(fixture_stl[0], tmp_path / "good_upper.stl")
    (tmp_path / "bad_lower.stl").write_bytes(fixture_stl[0].read_bytes()[:-30])
    cases = discover_cases(tmp_path)
    results = run_batch(cases, PipelineConfig(), tmp_path / "out")
    assert len(results) == 2
    by_case = {r.case: r for r in results}
    assert by_case["good"].ok
    assert by_case["bad"].error["type"] == "TruncatedFile"
    assert len(reports_in(tmp_path / "out")) == 2


def test_batch_is_deterministic_and_concurrency_free(dataset, tmp_path):
    cases = discover_cases(dataset)
    assert len(cases) == 4
    run_batch(cases, PipelineConfig(seed=2), tmp_path / "a")
    cfg = replace(PipelineConfig(seed=2), backend=BackendConfig(max_concurrency=3))
    run_batch(cases, cfg, tmp_path / "b")
    assert reports_in(tmp_path / "a") == reports_in(tmp_path / "b")


def test_manifest_layout(tmp_path, fixture_stl):
    shutil.copy(fixture_stl[0], tmp_path / "scan.stl")
    (tmp_path / "manifest.csv").write_text("case,arch,mesh\npatient1,upper,scan.stl\n")
    (case,) = discover_cases(tmp_path)
    assert (case.case, case.arch, case.mesh_path.name) == ("patient1", "upper", "scan.stl")


def test_cli_flatten_reports_construction_angle(fixture_stl, tmp_path, capsys):
    path, spec = fixture_stl
    out = tmp_path / "flat.stl"
    assert main(["flatten", str(path), str(out)]) == 0
    text = capsys.readouterr().out
    theta = float(re.search(r"theta_star = (\S+)", text).group(1))
    assert abs(theta - spec.theta) <= 0.5
    assert "rms_residual" in text and out.is_file()


def test_cli_flatten_errors(tmp_path, capsys):
    assert main(["flatten", str(tmp_path / "nope.stl"), str(tmp_path / "o.stl")]) != 0
    assert "file not found" in capsys.readouterr().err
    bad = tmp_path / "bad_upper.stl"
    bad.write_bytes(b"solid x\n facet normal 0 0 1\n outer loop\n vertex 0 0\n")
    assert main(["flatten", str(bad), str(tmp_path / "o.stl")]) != 0
    assert "MalformedAscii" in capsys.readouterr().err


def test_cli_render_modes(fixture_stl, tmp_path):
    path, _ = fixture_stl
    assert main(["render", str(path), str(tmp_path / "a")]) == 0
    assert main(["render", str(path), str(tmp_path / "b")]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["demo_upper_back_ssp.png", "demo_upper_bottom_ssp.png", "demo_upper_front_ssp.png"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    assert main(["render", str(path), str(tmp_path / "u"), "--mode", "uvp"]) == 0
    assert len(list((tmp_path / "u").glob("*_uvp.png"))) == 3
    assert main(["render", str(path), str(tmp_path / "n"), "--no-flatten"]) == 0
    front = "demo_upper_front_ssp.png"
    assert (tmp_path / "n" / front).read_bytes() != (tmp_path / "a" / front).read_bytes()


def test_cli_infer_records_mode(fixture_stl, tmp_path):
    d = tmp_path / "cases"
    d.mkdir()
    shutil.copy(fixture_stl[0], d)
    assert main(["infer", str(d), "--out", str(tmp_path / "r"), "--mode", "thinking"]) == 0
    doc = json.loads((tmp_path / "r" / "demo_upper.report.json").read_text())
    assert doc["metadata"]["mode"] == "thinking"
    assert doc["json_valid"] and doc["validation"] == []
    jsonschema = pytest.importorskip("jsonschema")
    jsonschema.validate(doc["report"], dkb.report_schema())


def test_cli_infer_fails_only_when_all_cases_fail(fixture_stl, tmp_path):
    d = tmp_path / "cases"
    d.mkdir()
    shutil.copy(fixture_stl[0], d)
    cfg = tmp_path / "remote.toml"
    cfg.write_text('[backend]\nkind = "http"\nurl = "http://127.0.0.1:9/v1"\nattempts = 1\ntimeout_s = 0.5\n')
    assert main(["infer", str(d), "--out", str(tmp_path / "r"), "--config", str(cfg)]) == 1
    doc = json.loads((tmp_path / "r" / "demo_upper.report.json").read_text())
    assert doc["error"]["type"] == "BackendUnreachable"


def test_cli_pipeline_and_eval(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["pipeline", str(dataset), "--out", str(out)]) == 0
    assert main(["eval", str(out), str(dataset), str(tmp_path / "m1")]) == 0
    assert main(["eval", str(out), str(dataset), str(tmp_path / "m2")]) == 0
    assert (tmp_path / "m1" / "metrics.csv").read_bytes() == (tmp_path / "m2" / "metrics.csv").read_bytes()
    with open(tmp_path / "m1" / "per_case_metrics.csv") as fh:
        for row in csv.DictReader(fh):
            assert float(row["Acc"]) == pytest.approx(100 - float(row["RE"]))
    empty = tmp_path / "empty"
    empty.mkdir()
    capsys.readouterr()
    assert main(["eval", str(empty), str(dataset), str(tmp_path / "m3")]) != 0
    assert "no cases" in capsys.readouterr().err


def test_eval_lists_unmatched_cases(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    run_batch(discover_cases(dataset), PipelineConfig(), out)
    gt = tmp_path / "gt"
    gt.mkdir()
    for p in sorted(dataset.glob("*.gt.json"))[1:]:
        shutil.copy(p, gt)
    assert main(["eval", str(out), str(gt), str(tmp_path / "m")]) != 0
    assert "case000_lower" in capsys.readouterr().err


def test_pipeline_is_idempotent(dataset, tmp_path):
    out = tmp_path / "run"
    assert main(["pipeline", str(dataset), "--out", str(out)]) == 0
    first = {p.name: p.read_bytes() for p in out.iterdir() if p.is_file()}
    assert main(["pipeline", str(dataset), "--out", str(out)]) == 0
    second = {p.name: p.read_bytes() for p in out.iterdir() if p.is_file()}
    assert first == second


def test_subcommands_compose(dataset, tmp_path):
    views = tmp_path / "views"
    for stl in sorted(dataset.glob("*.stl")):
        flat = tmp_path / "flat" / f"{stl.stem}.flat.stl"
        assert main(["flatten", str(stl), str(flat)]) == 0
        assert main(["render", str(stl), str(views)]) == 0
    assert main(["infer", str(views), "--out", str(tmp_path / "staged")]) == 0
    assert main(["pipeline", str(dataset), "--out", str(tmp_path / "direct")]) == 0
    for name in reports_in(tmp_path / "direct"):
        staged = json.loads((tmp_path / "staged" / name).read_text())
        direct = json.loads((tmp_path / "direct" / name).read_text())
        for key in ("report", "validation", "json_valid", "raw"):
            assert staged[key] == direct[key]
        assert staged["metadata"]["request_digest"] == direct["metadata"]["request_digest"]
    staged = evaluate_directory(tmp_path / "staged", dataset)
    direct = evaluate_directory(tmp_path / "direct", dataset)
    assert [r.metrics for r in staged] == [r.metrics for r in direct]


def test_ablate_rows_resume_and_seed(dataset, tmp_path):
    out = tmp_path / "abl"
    backend = CountingBackend(seed=0)
    run_ablation_grid(dataset, PipelineConfig(), out, backend=backend)
    assert backend.calls == 8 * 4
    rows = list(csv.DictReader(open(out / "ablation_summary.csv")))
    assert [r["variant"] for r in rows] == [name for name, *_ in VARIANTS]
    assert all(r["Acc_mean"] and r["Acc_std"] and r["JsonValid_mean"] for r in rows)

    again = CountingBackend(seed=0)
    before = (out / "ablation_summary.csv").read_bytes()
    run_ablation_grid(dataset, PipelineConfig(), out, backend=again)
    assert again.calls == 0
    assert (out / "ablation_summary.csv").read_bytes() == before

    # interrupted run: one persisted outcome lost
    lost = next((out / "variants" / "uvp").glob("*.report.json"))
    lost.unlink()
    resumed = CountingBackend(seed=0)
    run_ablation_grid(dataset, PipelineConfig(), out, backend=resumed)
    assert resumed.calls == 1
    assert (out / "ablation_summary.csv").read_bytes() == before

    assert main(["ablate", str(dataset), "--out", str(tmp_path / "s9"), "--seed", "9"]) == 0
    rows9 = list(csv.DictReader(open(tmp_path / "s9" / "ablation_summary.csv")))
    assert [r["variant"] for r in rows9] == [r["variant"] for r in rows]
    raw0 = sorted(p.read_text() for p in (out / "variants" / "full").glob("*.report.json"))
    raw9 = sorted(p.read_text() for p in (tmp_path / "s9" / "variants" / "full").glob("*.report.json"))
    assert raw0 != raw9


def test_ablation_toggles_touch_only_their_stage(dataset, tmp_path):
    out = tmp_path / "abl"
    run_ablation_grid(dataset, PipelineConfig(), out)

    def meta(variant):
        return {p.name: json.loads(p.read_text())["metadata"] for p in (out / "variants" / variant).glob("*.json")}

    full, no_flat, no_dkb = meta("full"), meta("no-flatten"), meta("no-dkb")
    for name in full:
        assert full[name]["fit"] == no_flat[name]["fit"]
        assert full[name]["image_sha256"] != no_flat[name]["image_sha256"]
        assert full[name]["prompt_sha256"] == no_flat[name]["prompt_sha256"]
        assert full[name]["image_sha256"] == no_dkb[name]["image_sha256"]
        assert full[name]["prompt_sha256"] != no_dkb[name]["prompt_sha256"]


def test_config_loading(tmp_path, dataset):
    toml = tmp_path / "run.toml"
    toml.write_text(
        'seed = 4\n'
        '[arch_fit]\ncoarse_step = 2.0\n'
        '[render]\nwidth = 96\nheight = 128\n'
        '[backend]\nmode = "thinking"\ncorrupt = { case000_upper = "hallucinate" }\n'
        '[variant]\nrender_mode = "uvp"\n'
        f'[paths]\ninput_dir = "{dataset.name}"\n'
    )
    shutil.copytree(dataset, tmp_path / dataset.name)
    cfg = load_config(toml)
    assert cfg.seed == 4 and cfg.fit.coarse_step == 2.0 and cfg.render.width == 96
    assert cfg.backend.corrupt == {"case000_upper": "hallucinate"}
    assert cfg.variant.render_mode == "uvp" and cfg.variant.flatten_enabled
    assert Path(cfg.input_dir) == (tmp_path / dataset.name).resolve()
    assert cfg.fingerprint() != PipelineConfig().fingerprint()


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        config_from_dict({"colour": 1})
    with pytest.raises(ConfigError):
        config_from_dict({"render": {"widht": 10}})
    with pytest.raises(ConfigError):
        config_from_dict({"backend": {"kind": "http"}})
    with pytest.raises(ConfigError):
        config_from_dict({"paths": {"input_dir": "does/not/exist"}}, tmp_path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = [\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    assert main(["flatten", "x.stl", "y.stl", "--config", str(bad)]) == 2


def test_fingerprint_ignores_concurrency():
    a = config_from_dict({"backend": {"max_concurrency": 1}})
    b = config_from_dict({"backend": {"max_concurrency": 8}})
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != config_from_dict({"seed": 1}).fingerprint()
