import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from glsoed import cli, uq
from glsoed.biogeomodel import default_grid

jsonschema = pytest.importorskip("jsonschema")
referencing = pytest.importorskip("referencing")

ROOT = Path(__file__).resolve().parent.parent
TINY = Path(__file__).resolve().parent / "data" / "tiny.json"
SCHEMAS = ROOT / "schemas"


def read_rows(path):
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def validate(doc, schema_name):
    registry = referencing.Registry().with_resource(
        "meta.json", referencing.Resource.from_contents(json.loads((SCHEMAS / "meta.json").read_text())))
    schema = json.loads((SCHEMAS / schema_name).read_text())
    jsonschema.Draft202012Validator(schema, registry=registry).validate(doc)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    assert cli.main(["pipeline", "--config", str(TINY), "--out", str(out)]) == 0
    return out


def test_pipeline_files(pipeline):
    for name in ("spinup.json", "measurements.csv", "estimate.json", "uq_params.json", "uq_output.csv",
                 "oed_gains.csv", "oed_selection.json"):
        assert (pipeline / name).exists(), name
    assert len(list((pipeline / "snapshots").glob("month_*.csv"))) == 12


def test_schemas(pipeline):
    validate(json.loads((pipeline / "estimate.json").read_text()), "estimate.schema.json")
    validate(json.loads((pipeline / "uq_params.json").read_text()), "uq.schema.json")
    validate(json.loads((pipeline / "oed_selection.json").read_text()), "oed.schema.json")


def test_snapshots(pipeline):
    n_wet = default_grid(4, 4).n_wet
    rows = read_rows(pipeline / "snapshots" / "month_05.csv")
    assert len(rows) == 2 * n_wet
    assert {r["month"] for r in rows} == {"5"}
    assert min(float(r["value"]) for r in rows) >= 0.0
    spin = json.loads((pipeline / "spinup.json").read_text())
    assert spin["converged"] and spin["residual"] <= spin["tol"]


def test_uq_outputs(pipeline):
    n_wet = default_grid(4, 4).n_wet
    rows = read_rows(pipeline / "uq_output.csv")
    assert len(rows) == 2 * 12 * n_wet
    lo, v, hi = (np.array([float(r[k]) for r in rows]) for k in ("lower", "value", "upper"))
    assert np.all(lo <= v) and np.all(v <= hi)
    report = json.loads((pipeline / "uq_params.json").read_text())
    assert report["kinds"]["F"]["usable"]
    assert report["kinds"]["F"]["sigma2_source"] == "known"


def test_selection_within_budget(pipeline):
    sel = json.loads((pipeline / "oed_selection.json").read_text())
    costs = [s["cumulative_cost"] for s in sel["selection"]]
    assert costs and costs[-1] <= sel["budget"] + 1e-12
    psi = [sel["psi_initial"]] + [s["cumulative_psi"] for s in sel["selection"]]
    assert np.all(np.diff(psi) <= 1e-12)
    gains = read_rows(pipeline / "oed_gains.csv")
    assert len(gains) == sel["n_candidates"]


def test_meta_stamped(pipeline):
    est = json.loads((pipeline / "estimate.json").read_text())
    first = (pipeline / "uq_output.csv").read_text().splitlines()[0]
    meta = json.loads(first[len("# meta "):])
    assert meta["config_sha256"] == est["meta"]["config_sha256"]
    assert meta["command"] == "uq" and est["meta"]["command"] == "estimate"


def test_estimate_deterministic(pipeline, tmp_path):
    assert cli.main(["estimate", "--config", str(TINY), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "estimate.json").read_text() == (pipeline / "estimate.json").read_text()
    assert (tmp_path / "measurements.csv").read_text() == (pipeline / "measurements.csv").read_text()


def test_seed_changes_data(pipeline, tmp_path):
    cfg = json.loads(TINY.read_text())
    cfg["optimizer"]["max_local_iters"] = 1
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["estimate", "--config", str(path), "--out", str(tmp_path), "--seed", "4"]) == 0
    assert (tmp_path / "measurements.csv").read_text() != (pipeline / "measurements.csv").read_text()
    assert json.loads((tmp_path / "estimate.json").read_text())["meta"]["seed"] == 4


def test_measurement_file_input(pipeline, tmp_path):
    cfg = json.loads(TINY.read_text())
    del cfg["synthetic"]
    cfg["measurements"] = "data.csv"
    cfg["optimizer"].update(max_local_iters=2)
    shutil.copy(pipeline / "measurements.csv", tmp_path / "data.csv")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "out"
    assert cli.main(["estimate", "--config", str(path), "--out", str(out), "--estimator", "wls"]) == 0
    est = json.loads((out / "estimate.json").read_text())
    assert est["estimator"] == "wls" and est["n"] == 52


def test_not_periodic_exit(tmp_path, capsys):
    code = cli.main(["simulate", "--config", str(TINY), "--out", str(tmp_path), "--max-years", "1"])
    assert code == cli.EXIT_SPINUP
    assert "residual" in capsys.readouterr().err
    assert json.loads((tmp_path / "spinup.json").read_text())["converged"] is False


def test_bad_config(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text('{"model": {"bogus": 1}}')
    assert cli.main(["simulate", "--config", str(path), "--out", str(tmp_path)]) == cli.EXIT_INPUT
    assert "bogus" in capsys.readouterr().err
    path.write_text('{"measurements": "missing.csv"}')
    assert cli.main(["estimate", "--config", str(path), "--out", str(tmp_path)]) == cli.EXIT_INPUT
    path.write_text("not json")
    assert cli.main(["estimate", "--config", str(path), "--out", str(tmp_path)]) == cli.EXIT_INPUT


def test_uq_needs_estimate(tmp_path, capsys):
    assert cli.main(["uq", "--config", str(TINY), "--out", str(tmp_path)]) == cli.EXIT_INPUT
    assert "estimate" in capsys.readouterr().err


def test_bad_candidates(pipeline, tmp_path):
    cfg = json.loads(TINY.read_text())
    cfg["oed"]["candidates"] = "cands.csv"
    (tmp_path / "cands.csv").write_text("tracer,x,y,z,month,variance,cost\nPO4,0,0,0,0,0.0001,1\n")
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    code = cli.main(["oed", "--config", str(path), "--out", str(tmp_path),
                     "--estimate", str(pipeline / "estimate.json")])
    assert code == cli.EXIT_OED


def test_rank_deficient_exit(pipeline, tmp_path, monkeypatch, capsys):
    def singular(*args, **kwargs):
        raise uq.RankDeficient("parameters alpha and k_water are not separately identifiable", 1, (1, 5))

    monkeypatch.setattr(cli, "build_bundle", singular)
    code = cli.main(["uq", "--config", str(TINY), "--out", str(tmp_path),
                     "--estimate", str(pipeline / "estimate.json")])
    assert code == cli.EXIT_RANK
    err = capsys.readouterr().err
    assert "alpha" in err and "k_water" in err


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    out = capsys.readouterr().out
    for command in ("simulate", "estimate", "uq", "oed", "pipeline"):
        assert command in out
