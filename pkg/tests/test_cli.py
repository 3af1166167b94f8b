"""Command-line entry points, exercised in process via main(argv)."""

import copy
import json

import pytest

from storage_opf.cli import COMPARE_COLUMNS, main


def _write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_solve_relaxed_bundled_case(tmp_path, capsys):
    code = main(["solve-relaxed", "micro3", "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "optimal objective" in out

    sol = json.loads((tmp_path / "micro3_solution.json").read_text())
    assert sol["model"] == "relaxed"
    assert sol["status"] == "optimal"
    assert sol["objective"] == pytest.approx(13008.1472, rel=1e-4)
    assert sol["scd_max"] <= 1e-8
    assert "lmp_per_mwh" in sol and "nu" in sol and "lam" in sol

    duals = (tmp_path / "micro3_duals.csv").read_text().splitlines()
    assert duals[0] == "constraint,kind,entity,period,side,multiplier"
    assert len(duals) > 1

    cond = [ln for ln in
            (tmp_path / "micro3_conditions.csv").read_text().splitlines()
            if not ln.startswith("#")]
    assert cond[0].startswith("n,t,lmp,c1,c2,")


def test_malformed_case_is_a_usage_error(tmp_path, capsys):
    bad = tmp_path / "broken.json"
    bad.write_text("{this is not json")
    assert main(["solve-relaxed", str(bad), "--out", str(tmp_path)]) == 1
    assert "storage-opf:" in capsys.readouterr().err


def test_unknown_case_name_is_a_usage_error(tmp_path, capsys):
    assert main(["solve-relaxed", "no_such_case",
                 "--out", str(tmp_path)]) == 1
    assert "storage-opf:" in capsys.readouterr().err


def test_infeasible_case_exits_with_solver_code(tmp_path, bundled_docs):
    doc = copy.deepcopy(bundled_docs["micro3"])
    for load in doc["loads"].values():
        load["p_mw"] = [900.0] * len(load["p_mw"])
    path = _write_json(tmp_path / "overload.json", doc)
    assert main(["solve-relaxed", path, "--out", str(tmp_path)]) == 2
    sol = json.loads((tmp_path / "overload_solution.json").read_text())
    assert sol["status"] == "infeasible_detected"
    assert not (tmp_path / "overload_duals.csv").exists()


def test_compare_reports_exact_root(tmp_path, capsys):
    code = main(["compare", "micro3", "--out", str(tmp_path)])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == ",".join(COMPARE_COLUMNS)
    row = dict(zip(COMPARE_COLUMNS, lines[1].split(",")))
    assert row["status"] == "ok"
    assert row["exact"] == "true"
    assert row["nodes"] == "1"
    assert row["C1"] == "holds" and row["C2"] == "holds"
    # the persisted copy carries provenance comments, stdout does not
    saved = (tmp_path / "micro3_compare.csv").read_text().splitlines()
    assert saved[0].startswith("#")
    assert saved[-2:] == lines


def test_check_conditions_roundtrip(tmp_path, capsys):
    assert main(["solve-relaxed", "micro3", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    code = main(["check-conditions", "micro3", "--out", str(tmp_path),
                 "--solution", str(tmp_path / "micro3_solution.json")])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["converged"] is True
    assert summary["conditions"]["C1"] == "holds"
    assert summary["conditions"]["C2"] == "holds"
    assert summary["inclusion_violations"] == []


def test_check_conditions_rejects_foreign_solution(tmp_path, capsys):
    assert main(["solve-relaxed", "micro3", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    code = main(["check-conditions", "negative_lmp", "--out", str(tmp_path),
                 "--solution", str(tmp_path / "micro3_solution.json")])
    assert code == 1
    assert "storage-opf:" in capsys.readouterr().err


def test_sweep_over_charge_fees(tmp_path, capsys):
    spec = _write_json(tmp_path / "spec.json",
                       {"charge_fee": [5.0, 0.0, -10.0],
                        "discharge_fee": [15.0]})
    code = main(["sweep", "micro3", "--spec", spec,
                 "--out", str(tmp_path), "--serial"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    header = lines[0].split(",")
    assert header[:2] == ["charge_fee", "discharge_fee"]
    assert header[2:] == COMPARE_COLUMNS + ["min_lmp"]
    assert len(lines) == 4
    for raw in lines[1:]:
        row = dict(zip(header, raw.split(",")))
        assert row["status"] == "ok"
        assert row["exact"] == "true"
        assert float(row["min_lmp"]) > 0.0
    fees = [raw.split(",")[0] for raw in lines[1:]]
    assert fees == ["5", "0", "-10"]  # rows follow the sweep file's order


def test_sweep_rejects_bad_specs(tmp_path, capsys):
    empty = _write_json(tmp_path / "empty.json", {"charge_fee": []})
    assert main(["sweep", "micro3", "--spec", empty]) == 1
    noaxis = _write_json(tmp_path / "noaxis.json", {"storages": "all"})
    assert main(["sweep", "micro3", "--spec", noaxis]) == 1
    big = _write_json(tmp_path / "big.json",
                      {"charge_fee": [5.0, 0.0, -10.0],
                       "discharge_fee": [15.0]})
    assert main(["sweep", "micro3", "--spec", big,
                 "--max-scenarios", "2"]) == 1
    err = capsys.readouterr().err
    assert "cap of 2" in err


def test_serial_sweeps_are_reproducible(tmp_path, capsys):
    spec = _write_json(tmp_path / "spec.json",
                       {"charge_fee": [5.0, 0.0], "discharge_fee": [15.0]})
    bodies = []
    files = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["sweep", "micro3", "--spec", spec,
                     "--out", str(out), "--serial"]) == 0
        bodies.append(capsys.readouterr().out)
        text = (out / "micro3_sweep.csv").read_text()
        files.append("\n".join(ln for ln in text.splitlines()
                               if not ln.startswith("#")))
    assert bodies[0] == bodies[1]
    assert files[0] == files[1]
