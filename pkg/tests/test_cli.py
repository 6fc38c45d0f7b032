from __future__ import annotations

import json
import subprocess
import sys
from importlib.resources import files

import jsonschema
import numpy as np
import pytest

import oracles
from conftest import random_three_level, random_two_level
from rankicc import __version__, equal_cluster_weights, rank_icc, rank_icc_three_level, three_level_weights
from rankicc.cli import cells_from_config, main
from rankicc.csvio import ColumnMapping, dump_json, parse_csv, write_csv
from rankicc.errors import EmptyFile, InvalidSpec, MissingColumn, NonFiniteValue


def _schema(name):
    return json.loads((files("rankicc") / "schemas" / f"{name}.schema.json").read_text())


def _write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _run(capsys, argv):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# ---------------------------------------------------------------------------
# parsing


def test_parse_two_level(tmp_path):
    p = _write(tmp_path, "cluster,value\na,1\na,2\nb,3\nb,4\n")
    parsed = parse_csv(p, ColumnMapping())
    assert parsed.rows == 4 and parsed.data.n == 2 and parsed.data.N == 4
    assert parsed.weights is None


def test_parse_three_level_mapping(tmp_path):
    p = _write(tmp_path, 'site,couple,phq9\n"s1",c1,3\ns1,c1,5\ns1,c2,4\ns2,c1,1\ns2,c2,0\ns2,c2,2\n')
    parsed = parse_csv(p, ColumnMapping("site", "phq9", "couple"))
    d = parsed.data
    assert d.n == 2 and d.n_sub == 4
    assert sorted(d.sub_sizes.tolist()) == [1, 1, 2, 2]


def test_parse_na_reports_line(tmp_path):
    p = _write(tmp_path, "cluster,value\na,1\na,NA\nb,3\n")
    with pytest.raises(NonFiniteValue) as exc:
        parse_csv(p, ColumnMapping())
    assert exc.value.row == 3


@pytest.mark.parametrize("text, err", [
    ("", EmptyFile),
    ("cluster,value\n", EmptyFile),
    ("cluster,score\na,1\n", MissingColumn),
    ("cluster,value\na,inf\n", NonFiniteValue),
])
def test_parse_errors(tmp_path, text, err):
    with pytest.raises(err):
        parse_csv(_write(tmp_path, text), ColumnMapping())


def test_column_names_distinct():
    with pytest.raises(InvalidSpec):
        ColumnMapping("id", "id")


def test_weight_column(tmp_path):
    p = _write(tmp_path, "cluster,value,w\nb,3,1\na,1,2\nb,4,1\na,2,4\n")
    parsed = parse_csv(p, ColumnMapping(weight="w"))
    assert parsed.weights.w.sum() == pytest.approx(1.0, abs=1e-15)
    assert parsed.weights.scheme == "custom"
    with pytest.raises(NonFiniteValue):
        parse_csv(_write(tmp_path, "cluster,value,w\na,1,0\na,2,1\n", "z.csv"), ColumnMapping(weight="w"))


def test_round_trip_two_level(tmp_path, rng):
    for _ in range(10):
        d = random_two_level(rng)
        if d.values.min() == d.values.max():
            continue
        write_csv(d, tmp_path / "rt.csv")
        back = parse_csv(tmp_path / "rt.csv", ColumnMapping()).data
        a = rank_icc(d, equal_cluster_weights(d))
        b = rank_icc(back, equal_cluster_weights(back))
        assert a.gamma_hat == b.gamma_hat


def test_round_trip_three_level(tmp_path, rng):
    for _ in range(10):
        d = random_three_level(rng)
        if d.values.min() == d.values.max():
            continue
        write_csv(d, tmp_path / "rt.csv")
        back = parse_csv(tmp_path / "rt.csv", ColumnMapping(subcluster="subcluster")).data
        a = rank_icc_three_level(d, three_level_weights(d, "level3"))
        b = rank_icc_three_level(back, three_level_weights(back, "level3"))
        assert (a.gamma2_hat, a.gamma3_hat) == (b.gamma2_hat, b.gamma3_hat)


def test_dump_json_nonfinite_and_repr():
    text = dump_json({"a": float("nan"), "b": np.float64(0.1), "c": [np.int64(3)]})
    assert json.loads(text) == {"a": None, "b": 0.1, "c": [3]}


# ---------------------------------------------------------------------------
# estimate


def test_estimate_example_value(tmp_path, capsys):
    p = _write(tmp_path, "cluster,value\na,1\na,2\nb,3\nb,4\n")
    code, out, _ = _run(capsys, ["estimate", "--input", str(p)])
    assert code == 0
    doc = json.loads(out)
    jsonschema.validate(doc, _schema("estimate-report"))
    g = doc["estimates"]["gamma"]["gamma_hat"]
    assert abs(g - 0.6) <= 1e-12
    assert abs(g - oracles.rank_icc([1, 2, 3, 4], [2, 2], [0.25] * 4)) <= 1e-12
    assert doc["n"] == 2 and doc["N"] == 4 and doc["dropped_singletons"] == 0


def test_estimate_perfect_agreement_fisher_note(tmp_path, capsys):
    p = _write(tmp_path, "cluster,value\na,1\na,1\nb,2\nb,2\nc,3\nc,3\n")
    code, out, _ = _run(capsys, ["estimate", "--input", str(p)])
    assert code == 0
    doc = json.loads(out)
    jsonschema.validate(doc, _schema("estimate-report"))
    gamma = doc["estimates"]["gamma"]
    assert gamma["gamma_hat"] == 1.0
    fisher = [c for c in gamma["ci"] if c["method"] == "fisher-z"][0]
    assert fisher["error"]["code"] == "BOUNDARY_ESTIMATE" and fisher["lower"] is None


def test_estimate_all_tied_exit_3(tmp_path, capsys):
    p = _write(tmp_path, "cluster,value\na,5\na,5\nb,5\nb,5\n")
    code, out, err = _run(capsys, ["estimate", "--input", str(p)])
    assert code == 3
    doc = json.loads(out)
    jsonschema.validate(doc, _schema("error"))
    assert doc["error"]["code"] == "DEGENERATE_DATA"
    assert "DEGENERATE_DATA" in err


def test_estimate_data_error_exit_2(tmp_path, capsys):
    p = _write(tmp_path, "cluster,value\na,1\na,x\n")
    code, out, _ = _run(capsys, ["estimate", "--input", str(p)])
    assert code == 2
    doc = json.loads(out)
    jsonschema.validate(doc, _schema("error"))
    assert doc["error"] == {"code": "NON_FINITE_VALUE", "message": doc["error"]["message"], "row": 3}
    code, _, _ = _run(capsys, ["estimate", "--input", str(tmp_path / "missing.csv")])
    assert code == 2


def test_estimate_singletons(tmp_path, capsys):
    p = _write(tmp_path, "cluster,value\na,1\na,2\nb,3\nb,4\nc,9\n")
    assert _run(capsys, ["estimate", "--input", str(p)])[0] == 2
    with pytest.warns(UserWarning, match="singleton"):
        code, out, _ = _run(capsys, ["estimate", "--input", str(p), "--singletons", "drop"])
    assert code == 0 and json.loads(out)["dropped_singletons"] == 1


def test_estimate_bootstrap_and_output(tmp_path, capsys):
    rows = ["cluster,value"] + [f"c{i},{(i * 7 + j * 3) % 11}" for i in range(12) for j in range(3)]
    p = _write(tmp_path, "\n".join(rows) + "\n")
    out_path = tmp_path / "r.json"
    argv = ["estimate", "--input", str(p), "--weights", "ess", "--ci", "wald", "--ci", "boot-percentile",
            "--ci", "boot-se", "--B", "50", "--seed", "9", "--output", str(out_path)]
    assert _run(capsys, argv)[0] == 0
    doc = json.loads(out_path.read_text())
    jsonschema.validate(doc, _schema("estimate-report"))
    assert doc["bootstrap"]["B"] == 50 and doc["weights"]["scheme"] == "ess"
    assert [c["method"] for c in doc["estimates"]["gamma"]["ci"]] == ["wald", "boot-percentile", "boot-se"]
    first = out_path.read_bytes()
    assert _run(capsys, argv)[0] == 0
    assert out_path.read_bytes() == first


def test_estimate_two_stage_warning(tmp_path, capsys):
    rows = ["cluster,value"] + [f"c{i},{(i * 5 + j) % 7}" for i in range(10) for j in range(3)]
    p = _write(tmp_path, "\n".join(rows) + "\n")
    code, out, _ = _run(capsys, ["estimate", "--input", str(p), "--bootstrap", "two-stage", "--B", "20"])
    assert code == 0
    assert "upward" in json.loads(out)["bootstrap"]["warning"]


def test_estimate_three_level(tmp_path, capsys):
    rows = ["site,couple,phq9"] + [f"s{i},c{j},{(i * 3 + j * 5 + k) % 9}" for i in range(6) for j in range(3) for k in range(2)]
    p = _write(tmp_path, "\n".join(rows) + "\n")
    argv = ["estimate", "--input", str(p), "--levels", "3", "--cluster-col", "site",
            "--subcluster-col", "couple", "--value-col", "phq9", "--ci", "wald", "--ci", "boot-se", "--B", "20"]
    code, out, _ = _run(capsys, argv)
    assert code == 0
    doc = json.loads(out)
    jsonschema.validate(doc, _schema("estimate-report"))
    assert set(doc["estimates"]) == {"gamma2", "gamma3"}
    assert doc["bootstrap"]["scheme"] == "one-stage"
    code, _, _ = _run(capsys, ["estimate", "--input", str(p), "--levels", "3"])
    assert code == 2


def test_weight_column_with_bootstrap_rejected(tmp_path, capsys):
    p = _write(tmp_path, "cluster,value,w\na,1,1\na,2,1\nb,3,1\nb,4,2\n")
    code, _, _ = _run(capsys, ["estimate", "--input", str(p), "--weight-col", "w"])
    assert code == 0
    code, out, _ = _run(capsys, ["estimate", "--input", str(p), "--weight-col", "w", "--ci", "boot-se"])
    assert code == 2 and json.loads(out)["error"]["code"] == "INVALID_SPEC"


# ---------------------------------------------------------------------------
# simulate


CONFIG = {
    "seed": 5,
    "sims": 4,
    "B": 10,
    "truth_M": 100000,
    "cells": [
        {"scenario": "normal", "rho": 0.5, "n": [10, 20], "sizes": 5, "methods": ["wald", "cluster-se"]},
        {"scenario": "three-level", "rho2": 0.5, "rho3": 0.2, "n": 8, "sizes": 3, "methods": ["wald"]},
    ],
}


def test_cells_from_config_expands():
    cells, settings = cells_from_config(CONFIG)
    assert [c.spec.n for c in cells] == [10, 20, 8]
    assert settings == {"seed": 5, "sims": 4, "B": 10, "truth_M": 100000}


def test_simulate_writes_identical_bytes(tmp_path, capsys):
    cfg = tmp_path / "study.json"
    cfg.write_text(json.dumps(CONFIG))
    outs = []
    for tag, workers in (("a", "1"), ("b", "2")):
        prefix = str(tmp_path / tag)
        code, stdout, _ = _run(capsys, ["simulate", str(cfg), "--output", prefix, "--workers", workers])
        assert code == 0 and "wrote" in stdout
        outs.append(((tmp_path / f"{tag}.csv").read_bytes(), (tmp_path / f"{tag}.json").read_bytes()))
    assert outs[0] == outs[1]
    doc = json.loads(outs[0][1])
    jsonschema.validate(doc, _schema("study-report"))
    assert len(doc["rows"]) == 4
    header = outs[0][0].decode().splitlines()[0].split(",")
    assert header[:3] == ["cell", "scenario", "rho"]


@pytest.mark.parametrize("cell, path", [
    ({"scenario": "bogus"}, "cells[0].scenario"),
    ({"scenario": "normal", "rho": 2}, "cells[0].rho"),
    ({"scenario": "normal", "colour": 1}, "cells[0]"),
    ({"rho": 0.5}, "cells[0].scenario"),
    ({"scenario": "normal", "methods": ["magic"]}, "cells[0].methods[0]"),
])
def test_simulate_invalid_config(tmp_path, capsys, cell, path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"sims": 2, "cells": [cell]}))
    code, out, _ = _run(capsys, ["simulate", str(cfg)])
    assert code == 2
    err = json.loads(out)["error"]
    assert err["code"] == "INVALID_SPEC" and err["path"] == path


def test_simulate_bad_json(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text("{not json")
    code, out, _ = _run(capsys, ["simulate", str(cfg)])
    assert code == 2 and json.loads(out)["error"]["path"] == "$"


def test_version(capsys):
    code, out, _ = _run(capsys, ["version"])
    assert code == 0 and out.strip() == f"rankicc {__version__}"


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rankicc", "version"], capture_output=True, text=True)
    assert res.returncode == 0 and __version__ in res.stdout
