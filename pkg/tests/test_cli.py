import csv
import json
import math
from types import SimpleNamespace

import pytest

from pathspace import cli


def run(argv, tmp_path, name="out.json"):
    out = tmp_path / name
    code = cli.main(list(argv) + ["--out", str(out)])
    return code, (json.loads(out.read_text()) if out.exists() else None)


def test_constants_json(tmp_path):
    code, doc = run(["constants", "--K", "1", "--T", "1", "--n", "1"], tmp_path)
    assert code == 0
    res = doc["payload"]["results"]
    assert res["c0"] == pytest.approx(2 * (math.e - 2 * math.sqrt(math.e) + 1), abs=1e-15)
    assert res["C"] == pytest.approx(math.e - 2, abs=1e-15)
    assert res["c1"] == pytest.approx(1.0, abs=1e-15)
    assert res["c2n"] == pytest.approx(math.e - 1, abs=1e-15)
    p = doc["payload"]
    assert p["schema"] and p["config_hash"] and p["versions"]["numpy"]
    assert "timestamp" in doc["meta"] and "timestamp" not in p


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\nK = 1\nbogus_key = 3\n")
    code = cli.main(["constants", "--config", str(cfg)])
    assert code == 2
    err = capsys.readouterr().err
    assert "bogus_key" in err and ":3:" in err


def test_config_values_and_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("experiment = constants\nK = -1   # trailing comment\nT = 2\n")
    _, doc = run(["constants", "--config", str(cfg)], tmp_path)
    assert doc["payload"]["config"]["K"] == -1.0 and doc["payload"]["config"]["T"] == 2.0
    _, doc2 = run(["constants", "--config", str(cfg), "--T", "0.5"], tmp_path, "b.json")
    assert doc2["payload"]["config"]["T"] == 0.5
    assert doc["payload"]["config_hash"] != doc2["payload"]["config_hash"]


def test_config_wrong_experiment_and_bad_value(tmp_path, capsys):
    cfg = tmp_path / "a.cfg"
    cfg.write_text("experiment = she-run\n")
    assert cli.main(["constants", "--K", "1", "--config", str(cfg)]) == 2
    cfg.write_text("K = 1\nn = 1.5\n")
    assert cli.main(["constants", "--config", str(cfg)]) == 2
    assert ":2:" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["constants"],                                   # --K missing
    ["verify-lsi", "--manifold", "flat:2"],          # --K missing
    ["sample-bm", "--manifold", "torus:2"],
    ["sample-bm", "--paths", "0"],
    ["nonsense"],
    ["she-qv"],                                      # --trajectory missing
    ["verify-poincare", "--K", "0", "--T", "0.3", "--n", "1"],  # window rule
])
def test_usage_errors_exit_2(argv, tmp_path):
    assert cli.main(argv + ["--out", str(tmp_path / "x.json")] if argv[0] != "nonsense" else argv) == 2


def test_exit_code_rule():
    R = lambda v, eq=False, gating=True: SimpleNamespace(verdict=v, equality=eq, gating=gating)  # noqa: E731
    assert cli.exit_code([R("holds"), R("holds")]) == 0
    assert cli.exit_code([R("holds"), R("inconclusive")]) == 4
    assert cli.exit_code([R("inconclusive"), R("violated")]) == 3
    assert cli.exit_code([R("inconclusive", eq=True)]) == 0
    assert cli.exit_code([R("violated", gating=False)]) == 0
    assert cli.exit_code([]) == 0


def test_violated_exit_3(tmp_path):
    code, doc = run(["she-invariance", "--N", "8", "--dt", "1e-3", "--burn-in", "3000", "--samples", "20000",
                     "--replicas", "64", "--seed", "1", "--noise-scale", "2"], tmp_path)
    assert code == 3 and doc["payload"]["summary"] == {"violated": 1}


def test_inconclusive_exit_4(tmp_path):
    # 20 paths cannot resolve the gradient margin at T = 0.1
    code, doc = run(["verify-gradient-ineq", "--manifold", "sphere:2", "--K", "-1", "--paths", "20", "--steps", "8",
                     "--T", "0.1"], tmp_path)
    assert code == 4 and doc["payload"]["exit_code"] == 4
    assert [r["verdict"] for r in doc["payload"]["reports"]] == ["inconclusive"]
    # the flat equality case is inconclusive by construction and does not gate
    code, doc = run(["verify-gradient-ineq", "--manifold", "flat:2", "--K", "0", "--paths", "200", "--steps", "8",
                     "--T", "1"], tmp_path, "flat.json")
    assert code == 0 and doc["payload"]["summary"] == {"equality": 1}
    # the control flag turns a gating run into a non-gating one
    code, _ = run(["verify-gradient-ineq", "--manifold", "sphere:2", "--K", "-1", "--paths", "20", "--steps", "8",
                   "--T", "0.1", "--control"], tmp_path, "ctl.json")
    assert code == 0


def test_sample_bm_deterministic_across_workers(tmp_path):
    base = ["sample-bm", "--manifold", "sphere:2", "--paths", "300", "--steps", "32", "--seed", "42"]
    _, a = run(base + ["--workers", "1"], tmp_path, "a.json")
    _, b = run(base + ["--workers", "3"], tmp_path, "b.json")
    _, c = run(base, tmp_path, "c.json")
    assert a["payload"] == b["payload"] == c["payload"]
    dump = tmp_path / "paths.bin"
    assert cli.main(base + ["--dump", str(dump), "--out", str(tmp_path / "d.json")]) == 0
    assert dump.read_bytes()[:4] == b"HBMP"


def test_reports_byte_identical_modulo_meta(tmp_path):
    argv = ["verify-poincare", "--manifold", "flat:2", "--K", "0", "--paths", "2000", "--steps", "16",
            "--functions", "linear-coordinate:0|square(linear-coordinate:1)", "--seed", "3"]
    run(argv + ["--workers", "1"], tmp_path, "a.json")
    run(argv + ["--workers", "2"], tmp_path, "b.json")
    a = json.loads((tmp_path / "a.json").read_text())["payload"]
    b = json.loads((tmp_path / "b.json").read_text())["payload"]
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert a["payload_hash"] == b["payload_hash"]


def test_verify_csv(tmp_path):
    path = tmp_path / "rows.csv"
    code, doc = run(["verify-lsi", "--manifold", "flat:2", "--K", "0", "--paths", "2000", "--steps", "16",
                     "--functions", "constant:2", "--n", "1,2", "--csv", str(path)], tmp_path)
    rows = list(csv.DictReader(path.open()))
    assert len(rows) == len(doc["payload"]["reports"]) == 4
    assert all(r["equality"] == "True" for r in rows)
    assert code == 0


def test_she_pipeline(tmp_path):
    traj = tmp_path / "traj.bin"
    base = ["she-run", "--N", "16", "--dt", "1e-4", "--steps", "4000", "--snapshot-every", "1", "--replicas", "4",
            "--init", "stationary", "--seed", "5", "--trajectory-out", str(traj)]
    code, a = run(base + ["--workers", "1"], tmp_path, "a.json")
    assert code == 0 and traj.exists()
    _, b = run(base + ["--workers", "2"], tmp_path, "b.json")
    assert a["payload"] == b["payload"]
    code, qv = run(["she-qv", "--trajectory", str(traj), "--continuum-rate", "1"], tmp_path, "qv.json")
    rep = qv["payload"]["reports"][0]
    assert code == 0 and rep["verdict"] == "holds"
    series = tmp_path / "erg.csv"
    code, _ = run(["she-ergodic", "--trajectory", str(traj), "--function", "constant:1", "--reference", "1",
                   "--csv", str(series)], tmp_path, "e.json")
    assert code == 0 and series.read_text().startswith("t,replica0")
    code, dec = run(["she-decay", "--trajectory", str(traj), "--function", "constant:2", "--max-time", "0.1",
                     "--csv", str(tmp_path / "d.csv")], tmp_path, "d.json")
    assert code == 0 and dec["payload"]["reports"][0]["verdict"] == "holds"
