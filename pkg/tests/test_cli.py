import csv
import json
import math
import os

import numpy as np
import pytest
from scipy import stats

from partialbayes import cli
from partialbayes.mtp import bh_reject
from partialbayes.npmle import SolverConfig
from partialbayes.simbench import preset, sample_dataset
from partialbayes.special import make_rng
from partialbayes.summarize import SummaryDataset, write_pairs


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_dataset(path, z, s2, nu, ids=None):
    write_pairs(SummaryDataset.from_arrays(z, s2, nu, ids), path)
    return str(path)


@pytest.fixture
def toy(tmp_path):
    # z chosen so that the t-test p-values are exactly the mtp toy vector
    p = np.array([0.01, 0.02, 0.3, 0.9])
    z = stats.t.isf(p / 2, 4)
    return write_dataset(tmp_path / "toy.csv", z, np.ones(4), 4, ["a", "b", "c", "d"])


def test_ttest_toy_matches_mtp(toy, tmp_path, capsys):
    out = tmp_path / "res.csv"
    assert cli.main(["test", toy, "--method", "ttest", "--alpha", "0.1", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert list(rows[0]) == ["id", "z", "s2", "p_npmle", "p_limma", "p_ttest",
                             "adj_p_ttest", "rejected_ttest"]
    assert np.allclose([float(r["p_ttest"]) for r in rows], [0.01, 0.02, 0.3, 0.9], atol=1e-12)
    assert [r["rejected_ttest"] for r in rows] == ["1", "1", "0", "0"]
    assert np.allclose([float(r["adj_p_ttest"]) for r in rows], [0.04, 0.04, 0.4, 0.9], atol=1e-12)
    printed = capsys.readouterr().out
    assert "ttest: discoveries=2" in printed
    side = json.loads((tmp_path / "res.fit.json").read_text())
    assert side["discoveries"] == {"ttest": 2}
    assert {"support", "weights", "kkt_gap", "log_likelihood", "grid_bounds"} <= set(side["npmle"])
    assert side["limma"]["nu0_infinite"] in (True, False)


def test_identical_variances_npmle_is_z_test(tmp_path):
    rng = np.random.default_rng(1)
    z = rng.normal(scale=2, size=200)
    path = write_dataset(tmp_path / "iv.csv", z, np.full(200, 2.0), 4)
    out = tmp_path / "res.csv"
    assert cli.main(["test", path, "--out", str(out)]) == 0
    rows = read_csv(out)
    got = np.array([float(r["p_npmle"]) for r in rows])
    assert np.max(np.abs(got - 2 * stats.norm.sf(np.abs(z) / math.sqrt(2.0)))) <= 1e-10
    for m in ("npmle", "limma", "ttest"):
        adj = np.array([float(r[f"adj_p_{m}"]) for r in rows])
        rej = np.array([r[f"rejected_{m}"] == "1" for r in rows])
        assert np.array_equal(rej, adj <= 0.05)


def _sim_file(tmp_path, seed, n=3000, name="sim.csv"):
    ds, _ = sample_dataset(preset("scaled_inv_chisq", n=n), make_rng(seed))
    write_pairs(ds, tmp_path / name)
    return str(tmp_path / name)


def test_printed_threshold_is_bh_threshold(tmp_path, capsys):
    path = _sim_file(tmp_path, 2)
    out = tmp_path / "res.csv"
    assert cli.main(["test", path, "--out", str(out)]) == 0
    printed = {line.split(":")[0]: line for line in capsys.readouterr().out.splitlines()}
    rows = read_csv(out)
    for m in ("npmle", "limma", "ttest"):
        p = np.array([float(r[f"p_{m}"]) for r in rows])
        res = bh_reject(p, 0.05)
        thr = float(printed[m].split("bh_threshold=")[1])
        assert thr == res.threshold
        assert f"discoveries={res.k_star}" in printed[m]


def test_outputs_are_deterministic(tmp_path):
    path = _sim_file(tmp_path, 3)
    a, b = tmp_path / "a" / "res.csv", tmp_path / "b" / "res.csv"
    for out in (a, b):
        os.makedirs(out.parent)
        assert cli.main(["test", path, "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    ja = json.loads((a.parent / "res.fit.json").read_text())
    jb = json.loads((b.parent / "res.fit.json").read_text())
    ja["manifest"]["flags"].pop("out")
    jb["manifest"]["flags"].pop("out")
    assert ja == jb
    assert ja["manifest"]["inputs"]["sim.csv"]
    assert ja["manifest"]["versions"]["partialbayes"]


def test_exit_codes(tmp_path, monkeypatch):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,z,s2\na,1,-1\n")
    out = str(tmp_path / "res.csv")
    assert cli.main(["test", str(bad), "--df", "4", "--out", out]) == 2
    assert not os.path.exists(out)
    assert cli.main(["test", str(tmp_path / "missing.csv"), "--df", "4", "--out", out]) == 4
    good = _sim_file(tmp_path, 4, n=500)
    blocked = tmp_path / "file"
    blocked.write_text("x")
    assert cli.main(["test", good, "--out", str(blocked / "res.csv")]) == 4
    # strict mode turns solver non-convergence into a numerical failure
    monkeypatch.setattr(cli, "SolverConfig", lambda: SolverConfig(max_iter=1))
    assert cli.main(["test", good, "--strict", "--out", out]) == 3
    assert not os.path.exists(out)
    assert cli.main(["test", good, "--out", out]) == 0


def test_usage_error_exit_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["test"])
    assert exc.value.code == 2


def test_summarize_command(tmp_path):
    m = tmp_path / "m.csv"
    m.write_text("id,y1,y2,y3,y4\nu1,1,2,4,7\nu2,0,0,1,1\nu3,3,1,2,2\n")
    d = tmp_path / "d.csv"
    d.write_text("intercept,group\n1,0\n1,0\n1,1\n1,1\n")
    out = tmp_path / "pairs.csv"
    assert cli.main(["summarize", str(m), "--design", str(d), "--contrast", "0,1",
                     "--out", str(out)]) == 0
    text = out.read_text()
    assert text.startswith("# df=2")
    rows = read_csv_skip_comments(out)
    assert [r["id"] for r in rows] == ["u1", "u3"]
    assert float(rows[0]["z"]) == pytest.approx(4.0)
    assert cli.main(["summarize", str(m), "--design", str(d), "--contrast", "0,1,2",
                     "--out", str(out)]) == 2


def read_csv_skip_comments(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def test_diagnose_command(tmp_path):
    path = _sim_file(tmp_path, 5, n=2000)
    out = tmp_path / "diag"
    assert cli.main(["diagnose", path, "--bins", "20", "--s2-grid", "15", "--out-dir", str(out)]) == 0
    hist = read_csv(out / "histogram.csv")
    assert len(hist) == 20
    assert sum(int(r["count"]) for r in hist) == 2000
    assert all(float(r["f_npmle"]) > 0 and float(r["f_limma"]) > 0 for r in hist)
    atoms = read_csv(out / "prior_atoms.csv")
    assert sum(float(r["weight"]) for r in atoms) == pytest.approx(1.0, abs=1e-12)
    assert len(read_csv(out / "limma_prior_density.csv")) == 15
    thr = read_csv(out / "thresholds.csv")
    tt = [r for r in thr if r["method"] == "ttest" and r["level"] == "unadjusted"]
    assert len(tt) == 15
    for r in tt:
        assert float(r["z_threshold"]) == pytest.approx(
            stats.t.isf(0.025, 4) * math.sqrt(float(r["s2"])), abs=1e-7)
    summary = json.loads((out / "diagnose.json").read_text())
    assert set(summary["discoveries"]) == {"npmle", "limma", "ttest"}


def test_simulate_command(tmp_path):
    prefix = tmp_path / "sim"
    args = ["simulate", "--preset", "two_point", "--n", "300", "--replicates", "2", "--seed", "7",
            "--out", str(prefix)]
    assert cli.main(args) == 0
    rep = json.loads((tmp_path / "sim.json").read_text())
    assert rep["replicates"] == 2 and rep["seed"] == 7
    assert rep["manifest"]["seed"] == 7
    rows = read_csv(tmp_path / "sim.csv")
    assert {r["method"] for r in rows} == {"ttest", "limma", "npmle", "oracle", "oracle_storey"}
    first = (tmp_path / "sim.csv").read_bytes()
    assert cli.main(args) == 0
    assert (tmp_path / "sim.csv").read_bytes() == first

    setting = tmp_path / "setting.json"
    setting.write_text(json.dumps(preset("dirac", n=200, nu=2).to_dict()))
    assert cli.main(["simulate", "--setting-file", str(setting), "--replicates", "1",
                     "--out", str(tmp_path / "s2")]) == 0
    assert json.loads((tmp_path / "s2.json").read_text())["setting"]["nu"] == 2


def test_npmle_and_limma_discoveries_agree_under_limma_model(tmp_path, capsys):
    totals = {"npmle": 0, "limma": 0}
    for seed in range(20):
        path = _sim_file(tmp_path, 100 + seed, n=10000, name=f"s{seed}.csv")
        assert cli.main(["test", path, "--out", str(tmp_path / f"r{seed}.csv")]) == 0
        counts = {}
        for line in capsys.readouterr().out.splitlines():
            m, rest = line.split(": ")
            counts[m] = int(rest.split()[0].split("=")[1])
        assert abs(counts["npmle"] - counts["limma"]) <= 0.05 * counts["limma"]
        for m in totals:
            totals[m] += counts[m]
    assert totals["limma"] > 0
    assert abs(totals["npmle"] - totals["limma"]) <= 0.05 * totals["limma"]
