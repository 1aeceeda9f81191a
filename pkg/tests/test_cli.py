import hashlib
import json

import numpy as np
import pytest

from mjpmix import __version__
from mjpmix.cli import main
from mjpmix.model import model_to_dict

from conftest import vent_model


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def workdir(tmp_path, truth):
    (tmp_path / "m.json").write_text(json.dumps(model_to_dict(truth)))
    (tmp_path / "v.json").write_text(json.dumps(model_to_dict(vent_model())))
    return tmp_path


def _simulate(d, name="p.json", K=150, seed=7, extra=()):
    argv = ["simulate", "--model", str(d / "m.json"), "--paths", str(K), "--horizon", "30",
            "--seed", str(seed), "--out", str(d / name), *extra]
    assert main(argv) == 0
    return d / name


def test_simulate_is_deterministic(workdir):
    a = _simulate(workdir, "a.json")
    b = _simulate(workdir, "b.json", extra=("--threads", "2"))
    assert _sha(a) == _sha(b)
    manifest = json.loads((workdir / "a.json.manifest.json").read_text())
    assert manifest["seeds"] == {"simulate": 7}
    assert manifest["outputs"][str(a)] == _sha(a)
    assert manifest["version"] == __version__


def test_simulate_csv_and_labels(workdir):
    out = _simulate(workdir, "p.csv", K=20, extra=("--format", "csv", "--labels", str(workdir / "l.csv")))
    assert out.read_text().splitlines()[0] == "path_id,time,state"
    labels = (workdir / "l.csv").read_text().splitlines()
    assert labels[0] == "path_id,regime" and len(labels) == 21


def test_fit_monotone_trace_and_reproducible(workdir):
    paths = _simulate(workdir)
    before = _sha(paths)
    for name in ("f1.json", "f2.json"):
        assert main(["fit", "--paths", str(paths), "--regimes", "2", "--seed", "7",
                     "--out", str(workdir / name)]) == 0
    assert _sha(paths) == before  # inputs are not mutated
    f1 = json.loads((workdir / "f1.json").read_text())
    assert np.all(np.diff(f1["loglik_trace"]) >= -1e-8)
    # the manifest embeds a runtime, so compare the fit outputs only
    assert _sha(workdir / "f1.json") == _sha(workdir / "f2.json")
    manifest = json.loads((workdir / "f1.json.manifest.json").read_text())
    assert manifest["config"]["tol"] == 1e-4 and manifest["inputs"][str(paths)] == before


def test_stderr_asymcov_absorb(workdir, capsys):
    paths = _simulate(workdir, K=400)
    fitp = workdir / "f.json"
    assert main(["fit", "--paths", str(paths), "--regimes", "2", "--out", str(fitp)]) == 0
    assert main(["stderr", "--fit", str(fitp), "--paths", str(paths), "--out", str(workdir / "se.json")]) == 0
    se = json.loads((workdir / "se.json").read_text())
    assert {p["name"] for p in se["parameters"]} >= {"phi[1,1]", "q[1,2,1]"}
    assert all(p["se"] is None or p["se"] > 0 for p in se["parameters"])
    capsys.readouterr()
    assert main(["asymcov", "--model", str(workdir / "m.json"), "--horizon", "30"]) == 0
    sigma = json.loads(capsys.readouterr().out)
    assert len(sigma["names"]) == 18
    assert main(["absorb", "--fit", str(workdir / "v.json")]) == 0
    F = json.loads(capsys.readouterr().out)["regimes"][0]["F"]
    np.testing.assert_allclose(np.sum(F, axis=1), 1.0, atol=1e-9)


def test_aic_and_lrt(workdir, capsys):
    paths = _simulate(workdir, K=200)
    assert main(["aic", "--paths", str(paths), "--max-regimes", "2"]) == 0
    rows = json.loads(capsys.readouterr().out)["rows"]
    assert [r["M"] for r in rows] == [1, 2] and sum(r["best"] for r in rows) == 1
    assert main(["lrt", "--paths", str(paths)]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["df"] == 3 and res["stat"] >= -1e-6


def test_mc_study_small(workdir, capsys):
    assert main(["mc-study", "--model", str(workdir / "m.json"), "--paths-per", "150",
                 "--replications", "2", "--no-se", "--threads", "1"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert len(rep["names"]) == 15 and rep["valid"] == {"150": True}


def test_usage_errors_exit_2(workdir, capsys):
    assert main(["fit", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["simulate", "--model", "m.json", "--paths", "3", "--out", "x.json"]) == 2
    assert main([]) == 2


def test_domain_errors_exit_1(workdir, capsys):
    # the reference truth has no absorbing state
    assert main(["absorb", "--fit", str(workdir / "m.json")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert "error" in err or "code" in err
    assert main(["fit", "--paths", str(workdir / "missing.json"), "--regimes", "2"]) == 1


def test_version(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out
