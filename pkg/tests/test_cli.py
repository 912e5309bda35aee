import json

import pandas as pd
import pytest

from peg import SimConfig, generate_dataset
from peg.cli import main


@pytest.fixture(scope="module")
def data_csv(tmp_path_factory):
    root = tmp_path_factory.mktemp("clidata")
    cfg = SimConfig(n=60, k=8, j=4, reps=1, seed=21)
    d, _ = generate_dataset(cfg, rep=0)
    rows = []
    for i, sid in enumerate(d.ids):
        for t in range(len(d.y[i])):
            row = {"id": sid, "time": t, "y": d.y[i][t], "a": int(d.a[i][t])}
            for c in range(1, d.k):
                row[f"x{c}"] = d.h[i][t, c]
            rows.append(row)
    path = root / "data.csv"
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


@pytest.fixture(scope="module")
def fit_report(data_csv, tmp_path_factory):
    out = tmp_path_factory.mktemp("clifit") / "fit.json"
    code = main(["fit", "--data", str(data_csv), "--corstr", "exch",
                 "--lambda", "0.2", "--out", str(out)])
    assert code == 0
    return out


class TestFit:
    def test_report_contents(self, fit_report):
        rep = json.loads(fit_report.read_text())
        assert rep["command"] == "fit"
        assert rep["k"] == 8
        assert rep["fit"]["corr"]["kind"] == "exchangeable"
        assert 0 in rep["fit"]["selected"]
        assert len(rep["naive_intervals"]) == len(rep["fit"]["selected"])
        assert rep["config"]["lambda"] == "0.2"

    def test_rerun_reproduces_report(self, data_csv, fit_report, tmp_path):
        out2 = tmp_path / "fit2.json"
        cfg = json.loads(fit_report.read_text())["config"]
        code = main(["fit", "--data", cfg["data"], "--corstr", cfg["corstr"],
                     "--lambda", cfg["lambda"], "--out", str(out2)])
        assert code == 0
        a = json.loads(fit_report.read_text())
        b = json.loads(out2.read_text())
        a["config"].pop("out")
        b["config"].pop("out")
        assert a == b

    def test_auto_lambda(self, data_csv, tmp_path):
        out = tmp_path / "fit_auto.json"
        code = main(["fit", "--data", str(data_csv), "--corstr", "ind",
                     "--lambda", "auto", "--out", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        assert rep["tuning"]["lambda_star"] > 0
        assert len(rep["tuning"]["grid"]) == 30


class TestInfer:
    @pytest.mark.parametrize("method", ["naive", "os-lasso", "os-full", "os-dantzig"])
    def test_methods_produce_intervals(self, data_csv, fit_report, tmp_path, method):
        out = tmp_path / f"{method}.json"
        code = main(["infer", "--method", method, "--fit", str(fit_report),
                     "--data", str(data_csv), "--out", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        fit = json.loads(fit_report.read_text())
        assert [iv["k"] for iv in rep["intervals"]] == fit["fit"]["selected"]
        for iv in rep["intervals"]:
            assert iv["lower"] <= iv["upper"]

    def test_uposi_roundtrip(self, data_csv, fit_report, tmp_path):
        out = tmp_path / "uposi.json"
        code = main(["infer", "--method", "uposi", "--fit", str(fit_report),
                     "--data", str(data_csv), "--boot", "250", "--seed", "5",
                     "--out", str(out)])
        assert code == 0
        rep = json.loads(out.read_text())
        assert rep["uposi"]["c_g"] > 0
        assert rep["uposi"]["omega"] is not None

    def test_uposi_requires_seed(self, data_csv, fit_report, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["infer", "--method", "uposi", "--fit", str(fit_report),
                  "--data", str(data_csv), "--out", str(tmp_path / "u.json")])
        assert exc.value.code == 2

    def test_unknown_method_lists_choices(self, data_csv, fit_report, tmp_path,
                                          capsys):
        with pytest.raises(SystemExit) as exc:
            main(["infer", "--method", "bootstrap", "--fit", str(fit_report),
                  "--data", str(data_csv), "--out", str(tmp_path / "x.json")])
        assert exc.value.code == 2
        err = capsys.readouterr().err
        for name in ("naive", "uposi", "os-full", "os-lasso", "os-dantzig"):
            assert name in err


class TestSimulate:
    def write_config(self, tmp_path, **overrides):
        cfg = {"n": 40, "k": 8, "j": 3, "boot": 200, "cv_folds": 3}
        cfg.update(overrides)
        path = tmp_path / "sim.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_requires_seed(self, tmp_path):
        cfg = self.write_config(tmp_path)
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--config", str(cfg), "--reps", "1",
                  "--out", str(tmp_path / "m.csv")])
        assert exc.value.code == 2

    def test_unknown_method_rejected(self, tmp_path):
        cfg = self.write_config(tmp_path)
        with pytest.raises(SystemExit) as exc:
            main(["simulate", "--config", str(cfg), "--reps", "1", "--seed", "1",
                  "--methods", "naive,jackknife",
                  "--out", str(tmp_path / "m.csv")])
        assert exc.value.code == 2

    def test_outputs_and_worker_determinism(self, tmp_path, monkeypatch):
        cfg = self.write_config(tmp_path)
        outputs = {}
        for workers, tag in ((1, "a"), (2, "b")):
            monkeypatch.setenv("PEG_WORKERS", str(workers))
            out = tmp_path / f"metrics_{tag}.csv"
            plot = tmp_path / f"plot_{tag}.csv"
            code = main(["simulate", "--config", str(cfg), "--reps", "2",
                         "--seed", "3", "--methods", "naive,os-lasso",
                         "--out", str(out), "--plot-data", str(plot)])
            assert code == 0
            outputs[tag] = (out.read_bytes(), plot.read_bytes())
        assert outputs["a"] == outputs["b"]
        table = pd.read_csv(tmp_path / "metrics_a.csv")
        assert list(table["method"]) == ["naive", "os-lasso"]
        assert (table["reps_used"] + table["failures"] == 2).all()
        detail = pd.read_csv(tmp_path / "plot_a.csv")
        assert set(detail["method"]) == {"naive", "os-lasso"}
