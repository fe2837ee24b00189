import json

import numpy as np
import pytest

from drlate.cli import main
from drlate.data import Dataset, save_dataset
from drlate.estimators import Models, ipwra_late
from drlate.inference import analytic_se
from drlate.simulate import DgpSpec, generate_sample

BASE = ["--outcome", "y", "--treatment", "w", "--instrument", "z", "--covariates", "income,age,age_sq"]


@pytest.fixture
def sim_csv(tmp_path):
    d = generate_sample(DgpSpec.continuous(1500, seed=2))
    p = tmp_path / "sim.csv"
    save_dataset(d, p)
    return p, d


class TestEstimate:
    def test_json_matches_library(self, sim_csv, tmp_path, capsys):
        p, d = sim_csv
        out = tmp_path / "o.json"
        code = main(["estimate", "--data", str(p), *BASE, "--method", "dr_late",
                     "--one-sided", "no-always-takers", "--out", str(out), "--format", "json"])
        assert code == 0
        rec = json.loads(out.read_text())
        assert rec["schema_version"] == 1 and rec["config"]["method"] == "dr_late"
        lib = analytic_se(ipwra_late(d, Models.shared("income,age,age_sq"), known_pi0_zero=True), d)
        (res,) = rec["results"]
        assert res["point"] == lib.point and res["se"] == lib.se
        assert set(res["components"]) >= {"tau_y", "tau_w"}
        assert "overlap" in res["diagnostics"]
        assert json.loads(capsys.readouterr().out) == rec

    def test_byte_identical_reruns(self, sim_csv, tmp_path):
        p, _ = sim_csv
        blobs = []
        out = tmp_path / "o.json"
        for _ in range(2):
            main(["estimate", "--data", str(p), *BASE, "--method", "ipw,ra", "--one-sided",
                  "no-always-takers", "--se", "bootstrap", "--boot-reps", "20", "--out", str(out)])
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]

    def test_text_table(self, sim_csv, capsys):
        p, _ = sim_csv
        main(["estimate", "--data", str(p), *BASE, "--method", "iv,dr_latt", "--one-sided", "no-always-takers"])
        out = capsys.readouterr().out
        assert "LATT" in out and "estimate" in out

    def test_config_file_with_override(self, sim_csv, tmp_path, capsys):
        p, _ = sim_csv
        cfg = tmp_path / "run.toml"
        cfg.write_text(f'data = "{p}"\nmethod = "ra"\none_sided = "no-always-takers"\n'
                       '[roles]\noutcome = "y"\ntreatment = "w"\ninstrument = "z"\ncovariates = "income,age"\n')
        assert main(["estimate", "--config", str(cfg), "--method", "ipw", "--format", "json"]) == 0
        rec = json.loads(capsys.readouterr().out)
        assert rec["config"]["method"] == "ipw" and rec["results"][0]["method"] == "ipw"

    def test_errors_exit_nonzero(self, sim_csv, capsys):
        p, _ = sim_csv
        assert main(["estimate", "--data", str(p), *BASE, "--method", "bogus"]) == 2
        assert "config.method" in capsys.readouterr().err
        assert main(["estimate", "--data", str(p), *BASE]) == 2
        assert "no-always-takers" in capsys.readouterr().err
        assert main(["estimate", "--data", str(p), "--outcome", "y"]) == 2


class TestOtherCommands:
    def test_simulate_csv(self, tmp_path, capsys):
        out = tmp_path / "mc.csv"
        assert main(["simulate", "--reps", "50", "--n", "400", "--seed", "1", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 1 + 5 * 3
        assert "all_correct" in capsys.readouterr().out

    def test_latt_vs_att_guard(self, sim_csv, tmp_path, capsys):
        _, d = sim_csv
        c = dict(d.columns)
        w = c["w"].copy()
        w[np.flatnonzero(c["z"] == 0)[:3]] = 1.0
        c["w"] = w
        p = tmp_path / "viol.csv"
        save_dataset(Dataset(c, d.roles), p)
        assert main(["test", "--data", str(p), *BASE, "--flavor", "latt_vs_att"]) == 2
        assert "PreconditionError" in capsys.readouterr().err

    def test_latt_vs_att_runs(self, sim_csv, capsys):
        p, _ = sim_csv
        assert main(["test", "--data", str(p), *BASE, "--flavor", "latt_vs_att", "--se", "joint_gmm",
                     "--format", "json"]) == 0
        rec = json.loads(capsys.readouterr().out)
        assert 0 <= rec["comparison"]["p_value"] <= 1
