import csv
import io
import json
import math
from pathlib import Path

import numpy as np
import pytest

from factored_ope.cli import main as cli_main
from factored_ope.fmdp import FactoredMdp, TrajectoryBatch
from factored_ope.gscope import LearnedModel
from factored_ope.sweep import (CSV_COLUMNS, SweepConfig, prepare_truths,
                                rows_to_csv, run_sweep, run_trial_group,
                                summarize)


def tiny_config(**over):
    base = dict(
        domain_name="copy-chain",
        domain_params={"n_vars": 3, "horizon": 10},
        behavior={"kind": "uniform"},
        target={"kind": "constant", "action": 0, "eps_floor": 0.1},
        methods=("gscope", "cis"),
        h_grid=(8,),
        trials=1,
        thresholds={"eps": 0.5, "delta1": 0.5, "c2": 0.0},
        eval_rollouts=200,
        truth_rollouts=500,
        master_seed=5,
    )
    base.update(over)
    return SweepConfig(**base)


class TestSweepConfig:
    def test_round_trip_is_bit_exact(self):
        cfg = tiny_config(method_thresholds={"ks": {"eps": 1.5, "delta1": 0.9}},
                          cis_clip=math.inf,
                          full_scale={"trials": 40, "H_grid": [10, 2000]})
        text = cfg.dumps()
        again = SweepConfig.loads(text)
        assert again.dumps() == text
        assert again == cfg

    def test_file_round_trip(self, tmp_path):
        cfg = tiny_config()
        path = tmp_path / "config.json"
        cfg.save(path)
        assert SweepConfig.load(path) == cfg

    def test_full_scale_overrides(self):
        cfg = tiny_config(full_scale={"trials": 40, "H_grid": [10, 100, 2000]})
        full = cfg.at_full_scale()
        assert full.trials == 40
        assert full.h_grid == (10, 100, 2000)

    def test_rejects_unknown_method(self):
        with pytest.raises(ValueError):
            tiny_config(methods=("gscope", "nope"))

    def test_per_method_thresholds(self):
        cfg = tiny_config(method_thresholds={"ks": {"eps": 2.0}})
        assert cfg.thresholds_for("ks")["eps"] == 2.0
        assert cfg.thresholds_for("ks")["delta1"] == 0.5
        assert cfg.thresholds_for("gscope")["eps"] == 0.5


class TestRunSweep:
    def test_single_cell_gives_single_row_per_method(self):
        cfg = tiny_config(methods=("cis",))
        rows, summary = run_sweep(cfg)
        assert len(rows) == 1
        assert rows[0]["method"] == "cis"
        assert rows[0]["status"] == "ok"

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = tiny_config(methods=("gscope", "mfmc", "cis"), trials=2)
        run_sweep(cfg, out_dir=tmp_path / "a")
        run_sweep(cfg, out_dir=tmp_path / "b")
        assert (tmp_path / "a/rows.csv").read_bytes() == \
            (tmp_path / "b/rows.csv").read_bytes()
        assert (tmp_path / "a/summary.json").read_bytes() == \
            (tmp_path / "b/summary.json").read_bytes()

    def test_cells_are_order_independent(self):
        cfg = tiny_config(h_grid=(4, 8), trials=2, methods=("cis",))
        truths = prepare_truths(cfg)
        jobs = [(h, t) for h in cfg.h_grid for t in range(cfg.trials)]
        forward = [row for job in jobs
                   for row in run_trial_group(cfg, job[0], job[1], truths)]
        backward = [row for job in reversed(jobs)
                    for row in run_trial_group(cfg, job[0], job[1], truths)]
        assert rows_to_csv(forward) == rows_to_csv(backward)

    def test_refused_method_continues_run(self):
        cfg = tiny_config(
            domain_name="random-fmdp",
            domain_params={"n_vars": 17, "gamma": 2, "n_actions": 2,
                           "seed": 1, "horizon": 4},
            target={"kind": "myopic", "eps_floor": 0.1},
            methods=("flat", "cis"), h_grid=(3,), truth_rollouts=300)
        rows, _ = run_sweep(cfg)
        by_method = {r["method"]: r for r in rows}
        assert by_method["flat"]["status"] == "refused"
        assert by_method["flat"]["estimate"] is None
        assert by_method["cis"]["status"] == "ok"

    def test_csv_schema_and_cell_lexicon(self):
        cfg = tiny_config(methods=("gscope", "cis"), trials=2)
        rows, _ = run_sweep(cfg)
        text = rows_to_csv(rows)
        parsed = list(csv.DictReader(io.StringIO(text)))
        assert list(parsed[0].keys()) == CSV_COLUMNS
        for record in parsed:
            for col in ("estimate", "stderr", "truth", "truth_stderr",
                        "normalized_error"):
                cell = record[col]
                if cell == "":
                    assert record["status"] != "ok"
                    continue
                value = float(cell)  # "inf" parses to math.inf
                assert not math.isnan(value)
            json.loads(record["diagnostics"])

    def test_summary_quartiles(self):
        rows = [{"method": "cis", "H": 4, "status": "ok",
                 "normalized_error": e} for e in (0.1, 0.2, 0.3, 0.4)]
        summary = summarize(rows)
        cell = summary["cells"]["cis"]["4"]
        assert cell["n"] == 4
        assert cell["median"] == pytest.approx(0.25)
        assert cell["q1"] == pytest.approx(np.percentile([0.1, 0.2, 0.3, 0.4], 25))

    def test_parallel_matches_serial(self, tmp_path):
        cfg = tiny_config(methods=("cis",), h_grid=(4, 8), trials=2)
        run_sweep(cfg, out_dir=tmp_path / "serial", workers=1)
        run_sweep(cfg, out_dir=tmp_path / "parallel", workers=2)
        assert (tmp_path / "serial/rows.csv").read_bytes() == \
            (tmp_path / "parallel/rows.csv").read_bytes()


class TestShippedConfigs:
    def test_example_configs_load_and_round_trip(self):
        configs_dir = Path(__file__).resolve().parent.parent / "configs"
        for name in ("paper_taxi.json", "paper_rfmdp.json"):
            path = configs_dir / name
            cfg = SweepConfig.load(path)
            assert cfg.dumps() == path.read_text()
            full = cfg.at_full_scale()
            assert full.trials >= cfg.trials


class TestCli:
    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert cli_main(["frobnicate"]) == 1
        assert "usage error" in capsys.readouterr().err

    def test_gen_domain_writes_schema_valid_model(self, tmp_path):
        out = tmp_path / "taxi.json"
        assert cli_main(["gen-domain", "taxi", "--out", str(out)]) == 0
        mdp = FactoredMdp.load(out)
        assert mdp.n_vars == 4 and mdp.n_actions == 6

    def test_pipeline_chains_through_files(self, tmp_path):
        domain = tmp_path / "domain.json"
        batch = tmp_path / "batch.npz"
        model = tmp_path / "model.json"
        result = tmp_path / "row.csv"
        assert cli_main(["gen-domain", "copy-chain", "--out", str(domain),
                         "--horizon", "10", "--param", "n_vars=3"]) == 0
        assert cli_main(["sample", "--domain", str(domain), "--policy",
                         "constant:0", "--H", "100", "--seed", "3",
                         "--out", str(batch)]) == 0
        assert TrajectoryBatch.load(batch).n_traj == 100
        learn_cfg = tmp_path / "learn.json"
        learn_cfg.write_text(json.dumps({"domain": str(domain),
                                         "batch": str(batch),
                                         "eps": 0.3, "delta1": 0.2}))
        assert cli_main(["learn", "--config", str(learn_cfg),
                         "--out", str(model)]) == 0
        learned = LearnedModel.load(model)
        assert learned.phi_hat == ((0,), (1,), (2,))
        # flags alone work too and override config values
        assert cli_main(["learn", "--domain", str(domain), "--batch", str(batch),
                         "--eps", "0.3", "--delta1", "0.2",
                         "--out", str(model)]) == 0
        assert LearnedModel.load(model).phi_hat == learned.phi_hat
        assert cli_main(["learn", "--out", str(model)]) == 1  # missing inputs
        assert cli_main(["eval", "--method", "gscope", "--domain", str(domain),
                         "--batch", str(batch), "--model", str(model),
                         "--target", "uniform", "--rollouts", "200",
                         "--seed", "4", "--out", str(result)]) == 0
        parsed = list(csv.DictReader(result.open()))
        assert parsed[0]["method"] == "gscope"
        assert parsed[0]["status"] == "ok"

    def test_eval_refusal_exit_code(self, tmp_path):
        domain = tmp_path / "big.json"
        batch = tmp_path / "batch.npz"
        assert cli_main(["gen-domain", "random-fmdp", "--out", str(domain),
                         "--seed", "1", "--horizon", "3",
                         "--param", "n_vars=17", "--param", "gamma=2",
                         "--param", "n_actions=2"]) == 0
        assert cli_main(["sample", "--domain", str(domain), "--H", "2",
                         "--seed", "5", "--out", str(batch)]) == 0
        code = cli_main(["eval", "--method", "flat", "--domain", str(domain),
                         "--batch", str(batch), "--target", "uniform",
                         "--rollouts", "10", "--seed", "6"])
        assert code == 2

    def test_sweep_and_report_commands(self, tmp_path):
        cfg = tiny_config(methods=("cis",))
        cfg_path = tmp_path / "config.json"
        cfg.save(cfg_path)
        out = tmp_path / "runs"
        assert cli_main(["sweep", "--config", str(cfg_path),
                         "--out", str(out)]) == 0
        assert (out / "rows.csv").exists()
        summary = json.loads((out / "summary.json").read_text())
        assert "cells" in summary and "truth" in summary
        report_out = tmp_path / "summary2.json"
        assert cli_main(["report", "--rows", str(out / "rows.csv"),
                         "--out", str(report_out)]) == 0
        recomputed = json.loads(report_out.read_text())
        assert recomputed["cells"] == summary["cells"]

    def test_theory_commands(self, tmp_path, capsys):
        domain = tmp_path / "a3.json"
        assert cli_main(["gen-domain", "assumption3-violation",
                         "--out", str(domain)]) == 0
        assert cli_main(["theory", "assumptions", "--domain", str(domain)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["a3_holds"] is False
        assert cli_main(["theory", "psi", "--domain", str(domain),
                         "--behavior", "uniform", "--target", "uniform"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["psi"] == [1.0, 1.0, 1.0]
        assert cli_main(["theory", "bound", "--eps", "0.1", "--delta1", "0",
                         "--horizon", "10", "--n-vars", "1",
                         "--max-parents", "1", "--psi", "1", "--actions", "2",
                         "--gamma", "2"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["eps_star"] == pytest.approx(0.5)
        assert doc["confidence"] == 1.0
