import csv
import math
import statistics

import numpy as np
import pytest

from ranslice import harness, rl
from ranslice.cli import main, parse_seeds
from ranslice.env import EnvConfig
from ranslice.harness import ConfigParseError, ExperimentConfig
from ranslice.rl import AgentConfig
from ranslice.sim import SimConfig

TINY = ExperimentConfig(
    sim=SimConfig(ues_per_slice=(2, 3, 2), subframes_per_interval=20),
    env=EnvConfig(horizon=20),
    agent=AgentConfig(hidden_sizes=(8,), warmup=40, batch_size=16, buffer_capacity=500),
    seeds=(0, 1),
    gammas=(0.9, 0.99),
    horizons=(10, 20),
    total_steps=100,
)

# two-sided 97.5% Student-t quantiles, from printed tables
T975 = {1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776}


class TestConfig:
    def test_default_loads(self):
        cfg = harness.load_config()
        assert cfg.kind == "compare" and len(cfg.seeds) == 5
        assert len(cfg.ue_combos) == 5
        assert all(6 <= u <= 20 for combo in cfg.ue_combos for u in combo)

    def test_roundtrip_from_file(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[sim]\nues_per_slice = [6, 7, 8]\n[agent]\nmode = 'average'\n[experiment]\nseeds = [3]\n")
        cfg = harness.load_config(p)
        assert cfg.sim.ues_per_slice == (6, 7, 8) and cfg.agent.mode == "average" and cfg.seeds == (3,)
        assert harness.load_sim_config(p) == cfg.sim

    @pytest.mark.parametrize(
        "text, line, fragment",
        [
            ("[sim]\nnum_rbgs = 'many'\n", 2, "expected an integer"),
            ("[env]\nhorizon = 5\n\n[agent]\nlearning_rate = 1\n", 5, "unknown key"),
            ("[sim]\nnum_rbgs =\n", 2, "line 2"),
            ("[experiment]\nseeds = []\n", 2, "list is empty"),
            ("[experiment]\ngammas = [0.9, 1.5]\n", 2, "(0, 1]"),
            ("[extra]\nx = 1\n", 1, "unknown section"),
        ],
    )
    def test_errors_carry_line(self, text, line, fragment):
        with pytest.raises(ConfigParseError) as err:
            harness.parse_config(text, "bad.toml")
        msg = str(err.value)
        assert msg.startswith(f"bad.toml:{line}:") and fragment in msg

    def test_hash_ignores_output_location(self):
        assert harness.config_hash(TINY) == harness.config_hash(TINY.replace(out_dir="elsewhere", workers=3))
        assert harness.config_hash(TINY) != harness.config_hash(TINY.replace(total_steps=7))


class TestAggregation:
    def test_t_interval_against_table(self, rng):
        for n in range(2, 6):
            v = rng.normal(size=n)
            mean, hw = harness.t_interval(v)
            assert mean == pytest.approx(statistics.fmean(v), abs=1e-12)
            assert hw == pytest.approx(T975[n - 1] * statistics.stdev(v) / math.sqrt(n), rel=1e-3)

    def test_single_value_has_no_interval(self):
        assert harness.t_interval([4.0]) == (4.0, None)

    def test_final_window(self):
        assert harness.final_window(list(range(100))) == list(range(90, 100))
        assert harness.final_window(list(range(20))) == [18, 19]
        assert harness.final_window([1, 2, 3]) == [3]
        assert harness.final_window([]) == []

    def test_improvement(self):
        assert harness.improvement_pct(1.1, 1.0) == pytest.approx(10.0)
        assert harness.improvement_pct(2.5, 2.5) == 0.0
        assert harness.improvement_pct(-0.9, -1.0) == pytest.approx(10.0)


class TestRuns:
    def test_run_single_deterministic(self, tmp_path):
        a = harness.run_single(TINY, 0, tmp_path / "a")
        b = harness.run_single(TINY, 0, tmp_path / "b")
        assert a.curve == b.curve and a.config_hash == b.config_hash
        assert len(a.curve) == TINY.total_steps // TINY.env.horizon
        assert (tmp_path / "a" / "runs" / f"{a.label}__seed0.csv").read_bytes() == \
            (tmp_path / "b" / "runs" / f"{b.label}__seed0.csv").read_bytes()

    def test_zero_steps(self, tmp_path):
        rec = harness.run_single(TINY.replace(total_steps=0), 0, tmp_path)
        assert rec.curve == [] and rec.final_cumulative is None and rec.final_per_step is None
        assert rl.read_log(rec.csv_path) == []

    def test_rho_column_only_in_average_mode(self, tmp_path):
        res = harness.compare(TINY.replace(seeds=(0,)), tmp_path)
        for rec in res.records:
            rows = rl.read_log(rec.csv_path)
            has_rho = [r["rho"] is not None for r in rows]
            assert all(has_rho) if rec.label == "aro-sac" else not any(has_rho)
        assert {r.label for r in res.records} == {"aro-sac", "sac_g0.99", "sac_g1"}

    def test_sweep_gamma_single_setting(self, tmp_path):
        aggs = harness.sweep_gamma(TINY.replace(gammas=(0.95,), seeds=(0,)), tmp_path)
        assert len(aggs) == 1 and aggs[0].n == 1 and aggs[0].half_width is None

    def test_sweep_gamma_duplicate_entries_identical(self, tmp_path):
        cfg = TINY.replace(gammas=(0.9,), seeds=(0, 1))
        a = harness.sweep_gamma(cfg, tmp_path / "a")
        b = harness.sweep_gamma(cfg, tmp_path / "b")
        assert a[0].values == b[0].values and a[0].mean == b[0].mean and a[0].half_width == b[0].half_width

    def test_horizon_metrics_consistent(self, tmp_path):
        harness.sweep_horizon(TINY.replace(horizons=(20,), seeds=(0,)), tmp_path)
        rows = rl.read_log(tmp_path / "runs" / "sac_g0.99_T20__seed0.csv")
        for r in rows:
            assert r["cumulative_reward"] / 20 == pytest.approx(r["avg_reward_per_step"], rel=1e-12, abs=1e-12)

    def test_aggregate_recomputable_from_csv(self, tmp_path):
        aggs = harness.sweep_gamma(TINY, tmp_path)
        with open(tmp_path / "gamma_sweep_aggregate.csv") as fh:
            table = {row["setting"]: row for row in csv.DictReader(fh)}
        for agg in aggs:
            finals = []
            for seed in TINY.seeds:
                with open(tmp_path / "runs" / f"{agg.label}__seed{seed}.csv") as fh:
                    cum = [float(r["cumulative_reward"]) for r in csv.DictReader(fh)]
                k = math.ceil(0.1 * len(cum))
                finals.append(sum(cum[-k:]) / k)
            mean = statistics.fmean(finals)
            hw = T975[len(finals) - 1] * statistics.stdev(finals) / math.sqrt(len(finals))
            assert float(table[agg.label]["mean"]) == pytest.approx(mean, abs=1e-9)
            assert float(table[agg.label]["ci95_half_width"]) == pytest.approx(hw, rel=1e-3)
            assert agg.mean == pytest.approx(mean, abs=1e-9)


def _fake_log(path, values, step=10):
    rows = [{"env_step": step * (i + 1), "episode": i + 1, "cumulative_reward": v * step,
             "avg_reward_per_step": v, "rho": None, "rho_emp": v, "critic_loss": 0.0, "actor_loss": 0.0}
            for i, v in enumerate(values)]
    rl.write_log(rows, path)
    return path


class TestPlots:
    def test_single_run_no_band(self, tmp_path):
        p = _fake_log(tmp_path / "a__seed0.csv", [1.0, 2.0, 3.0])
        steps, mean, hw = harness.curve_band([rl.read_log(p)])
        assert hw is None and list(mean) == [1.0, 2.0, 3.0]
        out = harness.emit_plots([p], tmp_path / "plots")
        assert out[0].exists() and out[0].read_text().startswith("<?xml")

    def test_band_matches_aggregate(self, tmp_path, rng):
        vals = rng.normal(size=(5, 4))
        paths = [_fake_log(tmp_path / f"a__seed{s}.csv", vals[s]) for s in range(5)]
        _, mean, hw = harness.curve_band([rl.read_log(p) for p in paths])
        for i in range(4):
            m, h = harness.t_interval(vals[:, i])
            assert mean[i] == pytest.approx(m, abs=1e-12) and hw[i] == pytest.approx(h, rel=1e-12)
            assert h == pytest.approx(T975[4] * statistics.stdev(vals[:, i]) / math.sqrt(5), rel=1e-3)

    def test_empty_run_skipped(self, tmp_path):
        empty = _fake_log(tmp_path / "e__seed0.csv", [])
        full = _fake_log(tmp_path / "f__seed0.csv", [1.0, 2.0])
        with pytest.warns(UserWarning, match="no episodes"):
            out = harness.emit_plots([empty, full], tmp_path)
        assert len(out) == 1

    def test_malformed_row_named(self, tmp_path):
        p = _fake_log(tmp_path / "m__seed0.csv", [1.0, 2.0])
        lines = p.read_text().splitlines()
        lines[2] = lines[2].replace(",", ",oops,", 1)
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="malformed row 3"):
            harness.emit_plots([p], tmp_path)

    def test_svg_deterministic(self, tmp_path):
        paths = [_fake_log(tmp_path / f"a__seed{s}.csv", [s, 1.0, 2.0]) for s in range(3)]
        a = harness.emit_plots(paths, tmp_path / "x")[0].read_bytes()
        b = harness.emit_plots(paths, tmp_path / "y")[0].read_bytes()
        assert a == b


class TestCli:
    def test_parse_seeds(self):
        assert parse_seeds("0,1,2") == (0, 1, 2)
        assert parse_seeds("0-4") == (0, 1, 2, 3, 4)
        assert parse_seeds("0-1,7") == (0, 1, 7)

    def test_validate_config(self, tmp_path, capsys):
        assert main(["validate-config"]) == 0
        assert "ok:" in capsys.readouterr().out
        bad = tmp_path / "bad.toml"
        bad.write_text("[agent]\nmode = 'sometimes'\n")
        assert main(["validate-config", "--config", str(bad)]) == 2
        assert "bad.toml:1" in capsys.readouterr().err

    def test_train_command(self, tmp_path, capsys):
        cfg = tmp_path / "c.toml"
        cfg.write_text(
            "[sim]\nues_per_slice = [2, 2, 2]\nsubframes_per_interval = 10\n[env]\nhorizon = 10\n"
            "[agent]\nhidden_sizes = [8]\nwarmup = 20\nbatch_size = 8\n[experiment]\ntotal_steps = 40\n"
        )
        assert main(["train", "--config", str(cfg), "--seed", "3", "--algo", "aro-sac", "--out", str(tmp_path)]) == 0
        rows = rl.read_log(tmp_path / "runs" / "aro-sac__seed3.csv")
        assert len(rows) == 4 and all(r["rho"] is not None for r in rows)
        assert (tmp_path / "manifest.json").exists()
        assert np.isfinite(rows[-1]["avg_reward_per_step"])
