import json

import numpy as np
import pytest

from popbias.errors import ConfigError
from popbias.harness import (
    CSV_COLUMNS,
    PRACTICAL_PROFILE,
    THEORY_PROFILE,
    ExperimentConfig,
    InstanceConfig,
    RankerConfig,
    emit_results,
    read_runs_csv,
    run_experiment,
    run_seed,
    summarize,
    sweep,
)


def small_config(name="qp", horizon=60, seeds=(0, 1), **inst):
    base = dict(n_items=5, slate_size=2, d_q=2, d_p=2, n_users=4)
    base.update(inst)
    return ExperimentConfig(
        instance=InstanceConfig(**base),
        ranker=RankerConfig(name=name),
        horizon=horizon,
        seeds=list(seeds),
    )


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        cfg.validate()
        assert cfg.horizon == 10_000 and cfg.seeds == list(range(10))
        assert (cfg.instance.slate_size, cfg.instance.d_q, cfg.instance.alpha_min, cfg.instance.b_max) == (3, 8, 0.02, 0.2)

    def test_round_trip(self):
        cfg = small_config()
        assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    @pytest.mark.parametrize(
        "doc",
        [
            {"surprise": 1},
            {"instance": {"colour": "red"}},
            {"ranker": {"name": "magic"}},
            {"ranker": {"profile": "reckless"}},
            {"ranker": {"rho_min": 1.5}},
            {"horizon": 0},
            {"seeds": []},
            {"seeds": [1, 1]},
            {"format": "xml"},
            {"instance": {"utility_mode": "quality", "c": 1.0}},
            {"instance": {"b_max": -1}},
        ],
    )
    def test_invalid(self, doc):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(doc)

    def test_load_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentConfig.load(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            ExperimentConfig.load(bad)

    def test_profiles_resolve_with_overrides(self):
        assert RankerConfig(profile="theory").resolved()["bonus_scale"] == THEORY_PROFILE["bonus_scale"]
        params = RankerConfig(bonus_scale=0.3).resolved()
        assert params["bonus_scale"] == 0.3
        assert params["lam"] == PRACTICAL_PROFILE["lam"]

    def test_estimated_rho_min_rejected_when_infeasible(self):
        cfg = small_config(seeds=(0,))
        cfg.ranker.rho_min = "estimate"
        with pytest.raises(ConfigError):
            run_experiment(cfg)


class TestRuns:
    def test_quality_ranker_has_zero_regret(self):
        for rec in run_experiment(small_config("quality")):
            np.testing.assert_array_equal(rec.increments, 0.0)

    def test_pairing(self):
        for name in ("qp", "popularity-driven"):
            for rec in run_experiment(small_config(name)):
                np.testing.assert_array_equal(rec.users, rec.reference_users)

    def test_regret_is_prefix_sum(self):
        rec = run_seed(small_config("greedy"), 3)
        manual = 0.0
        for k in range(rec.horizon):
            manual += rec.value_reference[k] - rec.value_policy[k]
            assert abs(rec.regret_cum[k] - manual) <= 1e-9

    def test_seed_isolation(self):
        forward = run_experiment(small_config("qp", seeds=(0, 1, 2)))
        backward = run_experiment(small_config("qp", seeds=(2, 1, 0)))
        for a, b in zip(forward, reversed(backward)):
            assert a.seed == b.seed
            np.testing.assert_array_equal(a.value_policy, b.value_policy)
            assert a.slates == b.slates

    def test_workers_match_serial(self):
        cfg = small_config("greedy", seeds=(0, 1, 2))
        serial = run_experiment(cfg)
        parallel = run_experiment(cfg.replace(workers=2))
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.value_policy, b.value_policy)

    def test_summary_windows(self):
        recs = run_experiment(small_config("popularity-driven", horizon=50))
        s = summarize(recs)
        assert s["first_window_increment"] == pytest.approx(np.mean([r.increments[:5].mean() for r in recs]))
        assert s["last_window_increment"] == pytest.approx(np.mean([r.increments[-5:].mean() for r in recs]))
        assert s["mean_final_regret"] == pytest.approx(np.mean([r.final_regret for r in recs]))

    def test_every_ranker_runs(self):
        for name in ("qp", "quality", "popularity-driven", "greedy", "oblivious"):
            for rec in run_experiment(small_config(name, horizon=20, seeds=(0,))):
                assert rec.horizon == 20
                assert rec.counts.sum() + (rec.choices == 0).sum() == 20

    def test_theory_profile_runs(self):
        cfg = small_config(horizon=30, seeds=(0,))
        cfg.ranker.profile = "theory"
        (rec,) = run_experiment(cfg)
        assert rec.metadata["ranker_params"]["bonus_scale"] == 1.0


class TestOutput:
    def test_byte_identical_repeat(self, tmp_path):
        cfg = small_config()
        for name in ("a", "b"):
            emit_results(run_experiment(cfg), tmp_path / name)
        assert (tmp_path / "a" / "runs.csv").read_bytes() == (tmp_path / "b" / "runs.csv").read_bytes()
        assert (tmp_path / "a" / "items.csv").read_bytes() == (tmp_path / "b" / "items.csv").read_bytes()

    def test_csv_round_trip(self, tmp_path):
        (rec,) = run_experiment(small_config(horizon=3, seeds=(4,)))
        emit_results([rec], tmp_path)
        header = (tmp_path / "runs.csv").read_text().splitlines()[0]
        assert tuple(header.split(",")) == CSV_COLUMNS
        rows = read_runs_csv(tmp_path / "runs.csv")
        assert [r["t"] for r in rows] == [1, 2, 3]
        for k, row in enumerate(rows):
            assert row["slate"] == rec.slates[k]
            assert row["value_policy"] == rec.value_policy[k]
            assert row["regret_cum"] == rec.regret_cum[k]

    def test_items_file_has_one_row_per_item(self, tmp_path):
        emit_results(run_experiment(small_config(horizon=10)), tmp_path)
        lines = (tmp_path / "items.csv").read_text().splitlines()
        assert len(lines) == 1 + 5

    def test_jsonl_and_metadata(self, tmp_path):
        cfg = small_config(horizon=5, seeds=(0,))
        cfg.trace = True
        paths = emit_results(run_experiment(cfg), tmp_path, fmt="jsonl", metadata={"note": "x"})
        rows = [json.loads(line) for line in (tmp_path / "runs.jsonl").read_text().splitlines()]
        assert len(rows) == 5 and set(rows[0]) == set(CSV_COLUMNS)
        meta = json.loads((tmp_path / "metadata.json").read_text())
        assert meta["note"] == "x" and meta["summary"]["horizon"] == 5
        assert tmp_path / "metadata.json" in paths

    def test_empty_records_write_nothing(self, tmp_path):
        with pytest.raises(ValueError):
            emit_results([], tmp_path / "out")
        assert not (tmp_path / "out").exists()


class TestSweep:
    def test_single_value_matches_run(self):
        cfg = small_config("greedy", horizon=40)
        (row,) = sweep(cfg, "b_max", [cfg.instance.b_max], window=10)
        recs = run_experiment(cfg)
        assert row.final_window == pytest.approx(np.mean([r.final_window(10) for r in recs]), abs=1e-15)
        assert row.final_regret == pytest.approx(summarize(recs)["mean_final_regret"], abs=1e-12)

    def test_structural_params(self):
        cfg = small_config("greedy", horizon=10, seeds=(0,))
        assert [r.value for r in sweep(cfg, "M", [1, 2])] == [1.0, 2.0]
        assert len(sweep(cfg, "d", [1, 3])) == 2

    def test_rejects_unknown_param(self):
        with pytest.raises(ConfigError):
            sweep(small_config(), "colour", [1])
        with pytest.raises(ConfigError):
            sweep(small_config(), "b_max", [])
