import math

import pytest
from scipy import stats

import eval_harness
from agents import EpisodeRecord
from config import ConfigError, EnvConfig, RunConfig, TrainConfig
from eval_harness import (
    CONDITIONS,
    ReportRow,
    condition_from_slug,
    emit_report,
    format_table,
    load_raw_runs,
    mean_ci95,
    parse_report,
    rows_from_dir,
    run_condition,
    run_matrix,
    save_raw_runs,
    summarize,
)

TINY = TrainConfig(total_steps=32, rollout_length=32, epochs=1, minibatch_size=16, hidden_size=16)


def make_records(scores, affects):
    return [
        EpisodeRecord(seed=i, final_score=s * 24, normalized_score=s, mean_affect=a,
                      affect_values=(a, a) if not math.isnan(a) else (), ticks=1200)
        for i, (s, a) in enumerate(zip(scores, affects))
    ]


def test_ci_of_identical_values_is_zero():
    assert mean_ci95([0.25] * 30) == (0.25, 0.0)


def test_ci_uses_student_t():
    values = [1.0, 2.0, 3.0, 4.0]
    mean, half = mean_ci95(values)
    assert mean == 2.5
    assert half == pytest.approx(stats.t.ppf(0.975, 3) * stats.tstd(values) / 2.0)


def test_ci_skips_missing_values():
    assert mean_ci95([0.5, float("nan")]) == (0.5, 0.0)
    mean, half = mean_ci95([float("nan")])
    assert math.isnan(mean) and math.isnan(half)


def test_condition_slugs():
    assert condition_from_slug("blended") == "Blended"
    assert condition_from_slug("Max Arousal") == "Max Arousal"
    assert CONDITIONS["Blended"] == 0.5
    with pytest.raises(ConfigError):
        condition_from_slug("greedy")


def test_report_csv_round_trip(tmp_path):
    rows = [
        ReportRow("pirates", "Random", 0.08, 0.01, 0.578, 0.02, 30),
        ReportRow("solid", "Blended", 0.4133333333333333, 0.0123, 0.7, 1e-17, 30),
    ]
    csv_path, txt_path = emit_report(rows, str(tmp_path / "out"))
    assert parse_report(csv_path) == rows
    with open(txt_path, encoding="utf-8") as f:
        assert "Solid Rally" in f.read()


def test_report_csv_round_trip_keeps_missing_affect(tmp_path):
    rows = [
        ReportRow("heist", "Max Behaviour", 0.25, 0.05, float("nan"), float("nan"), 30),
        ReportRow("heist", "Blended", 0.3, 0.04, 0.6, 0.03, 30),
    ]
    csv_path, _ = emit_report(rows, str(tmp_path / "out"))
    parsed = parse_report(csv_path)
    assert len(parsed) == 2
    assert parsed[1] == rows[1]
    missing = parsed[0]
    assert (missing.game, missing.condition, missing.n_runs) == ("heist", "Max Behaviour", 30)
    assert missing.final_re_mean == 0.25 and missing.final_re_ci95 == 0.05
    assert math.isnan(missing.mean_ra_mean) and math.isnan(missing.mean_ra_ci95)


def test_full_matrix_renders_every_row():
    rows = [
        ReportRow(game, condition, 0.1, 0.01, 0.5, 0.02, 30)
        for game in ("pirates", "heist", "solid") for condition in CONDITIONS
    ]
    table = format_table(rows)
    assert len(table.splitlines()) == 13
    assert "..." not in table
    for title in ("Pirates", "Heist", "Solid Rally", "Max Behaviour", "Max Arousal"):
        assert title in table


def test_missing_affect_is_shown_as_dash():
    table = format_table([ReportRow("solid", "Random", 0.1, 0.0, float("nan"), float("nan"), 3)])
    assert "-" in table.splitlines()[1]


def test_emit_report_requires_rows(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], str(tmp_path))


def test_report_recomputes_from_raw_runs(tmp_path):
    records = make_records([0.1, 0.3, 0.25, 0.05], [0.6, 0.55, float("nan"), 0.7])
    directory = tmp_path / "solid" / "blended"
    directory.mkdir(parents=True)
    save_raw_runs(str(directory / "runs.csv"), "solid", "Blended", records)

    game, condition, loaded = load_raw_runs(str(directory / "runs.csv"))
    assert (game, condition) == ("solid", "Blended")
    assert [r.affect_values for r in loaded] == [r.affect_values for r in records]

    original = summarize("solid", "Blended", records)
    [recomputed] = rows_from_dir(str(tmp_path))
    assert recomputed.n_runs == original.n_runs
    for field in ("final_re_mean", "final_re_ci95", "mean_ra_mean", "mean_ra_ci95"):
        assert abs(getattr(recomputed, field) - getattr(original, field)) <= 1e-9


def test_rows_from_empty_dir_is_an_error(tmp_path):
    with pytest.raises(ConfigError):
        rows_from_dir(str(tmp_path))


def test_random_condition_skips_training(tmp_path, solid_corpus, monkeypatch):
    def fail(*args, **kwargs):
        raise AssertionError("Randomは学習しない")

    monkeypatch.setattr(eval_harness, "train", fail)
    config = RunConfig(env=EnvConfig(game="solid"), runs=2, seed=5)
    row, records = run_condition("solid", "Random", solid_corpus, config, str(tmp_path))
    assert row.n_runs == 2
    assert [r.seed for r in records] == [5, 6]
    assert not math.isnan(row.mean_ra_mean)
    assert (tmp_path / "runs.csv").exists()


def test_blended_condition_trains_with_half_lambda(tmp_path, solid_corpus, monkeypatch):
    lambdas = []
    real_make_env = eval_harness.make_env

    def spy(env_config, **kwargs):
        lambdas.append(env_config.lambda_)
        return real_make_env(env_config, **kwargs)

    monkeypatch.setattr(eval_harness, "make_env", spy)
    config = RunConfig(env=EnvConfig(game="solid"), train=TINY, runs=1)
    row, _ = run_condition("solid", "Blended", solid_corpus, config, str(tmp_path), progress=False)
    assert lambdas == [0.5, 0.5]
    assert row.condition == "Blended"
    assert (tmp_path / "checkpoint.pt").exists()
    assert (tmp_path / "train_log.csv").exists()


def test_affect_conditions_need_a_corpus():
    config = RunConfig(env=EnvConfig(game="solid"), runs=1)
    with pytest.raises(ConfigError):
        run_condition("solid", "Max Arousal", None, config)


def test_run_matrix_skips_conditions_without_corpus(tmp_path):
    config = RunConfig(env=EnvConfig(game="solid"), runs=2, output_dir=str(tmp_path))
    rows = run_matrix(config, {}, games=["solid"], conditions=["Random", "Blended"], progress=False)
    assert [r.condition for r in rows] == ["Random"]
    assert (tmp_path / "report.csv").exists()
    assert (tmp_path / "config.json").exists()
    assert (tmp_path / "solid" / "random" / "runs.csv").exists()


def test_repeated_runs_reproduce_numbers(solid_corpus):
    config = RunConfig(env=EnvConfig(game="solid"), runs=2, seed=1)
    first, _ = run_condition("solid", "Random", solid_corpus, config, progress=False)
    second, _ = run_condition("solid", "Random", solid_corpus, config, progress=False)
    assert first == second
