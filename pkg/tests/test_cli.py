import csv
import json
from pathlib import Path

import pytest

from cdeoh import problems
from cdeoh.cli import (
    ConfigError,
    load_run_config,
    main,
    read_events,
    strip_timestamps,
    summary_rows_from_events,
)

from conftest import LADDER_CAPACITY, LADDER_ITEMS, TranscriptBuilder
from test_evolution import three_gen_transcript


def write_run_config(tmp_path: Path, transcript: TranscriptBuilder, **overrides) -> Path:
    transcript.write(tmp_path / "transcript.jsonl")
    cfg = {
        "task": "obp",
        # one tiny deterministic instance: unit items, capacity 6
        "suite": {"sizes": [LADDER_ITEMS], "capacities": [LADDER_CAPACITY], "seeds": [1]},
        "evolution": {"population_size": 2, "elite_categories": 2, "lambda": 0.7,
                      "max_samples": 100, "max_generations": 3, "rng_seed": 0},
        "provider": {"provider": "scripted", "transcript_path": "transcript.jsonl"},
        "output_dir": str(tmp_path / "runs"),
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            cfg[key] = {**cfg.get(key, {}), **value}
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def single_run_dir(tmp_path: Path) -> Path:
    runs = sorted((tmp_path / "runs").iterdir())
    assert len(runs) >= 1
    return runs[-1]


# ---------------------------------------------------------------- config

def test_config_unknown_key_rejected(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"task": "obp", "lamda": 0.7}))
    with pytest.raises(ConfigError, match="unknown key"):
        load_run_config(p)
    p.write_text(json.dumps({"task": "obp", "evolution": {"lamda": 0.7}}))
    with pytest.raises(ConfigError, match="lamda"):
        load_run_config(p)


def test_config_invalid_lambda_fails_before_any_provider(tmp_path):
    cfg_path = write_run_config(tmp_path, three_gen_transcript(),
                                evolution={"lambda": -1})
    # break the transcript so any provider construction would explode
    (tmp_path / "transcript.jsonl").unlink()
    assert main(["run", str(cfg_path)]) == 2
    assert not (tmp_path / "runs").exists()


def test_config_bad_task(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"task": "sudoku"}))
    with pytest.raises(ConfigError, match="task"):
        load_run_config(p)


def test_config_relative_transcript_resolved(tmp_path):
    cfg_path = write_run_config(tmp_path, three_gen_transcript())
    cfg = load_run_config(cfg_path)
    assert Path(cfg.provider.transcript_path).is_absolute()
    assert Path(cfg.provider.transcript_path).exists()


# ---------------------------------------------------------------- run

def test_cmd_run_writes_all_artifacts(tmp_path):
    cfg_path = write_run_config(tmp_path, three_gen_transcript())
    assert main(["run", str(cfg_path)]) == 0
    run_dir = single_run_dir(tmp_path)
    for name in ("config.json", "events.jsonl", "best.json", "summary.csv",
                 "transcript.jsonl", "population_gen000.json", "population_gen003.json"):
        assert (run_dir / name).exists(), name
    best = json.loads((run_dir / "best.json").read_text())
    assert set(best) == {"thought", "code", "category", "fitness"}
    assert best["fitness"] == 0.0  # the T0 ladder program reaches the lower bound


def test_cmd_run_rerun_is_byte_identical_modulo_timestamps(tmp_path):
    cfg_path = write_run_config(tmp_path, three_gen_transcript())
    assert main(["run", str(cfg_path)]) == 0
    assert main(["run", str(cfg_path)]) == 0
    runs = sorted((tmp_path / "runs").iterdir())
    assert len(runs) == 2
    ev1 = strip_timestamps(read_events(runs[0] / "events.jsonl"))
    ev2 = strip_timestamps(read_events(runs[1] / "events.jsonl"))
    assert ev1 == ev2
    assert (runs[0] / "summary.csv").read_text() == (runs[1] / "summary.csv").read_text()
    assert (runs[0] / "best.json").read_text() == (runs[1] / "best.json").read_text()


def test_cmd_run_budget_exhausted_is_nonzero(tmp_path):
    tb = TranscriptBuilder()  # empty transcript: first init call misses
    cfg_path = write_run_config(tmp_path, tb, evolution={"max_samples": 3})
    (tmp_path / "transcript.jsonl").write_text("")
    assert main(["run", str(cfg_path)]) == 1


# ---------------------------------------------------------------- replay

def test_cmd_replay_untouched_run(tmp_path):
    cfg_path = write_run_config(tmp_path, three_gen_transcript())
    assert main(["run", str(cfg_path)]) == 0
    run_dir = single_run_dir(tmp_path)
    assert main(["replay", str(run_dir)]) == 0


def test_cmd_replay_detects_edited_fitness(tmp_path, capsys):
    cfg_path = write_run_config(tmp_path, three_gen_transcript())
    assert main(["run", str(cfg_path)]) == 0
    run_dir = single_run_dir(tmp_path)
    lines = (run_dir / "events.jsonl").read_text().splitlines()
    edited = []
    target_seq = None
    for line in lines:
        obj = json.loads(line)
        if target_seq is None and obj["event"] == "evaluation" and "fitness" in obj["payload"]:
            obj["payload"]["fitness"] = obj["payload"]["fitness"] - 1.0
            target_seq = obj["seq"]
        edited.append(json.dumps(obj, sort_keys=True))
    (run_dir / "events.jsonl").write_text("\n".join(edited) + "\n")
    assert main(["replay", str(run_dir)]) == 1
    assert f"divergence at seq {target_seq}" in capsys.readouterr().err


def test_cmd_replay_missing_transcript(tmp_path):
    cfg_path = write_run_config(tmp_path, three_gen_transcript())
    assert main(["run", str(cfg_path)]) == 0
    run_dir = single_run_dir(tmp_path)
    (run_dir / "transcript.jsonl").unlink()
    (tmp_path / "transcript.jsonl").unlink()
    assert main(["replay", str(run_dir)]) == 2


def test_cmd_replay_missing_events(tmp_path):
    assert main(["replay", str(tmp_path)]) == 2


# ---------------------------------------------------------------- report

def test_cmd_report_outputs(tmp_path):
    cfg_path = write_run_config(tmp_path, three_gen_transcript())
    assert main(["run", str(cfg_path)]) == 0
    run_dir = single_run_dir(tmp_path)
    assert main(["report", str(run_dir)]) == 0

    report_md = (run_dir / "report.md").read_text()
    best = json.loads((run_dir / "best.json").read_text())
    assert best["code"] in report_md
    assert best["category"] in report_md

    # report.csv recomputed from events matches summary.csv exactly
    assert (run_dir / "report.csv").read_text() == (run_dir / "summary.csv").read_text()

    with (run_dir / "summary.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    gaps = [float(r["best_gap_percent"]) for r in rows]
    assert gaps == sorted(gaps, reverse=True)  # non-increasing gap trajectory
    fits = [float(r["best_fitness"]) for r in rows]
    assert fits == sorted(fits)


def test_summary_recomputable_from_events_alone(tmp_path):
    cfg_path = write_run_config(tmp_path, three_gen_transcript())
    assert main(["run", str(cfg_path)]) == 0
    run_dir = single_run_dir(tmp_path)
    events = read_events(run_dir / "events.jsonl")
    rows = summary_rows_from_events(events)
    with (run_dir / "summary.csv").open() as fh:
        on_disk = list(csv.DictReader(fh))
    assert [dict(r) for r in on_disk] == [{k: str(v) for k, v in row.items()} for row in rows]

    # cross-check: trajectory equals the running max over evaluation events
    best = None
    trajectory = []
    it = iter(events)
    for e in events:
        if e["event"] == "evaluation" and "fitness" in e["payload"]:
            f = e["payload"]["fitness"]
            best = f if best is None else max(best, f)
        if e["event"] == "generation-summary":
            trajectory.append((e["payload"]["generation"], best))
    for (gen, running_best), row in zip(trajectory, rows):
        assert float(row["best_fitness"]) == running_best


def test_cmd_report_incomplete_run(tmp_path):
    (tmp_path / "events.jsonl").write_text("")
    assert main(["report", str(tmp_path)]) == 2


# ---------------------------------------------------------------- evaluate

def test_cmd_evaluate_best_fit_table(tmp_path, capsys):
    heuristic = tmp_path / "bf.txt"
    heuristic.write_text(problems.BEST_FIT_PROGRAM)
    rc = main(["evaluate", str(heuristic), "--task", "obp",
               "--sizes", "200", "--capacities", "100", "--seeds", "1", "2"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "gap_percent" in out
    assert "mean" in out
    assert "200C100" in out


def test_cmd_evaluate_accepts_best_json(tmp_path, capsys):
    heuristic = tmp_path / "best.json"
    heuristic.write_text(json.dumps({"thought": "nn", "code": problems.NEAREST_NEIGHBOR_PROGRAM,
                                     "category": "greedy", "fitness": 0.0}))
    rc = main(["evaluate", str(heuristic), "--task", "tsp", "--sizes", "10", "--seeds", "1"])
    assert rc == 0
    assert "size10" in capsys.readouterr().out


def test_cmd_evaluate_malformed_dsl(tmp_path, capsys):
    heuristic = tmp_path / "bad.txt"
    heuristic.write_text("return frobnicate(item)")
    rc = main(["evaluate", str(heuristic), "--task", "obp",
               "--sizes", "20", "--capacities", "50", "--seeds", "1"])
    assert rc == 1
    err = capsys.readouterr().err
    assert "frobnicate" in err
    assert "line 1" in err


def test_cmd_evaluate_deterministic(tmp_path, capsys):
    heuristic = tmp_path / "bf.txt"
    heuristic.write_text(problems.BEST_FIT_PROGRAM)
    args = ["evaluate", str(heuristic), "--task", "obp",
            "--sizes", "100", "--capacities", "100", "--seeds", "3"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert main(args) == 0
    assert capsys.readouterr().out == first


def test_cmd_evaluate_suite_file(tmp_path, capsys):
    suite = problems.make_obp_suite([30], [50], seeds=[1, 2])
    problems.save_suite(tmp_path / "suite.json", suite, tmp_path / "inst")
    heuristic = tmp_path / "bf.txt"
    heuristic.write_text(problems.BEST_FIT_PROGRAM)
    rc = main(["evaluate", str(heuristic), "--suite-file", str(tmp_path / "suite.json")])
    assert rc == 0
    assert "30C50" in capsys.readouterr().out


# ---------------------------------------------------------------- bench

def test_cmd_bench_obp_best_fit_beats_first_fit(capsys):
    rc = main(["bench", "--task", "obp", "--sizes", "1000",
               "--capacities", "100", "--seeds", "1", "2", "3", "4", "5"])
    assert rc == 0
    out = capsys.readouterr().out
    table = {line.split()[0]: float(line.split()[1])
             for line in out.splitlines() if line.startswith(("first-fit", "best-fit"))}
    assert table["best-fit"] <= table["first-fit"]
    # frozen goldens for the Weibull 1kC100 suite, seeds 1-5
    assert table["first-fit"] == pytest.approx(5.3673, abs=1e-4)
    assert table["best-fit"] == pytest.approx(4.9728, abs=1e-4)


def test_cmd_bench_tsp_nn_gap_nonnegative(capsys):
    rc = main(["bench", "--task", "tsp", "--sizes", "50", "--seeds", "1", "2"])
    assert rc == 0
    out = capsys.readouterr().out
    nn_row = [line for line in out.splitlines() if line.startswith("nearest-neighbor")][0]
    assert float(nn_row.split()[-1]) >= 0.0
    ref_row = [line for line in out.splitlines() if "reference" in line][0]
    assert float(ref_row.split()[-1]) == 0.0


def test_cmd_bench_requires_task(capsys):
    assert main(["bench"]) == 2


def test_cmd_bench_empty_seeds():
    with pytest.raises(SystemExit) as ei:
        main(["bench", "--task", "obp", "--sizes", "10", "--capacities", "50", "--seeds"])
    assert ei.value.code == 2
