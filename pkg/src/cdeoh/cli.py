"""Operational shell: config loading, run persistence, baselines,
deterministic replay and report generation.

Run directories contain: config.json (verbatim snapshot), transcript.jsonl
(copied for scripted runs), events.jsonl (append-only event stream),
population_gen*.json snapshots, best.json and summary.csv.  Everything in
summary.csv is recomputable from events.jsonl alone.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import shutil
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from cdeoh import dsl, llm, problems
from cdeoh.evolution import BudgetExhaustedError, EvolutionConfig, EvolutionEngine
from cdeoh.llm import ProviderConfig, ProviderError
from cdeoh.problems import BenchmarkSuite, CandidateFailure

EVENT_TYPES = ("sample", "evaluation", "reflection", "category-new",
               "selection", "generation-summary")


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------
# Config loading (unknown keys are hard errors)
# --------------------------------------------------------------------------

_SUITE_KEYS_OBP = {"sizes", "capacities", "seeds", "weibull_shape", "weibull_scale"}
_SUITE_KEYS_TSP = {"sizes", "seeds", "mode"}
_EVOLUTION_KEYS = {"population_size", "elite_categories", "lambda", "reflection_budget",
                   "max_samples", "max_generations", "enable_categories",
                   "enable_reflection", "rng_seed"}
_PROVIDER_KEYS = {"provider", "base_url", "model", "temperature", "max_retries",
                  "transcript_path", "max_in_flight", "max_prompt_bytes", "retry_backoff_s"}
_TOP_KEYS = {"task", "suite", "evolution", "provider", "output_dir"}


def _reject_unknown(section: str, data: dict, allowed: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")


@dataclass
class RunConfig:
    task: str
    suite: dict
    evolution: EvolutionConfig
    provider: ProviderConfig
    output_dir: str
    raw: dict  # the parsed file, snapshotted verbatim into the run dir

    def build_suite(self) -> BenchmarkSuite:
        return build_suite(self.task, self.suite)


def build_suite(task: str, suite_cfg: dict) -> BenchmarkSuite:
    if task == "obp":
        return problems.make_obp_suite(
            sizes=suite_cfg.get("sizes", [1000]),
            capacities=suite_cfg.get("capacities", [100]),
            seeds=suite_cfg.get("seeds", list(problems.DEFAULT_OBP_SEEDS)),
            shape=suite_cfg.get("weibull_shape", 3.0),
            scale=suite_cfg.get("weibull_scale", 45.0),
        )
    return problems.make_tsp_suite(
        sizes=suite_cfg.get("sizes", [50]),
        seeds=suite_cfg.get("seeds", list(problems.DEFAULT_TSP_SEEDS)),
        mode=suite_cfg.get("mode", "uniform"),
    )


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    _reject_unknown("config", data, _TOP_KEYS)

    task = data.get("task")
    if task not in problems.TASKS:
        raise ConfigError(f"task must be one of {problems.TASKS}, got {task!r}")

    suite_cfg = data.get("suite", {})
    if not isinstance(suite_cfg, dict):
        raise ConfigError("suite must be an object")
    allowed = _SUITE_KEYS_OBP if task == "obp" else _SUITE_KEYS_TSP
    _reject_unknown("suite", suite_cfg, allowed)

    evo_cfg = dict(data.get("evolution", {}))
    if not isinstance(evo_cfg, dict):
        raise ConfigError("evolution must be an object")
    _reject_unknown("evolution", evo_cfg, _EVOLUTION_KEYS)
    if "lambda" in evo_cfg:
        evo_cfg["lambda_weight"] = evo_cfg.pop("lambda")
    try:
        evo = EvolutionConfig(**evo_cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid evolution config: {e}") from e

    prov_cfg = dict(data.get("provider", {}))
    if not isinstance(prov_cfg, dict):
        raise ConfigError("provider must be an object")
    _reject_unknown("provider", prov_cfg, _PROVIDER_KEYS)
    if prov_cfg.get("provider", "scripted") == "scripted" and prov_cfg.get("transcript_path"):
        # transcript paths are resolved relative to the config file
        tp = Path(prov_cfg["transcript_path"])
        if not tp.is_absolute():
            prov_cfg["transcript_path"] = str(path.parent / tp)
    try:
        provider = ProviderConfig(**prov_cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid provider config: {e}") from e

    output_dir = data.get("output_dir", "runs")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir must be a string")
    return RunConfig(task=task, suite=suite_cfg, evolution=evo, provider=provider,
                     output_dir=output_dir, raw=data)


# --------------------------------------------------------------------------
# Run log
# --------------------------------------------------------------------------

class RunLogWriter:
    """Single serialized writer of the append-only event stream."""

    def __init__(self, path: Path):
        self.path = path
        self.seq = 0
        self._fh = path.open("w")

    def emit(self, event: str, payload: dict) -> None:
        assert event in EVENT_TYPES, event
        record = {
            "seq": self.seq,
            "ts": datetime.now(timezone.utc).isoformat(),  # excluded from replay equality
            "event": event,
            "payload": payload,
        }
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()
        self.seq += 1

    def close(self) -> None:
        self._fh.close()


def read_events(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def strip_timestamps(events) -> list[dict]:
    return [{k: v for k, v in e.items() if k != "ts"} for e in events]


# --------------------------------------------------------------------------
# Summary derivation (pure function of the event stream)
# --------------------------------------------------------------------------

SUMMARY_COLUMNS = ("generation", "samples_used", "cumulative_samples", "offspring_added",
                   "best_fitness", "best_gap_percent", "new_categories", "category_histogram")


def summary_rows_from_events(events) -> list[dict]:
    rows = []
    for e in events:
        if e["event"] != "generation-summary":
            continue
        p = e["payload"]
        rows.append({
            "generation": p["generation"],
            "samples_used": p["samples_used"],
            "cumulative_samples": p["cumulative_samples"],
            "offspring_added": p["offspring_added"],
            "best_fitness": repr(float(p["best_fitness"])),
            "best_gap_percent": repr(-float(p["best_fitness"])),
            "new_categories": ";".join(p["new_categories"]),
            "category_histogram": json.dumps(p["category_histogram"], sort_keys=True),
        })
    return rows


def write_summary_csv(path: Path, events) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(summary_rows_from_events(events))


def best_candidate_from_events(events) -> dict:
    best = None
    for e in events:
        if e["event"] != "evaluation":
            continue
        p = e["payload"]
        if "candidate_id" not in p:
            continue
        key = (-p["fitness"], p["candidate_id"])
        if best is None or key < (-best["fitness"], best["candidate_id"]):
            best = p
    if best is None:
        raise ConfigError("run produced no evaluated candidates")
    return best


# --------------------------------------------------------------------------
# cdeoh run
# --------------------------------------------------------------------------

def _fresh_run_dir(output_dir: Path) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%d_%H%M%S")
    base = output_dir / f"run_{stamp}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = Path(f"{base}_{n}")
    path.mkdir(parents=True)
    return path


def cmd_run(config_path: str) -> int:
    try:
        cfg = load_run_config(config_path)
        suite = cfg.build_suite()
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    run_dir = _fresh_run_dir(Path(cfg.output_dir))
    (run_dir / "config.json").write_text(json.dumps(cfg.raw, indent=2, sort_keys=True))
    if cfg.provider.provider == "scripted":
        shutil.copy(cfg.provider.transcript_path, run_dir / "transcript.jsonl")

    log = RunLogWriter(run_dir / "events.jsonl")
    try:
        provider = llm.make_provider(cfg.provider)
        engine = EvolutionEngine(cfg.evolution, provider, suite, log=log.emit)
        best, stats = engine.run()
    except (BudgetExhaustedError, ProviderError, ValueError) as e:
        log.close()
        print(f"error: {e}", file=sys.stderr)
        return 1
    log.close()

    for gen, population in enumerate(engine.populations):
        snapshot = [c.__dict__ for c in population.members]
        (run_dir / f"population_gen{gen:03d}.json").write_text(
            json.dumps(snapshot, indent=2, sort_keys=True))
    (run_dir / "best.json").write_text(json.dumps(
        {"thought": best.thought, "code": best.code,
         "category": best.category, "fitness": best.fitness},
        indent=2, sort_keys=True))
    write_summary_csv(run_dir / "summary.csv", read_events(run_dir / "events.jsonl"))

    print(f"run dir: {run_dir}")
    print(f"samples used: {sum(s.samples_used for s in stats)}")
    fitness = best.fitness + 0.0  # avoid printing -0.0
    print(f"best fitness: {fitness:.6f} (gap {-fitness:.6f}%) category: {best.category}")
    return 0


# --------------------------------------------------------------------------
# cdeoh evaluate / bench
# --------------------------------------------------------------------------

def _suite_from_args(args) -> BenchmarkSuite:
    if getattr(args, "suite_file", None):
        return problems.load_suite(args.suite_file)
    if args.task == "obp":
        return problems.make_obp_suite(
            sizes=args.sizes or [1000],
            capacities=args.capacities or [100],
            seeds=args.seeds or list(problems.DEFAULT_OBP_SEEDS),
        )
    if args.task == "tsp":
        return problems.make_tsp_suite(
            sizes=args.sizes or [50],
            seeds=args.seeds or list(problems.DEFAULT_TSP_SEEDS),
            mode=args.mode,
        )
    raise ConfigError("--task obp|tsp is required (or --suite-file)")


def _load_heuristic_code(path: Path) -> str:
    text = path.read_text()
    try:
        data = json.loads(text)
        if isinstance(data, dict) and "code" in data:
            return data["code"]
    except json.JSONDecodeError:
        pass
    return text


def _format_table(headers, rows) -> str:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(headers)]
    def fmt(row):
        return "  ".join(str(cell).ljust(w) for cell, w in zip(row, widths))
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(r) for r in rows)
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    path = Path(args.heuristic)
    if not path.exists():
        print(f"error: heuristic file not found: {path}", file=sys.stderr)
        return 2
    try:
        suite = _suite_from_args(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    code = _load_heuristic_code(path)
    try:
        program = dsl.parse(code, problems.input_signature(suite.task))
    except dsl.ParseError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        report = problems.evaluate_candidate(suite, program)
    except CandidateFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    rows = [(label, f"{r.raw_metric:.6g}", f"{r.reference:.6g}", f"{r.gap_percent:.4f}")
            for label, r in zip(suite.labels, report.per_instance)]
    rows.append(("mean", f"{report.raw_metric:.6g}", f"{report.reference:.6g}",
                 f"{report.gap_percent:.4f}"))
    print(_format_table(("instance", "metric", "reference", "gap_percent"), rows))
    print()
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(("instance", "metric", "reference", "gap_percent"))
    writer.writerows(rows)
    print(buf.getvalue().rstrip("\n"))
    return 0


def cmd_bench(args) -> int:
    try:
        suite = _suite_from_args(args)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if suite.task == "obp":
        baselines = {
            "first-fit": lambda inst: problems.first_fit_bin_count(inst.items, inst.capacity),
            "best-fit": lambda inst: problems.best_fit_bin_count(inst.items, inst.capacity),
        }
        reference = problems.obp_lower_bound
    else:
        baselines = {
            "nearest-neighbor": lambda inst: problems.tour_length(
                inst, problems.nearest_neighbor_tour(inst)),
            "nn+2opt (reference)": lambda inst: problems.tsp_reference(inst),
        }
        reference = problems.tsp_reference

    settings = sorted(set(suite.labels), key=suite.labels.index)
    rows = []
    for name, run in baselines.items():
        gaps_by_setting = {s: [] for s in settings}
        for inst, label in zip(suite.instances, suite.labels):
            ref = reference(inst)
            gaps_by_setting[label].append(100.0 * (run(inst) - ref) / ref)
        rows.append([name] + [f"{np.mean(gaps_by_setting[s]):.4f}" for s in settings])
    print(_format_table(["baseline"] + [f"{s} gap%" for s in settings], rows))
    return 0


# --------------------------------------------------------------------------
# cdeoh replay / report
# --------------------------------------------------------------------------

def _replay_events(run_dir: Path) -> list[dict]:
    cfg = load_run_config(run_dir / "config.json")
    transcript = run_dir / "transcript.jsonl"
    if cfg.provider.provider != "scripted":
        raise ConfigError("replay requires a scripted-provider run")
    if transcript.exists():
        cfg.provider.transcript_path = str(transcript)
    elif not Path(cfg.provider.transcript_path or "").exists():
        raise ConfigError("transcript not found for replay")
    collected: list[dict] = []
    seq = 0

    def collect(event: str, payload: dict) -> None:
        nonlocal seq
        collected.append({"seq": seq, "event": event, "payload": payload})
        seq += 1

    provider = llm.make_provider(cfg.provider)
    engine = EvolutionEngine(cfg.evolution, provider, cfg.build_suite(), log=collect)
    engine.run()
    return collected


def cmd_replay(run_dir_arg: str) -> int:
    run_dir = Path(run_dir_arg)
    events_path = run_dir / "events.jsonl"
    if not events_path.exists() or not (run_dir / "config.json").exists():
        print("error: run dir is missing events.jsonl or config.json", file=sys.stderr)
        return 2
    try:
        replayed = _replay_events(run_dir)
    except (ConfigError, BudgetExhaustedError, ProviderError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    recorded = strip_timestamps(read_events(events_path))
    # round-trip through JSON so tuples/lists compare equal
    replayed = json.loads(json.dumps(replayed))
    for i, (a, b) in enumerate(zip(recorded, replayed)):
        if a != b:
            print(f"divergence at seq {i}", file=sys.stderr)
            return 1
    if len(recorded) != len(replayed):
        print(f"divergence at seq {min(len(recorded), len(replayed))}", file=sys.stderr)
        return 1
    print(f"replay ok: {len(recorded)} events match")
    return 0


def cmd_report(run_dir_arg: str) -> int:
    run_dir = Path(run_dir_arg)
    events_path = run_dir / "events.jsonl"
    if not events_path.exists():
        print("error: incomplete run: events.jsonl missing", file=sys.stderr)
        return 2
    events = read_events(events_path)
    rows = summary_rows_from_events(events)
    if not rows:
        print("error: incomplete run: no generation summaries logged", file=sys.stderr)
        return 2
    with (run_dir / "report.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    best = best_candidate_from_events(events)
    lines = [
        "# Run report",
        "",
        f"Best candidate: id {best['candidate_id']}, category `{best['category']}`,"
        f" fitness {best['fitness']:.6f} (mean gap {-best['fitness']:.6f}%)",
        "",
        "## Thought",
        "",
        best["thought"],
        "",
        "## Code",
        "",
        "```",
        best["code"],
        "```",
        "",
        "## Per-setting gaps of the best candidate",
        "",
    ]
    labels = None
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        try:
            cfg = load_run_config(cfg_path)
            labels = cfg.build_suite().labels
        except ConfigError:
            labels = None
    gaps = best.get("instance_gaps", [])
    if labels and len(labels) == len(gaps):
        per_setting: dict[str, list[float]] = {}
        for label, gap in zip(labels, gaps):
            per_setting.setdefault(label, []).append(gap)
        for label in dict.fromkeys(labels):
            lines.append(f"- {label}: {np.mean(per_setting[label]):.4f}%")
    else:
        for i, gap in enumerate(gaps):
            lines.append(f"- instance {i}: {gap:.4f}%")
    lines += ["", "## Best-gap trajectory", ""]
    for row in rows:
        lines.append(f"- generation {row['generation']}: best gap {row['best_gap_percent']}%"
                     f" ({row['cumulative_samples']} samples)")
    (run_dir / "report.md").write_text("\n".join(lines) + "\n")
    print(f"wrote {run_dir / 'report.csv'} and {run_dir / 'report.md'}")
    return 0


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def _add_suite_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--task", choices=problems.TASKS)
    parser.add_argument("--sizes", type=int, nargs="+",
                        help="OBP item counts / TSP city counts")
    parser.add_argument("--capacities", type=int, nargs="+", help="OBP bin capacities")
    parser.add_argument("--seeds", type=int, nargs="+")
    parser.add_argument("--mode", choices=("uniform", "gaussian-mixture"), default="uniform",
                        help="TSP coordinate distribution")
    parser.add_argument("--suite-file", help="JSON suite file (overrides generated instances)")


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cdeoh",
        description="Evolve priority-function heuristics with category-diverse selection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an evolution from a JSON config")
    p_run.add_argument("config")

    p_eval = sub.add_parser("evaluate", help="evaluate a heuristic file on a suite")
    p_eval.add_argument("heuristic", help="best.json-shaped file or raw program text")
    _add_suite_args(p_eval)

    p_bench = sub.add_parser("bench", help="print baseline gap tables")
    _add_suite_args(p_bench)

    p_replay = sub.add_parser("replay", help="re-execute a scripted run and compare events")
    p_replay.add_argument("run_dir")

    p_report = sub.add_parser("report", help="write report.csv and report.md for a run")
    p_report.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "evaluate":
        return cmd_evaluate(args)
    if args.command == "bench":
        if not args.task and not args.suite_file:
            print("error: --task or --suite-file is required", file=sys.stderr)
            return 2
        return cmd_bench(args)
    if args.command == "replay":
        return cmd_replay(args.run_dir)
    if args.command == "report":
        return cmd_report(args.run_dir)
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
