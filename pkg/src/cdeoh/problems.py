"""Benchmark tasks: online bin packing and constructive TSP.

Instances are generated deterministically from seeds, candidate priority
functions are run through online/constructive simulations, and fitness is
the negated mean relative gap to a reference (a Martello-Toth lower bound
for OBP, a nearest-neighbor + 2-opt tour for TSP), so larger fitness is
better.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from cdeoh import dsl
from cdeoh.dsl import EvalError, EvalLimits, Program, evaluate

OBP_INPUTS: Mapping[str, dsl.Kind] = {
    "item": "scalar",
    "cap_remaining": "vector",
    "bin_index": "vector",
}

TSP_INPUTS: Mapping[str, dsl.Kind] = {
    "dist_to_current": "vector",
    "dist_to_start": "vector",
    "mean_dist_remaining": "vector",
    "visited_fraction": "scalar",
}

TASKS = ("obp", "tsp")


class CandidateFailure(Exception):
    """A candidate program failed during simulation.

    The message is self-contained (error kind, position, shape details) so
    it can be pasted into a repair prompt.
    """


def input_signature(task: str) -> Mapping[str, dsl.Kind]:
    if task == "obp":
        return dict(OBP_INPUTS)
    if task == "tsp":
        return dict(TSP_INPUTS)
    raise ValueError(f"unknown task {task!r}")


_OBP_TASK_TEXT = """\
Online bin packing. Items arrive one at a time and each must be placed
immediately into a bin of fixed capacity; the goal is to use as few bins
as possible. You write a priority function that scores every currently
feasible bin (bins whose remaining capacity fits the item). Inputs:
  item           (scalar) size of the arriving item
  cap_remaining  (vector) remaining capacity of each feasible bin
  bin_index      (vector) original index of each feasible bin
The item is placed into the feasible bin with the highest priority
(ties go to the lowest bin index). A NaN priority means "never use this
bin"; if every priority is NaN a fresh bin is opened. Lower final bin
counts score better."""

_TSP_TASK_TEXT = """\
Traveling salesman, constructive. Starting from city 0, the tour is built
by repeatedly moving to one unvisited city until all are visited, then
returning to the start; the goal is a short tour. You write a priority
function scored over the unvisited cities. Inputs:
  dist_to_current     (vector) distance from the current city to each unvisited city
  dist_to_start       (vector) distance from the start city to each unvisited city
  mean_dist_remaining (vector) mean distance from each unvisited city to the other unvisited cities
  visited_fraction    (scalar) fraction of cities already visited
The tour moves to the unvisited city with the highest priority (ties go
to the lowest city index; NaN never wins). Shorter tours score better."""


def task_description(task: str) -> str:
    if task == "obp":
        return _OBP_TASK_TEXT
    if task == "tsp":
        return _TSP_TASK_TEXT
    raise ValueError(f"unknown task {task!r}")


# --------------------------------------------------------------------------
# Instances
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ObpInstance:
    capacity: int
    items: tuple[int, ...]

    def __post_init__(self):
        if self.capacity < 2:
            raise ValueError("capacity must be >= 2")
        if not self.items:
            raise ValueError("items must be non-empty")
        if any(x < 1 or x > self.capacity for x in self.items):
            raise ValueError("every item must lie in [1, capacity]")


@dataclass(eq=False)
class TspInstance:
    coords: np.ndarray  # (n, 2) in [0, 1]^2
    dist: np.ndarray    # (n, n) symmetric Euclidean distances
    _reference: float | None = field(default=None, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.dist = np.asarray(self.dist, dtype=np.float64)
        n = self.coords.shape[0]
        if n < 3:
            raise ValueError("need at least 3 cities")
        if self.dist.shape != (n, n):
            raise ValueError("distance matrix shape mismatch")
        if not np.array_equal(self.dist, self.dist.T):
            raise ValueError("distance matrix must be symmetric")
        if np.any(np.diagonal(self.dist) != 0.0):
            raise ValueError("distance matrix diagonal must be zero")
        expected = _distance_matrix(self.coords)
        if np.max(np.abs(expected - self.dist)) > 1e-12:
            raise ValueError("distance matrix does not match coordinates")

    @property
    def n_cities(self) -> int:
        return self.coords.shape[0]


def _distance_matrix(coords: np.ndarray) -> np.ndarray:
    delta = coords[:, None, :] - coords[None, :, :]
    return np.sqrt((delta ** 2).sum(axis=-1))


def tsp_instance_from_coords(coords: np.ndarray) -> TspInstance:
    coords = np.asarray(coords, dtype=np.float64)
    return TspInstance(coords=coords, dist=_distance_matrix(coords))


@dataclass(frozen=True)
class EvalReport:
    raw_metric: float       # OBP: bins used; TSP: tour length
    reference: float        # OBP: lower bound; TSP: reference tour length
    gap_percent: float      # 100 * (raw - reference) / reference
    fitness: float          # -gap_percent; the engine maximizes
    per_instance: tuple["EvalReport", ...] = ()


def _make_report(raw: float, reference: float) -> EvalReport:
    gap = 100.0 * (raw - reference) / reference
    return EvalReport(raw_metric=float(raw), reference=float(reference), gap_percent=gap, fitness=-gap)


@dataclass(frozen=True)
class BenchmarkSuite:
    task: str
    instances: tuple
    labels: tuple[str, ...]

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not self.instances:
            raise ValueError("suite must contain at least one instance")
        if len(self.labels) != len(self.instances):
            raise ValueError("one label per instance required")


# --------------------------------------------------------------------------
# OBP generation and lower bound
# --------------------------------------------------------------------------

def gen_obp(seed: int, n_items: int, capacity: int,
            shape: float = 3.0, scale: float = 45.0) -> ObpInstance:
    """Weibull-distributed item sizes, rounded up and clamped to [1, capacity]."""
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    if capacity < 2:
        raise ValueError("capacity must be >= 2")
    if shape <= 0 or scale <= 0:
        raise ValueError("shape and scale must be positive")
    rng = np.random.default_rng(seed)
    raw = rng.weibull(shape, n_items) * scale
    items = np.clip(np.ceil(raw), 1, capacity).astype(int)
    return ObpInstance(capacity=capacity, items=tuple(int(x) for x in items))


def obp_lower_bound(instance: ObpInstance) -> int:
    """Martello-Toth L2 bound, maximized over item-size thresholds.

    Always >= ceil(sum/capacity) (the threshold-0 case) and never exceeds
    the optimal bin count.
    """
    c = instance.capacity
    sizes = sorted(instance.items)
    n = len(sizes)
    prefix = [0] * (n + 1)
    for i, s in enumerate(sizes):
        prefix[i + 1] = prefix[i] + s
    half = c / 2.0
    idx_half = bisect.bisect_right(sizes, half)  # sizes[idx_half:] are > c/2

    # L(alpha) is piecewise constant in the threshold; evaluating at 0 and
    # at every breakpoint covers all pieces.
    candidates = {0}
    for s in set(sizes):
        for a in (s, s + 1, c - s, c - s + 1):
            if 0 <= a <= c // 2:
                candidates.add(a)

    best = 1
    for alpha in candidates:
        # J1: sizes > c - alpha; J2: c/2 < sizes <= c - alpha; J3: alpha <= sizes <= c/2
        idx_c_minus_a = bisect.bisect_right(sizes, c - alpha)
        n1 = n - idx_c_minus_a
        n2 = idx_c_minus_a - idx_half
        sum2 = prefix[idx_c_minus_a] - prefix[idx_half]
        idx_alpha = bisect.bisect_left(sizes, alpha)
        sum3 = prefix[idx_half] - prefix[min(idx_alpha, idx_half)]
        spare = n2 * c - sum2
        extra = max(0, -((-(sum3 - spare)) // c))  # ceil for ints
        best = max(best, n1 + n2 + extra)
    return int(best)


# --------------------------------------------------------------------------
# OBP online simulation
# --------------------------------------------------------------------------

def pack_online(instance: ObpInstance, program: Program,
                limits: EvalLimits | None = None) -> list[int]:
    """Run the online packing simulation; returns the final bin loads.

    Raises CandidateFailure on any evaluation error or wrong-shape result.
    """
    cap = instance.capacity
    n = len(instance.items)
    remaining = np.empty(n, dtype=np.int64)  # per open bin
    n_open = 0
    for item in instance.items:
        feasible = np.nonzero(remaining[:n_open] >= item)[0]
        place_at = -1
        if feasible.size > 0:
            caps = remaining[feasible].astype(np.float64)
            idxs = feasible.astype(np.float64)
            try:
                out = evaluate(program, {"item": float(item), "cap_remaining": caps, "bin_index": idxs},
                               limits)
            except EvalError as e:
                raise CandidateFailure(str(e)) from e
            if out.kind != "vector":
                raise CandidateFailure(
                    "priority function must return a vector over the feasible bins, got a scalar")
            if out.data.shape[0] != feasible.size:
                raise CandidateFailure(
                    f"priority vector has length {out.data.shape[0]}, expected {feasible.size}"
                    " (one entry per feasible bin)")
            prio = np.where(np.isnan(out.data), -np.inf, out.data)
            best = int(np.argmax(prio))  # first max <=> lowest bin_index
            if prio[best] != -np.inf:
                place_at = int(feasible[best])
        if place_at < 0:
            place_at = n_open
            remaining[place_at] = cap
            n_open += 1
        remaining[place_at] -= item
        assert remaining[place_at] >= 0, "bin overfilled"
    loads = cap - remaining[:n_open]
    return [int(x) for x in loads]


def simulate_obp(instance: ObpInstance, program: Program,
                 limits: EvalLimits | None = None) -> EvalReport:
    loads = pack_online(instance, program, limits)
    return _make_report(len(loads), obp_lower_bound(instance))


# --------------------------------------------------------------------------
# OBP baselines (independent of the expression-language path)
# --------------------------------------------------------------------------

def first_fit_bin_count(items: Sequence[int], capacity: int) -> int:
    remaining = np.empty(len(items), dtype=np.int64)
    n_open = 0
    for item in items:
        fit = np.nonzero(remaining[:n_open] >= item)[0]
        if fit.size:
            remaining[fit[0]] -= item
        else:
            remaining[n_open] = capacity - item
            n_open += 1
    return n_open


def best_fit_bin_count(items: Sequence[int], capacity: int) -> int:
    # Sorted remaining capacities; best fit = tightest bin that still fits.
    remaining: list[int] = []
    for item in items:
        i = bisect.bisect_left(remaining, item)
        if i == len(remaining):
            bisect.insort(remaining, capacity - item)
        else:
            r = remaining.pop(i)
            bisect.insort(remaining, r - item)
    return len(remaining)


BEST_FIT_PROGRAM = "return -(cap_remaining - item)"
FIRST_FIT_PROGRAM = "return -bin_index"


# --------------------------------------------------------------------------
# TSP generation
# --------------------------------------------------------------------------

def gen_tsp(seed: int, n_cities: int, mode: str = "uniform") -> TspInstance:
    """Uniform coordinates in [0,1]^2, or a rescaled 3-cluster Gaussian mixture."""
    if n_cities < 3:
        raise ValueError("n_cities must be >= 3")
    rng = np.random.default_rng(seed)
    if mode == "uniform":
        coords = rng.random((n_cities, 2))
    elif mode == "gaussian-mixture":
        k = 3
        centers = 0.2 + 0.6 * rng.random((k, 2))
        which = rng.integers(0, k, size=n_cities)
        coords = centers[which] + rng.normal(0.0, 0.05, size=(n_cities, 2))
        lo = coords.min(axis=0)
        span = coords.max(axis=0) - lo
        span[span == 0.0] = 1.0
        coords = (coords - lo) / span
    else:
        raise ValueError(f"unknown mode {mode!r} (expected 'uniform' or 'gaussian-mixture')")
    return tsp_instance_from_coords(coords)


def tour_length(instance: TspInstance, tour: Sequence[int]) -> float:
    d = instance.dist
    total = 0.0
    for a, b in zip(tour, tour[1:]):
        total += d[a, b]
    total += d[tour[-1], tour[0]]
    return float(total)


def nearest_neighbor_tour(instance: TspInstance, start: int = 0) -> list[int]:
    d = instance.dist
    n = instance.n_cities
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    tour = [start]
    cur = start
    for _ in range(n - 1):
        row = np.where(visited, np.inf, d[cur])
        cur = int(np.argmin(row))  # first min <=> lowest index
        visited[cur] = True
        tour.append(cur)
    return tour


def two_opt(instance: TspInstance, tour: Sequence[int]) -> list[int]:
    """First-improvement 2-opt with a fixed lexicographic scan order."""
    d = instance.dist
    t = np.asarray(tour, dtype=np.int64)
    n = t.shape[0]
    if n < 4:
        return [int(x) for x in t]
    eps = 1e-10
    i_all, j_all = np.triu_indices(n, k=1)
    keep = i_all >= 1  # i=0 moves duplicate (j+1, n-1) pairs
    i_idx, j_idx = i_all[keep], j_all[keep]
    order = np.arange(n)
    while True:
        prev = t[order - 1]        # t[i-1]
        nxt = t[(order + 1) % n]   # t[j+1]
        # delta[i, j] for replacing edges (t[i-1],t[i]) and (t[j],t[j+1])
        delta = (d[prev[:, None], t[None, :]] + d[t[:, None], nxt[None, :]]
                 - d[prev, t][:, None] - d[t, nxt][None, :])
        vals = delta[i_idx, j_idx]
        improving = np.nonzero(vals < -eps)[0]
        if improving.size == 0:
            return [int(x) for x in t]
        first = improving[0]  # lexicographically first (i, j)
        i, j = int(i_idx[first]), int(j_idx[first])
        t[i:j + 1] = t[i:j + 1][::-1]


def tsp_reference(instance: TspInstance) -> float:
    """Deterministic reference tour length: nearest neighbor then 2-opt."""
    if instance._reference is None:
        nn = nearest_neighbor_tour(instance)
        improved = two_opt(instance, nn)
        instance._reference = tour_length(instance, improved)
    return instance._reference


def construct_tour(instance: TspInstance, program: Program,
                   limits: EvalLimits | None = None) -> list[int]:
    """Build a tour by the candidate's priorities; always a permutation."""
    d = instance.dist
    n = instance.n_cities
    unvisited = list(range(1, n))
    tour = [0]
    cur = 0
    while unvisited:
        u = np.asarray(unvisited, dtype=np.int64)
        sub = d[np.ix_(u, u)]
        if u.size > 1:
            mean_remaining = sub.sum(axis=1) / (u.size - 1)
        else:
            mean_remaining = np.zeros(1)
        inputs = {
            "dist_to_current": d[cur, u],
            "dist_to_start": d[0, u],
            "mean_dist_remaining": mean_remaining,
            "visited_fraction": (n - u.size) / n,
        }
        try:
            out = evaluate(program, inputs, limits)
        except EvalError as e:
            raise CandidateFailure(str(e)) from e
        if out.kind != "vector":
            raise CandidateFailure(
                "priority function must return a vector over the unvisited cities, got a scalar")
        if out.data.shape[0] != u.size:
            raise CandidateFailure(
                f"priority vector has length {out.data.shape[0]}, expected {u.size}"
                " (one entry per unvisited city)")
        prio = np.where(np.isnan(out.data), -np.inf, out.data)
        pick = 0 if np.all(prio == -np.inf) else int(np.argmax(prio))
        cur = unvisited.pop(pick)
        tour.append(cur)
    assert sorted(tour) == list(range(n)), "tour is not a permutation"
    return tour


def simulate_tsp(instance: TspInstance, program: Program,
                 limits: EvalLimits | None = None) -> EvalReport:
    tour = construct_tour(instance, program, limits)
    return _make_report(tour_length(instance, tour), tsp_reference(instance))


NEAREST_NEIGHBOR_PROGRAM = "return 0 - dist_to_current"


# --------------------------------------------------------------------------
# Suites and aggregate evaluation
# --------------------------------------------------------------------------

def evaluate_candidate(suite: BenchmarkSuite, program: Program,
                       limits: EvalLimits | None = None) -> EvalReport:
    """Mean gap over the suite; fails fast on the first CandidateFailure."""
    simulate = simulate_obp if suite.task == "obp" else simulate_tsp
    reports = [simulate(inst, program, limits) for inst in suite.instances]
    gap = float(np.mean([r.gap_percent for r in reports]))
    return EvalReport(
        raw_metric=float(np.mean([r.raw_metric for r in reports])),
        reference=float(np.mean([r.reference for r in reports])),
        gap_percent=gap,
        fitness=-gap,
        per_instance=tuple(reports),
    )


def obp_setting_label(n_items: int, capacity: int) -> str:
    if n_items % 1000 == 0:
        return f"{n_items // 1000}kC{capacity}"
    return f"{n_items}C{capacity}"


def parse_obp_setting(label: str) -> tuple[int, int]:
    """'1kC100' -> (1000, 100); '500C100' -> (500, 100)."""
    head, _, cap = label.partition("C")
    if not cap:
        raise ValueError(f"bad OBP setting {label!r}")
    mult = 1
    if head.endswith(("k", "K")):
        head, mult = head[:-1], 1000
    return int(head) * mult, int(cap)


DEFAULT_OBP_SEEDS = (1, 2, 3, 4, 5)
DEFAULT_OBP_SETTINGS = ("1kC100", "1kC500", "5kC100", "5kC500", "10kC100", "10kC500")
DEFAULT_TSP_SEEDS = (1, 2, 3, 4)
DEFAULT_TSP_SIZES = (50, 100, 200, 500)


def make_obp_suite(sizes: Iterable[int], capacities: Iterable[int],
                   seeds: Iterable[int] = DEFAULT_OBP_SEEDS,
                   shape: float = 3.0, scale: float = 45.0) -> BenchmarkSuite:
    instances, labels = [], []
    for n in sizes:
        for cap in capacities:
            for seed in seeds:
                instances.append(gen_obp(seed, n, cap, shape, scale))
                labels.append(obp_setting_label(n, cap))
    return BenchmarkSuite(task="obp", instances=tuple(instances), labels=tuple(labels))


def make_tsp_suite(sizes: Iterable[int], seeds: Iterable[int] = DEFAULT_TSP_SEEDS,
                   mode: str = "uniform") -> BenchmarkSuite:
    instances, labels = [], []
    for n in sizes:
        for seed in seeds:
            instances.append(gen_tsp(seed, n, mode))
            labels.append(f"size{n}")
    return BenchmarkSuite(task="tsp", instances=tuple(instances), labels=tuple(labels))


def default_obp_suite(settings: Iterable[str] = DEFAULT_OBP_SETTINGS,
                      seeds: Iterable[int] = DEFAULT_OBP_SEEDS) -> BenchmarkSuite:
    instances, labels = [], []
    for label in settings:
        n, cap = parse_obp_setting(label)
        for seed in seeds:
            instances.append(gen_obp(seed, n, cap))
            labels.append(obp_setting_label(n, cap))
    return BenchmarkSuite(task="obp", instances=tuple(instances), labels=tuple(labels))


def default_tsp_suite(sizes: Iterable[int] = DEFAULT_TSP_SIZES,
                      seeds: Iterable[int] = DEFAULT_TSP_SEEDS,
                      mode: str = "uniform") -> BenchmarkSuite:
    return make_tsp_suite(sizes, seeds, mode)


# --------------------------------------------------------------------------
# Instance / suite files
# --------------------------------------------------------------------------

def save_instance(path: str | Path, instance: ObpInstance | TspInstance) -> None:
    path = Path(path)
    if isinstance(instance, ObpInstance):
        payload = {"capacity": instance.capacity, "items": list(instance.items)}
    else:
        payload = {"coords": [[float(x), float(y)] for x, y in instance.coords]}
    path.write_text(json.dumps(payload))


def load_instance(path: str | Path, task: str) -> ObpInstance | TspInstance:
    data = json.loads(Path(path).read_text())
    if task == "obp":
        return ObpInstance(capacity=int(data["capacity"]), items=tuple(int(x) for x in data["items"]))
    if task == "tsp":
        return tsp_instance_from_coords(np.asarray(data["coords"], dtype=np.float64))
    raise ValueError(f"unknown task {task!r}")


def save_suite(path: str | Path, suite: BenchmarkSuite, instance_dir: str | Path | None = None) -> None:
    """Write the suite as a task kind plus a list of instance file paths."""
    path = Path(path)
    instance_dir = Path(instance_dir) if instance_dir else path.parent
    instance_dir.mkdir(parents=True, exist_ok=True)
    rel_paths = []
    for i, (inst, label) in enumerate(zip(suite.instances, suite.labels)):
        name = f"{suite.task}_{label}_{i:03d}.json"
        save_instance(instance_dir / name, inst)
        rel_paths.append(str((instance_dir / name).relative_to(path.parent)))
    path.write_text(json.dumps({"task": suite.task, "instances": rel_paths, "labels": list(suite.labels)}))


def load_suite(path: str | Path) -> BenchmarkSuite:
    path = Path(path)
    data = json.loads(path.read_text())
    task = data["task"]
    instances = tuple(load_instance(path.parent / p, task) for p in data["instances"])
    labels = tuple(data.get("labels") or (f"inst{i}" for i in range(len(instances))))
    return BenchmarkSuite(task=task, instances=instances, labels=labels)
