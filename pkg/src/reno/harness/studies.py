"""Batch studies over seeds: sweeps, leave-one-out and reward-subset ablations.

Every run is independent, so runs can be farmed out to a process pool. All
aggregation happens afterwards from the per-run summaries alone, which is what
:func:`aggregate` recomputes.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from ..generators import generate
from ..optimizer import RunRecord, reno_run
from .config import ExperimentConfig
from .io import write_json, write_ppm, write_trajectory_csv

__all__ = [
    "RunSummary",
    "StudyResult",
    "aggregate",
    "execute",
    "run_and_write",
    "summarize_run",
    "run_sweep",
    "run_leave_one_out",
    "run_reward_ablation",
    "singleton_and_full_masks",
    "all_nonempty_masks",
]


@dataclass(frozen=True)
class RunSummary:
    label: str
    seed: int
    initial: dict
    final: dict
    best_reward: float
    best_t: int
    # reward under the full configured weights, at t = 0 and at the selected iterate
    full_initial: float
    full_final: float


@dataclass
class StudyResult:
    kind: str
    term_names: list
    runs: list
    aggregates: dict = field(default_factory=dict)

    def labels(self) -> list:
        return list(dict.fromkeys(r.label for r in self.runs))

    def table(self) -> list:
        """Rows of (label, term, initial, final, change, improve %)."""
        rows = []
        for label, per_term in self.aggregates.items():
            for term, s in per_term.items():
                if term == "_full":
                    continue
                if self.kind == "loo" and term != label:
                    continue
                rows.append((label, term, s["initial"], s["final"], s["change"], s["improve_pct"]))
        return rows


@lru_cache(maxsize=8)
def _built(cfg: ExperimentConfig):
    return cfg.build_generator(), cfg.build_prompt(), cfg.build_criterion()


def execute(cfg: ExperimentConfig, seed: int, weights: Optional[dict] = None, on_step=None) -> tuple:
    """Run one optimization; ``weights`` overrides per-term weights by name."""
    g, p, crit = _built(cfg)
    if weights:
        crit = crit.with_weights(weights)
    return reno_run(g, p, crit, cfg.optimizer_config(seed), on_step=on_step)


def summarize_run(label: str, seed: int, record: RunRecord, full_weights: Sequence[float]) -> RunSummary:
    first, best = record.rows[0], record.rows[record.best.t]
    w = np.asarray(full_weights, dtype=np.float64)
    return RunSummary(
        label=label,
        seed=seed,
        initial=dict(zip(record.term_names, first.per_term)),
        final=dict(zip(record.term_names, best.per_term)),
        best_reward=record.best.reward,
        best_t=record.best.t,
        full_initial=float(np.dot(w, first.per_term)),
        full_final=float(np.dot(w, best.per_term)),
    )


def run_summary_json(cfg: ExperimentConfig, record: RunRecord) -> dict:
    return {"experiment": cfg.echo(), **record.summary(include_timing=cfg.output.timing)}


def run_and_write(cfg: ExperimentConfig, seed: int, out_dir) -> RunSummary:
    """Run one seed and write its artifacts into ``out_dir``.

    Writes ``best.ppm``, ``trajectory.csv`` and ``summary.json`` (as enabled by
    ``output.formats``), plus ``frame_<t>.ppm`` every ``output.emit_every`` steps.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    every = cfg.output.emit_every
    on_step = None
    if every > 0:
        g, p, _ = _built(cfg)

        def on_step(state, row):
            if row.t % every == 0:
                write_ppm(generate(g, state.eps, p), out / f"frame_{row.t:04d}.ppm")

    image, record = execute(cfg, seed, on_step=on_step)
    formats = cfg.output.formats
    if "ppm" in formats:
        write_ppm(image, out / "best.ppm")
    if "csv" in formats:
        write_trajectory_csv(record, out / "trajectory.csv")
    if "json" in formats:
        write_json(run_summary_json(cfg, record), out / "summary.json")
    return summarize_run("all", seed, record, [t.weight for t in cfg.criterion.terms])


def _write_job(args) -> RunSummary:
    cfg, seed, out_dir = args
    return run_and_write(cfg, seed, out_dir)


def _job(args) -> RunSummary:
    cfg, label, weights, seed = args
    _, record = execute(cfg, seed, weights)
    full = [t.weight for t in cfg.criterion.terms]
    return summarize_run(label, seed, record, full)


def _map(jobs: list, n_workers: int, fn=_job) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(fn, jobs))


def aggregate(runs: Iterable[RunSummary], term_names: Sequence[str]) -> dict:
    """label -> term -> mean initial/final, change and percent of runs with strict improvement."""
    by_label: dict = {}
    for r in runs:
        by_label.setdefault(r.label, []).append(r)
    out = {}
    for label, rs in by_label.items():
        stats = {}
        for term in term_names:
            ini = np.array([r.initial[term] for r in rs])
            fin = np.array([r.final[term] for r in rs])
            stats[term] = {
                "initial": float(ini.mean()),
                "final": float(fin.mean()),
                "change": float((fin - ini).mean()),
                "improve_pct": 100.0 * float(np.mean(fin > ini)),
            }
        ini = np.array([r.full_initial for r in rs])
        fin = np.array([r.full_final for r in rs])
        stats["_full"] = {
            "initial": float(ini.mean()),
            "final": float(fin.mean()),
            "change": float((fin - ini).mean()),
            "improve_pct": 100.0 * float(np.mean(fin > ini)),
        }
        out[label] = stats
    return out


def _seeds(cfg: ExperimentConfig, n_seeds: Optional[int]) -> list:
    n = cfg.optimizer.n_seeds if n_seeds is None else n_seeds
    if n < 1:
        raise ValueError("n_seeds must be >= 1")
    return [cfg.optimizer.seed + i for i in range(n)]


def _result(kind: str, cfg: ExperimentConfig, runs: list) -> StudyResult:
    names = cfg.criterion.names
    return StudyResult(kind, names, runs, aggregate(runs, names))


def run_sweep(cfg: ExperimentConfig, n_seeds: Optional[int] = None, jobs: int = 1,
              out_dir=None) -> StudyResult:
    """Full-criterion runs over seeds; with ``out_dir`` each seed writes ``seed_<k>/``."""
    seeds = _seeds(cfg, n_seeds)
    if out_dir is None:
        runs = _map([(cfg, "all", None, s) for s in seeds], jobs)
    else:
        runs = _map([(cfg, s, Path(out_dir) / f"seed_{s}") for s in seeds], jobs, _write_job)
    return _result("sweep", cfg, runs)


def run_leave_one_out(cfg: ExperimentConfig, held_out: Union[str, Sequence[str]],
                      n_seeds: Optional[int] = None, jobs: int = 1) -> StudyResult:
    """Optimize with each held-out term's weight set to 0 and track that term.

    The label of each run is the held-out term's name. The same seeds are used
    for every held-out term, so initial values are paired across labels.
    """
    held = [held_out] if isinstance(held_out, str) else list(held_out)
    names = cfg.criterion.names
    for h in held:
        if h not in names:
            raise KeyError(f"unknown reward term {h!r}; have {names}")
    seeds = _seeds(cfg, n_seeds)
    jobs_ = [(cfg, h, {h: 0.0}, s) for h in held for s in seeds]
    return _result("loo", cfg, _map(jobs_, jobs))


def singleton_and_full_masks(names: Sequence[str]) -> list:
    return [(n,) for n in names] + [tuple(names)]


def all_nonempty_masks(names: Sequence[str]) -> list:
    return [m for k in range(1, len(names) + 1) for m in itertools.combinations(names, k)]


def run_reward_ablation(cfg: ExperimentConfig, masks: Sequence[Sequence[str]],
                        n_seeds: Optional[int] = None, jobs: int = 1) -> StudyResult:
    """One run per (mask, seed), optimizing only the terms in the mask.

    Runs with the same seed start from the same initial noise across masks.
    The label of each run is its mask joined with ``+``.
    """
    names = cfg.criterion.names
    masks = [tuple(m) for m in masks]
    if not masks:
        raise ValueError("at least one mask is required")
    for m in masks:
        if not m:
            raise ValueError("masks must be non-empty")
        unknown = set(m) - set(names)
        if unknown:
            raise KeyError(f"unknown reward term(s) {sorted(unknown)}; have {names}")
    seeds = _seeds(cfg, n_seeds)
    jobs_ = [(cfg, "+".join(m), {n: 0.0 for n in names if n not in m}, s) for m in masks for s in seeds]
    return _result("ablation", cfg, _map(jobs_, jobs))
