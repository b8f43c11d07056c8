"""Replicated simulation runs, per-replicate reports and aggregate tables.

A run is described by an :class:`ExperimentConfig` loaded from a flat JSON
document (see ``README.md`` for the schema).  Every method sees only the
observed arms ``(Z0, Z1, Z0')``; the oracle arm is used for evaluation alone.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .baselines import gensynth, matchsynth, twfe_synth
from .core import Dataset, ensure_not_oracle, save_dataset
from .dgp import ScenarioSpec, make_environment
from .evalmetrics import METRICS, EvalReport, full_report
from .metricmodel import AlignmentKernelSpec
from .ottml import OttmlConfig, fit_ottml
from .synth import SynthConfig, generate_dataset

log = logging.getLogger(__name__)

METHODS = ("otsynth-linear", "otsynth-net", "twfe", "matchsynth", "gensynth")
SUMMARY_COLUMNS = ("mean", "std_dev", "q1", "q2", "q3")
# outcome-level and joint columns of the distance tables, then the extra diagnostics
DISTANCE_COLUMNS = ("W1-Y", "Hellinger-Y", "KL-Y", "Energy-Z", "SlicedW1-Z",
                    "TV-Y", "ProjTV-Z", "ProjHellinger-Z", "ProjKL-Z", "MMD2-Z")


@dataclass(frozen=True)
class ExperimentConfig:
    scenarios: tuple = (1,)
    R: int = 5
    n0: int = 500
    n1: int = 250
    n0prime: int = 500
    n1prime: int = 250
    methods: tuple = ("otsynth-linear", "twfe", "matchsynth", "gensynth")
    ottml: OttmlConfig = field(default_factory=OttmlConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    kernel: AlignmentKernelSpec = field(default_factory=AlignmentKernelSpec)
    gensynth_r: int = 2
    kappa: float = 3.0
    tau: float = 10.0
    seed: int = 0
    eval_seed: int = 0
    output_dir: str = "otsynth-out"
    workers: int = 1

    def __post_init__(self):
        if int(self.R) < 1:
            raise ValueError("R must be >= 1")
        methods = tuple(self.methods)
        if not methods:
            raise ValueError("methods must be nonempty")
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown method {bad[0]!r}; choose from {', '.join(METHODS)}")
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "scenarios", tuple(int(s) for s in np.atleast_1d(self.scenarios)))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown config key {sorted(extra)[0]!r}")
        doc = dict(doc)
        if "ottml" in doc:
            doc["ottml"] = OttmlConfig(**doc["ottml"])
        if "synth" in doc:
            doc["synth"] = SynthConfig(**doc["synth"])
        if "kernel" in doc:
            doc["kernel"] = AlignmentKernelSpec(**doc["kernel"])
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = os.fspath(path)
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ValueError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["scenarios"] = list(self.scenarios)
        doc["methods"] = list(self.methods)
        doc["kernel"] = self.kernel.to_dict()
        return doc

    def scenario_spec(self, scenario_id: int, replicate: int) -> ScenarioSpec:
        # model and site map fixed per scenario; samples redrawn per replicate
        return ScenarioSpec(scenario_id, None, self.n0, self.n1, self.n0prime, self.n1prime,
                            self.kappa, self.tau, seed=self.seed + replicate, model_seed=self.seed)


def run_method(method: str, Z0: Dataset, Z1: Dataset, Z0prime: Dataset,
               config: ExperimentConfig) -> tuple[Dataset, dict]:
    """Produce the synthetic target-treatment sample of one method."""
    ensure_not_oracle(Z0, Z1, Z0prime)
    info: dict = {}
    if method in ("otsynth-linear", "otsynth-net"):
        kind = "affine" if method == "otsynth-linear" else "net"
        res = fit_ottml(Z0, Z0prime, config.kernel, config.ottml, model=kind)
        out, diags = generate_dataset(Z1, res, Z0, Z0prime, config.synth, return_diagnostics=True)
        info = {"converged": res.converged, "objective_trace": res.objective_trace,
                "outer_iterations": res.diagnostics["outer_iterations"],
                "synth_mean_loss": float(np.mean([d["loss"] for d in diags]))}
        return out, info
    if method == "twfe":
        return twfe_synth(Z0, Z1, Z0prime), info
    if method == "matchsynth":
        return matchsynth(Z0, Z1, Z0prime, info), info
    if method == "gensynth":
        return gensynth(Z0, Z1, Z0prime, config.gensynth_r), info
    raise ValueError(f"unknown method {method!r}")


def run_replicate(config: ExperimentConfig, scenario_id: int, replicate: int) -> dict:
    env = make_environment(config.scenario_spec(scenario_id, replicate))
    rep_dir = os.path.join(config.output_dir, f"scenario{scenario_id}", f"rep{replicate:03d}")
    os.makedirs(rep_dir, exist_ok=True)
    record = {"scenario": scenario_id, "replicate": replicate,
              "spec": asdict(env.spec), "methods": {}}
    for method in config.methods:
        t0 = time.perf_counter()
        try:
            synth, info = run_method(method, *env.observed(), config)
            report = full_report(synth, env.Z1prime_oracle, seed=config.eval_seed)
            save_dataset(synth, os.path.join(rep_dir, f"{method}.csv"))
            entry = {"status": "ok", "report": report.to_dict(), "info": info}
        except Exception as exc:
            log.error("scenario %d replicate %d method %s failed: %s", scenario_id, replicate, method, exc)
            entry = {"status": "failed", "error": f"{type(exc).__name__}: {exc}",
                     "traceback": traceback.format_exc()}
        entry["seconds"] = time.perf_counter() - t0
        record["methods"][method] = entry
    with open(os.path.join(rep_dir, "report.json"), "w") as fh:
        json.dump(record, fh, indent=1)
    return record


@dataclass
class AggregateTable:
    """``rows[(scenario, method)] = {column: (mean, se)}`` plus success counts."""

    columns: tuple
    rows: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def value(self, scenario, method, column) -> float:
        return self.rows[(scenario, method)][column][0]


def aggregate(reports: list) -> dict:
    """Mean and standard error (sample sd / sqrt(R)) of every metric over replicates."""
    if not reports:
        raise ValueError("no reports to aggregate")
    flats = [r.flat() if isinstance(r, EvalReport) else dict(r) for r in reports]
    names = list(flats[0])
    for f in flats[1:]:
        diff = set(names) ^ set(f)
        if diff:
            raise ValueError(f"reports disagree on metric {sorted(diff)[0]!r}")
    out = {}
    R = len(flats)
    for name in names:
        vals = np.array([f[name] for f in flats], dtype=float)
        se = float(np.std(vals, ddof=1) / np.sqrt(R)) if R > 1 else 0.0
        out[name] = (float(vals.mean()), se)
    return out


def _table_columns():
    cols = [f"synthetic-{c}" for c in SUMMARY_COLUMNS] + [f"oracle-{c}" for c in SUMMARY_COLUMNS]
    return tuple(cols) + DISTANCE_COLUMNS


def build_table(records: list, methods) -> AggregateTable:
    table = AggregateTable(_table_columns())
    scen = sorted({r["scenario"] for r in records})
    for sid in scen:
        for method in methods:
            entries = [r["methods"][method] for r in records
                       if r["scenario"] == sid and method in r["methods"]]
            ok = [e for e in entries if e["status"] == "ok"]
            table.counts[(sid, method)] = (len(ok), len(entries) - len(ok))
            if ok:
                flats = []
                for e in ok:
                    d = e["report"]
                    flat = {f"synthetic-{k}": v for k, v in d["synthetic"].items()}
                    flat.update({f"oracle-{k}": v for k, v in d["oracle"].items()})
                    flat.update(d["distances"])
                    flats.append(flat)
                table.rows[(sid, method)] = aggregate(flats)
    return table


def write_table(table: AggregateTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["scenario", "method", "n_ok", "n_failed"]
        for c in table.columns:
            header += [f"{c}", f"{c}-se"]
        w.writerow(header)
        for (sid, method), (n_ok, n_fail) in table.counts.items():
            row = [sid, method, n_ok, n_fail]
            stats = table.rows.get((sid, method))
            for c in table.columns:
                if stats is None:
                    row += ["", ""]
                else:
                    m, se = stats[c]
                    row += [repr(round(m, 10)), repr(round(se, 10))]
            w.writerow(row)


def _task(args):
    config, sid, rep = args
    return run_replicate(config, sid, rep)


def run_experiment(config: ExperimentConfig) -> AggregateTable:
    os.makedirs(config.output_dir, exist_ok=True)
    with open(os.path.join(config.output_dir, "config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
    tasks = [(config, sid, rep) for sid in config.scenarios for rep in range(config.R)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(_task, tasks))
    else:
        records = [_task(t) for t in tasks]
    table = build_table(records, config.methods)
    write_table(table, os.path.join(config.output_dir, "aggregate.csv"))
    return table
