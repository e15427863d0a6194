"""Seeded multi-trial experiment sweeps with CSV output.

A sweep is described by a JSON document::

    {
      "name": "fig1",
      "mechanisms": ["dpds", {"name": "dpdg", "delta": 1e-7}],
      "grid": {"epsilon": [0.1, 0.2, 0.5, 1.0]},
      "trials": 20,
      "seed": 42,
      "dataset": {"synthetic": "checkins", "n_users": 1200, "seed": 7},
      "n": 1000
    }

Keys
  mechanisms   list of names (``dpcs``, ``dpds``, ``dpdg``, ``tss``,
               ``tss_prime``) or objects with ``name`` plus per-mechanism
               overrides (``delta``, ``alpha``, ``chi``, ``gamma``, ``phi``,
               ``distributed``, ``label``).
  grid         ordered mapping from a parameter (``epsilon``, ``n``, ``p``,
               ``alpha``, ``gamma``, ``chi``, ``phi`` or ``groups``) to the
               values swept; the cartesian product is run.
  trials, seed repetitions per grid point and master seed (default 42).
  dataset      ``{"path": ...}`` (canonical format) or ``{"synthetic":
               "uniform" | "normal" | "checkins", ...generator kwargs}``.
  n            users drawn (without replacement) from the dataset when
               ``n`` is not swept.
  delta        ``"thm1"`` (default) to derive delta for the sampling
               mechanisms from the data's smallest item fraction, or a
               number.
  beta         optional assumed minimum item fraction; overrides the
               data-derived value and is checked against the data.
  gaussian_delta  default delta of ``dpdg`` (1e-7).
  engine       ``"centralized"`` (default) uses the plaintext counterparts,
               which produce estimates identical to the protocols for the
               same seed; ``"protocol"`` runs the message-level simulation.
  groups       privacy budgets of the groups for weighted aggregation
               (a list, or swept through ``grid.groups``) with
               ``group_sizes``; ``aggregations`` picks among ``vwa``,
               ``owa``, ``uwa`` and ``cpa``.
  workers      process pool size for the trials (default 1).

Trial ``t`` of grid point ``g`` uses master seed ``derive_seed(seed, g, t)``
for every mechanism, so mechanisms at one grid point see common random
numbers.  Output order is grid point, then mechanism, then trial.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import streams
from .datasets import Dataset, load_dataset, synth_checkin_dataset, synth_normal, synth_uniform
from .mechanisms import (
    InfeasibleCalibration,
    MechanismParams,
    calibrate_p_thm1,
    dpcs,
    dpdg,
    gaussian_params,
    min_delta_thm1,
    two_stage_sample,
)
from .metrics import mse
from .protocols import run_dpds, run_tss, run_tss_prime
from .weighting import closed_form_weights, combine, GroupReport, optimize_weights, sampling_group_variance, unweighted

__all__ = [
    "MECHANISMS",
    "AGGREGATIONS",
    "ConfigError",
    "MechanismSpec",
    "ExperimentConfig",
    "ResultRow",
    "run_experiment",
    "write_csv",
    "write_trials_csv",
    "format_number",
]

log = logging.getLogger(__name__)

MECHANISMS = ("dpcs", "dpds", "dpdg", "tss", "tss_prime")
AGGREGATIONS = ("vwa", "owa", "uwa", "cpa")
GRID_KEYS = ("epsilon", "n", "p", "alpha", "gamma", "chi", "phi", "groups")
_MECH_OPTIONS = {"delta", "alpha", "chi", "gamma", "phi", "distributed", "label"}
_SUBSAMPLE_KEY = 1_000_003
_PARTITION_KEY = 1_000_004


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MechanismSpec:
    name: str
    options: Tuple[Tuple[str, object], ...] = ()

    @property
    def opts(self) -> dict:
        return dict(self.options)

    @property
    def label(self) -> str:
        return self.opts.get("label", self.name)


@dataclass(frozen=True)
class ExperimentConfig:
    mechanisms: Tuple[MechanismSpec, ...]
    grid: Tuple[Tuple[str, tuple], ...]
    trials: int = 20
    seed: int = streams.DEFAULT_SEED
    dataset: Tuple[Tuple[str, object], ...] = (("synthetic", "uniform"), ("n", 1000), ("N", 30))
    n: Optional[int] = None
    delta: object = "thm1"
    beta: Optional[float] = None
    gaussian_delta: float = 1e-7
    epsilon: Optional[float] = None
    p: Optional[float] = None
    alpha: float = 1.0
    gamma: float = 1.0
    chi: str = "uniform"
    phi: int = 0
    engine: str = "centralized"
    groups: Optional[Tuple[float, ...]] = None
    group_sizes: Optional[Tuple[int, ...]] = None
    aggregations: Tuple[str, ...] = AGGREGATIONS
    workers: int = 1
    name: str = "experiment"

    def __post_init__(self):
        if not self.mechanisms:
            raise ConfigError("at least one mechanism is required")
        for m in self.mechanisms:
            if m.name not in MECHANISMS:
                raise ConfigError(f"unknown mechanism {m.name!r}; choose from {MECHANISMS}")
            bad = set(m.opts) - _MECH_OPTIONS
            if bad:
                raise ConfigError(f"unknown options {sorted(bad)} for {m.name}")
        if not self.grid or any(not values for _, values in self.grid):
            raise ConfigError("grid must contain at least one non-empty parameter list")
        for key, _ in self.grid:
            if key not in GRID_KEYS:
                raise ConfigError(f"cannot sweep {key!r}; choose from {GRID_KEYS}")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.engine not in ("centralized", "protocol"):
            raise ConfigError("engine must be 'centralized' or 'protocol'")
        if not (self.delta == "thm1" or isinstance(self.delta, (int, float))):
            raise ConfigError("delta must be 'thm1' or a number")
        bad = set(self.aggregations) - set(AGGREGATIONS)
        if bad:
            raise ConfigError(f"unknown aggregations {sorted(bad)}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @property
    def grid_keys(self) -> Tuple[str, ...]:
        return tuple(k for k, _ in self.grid)

    @property
    def weighted(self) -> bool:
        return self.groups is not None or "groups" in self.grid_keys

    def points(self) -> List[Dict[str, object]]:
        keys = self.grid_keys
        return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in self.grid))]

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        mechs = []
        for m in doc.pop("mechanisms", None) or doc.pop("mechanism", None) or []:
            if isinstance(m, str):
                mechs.append(MechanismSpec(m))
            elif isinstance(m, dict) and "name" in m:
                opts = {k: v for k, v in m.items() if k != "name"}
                mechs.append(MechanismSpec(m["name"], tuple(sorted(opts.items()))))
            else:
                raise ConfigError(f"bad mechanism entry {m!r}")
        grid = doc.pop("grid", None)
        if not isinstance(grid, dict):
            raise ConfigError("grid must be an object mapping parameters to value lists")
        grid_t = tuple(
            (k, tuple(tuple(x) if isinstance(x, list) else x for x in v)) for k, v in grid.items()
        )
        if "dataset" in doc:
            if not isinstance(doc["dataset"], dict):
                raise ConfigError("dataset must be an object")
            doc["dataset"] = tuple(sorted(doc["dataset"].items()))
        for key in ("groups", "group_sizes", "aggregations"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        try:
            return cls(mechanisms=tuple(mechs), grid=grid_t, **doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)


@dataclass(frozen=True)
class ResultRow:
    coords: Tuple[Tuple[str, object], ...]
    mechanism: str
    delta: Optional[float]
    per_trial: Tuple[float, ...]
    mean_mse: float
    predicted: Optional[float]
    error: Optional[str] = None

    @property
    def coord(self) -> dict:
        return dict(self.coords)


# ---------------------------------------------------------------------------
# dataset and parameter resolution


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    spec = dict(cfg.dataset)
    if "path" in spec:
        return load_dataset(spec["path"])
    kind = spec.pop("synthetic", "uniform")
    seed = spec.pop("seed", cfg.seed)
    if kind == "uniform":
        return synth_uniform(spec.get("n", 1000), spec.get("N", 30), seed)
    if kind == "normal":
        return synth_normal(spec.get("n", 1000), spec.get("N", 30), seed)
    if kind == "checkins":
        return synth_checkin_dataset(spec.get("n_users", 1000), seed)
    raise ConfigError(f"unknown synthetic dataset {kind!r}")


def _data_for(cfg: ExperimentConfig, base: Dataset, point: dict) -> Dataset:
    n = point.get("n", cfg.n)
    if n is None or n == base.n:
        return base
    return base.subsample(int(n), streams.derive_seed(cfg.seed, _SUBSAMPLE_KEY, int(n)))


def _setting(cfg: ExperimentConfig, mech: MechanismSpec, point: dict) -> dict:
    s = {
        "epsilon": cfg.epsilon, "p": cfg.p, "alpha": cfg.alpha, "gamma": cfg.gamma,
        "chi": cfg.chi, "phi": cfg.phi, "groups": cfg.groups,
    }
    s.update({k: v for k, v in point.items() if k != "n"})
    s.update({k: v for k, v in mech.opts.items() if k not in ("label", "delta", "distributed")})
    s["delta"] = mech.opts.get("delta")
    s["distributed"] = bool(mech.opts.get("distributed", False))
    return s


def _sampling_p(s: dict) -> float:
    if s["p"] is not None:
        return float(s["p"])
    if s["epsilon"] is None:
        raise ConfigError("sampling mechanisms need epsilon or p")
    return calibrate_p_thm1(float(s["epsilon"]))


def _sampling_delta(cfg: ExperimentConfig, data: Dataset, s: dict) -> Optional[float]:
    if s["delta"] is not None:
        return float(s["delta"])
    if cfg.delta != "thm1":
        return float(cfg.delta)
    if s["epsilon"] is None:
        return None
    beta = data.min_item_fraction()
    if cfg.beta is not None:
        if beta < cfg.beta:
            log.warning("data violate beta=%g: smallest item fraction is %g", cfg.beta, beta)
        beta = cfg.beta
    if beta <= 0:
        raise InfeasibleCalibration("some item has no holder, so beta = 0")
    return min_delta_thm1(data.n, data.N, float(s["epsilon"]), beta)


# ---------------------------------------------------------------------------
# single trials (top-level so they can be sent to worker processes)


def _estimate(name: str, s: dict, data: Dataset, seed: int, engine: str):
    """Returns the normalized estimate for one mechanism run."""
    if name in ("dpcs", "dpds"):
        p = _sampling_p(s)
        if name == "dpds" and engine == "protocol":
            return run_dpds(data, p, seed).estimate.normalized
        return dpcs(data, p, streams.coin_stream(seed)).normalized
    if name == "dpdg":
        return dpdg(data, float(s["epsilon"]), float(s["delta"]),
                    streams.stream(seed, streams.NOISE), distributed=s["distributed"]).normalized
    params = MechanismParams(p=_sampling_p(s), alpha=float(s["alpha"]), chi=s["chi"],
                             gamma=float(s["gamma"]), phi=int(s["phi"]))
    if engine == "protocol":
        runner = run_tss_prime if name == "tss_prime" else run_tss
        return runner(data, params, seed).estimate.normalized
    return two_stage_sample(data, params, streams.coin_stream(seed))[0].normalized


def _predicted(name: str, s: dict, data: Dataset) -> float:
    n, N = data.n, data.N
    if name == "dpdg":
        return gaussian_params(n, float(s["epsilon"]), float(s["delta"])).per_coord_variance
    p = _sampling_p(s)
    if name in ("tss", "tss_prime"):
        p *= MechanismParams(alpha=float(s["alpha"]), chi=s["chi"], gamma=float(s["gamma"])).p_chi
    return (1 - p) / (p * n * N)


def _trial(task):
    kind, name, s, items, N, seed, engine, extra = task
    data = Dataset("trial", N, items)
    truth = data.frequencies()
    if kind == "single":
        return (mse(truth, _estimate(name, s, data, seed, engine)),)
    # weighted: extra = (partition index arrays, aggregations)
    parts, aggs = extra
    eps = np.asarray(s["groups"], dtype=float)
    reports = []
    for g, idx in enumerate(parts):
        gs = dict(s, epsilon=float(eps[g]), p=None)
        est = _estimate(name, gs, data.take(idx), streams.derive_seed(seed, g), engine)
        reports.append(GroupReport(g, float(eps[g]), len(idx), est, float(sampling_group_variance(eps[g]))))
    out = []
    for agg in aggs:
        out.append(mse(truth, _aggregate(agg, reports)))
    return tuple(out)


def _aggregate(agg: str, reports: List[GroupReport]) -> np.ndarray:
    variances = [r.variance for r in reports]
    if agg == "vwa":
        return combine(reports, closed_form_weights(variances))
    if agg == "owa":
        return combine(reports, optimize_weights([r.n for r in reports], variances))
    if agg == "uwa":
        return combine(reports, unweighted(len(reports)))
    smallest = min(range(len(reports)), key=lambda j: reports[j].epsilon)
    return reports[smallest].estimate


def _weights_for(agg: str, sizes, variances):
    if agg == "vwa":
        return np.asarray(closed_form_weights(variances))
    if agg == "owa":
        return np.asarray(optimize_weights(sizes, variances))
    return np.asarray(unweighted(len(sizes)))


def _predicted_weighted(agg: str, s: dict, data: Dataset, parts) -> float:
    """Sampling variance plus the exact squared gap between the pooled group
    histograms and the full population's histogram (the partition is fixed)."""
    eps = np.asarray(s["groups"], dtype=float)
    p = -np.expm1(-eps)
    sizes = np.array([len(ix) for ix in parts], dtype=float)
    group_total = (1 - p) / (p * sizes)
    hists = np.stack([data.take(ix).frequencies() for ix in parts])
    truth = data.frequencies()
    if agg == "cpa":
        c = (np.arange(len(parts)) == int(np.argmin(eps))).astype(float)
    else:
        w = _weights_for(agg, sizes, sampling_group_variance(eps))
        c = w * sizes / np.sum(w * sizes)
    gap = float(np.sum((c @ hists - truth) ** 2))
    return float((np.sum(c * c * group_total) + gap) / data.N)


def _partition(cfg: ExperimentConfig, data: Dataset, n_groups: int) -> Tuple[np.ndarray, ...]:
    sizes = cfg.group_sizes
    if sizes is None:
        base, extra = divmod(data.n, n_groups)
        sizes = tuple(base + (1 if g < extra else 0) for g in range(n_groups))
    if len(sizes) != n_groups:
        raise ConfigError("group_sizes must list one size per group")
    if sum(sizes) > data.n:
        raise ConfigError(f"group sizes sum to {sum(sizes)} > {data.n} users")
    perm = streams.stream(streams.derive_seed(cfg.seed, _PARTITION_KEY)).permutation(data.n)
    bounds = np.cumsum((0,) + tuple(sizes))
    return tuple(np.sort(perm[bounds[g]:bounds[g + 1]]) for g in range(n_groups))


# ---------------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, base: Optional[Dataset] = None) -> List[ResultRow]:
    """Run every grid point, mechanism and trial; rows come back in config order."""
    base = base if base is not None else _load_dataset(cfg)
    plans = []  # (coords, label, delta, predicted, tasks, error)
    for g, point in enumerate(cfg.points()):
        data = _data_for(cfg, base, point)
        coords = tuple(point.items())
        seeds = [streams.derive_seed(cfg.seed, g, t) for t in range(cfg.trials)]
        for mech in cfg.mechanisms:
            s = _setting(cfg, mech, point)
            try:
                if mech.name == "dpdg":
                    if s["delta"] is None:
                        s["delta"] = cfg.gaussian_delta
                    if s["epsilon"] is None:
                        raise ConfigError("dpdg needs epsilon")
                    delta = float(s["delta"])
                else:
                    delta = _sampling_delta(cfg, data, s)
            except InfeasibleCalibration as exc:
                plans.append((coords, mech.label, None, None, [], f"infeasible: {exc}"))
                continue
            if cfg.weighted and s.get("groups") is not None:
                if mech.name == "dpdg":
                    raise ConfigError("weighted aggregation is defined for the sampling mechanisms")
                parts = _partition(cfg, data, len(s["groups"]))
                tasks = [("weighted", mech.name, s, data.items, data.N, sd, cfg.engine, (parts, cfg.aggregations))
                         for sd in seeds]
                preds = [_predicted_weighted(a, s, data, parts) for a in cfg.aggregations]
                labels = [f"{mech.label}+{a}" for a in cfg.aggregations]
                plans.append((coords, labels, delta, preds, tasks, None))
            else:
                tasks = [("single", mech.name, s, data.items, data.N, sd, cfg.engine, None) for sd in seeds]
                plans.append((coords, mech.label, delta, _predicted(mech.name, s, data), tasks, None))

    all_tasks = [t for plan in plans for t in plan[4]]
    if cfg.workers > 1 and len(all_tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_trial, all_tasks, chunksize=max(1, len(all_tasks) // (4 * cfg.workers))))
    else:
        results = [_trial(t) for t in all_tasks]

    rows: List[ResultRow] = []
    pos = 0
    for coords, label, delta, pred, tasks, error in plans:
        if error is not None:
            rows.append(ResultRow(coords, label, None, (), math.nan, None, error))
            continue
        chunk = results[pos:pos + len(tasks)]
        pos += len(tasks)
        if isinstance(label, list):
            for k, (lab, pr) in enumerate(zip(label, pred)):
                per = tuple(r[k] for r in chunk)
                rows.append(ResultRow(coords, lab, delta, per, float(np.mean(per)), pr))
        else:
            per = tuple(r[0] for r in chunk)
            rows.append(ResultRow(coords, label, delta, per, float(np.mean(per)), pred))
    return rows


# ---------------------------------------------------------------------------
# CSV output


def format_number(x) -> str:
    """Locale-free formatting; scientific notation below 1e-4."""
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (tuple, list)):
        return ";".join(format_number(v) for v in x)
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    if x != 0 and abs(x) < 1e-4:
        return f"{x:.6e}"
    return f"{x:.10g}"


def write_csv(rows: Sequence[ResultRow], grid_keys: Sequence[str], fh=None) -> str:
    """Header: grid keys, then ``mechanism,delta,mean_mse,predicted``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(grid_keys) + ["mechanism", "delta", "mean_mse", "predicted"])
    for r in rows:
        coord = r.coord
        delta = "infeasible" if r.error else format_number(r.delta)
        w.writerow([format_number(coord.get(k)) for k in grid_keys]
                   + [r.mechanism, delta, format_number(r.mean_mse), format_number(r.predicted)])
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def write_trials_csv(rows: Sequence[ResultRow], grid_keys: Sequence[str], fh=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(grid_keys) + ["mechanism", "trial", "mse"])
    for r in rows:
        coord = r.coord
        for t, v in enumerate(r.per_trial):
            w.writerow([format_number(coord.get(k)) for k in grid_keys] + [r.mechanism, t, format_number(v)])
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text
