"""Experiment runner: chunked pooled screening over a sweep of prevalences.

Every random draw comes from a stream keyed by (run seed, prevalence, purpose,
chunk), so results do not depend on evaluation order or worker count.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.stats import binom

from . import __version__
from .cs import DEFAULT_LAMBDA_GRID, DEFAULT_TAU_GRID, DecoderConfig, grid_search
from .decoders import decode
from .errors import ConfigError, DimensionMismatch
from .gt import dorfman_decode, optimal_dorfman_pool_size
from .matrix import PoolingMatrix, construct_balanced
from .oracle import ConfusionModel, exact_counts, sample_population, spawn_rng

DEFAULT_PREVALENCES = (0.001, 0.002, 0.005, 0.01, 0.02, 0.03, 0.04, 0.05, 0.1)
METHODS = ("classo", "mip", "comp", "ncomp", "dorfman", "individual")
RESULT_COLUMNS = ("method", "p", "seed", "sensitivity", "specificity",
                  "cost_per_item", "tests_used", "wall_seconds")
COUNT_COLUMNS = ("method", "p", "seed", "tp", "fp", "tn", "fn", "failed_chunks", "lam", "tau")


# ---------------------------------------------------------------- config

@dataclass
class OutlierSettings:
    d: int = 64
    n_modes: int = 3
    mode_scale: float = 4.0
    spread: float = 1.0
    separation: float = 7.0
    K: int = 3
    Q: int = 500
    t: int = 5
    n_train: int = 4000
    n_calib: int = 10_000
    covariance_type: str = "full"
    seed: int = 0


@dataclass
class ExperimentConfig:
    n: int = 100
    m: int = 50
    r: int = 8
    c: int = 4
    matrix_seed: int = 0
    prevalences: list = field(default_factory=lambda: list(DEFAULT_PREVALENCES))
    population_size: int = 100_000
    sampling: str = "fixed"
    confusion: dict = field(default_factory=lambda: {"kind": "tridiagonal", "p_correct": 0.9, "p_off": 0.05})
    binary_confusion: list | None = None
    item_confusion: list | None = None
    methods: list = field(default_factory=lambda: list(METHODS))
    ncomp_t: int = 2
    dorfman_g: int | None = None
    decoder: dict = field(default_factory=dict)
    grid_search: bool = True
    lambda_grid: list = field(default_factory=lambda: list(DEFAULT_LAMBDA_GRID))
    tau_grid: list = field(default_factory=lambda: list(DEFAULT_TAU_GRID))
    validation_size: int = 20_000
    mode: str = "classification"
    outlier: dict = field(default_factory=dict)
    alpha: float = 0.22
    repeats: int = 1
    master_seed: int = 0
    record_wall_time: bool = False
    dump_verdicts: bool = False
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def bad(msg):
            raise ConfigError(msg)

        if self.n * self.c != self.m * self.r:
            bad(f"n*c = {self.n * self.c} must equal m*r = {self.m * self.r}")
        if not self.prevalences or any(not 0 <= p <= 1 for p in self.prevalences):
            bad("prevalences must be a non-empty list of values in [0, 1]")
        if self.population_size < 1:
            bad("population_size must be positive")
        if self.sampling not in ("fixed", "binomial"):
            bad("sampling must be 'fixed' or 'binomial'")
        if self.mode not in ("classification", "outlier"):
            bad("mode must be 'classification' or 'outlier'")
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            bad(f"unknown methods {sorted(unknown)}; choose from {list(METHODS)}")
        if not 0 <= self.alpha <= 1:
            bad("alpha must lie in [0, 1]")
        if self.repeats < 1 or self.workers < 1:
            bad("repeats and workers must be >= 1")
        if not 0 <= self.ncomp_t < self.c:
            bad("ncomp_t must lie in [0, c)")
        if self.dorfman_g is not None and self.dorfman_g < 1:
            bad("dorfman_g must be >= 1")
        if self.confusion.get("kind") not in ("tridiagonal", "identity", "matrix", "csv"):
            bad("confusion.kind must be tridiagonal, identity, matrix or csv")
        for name in ("binary_confusion", "item_confusion"):
            v = getattr(self, name)
            if v is not None and (len(v) != 2 or any(not 0 <= e <= 1 for e in v)):
                bad(f"{name} must be [false_positive, false_negative]")
        try:
            self.decoder_config()
            self.outlier_settings()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(**self.decoder)

    def outlier_settings(self) -> OutlierSettings:
        return OutlierSettings(**self.outlier)

    def confusion_model(self) -> ConfusionModel:
        spec = self.confusion
        kind = spec["kind"]
        try:
            if kind == "identity":
                return ConfusionModel.identity(self.r)
            if kind == "tridiagonal":
                return ConfusionModel.tridiagonal(self.r, spec.get("p_correct", 0.9), spec.get("p_off", 0.05))
            if kind == "matrix":
                cm = ConfusionModel(spec["matrix"])
            else:
                cm = ConfusionModel.from_csv(spec["path"])
        except (KeyError, ValueError, OSError) as exc:
            raise ConfigError(f"bad confusion settings: {exc}") from exc
        if cm.r != self.r:
            raise ConfigError(f"confusion matrix must be {self.r + 1}x{self.r + 1}")
        return cm

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def default_sweep(cls) -> "ExperimentConfig":
        return cls(dorfman_g=8)


# ---------------------------------------------------------------- metrics and cost

@dataclass
class Confusion:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def sensitivity(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def specificity(self) -> float | None:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else None


def confusion_counts(truth, predicted) -> Confusion:
    truth = np.asarray(truth).astype(bool).ravel()
    predicted = np.asarray(predicted).astype(bool).ravel()
    if truth.shape != predicted.shape:
        raise DimensionMismatch(f"truth has {truth.size} entries, prediction {predicted.size}")
    return Confusion(tp=int((truth & predicted).sum()), fp=int((~truth & predicted).sum()),
                     tn=int((~truth & ~predicted).sum()), fn=int((truth & ~predicted).sum()))


def compute_metrics(truth, predicted) -> tuple[float | None, float | None]:
    """(sensitivity, specificity); None where the class is absent from the truth."""
    cc = confusion_counts(truth, predicted)
    return cc.sensitivity, cc.specificity


@dataclass(frozen=True)
class CostModel:
    """Per-item compute in units of one full individual pass.

    ``alpha`` is the share spent on the per-item stages before features are
    pooled; the rest runs once per pool.
    """

    alpha: float = 0.22
    individual: float = 1.0
    od_scoring: float = 0.0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")


def cost_per_item(method: str, cm: CostModel, m_over_n: float = 0.5, g: int | None = None,
                  flagged_fraction: float = 0.0) -> float:
    base = method.removesuffix("-od")
    extra = cm.od_scoring if method.endswith("-od") else 0.0
    if base == "individual":
        return cm.individual + extra
    if base in ("classo", "mip", "comp", "ncomp"):
        return cm.alpha + (1 - cm.alpha) * m_over_n + extra
    if base == "dorfman":
        if not g:
            raise ValueError("Dorfman cost needs the group size g")
        return (cm.alpha * g + (1 - cm.alpha)) / g + flagged_fraction * cm.individual + extra
    raise ValueError(f"unknown method {method!r}")


def expected_pool_positive_rate(p: float, g: int, cm: ConfusionModel) -> float:
    """P(a group of g items is reported positive) when each item is defective w.p. p."""
    k = np.arange(g + 1)
    return float(binom.pmf(k, g, p) @ cm.positive_rate(k))


def expected_dorfman_cost(p: float, g: int, confusion: ConfusionModel, cost: CostModel) -> float:
    """Model Dorfman cost: every item of a flagged group is retested individually."""
    return cost_per_item("dorfman", cost, g=g,
                         flagged_fraction=expected_pool_positive_rate(p, g, confusion))


# ---------------------------------------------------------------- running

@dataclass
class RunRecord:
    method: str
    p: float
    seed: int
    counts: Confusion
    cost_per_item: float
    tests_used: int
    failed_chunks: int = 0
    wall_seconds: float | None = None
    lam: float | None = None
    tau: float | None = None

    @property
    def sensitivity(self):
        return self.counts.sensitivity

    @property
    def specificity(self):
        return self.counts.specificity


@dataclass
class MetricsReport:
    records: list
    tuned: dict
    config: dict
    verdicts: dict = field(default_factory=dict)
    truth: dict = field(default_factory=dict)

    def get(self, method: str, p: float, seed: int) -> RunRecord:
        for rec in self.records:
            if rec.method == method and rec.p == p and rec.seed == seed:
                return rec
        raise KeyError((method, p, seed))

    def table(self, attr: str) -> dict:
        """{method: {p: [value per seed]}} for 'sensitivity', 'specificity', ..."""
        out: dict = {}
        for rec in self.records:
            out.setdefault(rec.method, {}).setdefault(rec.p, []).append(getattr(rec, attr))
        return out


def _pkey(p: float) -> int:
    return int(round(p * 1e6))


class _Context:
    """Objects shared by every run of one experiment."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.M = construct_balanced(cfg.n, cfg.m, cfg.r, cfg.c, cfg.matrix_seed)
        self.cm = cfg.confusion_model()
        self.binary_cm = (ConfusionModel.binary(*cfg.binary_confusion)
                          if cfg.binary_confusion is not None else None)
        self.item_cm = (ConfusionModel.binary(*cfg.item_confusion)
                        if cfg.item_confusion is not None else self.cm.binarized())
        self.base = cfg.decoder_config()
        self.cost = CostModel(alpha=cfg.alpha)
        self.models = None
        self.gen = None
        if cfg.mode == "outlier":
            from .outlier import FeatureGenerator, SyntheticFeatureConfig, calibrate_models

            od = cfg.outlier_settings()
            self.od = od
            self.gen = FeatureGenerator(SyntheticFeatureConfig(
                d=od.d, n_modes=od.n_modes, mode_scale=od.mode_scale, spread=od.spread,
                separation=od.separation, seed=od.seed))
            self.models = calibrate_models(self.gen, t=od.t, K=od.K, Q=od.Q, n_train=od.n_train,
                                           n_calib=od.n_calib, seed=od.seed,
                                           covariance_type=od.covariance_type)

    def dorfman_g(self, p: float) -> int:
        if self.cfg.dorfman_g is not None:
            return self.cfg.dorfman_g
        return optimal_dorfman_pool_size(self.cfg.n, max(p * self.cfg.n, 1.0))

    # pool observations for a stack of chunks (rows of X)
    def pool_counts(self, X: np.ndarray, seed: int, p: float, purpose: str) -> np.ndarray:
        true = exact_counts(self.M, X)
        out = np.empty_like(true)
        for i in range(len(X)):
            rng = spawn_rng(seed, _pkey(p), purpose, i)
            if self.models is None:
                out[i] = self.cm.quantile(true[i], rng.random(self.M.m))
            else:
                out[i] = self.models.pool_labels(self.gen.sample(true[i], rng))
        return out

    def binary_pool_outcomes(self, X, Y, seed, p, purpose) -> np.ndarray:
        if self.binary_cm is None or self.models is not None:
            return (Y > 0).astype(np.int64)
        true = (exact_counts(self.M, X) > 0).astype(np.int64)
        out = np.empty_like(true)
        for i in range(len(X)):
            rng = spawn_rng(seed, _pkey(p), purpose + "-binary", i)
            out[i] = self.binary_cm.quantile(true[i], rng.random(self.M.m))
        return out

    def item_tests(self, labels, seed, p, purpose) -> np.ndarray:
        rng = spawn_rng(seed, _pkey(p), purpose)
        labels = np.asarray(labels, np.int64)
        if self.models is None:
            return self.item_cm.sample(labels, rng).astype(np.int8)
        return (self.models.item_labels(self.gen.sample(labels, rng)) > 0).astype(np.int8)

    def group_tests(self, counts, seed, p, purpose) -> np.ndarray:
        rng = spawn_rng(seed, _pkey(p), purpose)
        counts = np.asarray(counts, np.int64)
        if self.models is None:
            return (self.cm.sample(np.minimum(counts, self.cfg.r), rng) > 0).astype(np.int8)
        return (self.models.pool_labels(self.gen.sample(counts, rng)) > 0).astype(np.int8)


def _chunked(labels: np.ndarray, n: int) -> np.ndarray:
    chunks = -(-labels.size // n)
    X = np.zeros(chunks * n, dtype=np.int8)
    X[: labels.size] = labels
    return X.reshape(chunks, n)


def _tune(ctx: _Context, p: float) -> dict:
    cfg = ctx.cfg
    tuned = {}
    wanted = [mth for mth in ("classo", "mip") if mth in cfg.methods]
    if not cfg.grid_search or not wanted:
        return {mth: ctx.base for mth in wanted}
    vseed = cfg.master_seed
    pop = sample_population(cfg.validation_size, p, cfg.sampling,
                            rng=spawn_rng(vseed, _pkey(p), "validation-population"))
    X = _chunked(pop.labels, cfg.n)
    Y = ctx.pool_counts(X, vseed, p, "validation-counts")
    for mth in wanted:
        tuned[mth] = grid_search(ctx.M, Y, X, mth, cfg.lambda_grid, cfg.tau_grid, ctx.base).config
    return tuned


def _run_one(ctx: _Context, p: float, seed: int, tuned: dict) -> tuple[list, dict, np.ndarray]:
    cfg = ctx.cfg
    M = ctx.M
    suffix = "-od" if cfg.mode == "outlier" else ""
    pop = sample_population(cfg.population_size, p, cfg.sampling,
                            rng=spawn_rng(seed, _pkey(p), "population"))
    truth = pop.labels.astype(np.int8)
    N = truth.size
    X = _chunked(truth, cfg.n)
    records, verdicts = [], {}
    Y = ybar = None
    for method in cfg.methods:
        t0 = time.perf_counter()
        failed_chunks = 0
        lam = tau = None
        if method in ("classo", "mip", "comp", "ncomp"):
            if Y is None:
                Y = ctx.pool_counts(X, seed, p, "counts")
                ybar = ctx.binary_pool_outcomes(X, Y, seed, p, "counts")
            dcfg = tuned.get(method, ctx.base)
            obs = ybar if method in ("comp", "ncomp") else Y
            res = decode(method, M, obs, dcfg, t=cfg.ncomp_t)
            ok = np.asarray(res.ok, bool)
            failed_chunks = int((~ok).sum())
            pred = res.x.reshape(-1)[:N]
            keep = np.repeat(ok, cfg.n)[:N]
            counts = confusion_counts(truth[keep], pred[keep])
            tests = len(X) * M.m
            cost = cost_per_item(method, ctx.cost, m_over_n=M.m / M.n)
            if method in ("classo", "mip"):
                lam = dcfg.lam
                tau = dcfg.tau if method == "classo" else None
        elif method == "dorfman":
            g = ctx.dorfman_g(p)
            csum = np.concatenate([[0], np.cumsum(truth, dtype=np.int64)])

            def pool_oracle(groups):
                k = np.array([csum[grp[-1] + 1] - csum[grp[0]] for grp in groups])
                return ctx.group_tests(k, seed, p, "dorfman-pools")

            def item_oracle(idx):
                return ctx.item_tests(truth[idx], seed, p, "dorfman-items")

            plan = dorfman_decode(N, g, pool_oracle, item_oracle)
            pred = plan.verdicts
            counts = confusion_counts(truth, pred)
            tests = plan.tests_used
            cost = cost_per_item(method, ctx.cost, g=g, flagged_fraction=plan.round2_tests / N)
        else:
            pred = ctx.item_tests(truth, seed, p, "individual")
            counts = confusion_counts(truth, pred)
            tests = N
            cost = cost_per_item(method, ctx.cost)
        name = method + suffix
        wall = time.perf_counter() - t0 if cfg.record_wall_time else None
        records.append(RunRecord(name, p, seed, counts, cost, int(tests), failed_chunks,
                                 wall, lam, tau))
        if cfg.dump_verdicts:
            verdicts[name] = np.asarray(pred, np.int8)
    return records, verdicts, truth


def _task(args):
    cfg_dict, p, seed, tuned = args
    ctx = _Context(ExperimentConfig.from_dict(cfg_dict))
    return _run_one(ctx, p, seed, {k: DecoderConfig.from_dict(v) for k, v in tuned.items()})


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    """Every (prevalence, repeat) pair; run seed = master_seed + repeat."""
    ctx = _Context(cfg)
    tuned = {p: _tune(ctx, p) for p in cfg.prevalences}
    jobs = [(p, cfg.master_seed + rep) for p in cfg.prevalences for rep in range(cfg.repeats)]
    if cfg.workers > 1:
        payload = [(cfg.to_dict(), p, s, {k: v.to_dict() for k, v in tuned[p].items()})
                   for p, s in jobs]
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_task, payload))
    else:
        results = [_run_one(ctx, p, s, tuned[p]) for p, s in jobs]
    records, verdicts, truth = [], {}, {}
    for (p, s), (recs, verd, tr) in zip(jobs, results):
        records.extend(recs)
        for name, v in verd.items():
            verdicts[(name, p, s)] = v
        if cfg.dump_verdicts:
            truth[(p, s)] = tr
    tuned_out = {f"{p!r}": {k: {"lam": v.lam, "tau": v.tau} for k, v in t.items()}
                 for p, t in tuned.items()}
    return MetricsReport(records, tuned_out, cfg.to_dict(), verdicts, truth)


# ---------------------------------------------------------------- emitting

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".12g")
    return str(v)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write(path: Path, data: str) -> None:
    try:
        path.write_text(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _line(bits: np.ndarray) -> str:
    return "".join("1" if b else "0" for b in bits)


def build_manifest(cfg: ExperimentConfig, report: MetricsReport | None = None,
                   subcommand: str = "experiment", inputs: dict | None = None) -> dict:
    manifest = {
        "subcommand": subcommand,
        "tool": "pooledcs",
        "version": __version__,
        "config": cfg.to_dict(),
        "seeds": [cfg.master_seed + r for r in range(cfg.repeats)],
        "input_digests": inputs or {},
    }
    path = cfg.confusion.get("path")
    if path:
        manifest["input_digests"][str(path)] = _sha256(Path(path).read_bytes())
    if report is not None:
        manifest["tuned"] = report.tuned
    return manifest


def sweep_and_emit(cfg: ExperimentConfig, out_dir) -> dict:
    """Run the sweep and write results.csv, counts.csv, manifest.json (+ timings, verdicts).

    results.csv and counts.csv start with a comment naming the manifest and its
    digest. Both are byte-identical across reruns of the same config; measured
    timings go to timings.csv unless ``record_wall_time`` is set.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    t0 = time.perf_counter()
    report = run_experiment(cfg)
    elapsed = time.perf_counter() - t0

    manifest = build_manifest(cfg, report)
    manifest_text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    _write(out / "manifest.json", manifest_text)
    header = f"# manifest=manifest.json sha256={_sha256(manifest_text.encode())}\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for rec in report.records:
        w.writerow([rec.method, _fmt(rec.p), rec.seed, _fmt(rec.sensitivity), _fmt(rec.specificity),
                    _fmt(rec.cost_per_item), rec.tests_used, _fmt(rec.wall_seconds)])
    results_text = header + buf.getvalue()
    _write(out / "results.csv", results_text)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COUNT_COLUMNS)
    for rec in report.records:
        c = rec.counts
        w.writerow([rec.method, _fmt(rec.p), rec.seed, c.tp, c.fp, c.tn, c.fn, rec.failed_chunks,
                    _fmt(rec.lam), _fmt(rec.tau)])
    _write(out / "counts.csv", header + buf.getvalue())
    _write(out / "timings.csv", f"total_seconds\n{elapsed:.3f}\n")

    paths = {"results": out / "results.csv", "counts": out / "counts.csv",
             "manifest": out / "manifest.json", "timings": out / "timings.csv"}
    if cfg.dump_verdicts:
        vdir = out / "verdicts"
        vdir.mkdir(exist_ok=True)
        for (p, s), tr in report.truth.items():
            _write(vdir / f"truth_p{_fmt(p)}_seed{s}.txt",
                   "".join(_line(tr[i:i + cfg.n]) + "\n" for i in range(0, tr.size, cfg.n)))
        for (name, p, s), v in report.verdicts.items():
            _write(vdir / f"{name}_p{_fmt(p)}_seed{s}.txt",
                   "".join(_line(v[i:i + cfg.n]) + "\n" for i in range(0, v.size, cfg.n)))
        paths["verdicts"] = vdir
    return paths


def read_verdict_dump(path) -> np.ndarray:
    text = Path(path).read_text().split()
    return np.array([ch == "1" for line in text for ch in line], dtype=np.int8)
