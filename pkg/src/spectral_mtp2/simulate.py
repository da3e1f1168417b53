"""Scale-free simulation study: ground truth, sampling, metrics, BIC, path runs.

Every random draw comes from a Philox stream keyed by
``SeedSequence(base_seed, spawn_key=(replication, purpose))``, so a
replication's numbers do not depend on which other replications ran, or in
what order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidParams, SpectralMTP2Error
from .linalg import (
    EDGE_TOL,
    EdgeSet,
    PrecisionMatrix,
    as_array,
    extract_edges,
    laplacian_from_edges,
)
from .diagnostics import log_likelihood


# spawn_key purposes
PURPOSE_GRAPH = 0
PURPOSE_WEIGHTS = 1
PURPOSE_TRAIN = 2
PURPOSE_TEST = 3


def make_rng(seed) -> np.random.Generator:
    """Philox generator from an int, a SeedSequence or a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def replication_seed(base_seed: int, rep: int, purpose: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(base_seed, spawn_key=(rep, purpose))


@dataclass(frozen=True, eq=False)
class GroundTruthModel:
    K_star: PrecisionMatrix
    graph: EdgeSet
    generator: dict

    @property
    def dim(self) -> int:
        return self.K_star.dim


def barabasi_albert_edges(d: int, m: int, rng) -> list[tuple[int, int]]:
    """Preferential attachment edges, seeded by a clique on ``m + 1`` nodes.

    Each new node draws `m` distinct targets with probability proportional
    to current degree (sequential draws without replacement).
    """
    if not (isinstance(d, (int, np.integer)) and isinstance(m, (int, np.integer))):
        raise InvalidParams("d and m must be integers")
    if not d > m >= 1:
        raise InvalidParams(f"need d > m >= 1, got d={d}, m={m}")
    rng = make_rng(rng)
    edges = [(i, j) for i in range(m + 1) for j in range(i + 1, m + 1)]
    deg = np.zeros(d)
    deg[: m + 1] = m
    for v in range(m + 1, d):
        w = deg[:v].copy()
        for _ in range(m):
            t = int(rng.choice(v, p=w / w.sum()))
            w[t] = 0.0
            edges.append((t, v))
            deg[t] += 1
        deg[v] = m
    return edges


def generate_ba_model(
    d: int,
    m: int,
    delta: float = 0.5,
    weight_range: tuple[float, float] = (1.0, 1.0),
    seed=0,
) -> GroundTruthModel:
    """``K* = L_G + delta I`` for a weighted Barabasi-Albert graph ``G``.

    `seed` may be an int or a pair of SeedSequences ``(graph, weights)``.
    """
    if not delta > 0:
        raise InvalidParams(f"delta must be positive, got {delta}")
    lo, hi = (float(x) for x in weight_range)
    if not (0 < lo <= hi < math.inf):
        raise InvalidParams(f"weight range must lie in (0, inf), got {weight_range}")
    if isinstance(seed, tuple):
        graph_seed, weight_seed = seed
    else:
        graph_seed = np.random.SeedSequence(seed, spawn_key=(PURPOSE_GRAPH,))
        weight_seed = np.random.SeedSequence(seed, spawn_key=(PURPOSE_WEIGHTS,))
    edges = barabasi_albert_edges(d, m, graph_seed)
    if lo == hi:
        weights = np.full(len(edges), lo)
    else:
        weights = make_rng(weight_seed).uniform(lo, hi, size=len(edges))
    L = laplacian_from_edges(d, [(i, j, w) for (i, j), w in zip(edges, weights)])
    K = PrecisionMatrix.from_array(L.dense + delta * np.eye(d), require_m_matrix=True)
    gen = dict(kind="barabasi_albert", d=d, m=m, delta=delta, weight_low=lo, weight_high=hi,
               seed=seed if isinstance(seed, (int, np.integer)) else None)
    return GroundTruthModel(K, L.edge_set(), gen)


def sample_covariance(model, n: int, seed) -> np.ndarray:
    """Centered ``1/n`` sample covariance of `n` draws from ``N(0, K*^{-1})``.

    Draws use the symmetric square root of ``K*^{-1}``.
    """
    if n < 2:
        raise InvalidParams(f"need n >= 2 samples, got {n}")
    K = as_array(model.K_star if isinstance(model, GroundTruthModel) else model)
    lam, U = np.linalg.eigh(K)
    root = (U / np.sqrt(lam)) @ U.T
    Z = make_rng(seed).standard_normal((n, K.shape[0]))
    X = Z @ root
    X -= X.mean(axis=0)
    S = X.T @ X / n
    return 0.5 * (S + S.T)


def edge_counts(estimated: EdgeSet, truth: EdgeSet) -> tuple[int, int, int]:
    """``(TP, FP, FN)`` of `estimated` against `truth`."""
    if estimated.dim != truth.dim:
        raise InvalidParams(f"edge sets on {estimated.dim} and {truth.dim} vertices")
    tp = len(estimated.pairs & truth.pairs)
    return tp, len(estimated) - tp, len(truth) - tp


def edge_metrics(estimated: EdgeSet, truth: EdgeSet) -> tuple[float, float, float]:
    """Precision, recall and F1; each is 0 when its denominator vanishes."""
    tp, fp, fn = edge_counts(estimated, truth)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def bic_score(K, S_train, n: int, edge_tol: float = EDGE_TOL) -> float:
    """``-n l(K; S) + (d + |E|) log n`` with ``|E| = |extract_edges(K, edge_tol)|``."""
    if n < 2:
        raise InvalidParams(f"need n >= 2, got {n}")
    K = as_array(K)
    d = K.shape[0]
    n_edges = len(extract_edges(K, edge_tol))
    return float(-n * log_likelihood(K, S_train) + (d + n_edges) * math.log(n))


# --------------------------------------------------------------------------
# experiment configuration


@dataclass(frozen=True)
class ExperimentConfig:
    d: int = 150
    m: int = 2
    delta: float = 0.5
    weight_low: float = 1.0
    weight_high: float = 1.0
    n_train: int = 400
    n_test: int = 2000
    replications: int = 15
    eta_grid: tuple = (1.5, 1.75, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0, 6.0, 8.0)
    base_seed: int = 20240601
    edge_tol: float = EDGE_TOL
    refit: bool = True

    def __post_init__(self):
        object.__setattr__(self, "eta_grid", tuple(float(e) for e in self.eta_grid))
        if not self.d > self.m >= 1:
            raise InvalidParams(f"need d > m >= 1, got d={self.d}, m={self.m}")
        if not self.delta > 0:
            raise InvalidParams("delta must be positive")
        if not 0 < self.weight_low <= self.weight_high:
            raise InvalidParams("need 0 < weight_low <= weight_high")
        if self.n_train < 2 or self.n_test < 2:
            raise InvalidParams("n_train and n_test must be at least 2")
        if self.replications < 1:
            raise InvalidParams("replications must be at least 1")
        if not self.eta_grid or any(not e > 1 for e in self.eta_grid):
            raise InvalidParams("eta_grid must be a nonempty list of values > 1")
        if len(set(self.eta_grid)) != len(self.eta_grid):
            raise InvalidParams("eta_grid has duplicate values")

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - allowed
        if unknown:
            raise InvalidParams(f"unknown config keys: {', '.join(sorted(unknown))}")
        ints = {"d", "m", "n_train", "n_test", "replications", "base_seed"}
        for k in ints & set(data):
            if isinstance(data[k], bool) or not isinstance(data[k], int):
                raise InvalidParams(f"config key {k!r} must be an integer")
        if "refit" in data and not isinstance(data["refit"], bool):
            raise InvalidParams("config key 'refit' must be a boolean")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidParams):
                raise
            raise InvalidParams(f"invalid config: {exc}") from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["eta_grid"] = list(self.eta_grid)
        return out

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read an experiment config from ``.toml`` or ``.json``."""
    path = Path(path)
    if not path.exists():
        raise InvalidParams(f"no such config file: {path}")
    text = path.read_text()
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            data = tomllib.loads(text)
    except ValueError as exc:
        raise InvalidParams(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise InvalidParams(f"{path}: top level must be a table")
    data.update(overrides or {})
    return ExperimentConfig.from_mapping(data)


def preset_path(name: str) -> Path:
    """Path of a bundled preset (``"ba150"`` or ``"ba300"``)."""
    p = Path(__file__).parent / "presets" / f"{name.removesuffix('.toml')}.toml"
    if not p.exists():
        raise InvalidParams(f"no bundled preset {name!r}")
    return p


# --------------------------------------------------------------------------
# replications


@dataclass(frozen=True)
class FitReport:
    method: str
    tuning: float | None
    edges: int
    loglik_train: float
    loglik_test: float
    precision: float
    recall: float
    f1: float
    bic: float
    replication: int = 0
    epsilon: float | None = None


def _fit_report(method, tuning, K, model, S_train, S_test, cfg, rep, eps=None) -> FitReport:
    est = extract_edges(K, cfg.edge_tol)
    p, r, f1 = edge_metrics(est, model.graph)
    return FitReport(
        method=method,
        tuning=tuning,
        edges=len(est),
        loglik_train=0.5 * cfg.n_train * log_likelihood(K, S_train),
        loglik_test=0.5 * cfg.n_test * log_likelihood(K, S_test),
        precision=p,
        recall=r,
        f1=f1,
        bic=bic_score(K, S_train, cfg.n_train, cfg.edge_tol),
        replication=rep,
        epsilon=eps,
    )


def replication_seeds(cfg: ExperimentConfig, rep: int) -> dict:
    return {
        "graph": replication_seed(cfg.base_seed, rep, PURPOSE_GRAPH),
        "weights": replication_seed(cfg.base_seed, rep, PURPOSE_WEIGHTS),
        "train": replication_seed(cfg.base_seed, rep, PURPOSE_TRAIN),
        "test": replication_seed(cfg.base_seed, rep, PURPOSE_TEST),
    }


def run_replication(cfg: ExperimentConfig, rep: int) -> list[FitReport]:
    """Fit the MLE and the full sparsified path on one simulated dataset.

    The last report is the BIC-selected point of the path
    (method ``"spectral_mtp2_bic"``).
    """
    from .mle import mtp2_mle
    from .pipeline import spectral_mtp2

    seeds = replication_seeds(cfg, rep)
    model = generate_ba_model(
        cfg.d, cfg.m, cfg.delta, (cfg.weight_low, cfg.weight_high),
        seed=(seeds["graph"], seeds["weights"]),
    )
    S_train = sample_covariance(model, cfg.n_train, seeds["train"])
    S_test = sample_covariance(model, cfg.n_test, seeds["test"])
    K_mle, _ = mtp2_mle(S_train)
    rows = [_fit_report("mtp2_mle", None, K_mle, model, S_train, S_test, cfg, rep)]
    path = []
    for eta in cfg.eta_grid:
        res = spectral_mtp2(K_mle, eta, S_refit=S_train if cfg.refit else None, edge_tol=cfg.edge_tol)
        path.append(_fit_report("spectral_mtp2", eta, res.K_out, model, S_train, S_test, cfg, rep, res.epsilon))
    best = min(path, key=lambda r: (r.bic, r.tuning))
    rows.extend(path)
    rows.append(FitReport(**{**asdict(best), "method": "spectral_mtp2_bic"}))
    return rows


def _replication_task(args):
    cfg, rep = args
    try:
        return rep, run_replication(cfg, rep), None
    except (SpectralMTP2Error, np.linalg.LinAlgError, FloatingPointError) as exc:
        return rep, None, f"{type(exc).__name__}: {exc}"


def worker_count(requested: int | None = None) -> int:
    """Number of worker processes; ``SPECTRAL_MTP2_THREADS`` (0 = auto) caps it."""
    if requested is None:
        env = os.environ.get("SPECTRAL_MTP2_THREADS", "0").strip() or "0"
        try:
            requested = int(env)
        except ValueError:
            raise InvalidParams(f"SPECTRAL_MTP2_THREADS must be an integer, got {env!r}") from None
    if requested < 0:
        raise InvalidParams("worker count must be nonnegative")
    return requested if requested > 0 else (os.cpu_count() or 1)


# --------------------------------------------------------------------------
# aggregation


def mean_se(values) -> tuple[float, float]:
    """Mean and ``sd / sqrt(B)``; the standard error is NaN for ``B < 2``."""
    x = np.asarray(values, dtype=float)
    if len(x) == 0:
        return math.nan, math.nan
    if len(x) < 2:
        return float(x[0]), math.nan
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


SUMMARY_METRICS = ("edges", "loglik_train", "loglik_test", "precision", "recall", "f1", "bic")
PATH_METRICS = ("edges", "loglik_test", "f1")


@dataclass(frozen=True)
class PathReport:
    """Per-eta means and standard errors over successful replications."""

    rows: list
    selected_eta: float | None
    selected_etas: tuple = ()

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=float)


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    path: PathReport
    summary: list
    failures: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``rows, path = run_experiment(cfg)``
        return iter((self.rows, self.path))

    @property
    def completed(self) -> list[int]:
        return sorted({r.replication for r in self.rows})

    def manifest(self) -> dict:
        from . import __version__

        cfg = self.config
        reps = []
        for rep in range(cfg.replications):
            seeds = replication_seeds(cfg, rep)
            reps.append({
                "replication": rep,
                "status": "failed" if rep in self.failures else "ok",
                "error": self.failures.get(rep),
                "seeds": {k: {"entropy": s.entropy, "spawn_key": list(s.spawn_key)} for k, s in seeds.items()},
            })
        return {
            "version": __version__,
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash,
            "rng": "numpy Philox, SeedSequence(base_seed, spawn_key=(replication, purpose))",
            "replications": reps,
            "n_completed": len(self.completed),
            "n_failed": len(self.failures),
            "selected_eta": self.path.selected_eta,
            "selected_etas": list(self.path.selected_etas),
        }


def aggregate(cfg: ExperimentConfig, rows: list[FitReport], failures: dict | None = None) -> ExperimentResult:
    summary = []
    for method in ("mtp2_mle", "spectral_mtp2_bic"):
        sel = [r for r in rows if r.method == method]
        entry = {"method": method, "n": len(sel)}
        if method == "spectral_mtp2_bic":
            entry["tuning_mean"], entry["tuning_se"] = mean_se([r.tuning for r in sel])
        for key in SUMMARY_METRICS:
            entry[f"{key}_mean"], entry[f"{key}_se"] = mean_se([getattr(r, key) for r in sel])
        summary.append(entry)
    path_rows = []
    for eta in cfg.eta_grid:
        sel = [r for r in rows if r.method == "spectral_mtp2" and r.tuning == eta]
        entry = {"eta": eta, "epsilon": _epsilon(eta), "n": len(sel)}
        for key in PATH_METRICS:
            entry[f"{key}_mean"], entry[f"{key}_se"] = mean_se([getattr(r, key) for r in sel])
        path_rows.append(entry)
    chosen = tuple(r.tuning for r in rows if r.method == "spectral_mtp2_bic")
    selected = None
    if chosen:
        vals, counts = np.unique(chosen, return_counts=True)
        selected = float(vals[np.argmax(counts)])  # ties go to the smaller eta
    path = PathReport(path_rows, selected, chosen)
    return ExperimentResult(cfg, rows, path, summary, dict(failures or {}))


def _epsilon(eta: float) -> float:
    from .bss import kappa_epsilon

    return kappa_epsilon(eta)[1]


def run_experiment(cfg: ExperimentConfig, workers: int | None = None, progress=None) -> ExperimentResult:
    """Run every replication of `cfg` and aggregate.

    Replications that raise a library error are excluded from the
    aggregates, reported through :mod:`warnings` and listed in
    ``result.failures``. Output is identical for any worker count.
    """
    n_workers = min(worker_count(workers), cfg.replications)
    tasks = [(cfg, rep) for rep in range(cfg.replications)]
    if n_workers <= 1:
        results = []
        for t in tasks:
            results.append(_replication_task(t))
            if progress:
                progress(results[-1])
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = []
            for r in pool.map(_replication_task, tasks):
                results.append(r)
                if progress:
                    progress(r)
    rows, failures = [], {}
    for rep, reps_rows, err in sorted(results, key=lambda t: t[0]):
        if err is not None:
            failures[rep] = err
            warnings.warn(f"replication {rep} failed and is excluded: {err}", RuntimeWarning)
        else:
            rows.extend(reps_rows)
    return aggregate(cfg, rows, failures)


# --------------------------------------------------------------------------
# output


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in cols])


def write_outputs(result: ExperimentResult, out_dir) -> dict:
    """Write ``methods.csv``, ``path.csv``, ``replications.csv`` and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "methods": out / "methods.csv",
        "path": out / "path.csv",
        "replications": out / "replications.csv",
        "manifest": out / "manifest.json",
    }
    _write_csv(files["methods"], result.summary)
    _write_csv(files["path"], result.path.rows)
    _write_csv(files["replications"], [asdict(r) for r in result.rows])
    manifest = result.manifest()
    manifest["files"] = {k: v.name for k, v in files.items() if k != "manifest"}
    files["manifest"].write_text(json.dumps(_json_safe(manifest), indent=2) + "\n")
    return files


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def format_summary(result: ExperimentResult) -> str:
    """Plain-text method comparison and eta path, means with (se)."""

    def ms(entry, key, fmt="{:.1f}"):
        m, s = entry[f"{key}_mean"], entry[f"{key}_se"]
        return f"{fmt.format(m)} ({fmt.format(s)})" if math.isfinite(s) else fmt.format(m)

    lines = [f"{'method':<20}{'edges':>18}{'test loglik':>22}{'precision':>18}{'recall':>18}{'F1':>18}"]
    for e in result.summary:
        if e["n"] == 0:
            continue
        lines.append(
            f"{e['method']:<20}{ms(e, 'edges'):>18}{ms(e, 'loglik_test'):>22}"
            f"{ms(e, 'precision', '{:.3f}'):>18}{ms(e, 'recall', '{:.3f}'):>18}{ms(e, 'f1', '{:.3f}'):>18}"
        )
    lines.append("")
    lines.append(f"{'eta':>6}{'eps':>7}{'edges':>18}{'test loglik':>22}{'F1':>18}")
    for r in result.path.rows:
        if r["n"] == 0:
            continue
        lines.append(
            f"{r['eta']:>6.2f}{r['epsilon']:>7.2f}{ms(r, 'edges'):>18}"
            f"{ms(r, 'loglik_test'):>22}{ms(r, 'f1', '{:.3f}'):>18}"
        )
    lines.append(f"BIC-selected eta (mode over replications): {result.path.selected_eta}")
    if result.failures:
        lines.append(f"failed replications: {sorted(result.failures)}")
    return "\n".join(lines)
