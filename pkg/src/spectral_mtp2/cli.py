"""``spectral-mtp2`` command line.

Exit codes: 0 on success, 1 for usage and input errors, 2 for numerical
failures (non-PD or non-M-matrix input, stalled solvers, infeasible BSS
steps). The resolved configuration is printed to stderr before any work.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import InputError, NumericalError, SpectralMTP2Error
from .io import read_edges, read_matrix, read_samples, write_matrix

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(obj):
    """Replace non-finite floats with None so the output is strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, default=_json_default, allow_nan=False)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _announce(command: str, config: dict) -> dict:
    resolved = {"command": command, "version": __version__, **config}
    resolved["config_hash"] = config_hash(resolved)
    print("resolved configuration: " + json.dumps(resolved, sort_keys=True, default=_json_default), file=sys.stderr)
    return resolved


def _prefix_path(prefix: str, suffix: str) -> Path:
    p = Path(prefix)
    return p.with_name(p.name + suffix)


def _ensure_parent(path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)


# --------------------------------------------------------------------------


def cmd_sparsify(args) -> int:
    from .bss import write_trace
    from .pipeline import spectral_mtp2

    cfg = _announce("sparsify", {
        "input": args.input, "eta": args.eta, "refit_cov": args.refit_cov,
        "refit": bool(args.refit_cov) and not args.no_refit, "test_cov": args.test_cov,
        "edge_tol": args.edge_tol, "bss_method": args.bss_method, "output": args.output,
        "trace": args.trace,
    })
    K_hat = read_matrix(args.input)
    S_refit = read_matrix(args.refit_cov) if args.refit_cov else None
    S_test = read_matrix(args.test_cov) if args.test_cov else None
    ktilde_path = _prefix_path(args.output, ".ktilde.csv")
    _ensure_parent(ktilde_path)
    trace = [] if args.trace else None
    res = spectral_mtp2(
        K_hat, args.eta,
        S_refit=S_refit if cfg["refit"] else None,
        S_test=S_test,
        edge_tol=args.edge_tol,
        bss_method=args.bss_method,
        trace=trace,
    )
    report = res.report()
    if S_refit is not None and not cfg["refit"]:
        from .diagnostics import log_likelihood, residual_trace_norm

        report["loglik_train"] = log_likelihood(res.K_tilde, S_refit)
        report["R_train"] = residual_trace_norm(res.K_hat, S_refit)
    report["config_hash"] = cfg["config_hash"]
    write_matrix(ktilde_path, res.K_tilde)
    files = {"ktilde": ktilde_path.name}
    if res.K_refit is not None:
        p = _prefix_path(args.output, ".krefit.csv")
        write_matrix(p, res.K_refit)
        files["krefit"] = p.name
    if trace is not None:
        p = _prefix_path(args.output, ".trace.csv")
        write_trace(p, trace)
        files["trace"] = p.name
    report["files"] = files
    _prefix_path(args.output, ".report.json").write_text(dumps(report) + "\n")
    print(
        f"eta={report['eta']:g} epsilon={report['epsilon']:.4f} edges {report['edges_input']} -> "
        f"{report['edges_output']} certified={str(report['certified']).lower()}"
    )
    return EXIT_OK


def cmd_fit_mtp2(args) -> int:
    from .mle import mtp2_mle

    _announce("fit-mtp2", {
        "cov": args.cov, "data": args.data, "support": args.support,
        "kkt_tol": args.kkt_tol, "max_sweeps": args.max_sweeps, "output": args.output,
    })
    if args.cov:
        S = read_matrix(args.cov)
        n = None
    else:
        X = read_samples(args.data)
        n = X.shape[0]
        if n < 2:
            raise InputError(f"--data needs at least 2 rows, got {n}")
        X = X - X.mean(axis=0)
        S = X.T @ X / n
        S = 0.5 * (S + S.T)
    support = read_edges(args.support, S.shape[0]) if args.support else None
    k_path = _prefix_path(args.output, ".k.csv")
    _ensure_parent(k_path)
    K, rep = mtp2_mle(S, support=support, kkt_tol=args.kkt_tol, max_sweeps=args.max_sweeps)
    write_matrix(k_path, K)
    from .linalg import extract_edges

    report = {
        "version": __version__,
        "n_samples": n,
        "dim": K.dim,
        "edges": len(extract_edges(K)),
        "sweeps": rep.sweeps,
        "edge_residual": rep.edge_residual,
        "slack_residual": rep.slack_residual,
        "diag_residual": rep.diag_residual,
        "max_residual": rep.max_residual,
        "kkt_tol": args.kkt_tol,
        "objective": rep.objective_trace[-1],
        "dual_certificate": rep.dual_certificate,
        "files": {"k": k_path.name},
    }
    _prefix_path(args.output, ".kkt.json").write_text(dumps(report) + "\n")
    print(f"MTP2 MLE: {report['edges']} edges, {rep.sweeps} sweeps, max KKT residual {rep.max_residual:.3g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simulate import format_summary, load_config, preset_path, run_experiment, worker_count, write_outputs

    overrides = {}
    if args.replications is not None:
        overrides["replications"] = args.replications
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    path = preset_path(args.preset) if args.preset else Path(args.config)
    cfg = load_config(path, overrides)
    workers = worker_count(args.workers)
    _announce("simulate", {"config_file": str(path), "out": args.out, "workers": workers,
                           "experiment": cfg.to_dict(), "experiment_hash": cfg.config_hash})
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise InputError(f"--out {out} exists and is not a directory")

    def progress(item):
        rep, _, err = item
        print(f"replication {rep}: {'failed: ' + err if err else 'ok'}", file=sys.stderr)

    result = run_experiment(cfg, workers=workers, progress=progress)
    write_outputs(result, out)
    print(format_summary(result))
    return EXIT_OK


def cmd_path(args) -> int:
    from .linalg import extract_edges
    from .pipeline import spectral_mtp2
    from .simulate import bic_score

    cfg = _announce("path", {
        "input": args.input, "etas": args.etas, "refit_cov": args.refit_cov,
        "refit": bool(args.refit_cov) and not args.no_refit, "test_cov": args.test_cov,
        "n_train": args.n_train, "edge_tol": args.edge_tol, "output": args.output,
    })
    if args.n_train is not None and not args.refit_cov:
        raise InputError("--n-train needs --refit-cov (BIC is evaluated on the training covariance)")
    K_hat = read_matrix(args.input)
    S_refit = read_matrix(args.refit_cov) if args.refit_cov else None
    S_test = read_matrix(args.test_cov) if args.test_cov else None
    out = _prefix_path(args.output, ".path.csv")
    _ensure_parent(out)
    rows = []
    for eta in args.etas:
        res = spectral_mtp2(K_hat, eta, S_refit=S_refit if cfg["refit"] else None, S_test=S_test,
                            edge_tol=args.edge_tol)
        rep = res.report()
        row = {k: rep[k] for k in ("eta", "epsilon", "edges_output", "loglik_train", "loglik_test", "certified")}
        if S_refit is not None and row["loglik_train"] is None:
            from .diagnostics import log_likelihood

            row["loglik_train"] = log_likelihood(res.K_out, S_refit)
        row["bic"] = None
        if args.n_train is not None:
            row["bic"] = bic_score(res.K_out, S_refit, args.n_train, args.edge_tol)
        rows.append(row)
        print(f"eta={eta:g} epsilon={row['epsilon']:.4f} edges={row['edges_output']}", file=sys.stderr)
    cols = list(rows[0])
    lines = [",".join(cols)]
    lines.extend(",".join(_cell(row[c]) for c in cols) for row in rows)
    out.write_text("\n".join(lines) + "\n")
    bics = [r["bic"] for r in rows if r["bic"] is not None]
    if bics:
        best = min(rows, key=lambda r: (r["bic"], r["eta"]))
        print(f"BIC-selected eta: {best['eta']:g} ({best['edges_output']} edges)")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from .bss import kappa_epsilon
    from .diagnostics import DiagnosticsBundle
    from .linalg import extract_edges, is_m_matrix, loewner_range

    _announce("diagnose", {
        "khat": args.khat, "ktilde": args.ktilde, "test_cov": args.test_cov,
        "eta": args.eta, "output": args.output,
    })
    K_hat = read_matrix(args.khat)
    K_tilde = read_matrix(args.ktilde)
    T = read_matrix(args.test_cov) if args.test_cov else None
    lo, hi = loewner_range(K_hat, K_tilde)
    achieved = max(1.0 - lo, hi - 1.0, 0.0)
    if args.eta is not None:
        eps = kappa_epsilon(args.eta)[1]
        source = "eta"
    else:
        eps = achieved
        source = "sandwich"
    bundle = DiagnosticsBundle(K_hat, K_tilde, eps, T)
    report = bundle.to_dict()
    report.update({
        "version": __version__,
        "epsilon_source": source,
        "sandwich_range": [lo, hi],
        "achieved_epsilon": achieved,
        "sandwich_holds": bool(lo >= 1 - eps - 1e-8 and hi <= 1 + eps + 1e-8),
        "edges_khat": len(extract_edges(K_hat)),
        "edges_ktilde": len(extract_edges(K_tilde)),
        "ktilde_is_m_matrix": is_m_matrix(K_tilde),
    })
    report["certified"] = bool(bundle.certified and report["sandwich_holds"])
    text = dumps(report) + "\n"
    if args.output:
        p = Path(args.output)
        _ensure_parent(p)
        p.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spectral-mtp2", description="Spectral sparsification of MTP2 Gaussian graphical models.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("sparsify", help="sparsify an M-matrix precision matrix")
    s.add_argument("--input", required=True, help="precision matrix (.csv or .mtx)")
    s.add_argument("--eta", required=True, type=float)
    s.add_argument("--refit-cov", help="covariance for refitting on the sparse support")
    s.add_argument("--no-refit", action="store_true", help="skip the refit even if --refit-cov is given")
    s.add_argument("--test-cov", help="held-out covariance for likelihood diagnostics")
    s.add_argument("--edge-tol", type=float, default=1e-6)
    s.add_argument("--bss-method", choices=("resolvent", "eigen", "direct"), default="resolvent")
    s.add_argument("--trace", action="store_true", help="write a per-step barrier trace")
    s.add_argument("--output", required=True, help="output prefix")
    s.set_defaults(func=cmd_sparsify)

    f = sub.add_parser("fit-mtp2", help="MTP2-constrained maximum likelihood")
    src = f.add_mutually_exclusive_group(required=True)
    src.add_argument("--cov", help="sample covariance matrix")
    src.add_argument("--data", help="n x d samples, one observation per row")
    f.add_argument("--support", help="allowed edges, 1-based 'i,j' lines")
    f.add_argument("--kkt-tol", type=float, default=1e-7)
    f.add_argument("--max-sweeps", type=int, default=500)
    f.add_argument("--output", required=True, help="output prefix")
    f.set_defaults(func=cmd_fit_mtp2)

    m = sub.add_parser("simulate", help="run the scale-free simulation study")
    cfg = m.add_mutually_exclusive_group(required=True)
    cfg.add_argument("--config", help="experiment config (.toml or .json)")
    cfg.add_argument("--preset", choices=("ba150", "ba300"), help="bundled config")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--replications", type=int, help="override the replication count")
    m.add_argument("--seed", type=int, help="override base_seed")
    m.add_argument("--workers", type=int, help="worker processes (default: SPECTRAL_MTP2_THREADS, 0 = auto)")
    m.set_defaults(func=cmd_simulate)

    t = sub.add_parser("path", help="sparsify over a grid of eta values")
    t.add_argument("--input", required=True)
    t.add_argument("--etas", required=True, type=_float_list, help="comma-separated eta values")
    t.add_argument("--refit-cov")
    t.add_argument("--no-refit", action="store_true")
    t.add_argument("--test-cov")
    t.add_argument("--n-train", type=int, help="training sample size, enables BIC")
    t.add_argument("--edge-tol", type=float, default=1e-6)
    t.add_argument("--output", required=True, help="output prefix")
    t.set_defaults(func=cmd_path)

    g = sub.add_parser("diagnose", help="compare a sparsified precision matrix with its source")
    g.add_argument("--khat", required=True)
    g.add_argument("--ktilde", required=True)
    g.add_argument("--test-cov")
    g.add_argument("--eta", type=float, help="nominal eta; default uses the achieved sandwich")
    g.add_argument("--output", help="write the JSON here instead of stdout")
    g.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, SpectralMTP2Error) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
