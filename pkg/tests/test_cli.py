import json
import os

import numpy as np
import pytest

from spectral_mtp2.cli import main
from spectral_mtp2.linalg import EdgeSet
from spectral_mtp2.io import read_matrix, write_edges, write_matrix
from spectral_mtp2.pipeline import spectral_mtp2


def tridiagonal(d=5):
    K = 2.0 * np.eye(d)
    for i in range(d - 1):
        K[i, i + 1] = K[i + 1, i] = -0.8
    return K


@pytest.fixture
def work(tmp_path, monkeypatch):
    """Isolated directory with inputs under in/ and outputs expected under out/."""
    monkeypatch.chdir(tmp_path)
    (tmp_path / "in").mkdir()
    return tmp_path


def files_under(root):
    return sorted(os.path.relpath(os.path.join(d, f), root) for d, _, fs in os.walk(root) for f in fs)


class TestSparsify:
    def test_diagonal(self, work, capsys):
        write_matrix(work / "in/k.csv", np.diag([1.0, 2.0, 3.0]))
        assert main(["sparsify", "--input", "in/k.csv", "--eta", "2", "--output", "out/r"]) == 0
        assert np.array_equal(read_matrix(work / "out/r.ktilde.csv"), np.diag([1.0, 2.0, 3.0]))
        rep = json.loads((work / "out/r.report.json").read_text())
        assert rep["edges_output"] == 0 and rep["edges_input"] == 0
        err = capsys.readouterr().err
        assert '"command": "sparsify"' in err or '"command":"sparsify"' in err

    def test_tree_round_trip(self, work):
        K = tridiagonal()
        write_matrix(work / "in/k.csv", K)
        S = np.linalg.inv(K)
        write_matrix(work / "in/s.csv", S)
        code = main(["sparsify", "--input", "in/k.csv", "--eta", "2", "--refit-cov", "in/s.csv",
                     "--test-cov", "in/s.csv", "--trace", "--output", "out/r"])
        assert code == 0
        rep = json.loads((work / "out/r.report.json").read_text())
        assert rep["certified"] is True
        assert rep["edges_output"] == 4
        assert rep["epsilon"] == pytest.approx(0.9428, abs=1e-4)
        res = spectral_mtp2(K, 2.0, S_refit=S)
        assert np.array_equal(read_matrix(work / "out/r.ktilde.csv"), res.K_tilde.matrix)
        assert np.array_equal(read_matrix(work / "out/r.krefit.csv"), res.K_refit.matrix)
        assert files_under(work / "out") == ["r.krefit.csv", "r.ktilde.csv", "r.report.json", "r.trace.csv"]
        assert files_under(work / "in") == ["k.csv", "s.csv"]

    def test_no_refit(self, work):
        write_matrix(work / "in/k.csv", tridiagonal())
        write_matrix(work / "in/s.csv", np.eye(5))
        main(["sparsify", "--input", "in/k.csv", "--eta", "2", "--refit-cov", "in/s.csv",
              "--no-refit", "--output", "out/r"])
        assert not (work / "out/r.krefit.csv").exists()

    def test_not_m_matrix_exit_2(self, work, capsys):
        write_matrix(work / "in/k.csv", np.array([[1.0, 0.3], [0.3, 1.0]]))
        assert main(["sparsify", "--input", "in/k.csv", "--eta", "2", "--output", "out/r"]) == 2
        assert "NotMMatrix" in capsys.readouterr().err
        assert not (work / "out").exists() or files_under(work / "out") == []

    @pytest.mark.parametrize(
        "argv",
        [
            ["sparsify", "--input", "in/k.csv", "--eta", "0.5", "--output", "out/r"],
            ["sparsify", "--input", "in/k.csv", "--eta", "2", "--output", "out/r", "--bogus"],
            ["sparsify", "--input", "in/missing.csv", "--eta", "2", "--output", "out/r"],
            ["sparsify", "--eta", "2", "--output", "out/r"],
            ["frobnicate"],
            [],
        ],
    )
    def test_usage_errors_exit_1(self, work, argv, capsys):
        write_matrix(work / "in/k.csv", tridiagonal())
        assert main(argv) == 1
        err = capsys.readouterr().err.strip().splitlines()
        assert err[-1].startswith("error:")

    def test_malformed_matrix(self, work):
        (work / "in/k.csv").write_text("1,2\n3\n")
        assert main(["sparsify", "--input", "in/k.csv", "--eta", "2", "--output", "out/r"]) == 1

    @pytest.mark.slow
    def test_ba_mle_epsilon(self, work):
        from spectral_mtp2.mle import mtp2_mle
        from spectral_mtp2.simulate import generate_ba_model, sample_covariance

        model = generate_ba_model(150, 2, seed=1)
        K, _ = mtp2_mle(sample_covariance(model, 400, 2))
        write_matrix(work / "in/k.csv", K)
        assert main(["sparsify", "--input", "in/k.csv", "--eta", "2", "--output", "out/r"]) == 0
        rep = json.loads((work / "out/r.report.json").read_text())
        assert round(rep["epsilon"], 2) == 0.94
        assert rep["edges_output"] <= 298


class TestFit:
    def test_diagonal(self, work):
        write_matrix(work / "in/s.csv", np.diag([2.0, 5.0]))
        assert main(["fit-mtp2", "--cov", "in/s.csv", "--output", "out/f"]) == 0
        assert np.allclose(read_matrix(work / "out/f.k.csv"), np.diag([0.5, 0.2]))

    def test_negative_correlation(self, work):
        write_matrix(work / "in/s.csv", np.array([[1.0, -0.3], [-0.3, 1.0]]))
        main(["fit-mtp2", "--cov", "in/s.csv", "--output", "out/f"])
        rep = json.loads((work / "out/f.kkt.json").read_text())
        assert np.allclose(read_matrix(work / "out/f.k.csv"), np.eye(2))
        assert rep["dual_certificate"][0][1] == pytest.approx(0.3)

    def test_empty_support(self, work):
        S = np.array([[1.0, 0.6, 0.2], [0.6, 1.0, 0.4], [0.2, 0.4, 2.0]])
        write_matrix(work / "in/s.csv", S)
        (work / "in/e.csv").write_text("")
        assert main(["fit-mtp2", "--cov", "in/s.csv", "--support", "in/e.csv", "--output", "out/f"]) == 0
        assert np.allclose(read_matrix(work / "out/f.k.csv"), np.diag(1 / np.diag(S)))

    def test_support_and_data(self, work):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((40, 3)) @ np.array([[1, 0.5, 0], [0, 1, 0.5], [0, 0, 1.0]])
        np.savetxt(work / "in/x.csv", X, delimiter=",")
        write_edges(work / "in/e.csv", EdgeSet.from_pairs(3, [(0, 1), (1, 2)]))
        assert main(["fit-mtp2", "--data", "in/x.csv", "--support", "in/e.csv", "--output", "out/f"]) == 0
        K = read_matrix(work / "out/f.k.csv")
        assert K[0, 2] == 0

    def test_needs_one_source(self, work):
        assert main(["fit-mtp2", "--output", "out/f"]) == 1

    def test_no_convergence_exit_2(self, work):
        write_matrix(work / "in/s.csv", np.ones((2, 2)))
        assert main(["fit-mtp2", "--cov", "in/s.csv", "--max-sweeps", "3", "--output", "out/f"]) == 2


class TestDiagnose:
    def test_identical(self, work, capsys):
        write_matrix(work / "in/k.csv", tridiagonal())
        write_matrix(work / "in/t.csv", np.eye(5))
        assert main(["diagnose", "--khat", "in/k.csv", "--ktilde", "in/k.csv", "--test-cov", "in/t.csv"]) == 0
        rep = json.loads(capsys.readouterr().out)
        assert rep["kl_nats"] == pytest.approx(0, abs=1e-12)
        assert rep["loglik_gap"] == pytest.approx(0, abs=1e-12)
        assert rep["bregman_trace_term"] == pytest.approx(0, abs=1e-12)

    def test_certified_pair(self, work):
        rng = np.random.default_rng(1)
        K = tridiagonal(8) + 0.1 * np.eye(8)
        res = spectral_mtp2(K, 30.0)
        write_matrix(work / "in/k.csv", K)
        write_matrix(work / "in/kt.csv", res.K_tilde)
        X = rng.standard_normal((30, 8))
        write_matrix(work / "in/t.csv", X.T @ X / 30)
        main(["diagnose", "--khat", "in/k.csv", "--ktilde", "in/kt.csv", "--test-cov", "in/t.csv",
              "--eta", "30", "--output", "out/d.json"])
        rep = json.loads((work / "out/d.json").read_text())
        lo, hi = rep["bound_window"]
        assert rep["certified"] is True
        assert lo - 1e-8 <= rep["loglik_gap"] <= hi + 1e-8

    def test_large_eps_not_certified(self, work):
        K = tridiagonal()
        write_matrix(work / "in/k.csv", K)
        write_matrix(work / "in/kt.csv", spectral_mtp2(K, 2.0).K_tilde)
        main(["diagnose", "--khat", "in/k.csv", "--ktilde", "in/kt.csv", "--eta", "2", "--output", "out/d.json"])
        rep = json.loads((work / "out/d.json").read_text())
        assert rep["certified"] is False
        assert rep["kl_nats"] is not None and rep["frobenius_actual"] is not None

    def test_not_pd_exit_2(self, work):
        write_matrix(work / "in/k.csv", tridiagonal())
        write_matrix(work / "in/bad.csv", -np.eye(5))
        assert main(["diagnose", "--khat", "in/k.csv", "--ktilde", "in/bad.csv"]) == 2


class TestPathAndSimulate:
    def test_path(self, work, capsys):
        from spectral_mtp2.mle import mtp2_mle
        from spectral_mtp2.simulate import generate_ba_model, sample_covariance

        model = generate_ba_model(20, 2, seed=3)
        S = sample_covariance(model, 200, 4)
        K, _ = mtp2_mle(S)
        write_matrix(work / "in/k.csv", K)
        write_matrix(work / "in/s.csv", S)
        code = main(["path", "--input", "in/k.csv", "--etas", "1.5,2,4", "--refit-cov", "in/s.csv",
                     "--n-train", "200", "--output", "out/p"])
        assert code == 0
        lines = (work / "out/p.path.csv").read_text().splitlines()
        assert lines[0].split(",")[:3] == ["eta", "epsilon", "edges_output"]
        assert len(lines) == 4
        assert "BIC-selected eta" in capsys.readouterr().out

    def test_path_bad_grid(self, work):
        write_matrix(work / "in/k.csv", tridiagonal())
        assert main(["path", "--input", "in/k.csv", "--etas", "2,x", "--output", "out/p"]) == 1

    def test_simulate_config(self, work):
        (work / "in/c.json").write_text(json.dumps(
            {"d": 10, "m": 1, "n_train": 100, "n_test": 100, "replications": 1, "eta_grid": [1.5, 2.0]}
        ))
        args = ["simulate", "--config", "in/c.json", "--out", "out/sim", "--workers", "1"]
        assert main(args) == 0
        first = (work / "out/sim/replications.csv").read_text()
        assert main(args) == 0
        assert (work / "out/sim/replications.csv").read_text() == first
        assert files_under(work / "out") == [
            "sim/manifest.json", "sim/methods.csv", "sim/path.csv", "sim/replications.csv"
        ]

    def test_simulate_bad_config(self, work):
        (work / "in/c.json").write_text(json.dumps({"d": 10, "m": 1, "eta_grid": [0.5]}))
        assert main(["simulate", "--config", "in/c.json", "--out", "out/sim"]) == 1


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "0.1.0" in capsys.readouterr().out
