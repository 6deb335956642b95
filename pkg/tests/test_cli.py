import subprocess
import sys

import numpy as np
import pytest

from helpers import convolve_binomials
from patassign import __version__
from patassign.cli import EXIT_INFEASIBLE, EXIT_OK, EXIT_TOO_LARGE, EXIT_USAGE, main, parse_terms

ALWAYS_FULL = """\
wards: {capacities: [1]}
types: {arrival_rates: [50.0]}
departure_probs: [[1.0]]
preference_order: [[1]]
waiting_capacity: 1
costs: {assignment: 1.0, transfer: 0.0, penalty: {value: 0.25, scope: all}}
labels: [{name: a1}]
"""

OVERFLOW = """\
wards: {capacities: [1]}
types: {arrival_rates: [5.0]}
departure_probs: [[0.1]]
preference_order: [[1]]
arrival_regime: unrestricted
costs: {assignment: 1.0, transfer: 0.0, penalty: 0.0}
labels: [{name: a1}]
"""


def run(capsys, *argv):
    try:
        rc = main(list(argv))
    except SystemExit as err:  # argparse rejections
        rc = err.code
    out = capsys.readouterr()
    return rc, out.out, out.err


def data_rows(text):
    return [line for line in text.splitlines() if line and not line.startswith("#")]


class TestDist:
    def test_two_terms(self, capsys):
        rc, out, _ = run(capsys, "dist", "--terms", "2:0.3,1:0.5")
        assert rc == EXIT_OK
        rows = data_rows(out)
        assert rows[0] == "value,probability"
        probs = np.array([float(r.split(",")[1]) for r in rows[1:]])
        assert probs.size == 4
        np.testing.assert_allclose(probs, convolve_binomials([(2, 0.3), (1, 0.5)]), atol=1e-15)
        assert f"patassign {__version__}" in out

    def test_single_term_is_binomial(self, capsys):
        rc, out, _ = run(capsys, "dist", "--terms", "3:0.2")
        probs = [float(r.split(",")[1]) for r in data_rows(out)[1:]]
        np.testing.assert_allclose(probs, [0.512, 0.384, 0.096, 0.008], atol=1e-15)

    @pytest.mark.parametrize("terms", ["", "2", "x:0.5", "2:1.5"])
    def test_bad_terms(self, capsys, terms):
        rc, _, err = run(capsys, "dist", "--terms", terms)
        assert rc == EXIT_USAGE and err.startswith("error")

    def test_nothing_given(self, capsys):
        assert run(capsys, "dist")[0] == EXIT_USAGE

    def test_occupancy(self, capsys, tmp_path):
        rc, out, _ = run(capsys, "dist", "--config", "builtin:example1", "--occupancy", "[[1,0],[1,0]]",
                         "--out", str(tmp_path))
        assert rc == EXIT_OK
        probs = [float(r.split(",")[1]) for r in data_rows(out)[1:]]
        np.testing.assert_allclose(probs, convolve_binomials([(1, 0.2), (1, 0.1)]), atol=1e-15)
        assert (tmp_path / "pmf.csv").exists()

    def test_parse_terms(self):
        assert [(t.trials, t.success_prob) for t in parse_terms("2:0.3, 1:0.5,")] == [(2, 0.3), (1, 0.5)]


class TestSolveExact:
    def test_reference_instance(self, capsys, tmp_path):
        rc, out, _ = run(capsys, "solve-exact", "--config", "builtin:example1", "--out", str(tmp_path))
        assert rc == EXIT_OK
        assert "gain: 0.5150" in out
        assert "0010|01:" in out
        lines = (tmp_path / "bias.csv").read_text().splitlines()
        assert any(line.startswith("# config: builtin:example1 sha256:") for line in lines)
        assert "state,label,bias" in lines

    def test_two_state_config_gain_is_its_cost(self, capsys, tmp_path):
        path = tmp_path / "full.cfg"
        path.write_text(ALWAYS_FULL)
        rc, out, _ = run(capsys, "solve-exact", "--config", str(path))
        assert rc == EXIT_OK
        gain = float(next(line for line in out.splitlines() if line.startswith("gain_exact:")).split()[1])
        assert gain == pytest.approx(1.25 * (1 - np.exp(-50.0)), abs=1e-15)

    def test_large_instance_refused(self, capsys):
        rc, _, err = run(capsys, "solve-exact", "--config", "builtin:example2")
        assert rc == EXIT_TOO_LARGE
        assert "2.9544e+28" in err and "patassign train" in err


class TestTrain:
    def test_zero_iterations(self, capsys, tmp_path):
        rc, out, err = run(capsys, "train", "--config", "builtin:example1", "--iterations", "0", "--steps", "500",
                           "--out", str(tmp_path))
        assert rc == EXIT_OK
        assert "gain[0]:" in out and "gain[1]" not in out
        assert (tmp_path / "train.csv").exists() and (tmp_path / "weights.txt").exists()

    def test_bad_seed(self, capsys):
        rc, _, err = run(capsys, "train", "--config", "builtin:example1", "--seed", "abc")
        assert rc == EXIT_USAGE
        assert "seed" in err

    def test_weights_feed_simulation(self, capsys, tmp_path):
        rc, _, err = run(capsys, "train", "--config", "builtin:example1", "--iterations", "2", "--steps", "2000",
                         "--out", str(tmp_path))
        assert rc == EXIT_OK and "iteration 2:" in err
        w = tmp_path / "weights.txt"
        rc, out, _ = run(capsys, "simulate", "--config", "builtin:example1", "--policy", f"weights:{w}",
                         "--days", "200", "--reps", "2", "--warmup", "10")
        assert rc == EXIT_OK and "near-optimal" in out


class TestSimulate:
    ARGS = ("--config", "builtin:example2", "--days", "150", "--reps", "3", "--warmup", "20", "--seed", "4")

    def test_outputs_and_headers(self, capsys, tmp_path):
        rc, out, _ = run(capsys, "simulate", *self.ARGS, "--policy", "a2", "--out", str(tmp_path))
        assert rc == EXIT_OK
        assert "mean_cost:" in out
        text = (tmp_path / "replications.csv").read_text()
        assert "# seed: 4" in text and "sha256:" in text and f"# patassign {__version__}" in text
        assert len(data_rows((tmp_path / "days.csv").read_text())) == 1 + 150

    def test_deterministic(self, capsys, tmp_path):
        for d in ("one", "two"):
            assert run(capsys, "simulate", *self.ARGS, "--policy", "a3", "--out", str(tmp_path / d))[0] == EXIT_OK
        assert (tmp_path / "one" / "replications.csv").read_text() == (tmp_path / "two" / "replications.csv").read_text()

    @pytest.mark.parametrize("flag,value", [("--reps", "0"), ("--days", "-3"), ("--threads", "0")])
    def test_bad_counts(self, capsys, flag, value):
        assert run(capsys, "simulate", "--config", "builtin:example2", flag, value)[0] == EXIT_USAGE

    def test_warmup_too_long(self, capsys):
        rc, _, err = run(capsys, "simulate", "--config", "builtin:example2", "--days", "10", "--warmup", "10")
        assert rc == EXIT_USAGE and "warmup" in err

    def test_unknown_policy(self, capsys):
        rc, _, err = run(capsys, "simulate", *self.ARGS, "--policy", "a7")
        assert rc == EXIT_USAGE and "unknown policy" in err

    def test_weights_dimension_mismatch(self, capsys, tmp_path):
        w = tmp_path / "w.txt"
        w.write_text("1.0\n2.0\n")
        rc, _, err = run(capsys, "simulate", *self.ARGS, "--policy", f"weights:{w}")
        assert rc == EXIT_USAGE and "weights" in err

    def test_infeasible(self, capsys, tmp_path):
        path = tmp_path / "over.cfg"
        path.write_text(OVERFLOW)
        rc, _, err = run(capsys, "simulate", "--config", str(path), "--days", "50", "--reps", "1", "--warmup", "0")
        assert rc == EXIT_INFEASIBLE and "infeasible" in err

    def test_missing_config(self, capsys, tmp_path):
        assert run(capsys, "simulate")[0] == EXIT_USAGE
        assert run(capsys, "simulate", "--config", str(tmp_path / "absent.cfg"))[0] == EXIT_USAGE

    def test_broken_config(self, capsys, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text(ALWAYS_FULL.replace("[[1]]", "[[2]]"))
        rc, _, err = run(capsys, "simulate", "--config", str(path))
        assert rc == EXIT_USAGE and "preference_order[0]" in err


class TestCompare:
    ARGS = ("--config", "builtin:example2", "--days", "150", "--reps", "3", "--warmup", "20")

    def test_alias_of_second_label(self, capsys, tmp_path):
        rc, out, _ = run(capsys, "compare", *self.ARGS, "--policy", "a2", "--policy", "y4", "--out", str(tmp_path))
        assert rc == EXIT_OK
        a2 = data_rows((tmp_path / "replications_a2.csv").read_text())
        y4 = data_rows((tmp_path / "replications_y4.csv").read_text())
        assert a2[1:] == y4[1:]
        assert (tmp_path / "extra_transfers.csv").exists()
        assert "mean cost" in out

    def test_default_policies(self, capsys, tmp_path):
        rc, _, _ = run(capsys, "compare", *self.ARGS, "--out", str(tmp_path))
        assert rc == EXIT_OK
        rows = data_rows((tmp_path / "compare.csv").read_text())
        assert [r.split(",")[0] for r in rows[1:]] == ["a1", "a2", "a3"]

    def test_single_policy_refused(self, capsys):
        assert run(capsys, "compare", *self.ARGS, "--policy", "a1")[0] == EXIT_USAGE


def test_process_exit_codes():
    base = [sys.executable, "-m", "patassign.cli"]
    ok = subprocess.run(base + ["dist", "--terms", "1:0.5"], capture_output=True, text=True)
    assert ok.returncode == EXIT_OK
    bad = subprocess.run(base + ["simulate", "--config", "builtin:example2", "--reps", "0"], capture_output=True,
                         text=True)
    assert bad.returncode == EXIT_USAGE
    big = subprocess.run(base + ["solve-exact", "--config", "builtin:example2"], capture_output=True, text=True)
    assert big.returncode == EXIT_TOO_LARGE
