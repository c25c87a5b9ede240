import io as _io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import ndtri
from scipy.stats import kstest

from ratiocopula import cli, io
from ratiocopula.classifier import PolyLogisticSpec, PolyRatio
from ratiocopula.estimator import RatioCopula
from ratiocopula.exceptions import ModelFormatError, ValidationError
from ratiocopula.marginals import EmpiricalMarginals

from helpers import DATA_DIR, corr2, zero_copula

FIXTURE = DATA_DIR / "gauss2d_rho08.csv"


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def metrics(text):
    rows = [line.split(",") for line in text.strip().splitlines()[1:]]
    return {k: float(v) for k, v in rows}


# CSV ------------------------------------------------------------------------


def test_csv_header_detection():
    X, names = io.read_csv(_io.StringIO("a,b\n1,2\n3,4\n"))
    assert names == ["a", "b"]
    np.testing.assert_array_equal(X, [[1, 2], [3, 4]])
    X, names = io.read_csv(_io.StringIO("1,2\n3,4\n"))
    assert names == ["x1", "x2"] and X.shape == (2, 2)


@pytest.mark.parametrize(
    "text, match",
    [
        ("a,b\n1,2\n3\n", "line 3: expected 2 fields"),
        ("1,2\n3,\n", "line 2: missing field"),
        ("1,2\n3,x\n", "line 2: 'x' is not a number"),
        ("", "no rows"),
        ("a,b\n", "no data"),
    ],
)
def test_csv_errors(text, match):
    with pytest.raises(ValidationError, match=match):
        io.read_csv(_io.StringIO(text))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 10), st.integers(1, 4)), elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_csv_round_trip_is_lossless(X):
    buf = _io.StringIO()
    io.write_csv(buf, X)
    buf.seek(0)
    back, _ = io.read_csv(buf)
    np.testing.assert_array_equal(back, X)


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nepochs = 12\n\nbatch-size = 64  # inline\n")
    assert io.read_config(path) == {"epochs": "12", "batch_size": "64"}
    path.write_text("epochs 12\n")
    with pytest.raises(ValidationError, match="key = value"):
        io.read_config(path)


# model files ----------------------------------------------------------------


def _fitted(kind, guided, rng):
    X = rng.normal(size=(200, 3)) @ np.array([[1, 0.5, 0], [0, 1, 0.3], [0, 0, 1]])
    return RatioCopula(model=kind, degree=3, hidden_widths=(6, 6), epochs=5, guided=guided, random_state=0).fit(X)


@pytest.mark.parametrize("kind", ["mlp", "poly"])
@pytest.mark.parametrize("guided", [True, False])
def test_model_round_trip(kind, guided, rng):
    est = _fitted(kind, guided, rng)
    blob = io.dump_model(est)
    back = io.parse_model(blob)
    assert io.dump_model(back) == blob
    U = rng.uniform(0.05, 0.95, (20, 3))
    np.testing.assert_array_equal(back.log_pdf(U), est.log_pdf(U))
    np.testing.assert_array_equal(back.marginals_.sorted_values_, est.marginals_.sorted_values_)
    assert (back.guide_ is None) == (not guided)


def test_model_without_marginals(tmp_path):
    est = zero_copula(2, guide=corr2(0.3))
    path = tmp_path / "m.bin"
    io.save_model(path, est)
    back = io.load_model(path)
    assert back.marginals_ is None
    np.testing.assert_array_equal(back.guide_.sigma, est.guide_.sigma)


def test_model_header_layout(rng):
    blob = io.dump_model(_fitted("poly", False, rng))
    assert blob[:8] == b"RATIOCOP"
    version, kind, d, degree, inter = struct.unpack_from("<IBIIB", blob, 8)
    assert (version, kind, d, degree, inter) == (1, 2, 3, 3, 1)


@pytest.mark.parametrize(
    "mutate, match",
    [
        (lambda b: b"NOTACOPL" + b[8:], "magic"),
        (lambda b: b[:8] + struct.pack("<I", 2) + b[12:], "version 2"),
        (lambda b: b[:12] + b"\x07" + b[13:], "kind 7"),
        (lambda b: b[:-5], "truncated"),
        (lambda b: b + b"\x00", "trailing"),
    ],
)
def test_corrupt_model_files(mutate, match, rng):
    blob = io.dump_model(_fitted("mlp", True, rng))
    with pytest.raises(ModelFormatError, match=match):
        io.parse_model(mutate(blob))


# CLI ------------------------------------------------------------------------


def test_gen_reproduces_bundled_fixture(tmp_path, capsys):
    out = tmp_path / "g.csv"
    code, _, err = run(["gen", "--kind", "gauss", "--n", 2000, "--seed", 1, "--out", out], capsys)
    assert code == 0 and "gen config" in err
    assert out.read_bytes() == FIXTURE.read_bytes()


def test_fit_reports_kl_of_fixture(tmp_path, capsys):
    model = tmp_path / "m.bin"
    code, out, _ = run(["fit", FIXTURE, "--model", "poly", "--degree", 2, "--epochs", 100,
                        "--lr", 0.02, "--seed", 0, "--out", model], capsys)
    assert code == 0
    report = metrics(out)
    assert report["kl_exact"] == pytest.approx(0.51, abs=0.05)
    assert {"z_estimate", "final_loss", "kl_bound"} <= set(report)
    assert model.stat().st_size > 0


def test_fit_rejects_zero_nu(tmp_path, capsys):
    code, _, err = run(["fit", FIXTURE, "--nu", 0, "--out", tmp_path / "m.bin"], capsys)
    assert code == 3 and "nu" in err


def test_fit_same_seed_gives_identical_files(tmp_path, capsys):
    paths = [tmp_path / "a.bin", tmp_path / "b.bin"]
    for p in paths:
        assert run(["fit", FIXTURE, "--widths", "8,8", "--epochs", 5, "--seed", 4, "--out", p], capsys)[0] == 0
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_eval_independence(tmp_path, capsys):
    model = tmp_path / "zero.bin"
    est = zero_copula(2)
    est.marginals_ = EmpiricalMarginals().fit(np.loadtxt(FIXTURE, delimiter=",", skiprows=1))
    io.save_model(model, est)
    code, out, _ = run(["eval", model, FIXTURE], capsys)
    assert code == 0 and abs(metrics(out)["avg_loglik"]) <= 1e-12
    code, out, _ = run(["eval", "--baseline", "independence", FIXTURE], capsys)
    assert code == 0 and abs(metrics(out)["avg_loglik"]) <= 1e-12


def test_eval_gaussian_baseline(tmp_path, capsys):
    per_row = tmp_path / "rows.csv"
    code, out, _ = run(["eval", "--baseline", "gaussian", FIXTURE, "--out", per_row], capsys)
    assert code == 0
    m = metrics(out)
    assert m["avg_loglik"] == pytest.approx(0.51, abs=0.05)
    values, names = io.read_csv(per_row)
    assert names == ["log_density"] and values.shape == (2000, 1)
    assert values.mean() == pytest.approx(m["avg_loglik"], rel=1e-12)


def test_eval_corrupt_model(tmp_path, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage")
    code, _, err = run(["eval", bad, FIXTURE], capsys)
    assert code == 2 and "magic" in err


def test_eval_dimension_mismatch(tmp_path, capsys):
    model = tmp_path / "m.bin"
    io.save_model(model, zero_copula(3))
    code, _, err = run(["eval", model, FIXTURE, "--scale", "pseudo"], capsys)
    assert code == 3 and "dimensions" in err


def test_missing_input_is_io_error(tmp_path, capsys):
    code, _, _ = run(["diagnose", tmp_path / "nope.csv"], capsys)
    assert code == 2


def test_bad_arguments_exit_three(capsys):
    assert run(["fit"], capsys)[0] == 3
    assert run(["frobnicate"], capsys)[0] == 3


def test_sample_independence_is_uniform(tmp_path, capsys):
    model = tmp_path / "zero.bin"
    io.save_model(model, zero_copula(2))
    code, out, err = run(["sample", model, "--n", 1000, "--seed", 3], capsys)
    assert code == 0 and "acceptance_rate" in err
    U, _ = io.read_csv(_io.StringIO(out))
    assert U.shape == (1000, 2)
    for j in range(2):
        assert kstest(U[:, j], "uniform").pvalue > 0.01


def test_sample_gaussian_guide(tmp_path, capsys):
    model = tmp_path / "g.bin"
    io.save_model(model, zero_copula(2, guide=corr2(0.8)))
    out = tmp_path / "s.csv"
    assert run(["sample", model, "--n", 2000, "--seed", 4, "--out", out], capsys)[0] == 0
    U, _ = io.read_csv(out)
    assert np.corrcoef(ndtri(U).T)[0, 1] == pytest.approx(0.8, abs=0.05)


def test_sample_data_scale(tmp_path, capsys):
    X = np.random.default_rng(0).exponential(size=(300, 2))
    est = zero_copula(2)
    est.marginals_ = EmpiricalMarginals().fit(X)
    model = tmp_path / "m.bin"
    io.save_model(model, est)
    code, out, _ = run(["sample", model, "--n", 200, "--scale", "data", "--seed", 1], capsys)
    S, _ = io.read_csv(_io.StringIO(out))
    assert code == 0 and np.all(S >= X.min(axis=0)) and np.all(S <= X.max(axis=0))
    assert run(["sample", tmp_path / "none.bin", "--n", 5], capsys)[0] == 2


def test_sample_numerical_failure_exits_four(tmp_path, capsys):
    # log-ratio 1e300 z1^2 is not finite at any start point away from 0
    model = PolyRatio(PolyLogisticSpec(2, degree=2), theta=[0, 0, 1e300, 0, 0, 0])
    path = tmp_path / "bad.bin"
    io.save_model(path, RatioCopula.from_parts(model))
    code, _, err = run(["sample", path, "--n", 10, "--seed", 0], capsys)
    assert code == 4 and "error" in err


def test_gen_kinds(tmp_path, capsys):
    code, out, _ = run(["gen", "--kind", "mixture", "--rho", 0.8, "--rho2", -0.8, "--n", 300, "--seed", 2], capsys)
    assert code == 0 and io.read_csv(_io.StringIO(out))[0].shape == (300, 2)
    code, out, _ = run(["gen", "--corr", "1,0.5,0.2;0.5,1,0.1;0.2,0.1,1", "--n", 50, "--seed", 2], capsys)
    assert code == 0 and io.read_csv(_io.StringIO(out))[0].shape == (50, 3)
    code, out, _ = run(["gen", "--kind", "image", "--image", DATA_DIR / "diagonal16.pgm", "--n", 100, "--seed", 2], capsys)
    assert code == 0 and io.read_csv(_io.StringIO(out))[0].shape == (100, 2)


@pytest.mark.parametrize(
    "args",
    [
        ["--corr", "1,2;2,1"],
        ["--corr", "1,0.5;0.4,1"],
        ["--corr", "1,0.5;0.5"],
        ["--dim", 3, "--rho", -0.7],
        ["--kind", "image"],
    ],
)
def test_gen_rejects_invalid_sigma(args, capsys):
    assert run(["gen", *args], capsys)[0] == 3


def test_diagnose(tmp_path, capsys):
    code, out, err = run(["diagnose", FIXTURE], capsys)
    m = metrics(out)
    assert code == 0 and m["kl_warning"] == 0 and "warning" not in err
    assert m["kl_exact"] == pytest.approx(0.51, abs=0.05)
    assert m["kl_bound"] == pytest.approx(1.61, abs=0.1)
    assert m["eigenvalue_1"] + m["eigenvalue_2"] == pytest.approx(2.0)

    flat = tmp_path / "ind.csv"
    io.write_csv(flat, np.random.default_rng(1).uniform(size=(5000, 2)))
    m = metrics(run(["diagnose", flat], capsys)[1])
    assert m["kl_exact"] < 0.01 and m["kl_warning"] == 0

    Z = np.random.default_rng(2).normal(size=(2000, 1)) + 0.05 * np.random.default_rng(3).normal(size=(2000, 12))
    tight = tmp_path / "tight.csv"
    io.write_csv(tight, Z)
    code, out, err = run(["diagnose", tight], capsys)
    assert code == 0 and metrics(out)["kl_warning"] == 1 and "20-nat" in err


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("n = 7\nseed = 5\nrho = 0.3\n")
    code, out, err = run(["gen", "--config", cfg, "--n", 4], capsys)
    assert code == 0
    assert io.read_csv(_io.StringIO(out))[0].shape == (4, 2)
    assert "n=4" in err and "rho=0.3" in err and "seed=5" in err
    cfg.write_text("colour = red\n")
    code, _, err = run(["gen", "--config", cfg], capsys)
    assert code == 3 and "colour" in err
    cfg.write_text("n = many\n")
    assert run(["gen", "--config", cfg], capsys)[0] == 3


def test_fit_eval_sample_round_trip(tmp_path, capsys):
    model, samples = tmp_path / "m.bin", tmp_path / "s.csv"
    assert run(["fit", FIXTURE, "--model", "poly", "--degree", 2, "--epochs", 30, "--seed", 1, "--out", model], capsys)[0] == 0
    assert run(["sample", model, "--n", 300, "--scale", "data", "--seed", 2, "--out", samples], capsys)[0] == 0
    code, out, _ = run(["eval", model, FIXTURE, "--samples", samples], capsys)
    m = metrics(out)
    assert code == 0 and m["w2_pairs"] == 300 and m["w2_data"] > 0 and m["w2_pseudo"] > 0
