import numpy as np
import pytest
from scipy.special import expit, log_expit

from ratiocopula.classifier import (
    Adam,
    MlpSpec,
    MLPRatio,
    PolyLogisticSpec,
    PolyRatio,
    TrainConfig,
    build_model,
    forward_log_ratio,
    input_gradient,
    loss_gradients,
    nce_loss,
    train,
)
from ratiocopula.exceptions import NumericalError, ValidationError
from ratiocopula.gaussian import sample_mvn

from helpers import central_diff, corr2, kink_free_rows, random_mlp, rel_err


def quadratic_poly_for(corr):
    """Degree-2 polynomial model equal to the Gaussian-copula log-ratio up to
    its constant, which is carried by ``log_z``."""
    A = -0.5 * (corr.inverse() - np.eye(2))
    model = PolyRatio(PolyLogisticSpec(2, degree=2))
    # monomials: z1, z2, z1^2, z1 z2, z2^2
    model.theta[:5] = [0.0, 0.0, A[0, 0], 2 * A[0, 1], A[1, 1]]
    return model


def gaussian_copula_latent_logpdf(corr, Z):
    A = corr.inverse() - np.eye(2)
    return -0.5 * corr.log_det - 0.5 * np.einsum("ij,jk,ik->i", Z, A, Z)


# model construction ------------------------------------------------------


def test_default_mlp_parameter_count():
    assert build_model("mlp", 2).n_params == 20601


def test_poly_monomial_count():
    assert len(PolyLogisticSpec(2, 5).exponents()) == 20
    assert len(PolyLogisticSpec(3, 2, include_interactions=False).exponents()) == 6
    assert PolyLogisticSpec(2, 2).exponents().tolist() == [[1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]


def test_build_model_rejects_unknown_kind():
    with pytest.raises(ValidationError):
        build_model("tree", 2)


@pytest.mark.parametrize("kind", ["mlp", "poly"])
def test_fresh_model_is_zero_map(kind, rng):
    model = build_model(kind, 3, random_state=1)
    np.testing.assert_array_equal(model.log_ratio(rng.normal(size=(50, 3)) * 3), 0.0)


def test_linear_poly_output():
    model = PolyRatio(PolyLogisticSpec(1, degree=1), theta=[1.7, -0.3])
    assert forward_log_ratio(model, np.array([2.0])) == pytest.approx(1.7 * 2 - 0.3)


def test_theta_shape_is_checked():
    with pytest.raises(ValidationError, match="entries"):
        PolyRatio(PolyLogisticSpec(1, degree=1), theta=[1.0])


def test_nonfinite_activation_names_layer():
    model = random_mlp(2, np.random.default_rng(0), scale=1e200)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericalError, match="hidden layer"):
        model.log_ratio(np.array([[1e200, 1e200]]))


# output and input gradients -----------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_mlp_output_parameter_gradient(seed):
    rng = np.random.default_rng(seed)
    model = random_mlp(2, rng, widths=(6, 6, 6), leak=0.01 * (seed % 2))
    z = kink_free_rows(model, rng, 1, 2, margin=0.05)

    def f(theta):
        return MLPRatio(model.spec, theta).raw_output(z)[0]

    grad = model.weight_gradient(z, np.ones(1))
    num = central_diff(f, model.theta)[:-1]
    assert np.max(rel_err(grad, num)) <= 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_mlp_input_gradient(seed):
    rng = np.random.default_rng(100 + seed)
    model = random_mlp(3, rng, widths=(10, 10), leak=0.01 * (seed % 2))
    Z = kink_free_rows(model, rng, 5, 3, margin=0.05)
    G = model.input_gradient(Z)
    for z, g in zip(Z, G):
        num = central_diff(lambda x: model.log_ratio(x[None, :])[0], z)
        assert np.max(rel_err(g, num)) <= 1e-5


@pytest.mark.parametrize("seed", range(10))
def test_poly_input_gradient(seed):
    rng = np.random.default_rng(200 + seed)
    model = PolyRatio(PolyLogisticSpec(3, degree=4))
    model.theta[:] = rng.normal(size=model.n_params)
    Z = rng.normal(size=(5, 3))
    G = model.input_gradient(Z)
    for z, g in zip(Z, G):
        num = central_diff(lambda x: model.log_ratio(x[None, :])[0], z)
        assert np.max(rel_err(g, num)) <= 1e-5


def test_linear_model_input_gradient_is_weight():
    model = PolyRatio(PolyLogisticSpec(3, degree=1), theta=[0.5, -2.0, 3.0, 0.1])
    np.testing.assert_array_equal(input_gradient(model, np.array([0.3, 0.2, -1.0])), [0.5, -2.0, 3.0])


def test_constant_model_input_gradient_is_zero(rng):
    model = build_model("mlp", 2, random_state=0)
    np.testing.assert_array_equal(model.input_gradient(rng.normal(size=(4, 2))), 0.0)


# loss ---------------------------------------------------------------------


def test_uninformative_loss_nu_one(rng):
    model = build_model("poly", 2)
    Z = rng.normal(size=(100, 2))
    assert nce_loss(model, Z, Z, nu=1) == pytest.approx(2 * np.log(2), abs=1e-12)


def test_uninformative_loss_nu_ten(rng):
    model = build_model("poly", 2)
    expected = -log_expit(-np.log(10)) - 10 * log_expit(np.log(10))
    got = nce_loss(model, rng.normal(size=(50, 2)), rng.normal(size=(500, 2)), nu=10)
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(3.3510, abs=1e-4)


def test_loss_matches_direct_formula(rng):
    # naive parametrization: s = g + log_z - log nu
    model = PolyRatio(PolyLogisticSpec(2, 3))
    model.theta[:] = rng.normal(scale=0.3, size=model.n_params)
    Zd, Zn = rng.normal(size=(40, 2)), rng.normal(size=(120, 2))
    s_d = model.raw_output(Zd) + model.log_z - np.log(3)
    s_n = model.raw_output(Zn) + model.log_z - np.log(3)
    direct = -(np.log(expit(s_d)).sum() + np.log(1 - expit(s_n)).sum()) / 40
    assert nce_loss(model, Zd, Zn, nu=3, self_normalize=False) == pytest.approx(direct, rel=1e-12)


def test_balanced_sigmoids_cancel_log_z_gradient(rng):
    model = build_model("poly", 2)
    Z = rng.normal(size=(64, 2))
    for normalize in (True, False):
        _, grad = loss_gradients(model, Z, -Z, nu=1, self_normalize=normalize)
        assert grad[-1] == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("normalize", [True, False])
@pytest.mark.parametrize("seed", range(10))
def test_mlp_loss_gradient(seed, normalize):
    rng = np.random.default_rng(300 + seed)
    model = random_mlp(2, rng, widths=(5, 5), leak=0.01 * (seed % 2), scale=0.4)
    Zd = kink_free_rows(model, rng, 6, 2, margin=0.05)
    Zn = kink_free_rows(model, rng, 12, 2, margin=0.05)
    _, grad = loss_gradients(model, Zd, Zn, nu=2, self_normalize=normalize)
    num = central_diff(lambda t: nce_loss(MLPRatio(model.spec, t), Zd, Zn, 2, normalize), model.theta)
    assert np.max(rel_err(grad, num)) <= 1e-5


@pytest.mark.parametrize("normalize", [True, False])
@pytest.mark.parametrize("seed", range(10))
def test_poly_loss_gradient(seed, normalize):
    rng = np.random.default_rng(400 + seed)
    model = PolyRatio(PolyLogisticSpec(2, degree=3))
    model.theta[:] = rng.normal(scale=0.2, size=model.n_params)
    Zd, Zn = rng.normal(size=(30, 2)), rng.normal(size=(90, 2))
    _, grad = loss_gradients(model, Zd, Zn, nu=3, self_normalize=normalize)
    num = central_diff(lambda t: nce_loss(PolyRatio(model.spec, t), Zd, Zn, 3, normalize), model.theta)
    assert np.max(rel_err(grad, num)) <= 1e-5


def test_true_ratio_beats_perturbations():
    corr = corr2(0.8)
    rng = np.random.default_rng(2024)
    Zd = sample_mvn(20000, corr, rng)
    Zn = rng.standard_normal((200000, 2))
    best = quadratic_poly_for(corr)
    best.theta[-1] = -0.5 * corr.log_det
    base = nce_loss(best, Zd, Zn, nu=10, self_normalize=False)
    for _ in range(100):
        theta = best.theta + rng.normal(scale=0.05, size=best.n_params)
        assert nce_loss(PolyRatio(best.spec, theta), Zd, Zn, 10, self_normalize=False) > base


def test_convex_optimum_has_vanishing_gradient():
    # Logistic regression on monomial features is convex; Newton's method
    # finds its optimum independently of the package's optimizer.
    rng = np.random.default_rng(5)
    Zd = sample_mvn(2000, corr2(0.5), rng)
    Zn = rng.standard_normal((4000, 2))
    model = PolyRatio(PolyLogisticSpec(2, degree=2))
    nu = 2.0
    phi = np.column_stack([model._features(model._powers(np.vstack([Zd, Zn]))), np.ones(6000)])
    y = np.r_[np.ones(2000), np.zeros(4000)]
    theta = np.zeros(6)
    for _ in range(50):
        p = expit(phi @ theta - np.log(nu))
        g = phi.T @ (p - y)
        H = phi.T @ (phi * (p * (1 - p))[:, None])
        theta -= np.linalg.solve(H, g)
    model.theta[:] = theta
    _, grad = loss_gradients(model, Zd, Zn, nu, self_normalize=False)
    assert np.linalg.norm(grad) <= 1e-6


# optimizer and training --------------------------------------------------


def test_adam_first_step_is_signed_learning_rate():
    theta = np.array([1.0, -2.0, 3.0])
    Adam(3, learning_rate=0.1).step(theta, np.array([5.0, -0.01, 0.0]))
    np.testing.assert_allclose(theta, [0.9, -1.9, 3.0], atol=1e-7)


def test_adam_minimizes_quadratic():
    theta = np.array([3.0, -4.0])
    opt = Adam(2, learning_rate=0.05)
    for _ in range(2000):
        opt.step(theta, 2 * theta)
    assert np.linalg.norm(theta) < 1e-3


def test_train_config_validation():
    with pytest.raises(ValidationError, match="nu"):
        TrainConfig(nu=0).validate()
    with pytest.raises(ValidationError, match="epochs"):
        TrainConfig(epochs=0).validate()


def _grid(lo, hi, m=21):
    g = np.linspace(lo, hi, m)
    return np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)


def test_poly_training_recovers_gaussian_copula():
    # On [-2, 2]^2 the sampling error of n = 5000 alone is of order 0.05 nats
    # (the Gaussian maximum-likelihood plug-in scores 0.02-0.06 across seeds),
    # so this runs long enough for the optimizer error to be negligible.
    corr = corr2(0.8)
    Z = sample_mvn(5000, corr, random_state=1)
    model = build_model("poly", 2, degree=2)
    train(model, Z, TrainConfig(nu=10, epochs=1500, learning_rate=0.02, seed=11))
    grid = _grid(-2, 2)
    mae = np.mean(np.abs(model.log_ratio(grid) - gaussian_copula_latent_logpdf(corr, grid)))
    assert mae <= 0.05


def test_independent_data_gives_unit_ratio():
    Z = np.random.default_rng(3).standard_normal((5000, 2))
    model = build_model("poly", 2, degree=2)
    train(model, Z, TrainConfig(nu=10, epochs=300, learning_rate=0.02, seed=4))
    assert np.max(np.abs(model.log_ratio(_grid(-2, 2)))) <= 0.1
    assert abs(model.log_z) <= 0.1


def test_estimate_is_consistent_across_nu():
    corr = corr2(0.6)
    Z = sample_mvn(5000, corr, random_state=8)
    grid = _grid(-1.5, 1.5)
    truth = gaussian_copula_latent_logpdf(corr, grid)
    for nu in (1.0, 5.0, 20.0):
        model = build_model("poly", 2, degree=2)
        train(model, Z, TrainConfig(nu=nu, epochs=400, learning_rate=0.02, seed=9))
        assert np.mean(np.abs(model.log_ratio(grid) - truth)) <= 0.06, nu


def test_training_is_deterministic():
    Z = sample_mvn(500, corr2(0.5), random_state=0)
    runs = []
    for _ in range(2):
        model = build_model("mlp", 2, random_state=5, hidden_widths=(16, 16))
        trace = train(model, Z, TrainConfig(epochs=20, seed=6))
        runs.append((trace, model.theta.copy(), model.log_norm))
    np.testing.assert_array_equal(runs[0][0], runs[1][0])
    np.testing.assert_array_equal(runs[0][1], runs[1][1])
    assert runs[0][2] == runs[1][2]


def test_minibatch_and_fixed_noise_paths():
    Z = sample_mvn(600, corr2(0.7), random_state=0)
    model = build_model("poly", 2, degree=2)
    trace = train(model, Z, TrainConfig(epochs=30, batch_size=128, resample_noise=False, learning_rate=0.02, seed=1))
    assert trace.shape == (30,) and np.all(np.isfinite(trace))
    assert trace[-1] < trace[0]


def _failing_epochs(monkeypatch, fail_calls):
    import ratiocopula.classifier as clf

    real = clf._run_epoch
    calls = {"n": 0, "lr": []}

    def run(model, Zd, opt, *args):
        k = calls["n"]
        calls["n"] += 1
        calls["lr"].append(opt.learning_rate)
        if fail_calls(k):
            raise NumericalError("non-finite loss or gradient")
        return real(model, Zd, opt, *args)

    monkeypatch.setattr(clf, "_run_epoch", run)
    return calls


def test_single_failure_rolls_back_and_halves_step(monkeypatch):
    calls = _failing_epochs(monkeypatch, lambda k: k == 3)
    Z = sample_mvn(300, corr2(0.5), random_state=0)
    trace = train(build_model("poly", 2, degree=2), Z, TrainConfig(epochs=6, learning_rate=0.01, seed=0))
    assert trace.shape == (6,) and np.all(np.isfinite(trace))
    # epochs 0-2 run, epoch 3 fails, epoch 2 is redone at half the step
    assert calls["n"] == 8
    assert calls["lr"][:4] == [0.01] * 4 and calls["lr"][4:] == [0.005] * 4


def test_repeated_failure_raises_with_epoch(monkeypatch):
    _failing_epochs(monkeypatch, lambda k: k >= 3)
    Z = sample_mvn(300, corr2(0.5), random_state=0)
    with pytest.raises(NumericalError, match="diverged at epoch 2"):
        train(build_model("poly", 2, degree=2), Z, TrainConfig(epochs=6, seed=0))
