"""Command-line interface.

Data go to stdout (or ``--out``); diagnostics, the resolved configuration and
warnings go to stderr. Exit codes: 0 success, 2 I/O or corrupt model file,
3 invalid input or arguments, 4 numerical failure.
"""

import argparse
import sys
import warnings

import numpy as np
from scipy.special import ndtri

from . import io
from .baselines import GaussianCopula
from .estimator import RatioCopula
from .exceptions import ModelFormatError, NumericalError, ValidationError
from .gaussian import KL_WARNING_NATS, CorrelationMatrix, estimate_correlation, kl_gaussian_copula
from .marginals import EmpiricalMarginals, latent_to_pseudo
from .metrics import (
    W2_MAX_POINTS,
    avg_loglik,
    gen_gaussian_copula,
    gen_gaussian_mixture_copula,
    gen_image_copula,
    read_pgm,
    wasserstein2,
)
from .sampling import HmcConfig, sample_latent

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgumentError(f"{self.prog}: {message}")


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return value


def _widths(text):
    try:
        widths = tuple(int(w) for w in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be comma-separated integers, got {text!r}") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError("widths must be positive")
    return widths


def _guided(text):
    value = text.strip().lower()
    if value == "auto":
        return "auto"
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected auto, true or false, got {text!r}")


def _flag(text):
    value = _guided(text)
    if value == "auto":
        raise argparse.ArgumentTypeError("expected true or false")
    return value


# Per-command defaults; flags and config entries override them.
_DEFAULTS = {
    "fit": dict(
        guided="auto", model="mlp", degree=5, widths=None, leak=None, nu=10.0, epochs=500,
        lr=1e-3, batch_size=None, seed=None, scale="data",
    ),
    "eval": dict(baseline=None, scale="data", out=None, samples=None),
    "sample": dict(
        n=1000, hmc_step=0.1, leapfrog=20, burnin=100, adapt=True, seed=None, scale="pseudo", out=None,
    ),
    "gen": dict(kind="gauss", dim=2, rho=0.8, corr=None, rho2=-0.8, image=None, n=1000, seed=None, out=None),
    "diagnose": dict(scale="data"),
}
# Keys a config file may not set.
_POSITIONAL = {"fit": {"data"}, "eval": {"inputs"}, "sample": {"model"}, "gen": set(), "diagnose": {"data"}}


def build_parser():
    parser = _Parser(prog="ratiocopula", description="Copula density estimation by noise classification.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="file of 'key = value' lines; flags take precedence")
        return p

    p = add("fit", "fit a ratio copula to a CSV of data rows")
    p.add_argument("data", help="input CSV")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--guided", type=_guided, nargs="?", const=True,
                   help="auto, true or false (bare flag means true)")
    p.add_argument("--model", choices=("mlp", "poly"))
    p.add_argument("--degree", type=_positive_int)
    p.add_argument("--widths", type=_widths, help="hidden widths, e.g. 100,100")
    p.add_argument("--leak", type=float)
    p.add_argument("--nu", type=_positive_float, help="noise points per data point")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=_positive_float, help="Adam learning rate")
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--seed", type=_nonneg_int)
    p.add_argument("--scale", choices=("data", "pseudo"), help="scale of the input CSV")

    p = add("eval", "average copula log-likelihood of a CSV")
    p.add_argument("inputs", nargs="+", metavar="FILE",
                   help="MODEL DATA, or only DATA together with --baseline")
    p.add_argument("--baseline", choices=("gaussian", "independence"),
                   help="score a reference copula instead of a model file")
    p.add_argument("--scale", choices=("data", "pseudo"), help="scale of the input CSV")
    p.add_argument("--out", help="CSV of per-row log-densities")
    p.add_argument("--samples", help="sample CSV; reports W2 to the data on both scales")

    p = add("sample", "draw samples from a fitted model with HMC")
    p.add_argument("model", help="model file")
    p.add_argument("--n", type=_positive_int)
    p.add_argument("--hmc-step", type=_positive_float)
    p.add_argument("--leapfrog", type=_positive_int)
    p.add_argument("--burnin", type=_nonneg_int)
    p.add_argument("--adapt", type=_flag, help="adapt the step size during burn-in (true/false)")
    p.add_argument("--seed", type=_nonneg_int)
    p.add_argument("--scale", choices=("pseudo", "data", "latent"))
    p.add_argument("--out", help="output CSV (default stdout)")

    p = add("gen", "generate synthetic copula data")
    p.add_argument("--kind", choices=("gauss", "mixture", "image"))
    p.add_argument("--dim", type=_positive_int)
    p.add_argument("--rho", type=float, help="equicorrelation of the (first) Gaussian copula")
    p.add_argument("--corr", help="full correlation matrix, rows separated by ';', e.g. '1,0.8;0.8,1'")
    p.add_argument("--rho2", type=float, help="equicorrelation of the second mixture component")
    p.add_argument("--image", help="PGM image for --kind image")
    p.add_argument("--n", type=_positive_int)
    p.add_argument("--seed", type=_nonneg_int)
    p.add_argument("--out", help="output CSV (default stdout)")

    p = add("diagnose", "latent correlation spectrum and Gaussian KL of a CSV")
    p.add_argument("data", help="input CSV")
    p.add_argument("--scale", choices=("data", "pseudo"), help="scale of the input CSV")
    return parser


def _subparser(parser, command):
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _resolve(parser, args):
    """Merge defaults, config file entries and explicit flags."""
    command = args.command
    sub = _subparser(parser, command)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    config = dict(_DEFAULTS[command])
    if args.config:
        for key, text in io.read_config(args.config).items():
            if key not in actions or key in _POSITIONAL[command]:
                raise ValidationError(f"{args.config}: unknown key {key!r} for '{command}'")
            action = actions[key]
            try:
                value = action.type(text) if action.type else text
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise ValidationError(f"{args.config}: bad value for {key!r}: {exc}") from None
            if action.choices is not None and value not in action.choices:
                raise ValidationError(f"{args.config}: {key} must be one of {sorted(action.choices)}")
            config[key] = value
    for key, value in vars(args).items():
        if key in ("command", "config"):
            continue
        if value is not None or key not in config:
            config[key] = value
    return config


def _log_config(command, config):
    items = ", ".join(f"{k}={config[k]!r}" for k in sorted(config))
    print(f"# {command} config: {items}", file=sys.stderr)


def _read_matrix(path):
    X, _ = io.read_csv(path)
    return X


def _to_pseudo(X, scale):
    if scale == "pseudo":
        from ._validation import check_unit_open

        return check_unit_open(X)
    return EmpiricalMarginals().fit(X).transform(X)


def _open_out(path):
    return sys.stdout if path in (None, "-") else open(path, "w", newline="")


def _write_rows(path, values, names=None):
    fh = _open_out(path)
    try:
        io.write_csv(fh, values, names)
    finally:
        if fh is not sys.stdout:
            fh.close()


# commands -----------------------------------------------------------------


def cmd_fit(cfg):
    X = _read_matrix(cfg["data"])
    if cfg["scale"] == "pseudo":
        _to_pseudo(X, "pseudo")
    est = RatioCopula(
        model=cfg["model"],
        degree=cfg["degree"],
        hidden_widths=cfg["widths"],
        leak=cfg["leak"],
        nu=cfg["nu"],
        epochs=cfg["epochs"],
        learning_rate=cfg["lr"],
        batch_size=cfg["batch_size"],
        guided=cfg["guided"],
        random_state=cfg["seed"],
    )
    est.fit(X)
    io.save_model(cfg["out"], est)
    io.write_metrics(sys.stdout, est.report_.rows())
    return EXIT_OK


def _independence_logpdf(U):
    return np.zeros(len(U))


def cmd_eval(cfg):
    inputs = cfg["inputs"]
    baseline = cfg["baseline"]
    if baseline is None and len(inputs) != 2:
        raise ValidationError("eval needs MODEL DATA (or DATA with --baseline)")
    if baseline is not None and len(inputs) != 1:
        raise ValidationError("with --baseline, eval takes only DATA")
    data_path = inputs[-1]
    X = _read_matrix(data_path)

    if baseline is None:
        est = io.load_model(inputs[0])
        if X.shape[1] != est.n_features_in_:
            raise ValidationError(f"model has {est.n_features_in_} dimensions, data has {X.shape[1]}")
        if cfg["scale"] == "pseudo":
            U = _to_pseudo(X, "pseudo")
        elif est.marginals_ is None:
            raise ValidationError("model has no marginals; pass --scale pseudo with pseudo-observations")
        else:
            U = est.marginals_.cdf(X)
        logpdf = est.log_pdf
    else:
        U = _to_pseudo(X, cfg["scale"])
        if baseline == "independence":
            logpdf = _independence_logpdf
        else:
            # Gaussian copula with the correlation of the evaluated data itself.
            logpdf = GaussianCopula.from_correlation(estimate_correlation(ndtri(U))).log_pdf

    values = np.asarray(logpdf(U), dtype=np.float64)
    rows = [("avg_loglik", avg_loglik(lambda _: values, U)), ("n_rows", len(U))]

    if cfg["samples"]:
        S = _read_matrix(cfg["samples"])
        if S.shape[1] != X.shape[1]:
            raise ValidationError(f"samples have {S.shape[1]} columns, data has {X.shape[1]}")
        m = min(len(S), len(X), W2_MAX_POINTS)
        if m < len(S) or m < len(X):
            print(f"# W2 uses the first {m} rows of each set", file=sys.stderr)
        Xs, Ss = X[:m], S[:m]
        rows.append(("w2_data", wasserstein2(Ss, Xs).distance))
        rows.append(("w2_pseudo", wasserstein2(_to_pseudo(Ss, "data"), _to_pseudo(Xs, "data")).distance))
        rows.append(("w2_pairs", m))

    io.write_metrics(sys.stdout, rows)
    if cfg["out"]:
        _write_rows(cfg["out"], values[:, None], ["log_density"])
    return EXIT_OK


def cmd_sample(cfg):
    est = io.load_model(cfg["model"])
    if cfg["scale"] == "data" and est.marginals_ is None:
        raise ValidationError("model has no marginals; data-scale sampling is unavailable")
    hmc = HmcConfig(
        step_size=cfg["hmc_step"],
        leapfrog_steps=cfg["leapfrog"],
        burnin=cfg["burnin"],
        adapt=cfg["adapt"],
        seed=cfg["seed"],
    )
    Z, stats = sample_latent(est, cfg["n"], hmc)
    if cfg["scale"] == "latent":
        out = Z
    else:
        out = latent_to_pseudo(Z)
        if cfg["scale"] == "data":
            out = est.marginals_.quantile(out)
    print(
        f"# acceptance_rate={stats.acceptance_rate:.4f} divergences={stats.divergences} "
        f"median_step={float(np.median(stats.step_sizes)):.4g}",
        file=sys.stderr,
    )
    _write_rows(cfg["out"], out)
    return EXIT_OK


def _equicorrelation(d, rho):
    S = np.full((d, d), float(rho))
    np.fill_diagonal(S, 1.0)
    return S


def _parse_corr(text):
    try:
        rows = [[float(v) for v in row.split(",")] for row in text.strip().split(";")]
    except ValueError:
        raise ValidationError(f"cannot parse correlation matrix {text!r}") from None
    if len({len(r) for r in rows}) != 1:
        raise ValidationError("correlation matrix rows have unequal length")
    return np.array(rows)


def _strict_corr(S, what):
    S = np.asarray(S, dtype=np.float64)
    if S.shape[0] != S.shape[1]:
        raise ValidationError(f"{what} must be square, got {S.shape}")
    if not np.all(np.isfinite(S)) or not np.allclose(S, S.T, atol=1e-12, rtol=0):
        raise ValidationError(f"{what} must be finite and symmetric")
    if not np.allclose(np.diag(S), 1.0, atol=1e-12, rtol=0):
        raise ValidationError(f"{what} must have unit diagonal")
    if np.linalg.eigvalsh(S)[0] <= 0:
        raise ValidationError(f"{what} is not positive definite")
    return CorrelationMatrix.from_array(S, rescale=False)


def cmd_gen(cfg):
    kind, n, seed = cfg["kind"], cfg["n"], cfg["seed"]
    if kind == "image":
        if not cfg["image"]:
            raise ValidationError("--kind image needs --image FILE.pgm")
        U = gen_image_copula(read_pgm(cfg["image"]), n, seed)
    else:
        if cfg["corr"] is not None:
            corr1 = _strict_corr(_parse_corr(cfg["corr"]), "--corr")
        else:
            corr1 = _strict_corr(_equicorrelation(cfg["dim"], cfg["rho"]), "--rho matrix")
        if kind == "gauss":
            U = gen_gaussian_copula(n, corr1, seed)
        else:
            corr2 = _strict_corr(_equicorrelation(corr1.dim, cfg["rho2"]), "--rho2 matrix")
            U = gen_gaussian_mixture_copula(n, corr1, corr2, seed)
    _write_rows(cfg["out"], U)
    return EXIT_OK


def cmd_diagnose(cfg):
    X = _read_matrix(cfg["data"])
    U = _to_pseudo(X, cfg["scale"])
    corr = estimate_correlation(ndtri(U))
    kl = kl_gaussian_copula(corr)
    rows = [("n_rows", len(U)), ("dim", corr.dim)]
    rows += [(f"eigenvalue_{i + 1}", e) for i, e in enumerate(corr.eigenvalues)]
    rows += [
        ("kl_exact", kl.exact_kl),
        ("kl_bound", kl.bound),
        ("e_min", kl.e_min),
        ("kl_warning", int(kl.exceeds_threshold)),
    ]
    io.write_metrics(sys.stdout, rows)
    if kl.exceeds_threshold:
        print(
            f"warning: KL bound {kl.bound:.2f} nats exceeds the {KL_WARNING_NATS:g}-nat threshold; "
            "plain noise classification is unreliable here, fit with --guided",
            file=sys.stderr,
        )
    return EXIT_OK


_COMMANDS = {"fit": cmd_fit, "eval": cmd_eval, "sample": cmd_sample, "gen": cmd_gen, "diagnose": cmd_diagnose}


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def main(argv=None):
    parser = build_parser()
    try:
        with warnings.catch_warnings():
            warnings.showwarning = _show_warning
            args = parser.parse_args(argv)
            config = _resolve(parser, args)
            _log_config(args.command, config)
            return _COMMANDS[args.command](config)
    except _ArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ModelFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
