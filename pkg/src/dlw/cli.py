"""Command-line interface: gen, fit, estimate, experiment, verify.

Standard output carries only data (CSV rows from `estimate`); all progress and
diagnostics go to standard error. Every random draw is controlled by an
explicit --seed flag or config field.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import estimators as est
from . import outcome_models as om
from .datagen import (
    DataError,
    Dataset,
    DgpConfig,
    gen_setting,
    read_dataset_csv,
    write_dataset_csv,
)
from .flow import (
    DiagonalGaussian,
    FitConfig,
    FlowError,
    build_flow,
    fit,
    grid_quadrature,
    load_model,
    save_model,
)
from .harness import ExperimentConfig, HarnessError, run_experiment


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlw", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset CSV")
    p_gen.add_argument("--setting", type=int, required=True, choices=(1, 2, 3))
    p_gen.add_argument("--d", type=int, required=True)
    p_gen.add_argument("--n", type=int, required=True)
    p_gen.add_argument("--sc", type=float, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--out", required=True)

    p_fit = sub.add_parser("fit", help="fit a flow density model to one group")
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--group", required=True, choices=("treated", "control"))
    p_fit.add_argument("--config", help="JSON file with FitConfig fields")
    p_fit.add_argument("--out", required=True)

    p_est = sub.add_parser("estimate", help="print one estimate as a CSV row")
    p_est.add_argument("--data", required=True)
    p_est.add_argument("--model-t", help="fitted flow for the treated group")
    p_est.add_argument("--model-c", help="fitted flow for the control group")
    p_est.add_argument(
        "--estimator",
        required=True,
        choices=(
            "base",
            "ols",
            "iptw",
            "dlw",
            "ate_dlw",
            "dr_dlw_ols",
            "dr_dlw_forest",
            "dr_iptw_ols",
            "dr_iptw_forest",
        ),
    )
    p_est.add_argument("--replication", type=int, default=0)
    p_est.add_argument("--forest-trees", type=int, default=200)
    p_est.add_argument("--forest-depth", type=int, default=8)
    p_est.add_argument("--forest-bag", type=float, default=0.8)
    p_est.add_argument("--seed", type=int, default=0)

    p_exp = sub.add_parser("experiment", help="run a Monte Carlo experiment grid")
    p_exp.add_argument("--config", required=True)

    sub.add_parser("verify", help="run built-in invariant checks")
    return parser


def _cmd_gen(args) -> int:
    cfg = DgpConfig(setting=args.setting, d=args.d, n=args.n, s_c=args.sc, seed=args.seed)
    ds = gen_setting(cfg)
    write_dataset_csv(ds, args.out)
    _log(f"wrote {ds.X.shape[0]} rows to {args.out}")
    return 0


def _cmd_fit(args) -> int:
    ds = read_dataset_csv(args.data)
    cfg = FitConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = FitConfig(**json.load(fh))
    mask = ds.W == 1 if args.group == "treated" else ds.W == 0
    model = fit(ds.X[mask], cfg)
    save_model(model, args.out)
    best = min(v for _, v in model.train_log)
    _log(f"fitted {args.group} flow on {int(mask.sum())} rows; best val NLL {best:.4f}")
    return 0


def _control_outcome(ds: Dataset, kind: str, args) -> om.OutcomeModel:
    control = ds.W == 0
    if kind == "ols":
        return om.fit_ols(ds.X[control], ds.y_obs[control])
    return om.fit_forest(
        ds.X[control],
        ds.y_obs[control],
        trees=args.forest_trees,
        max_depth=args.forest_depth,
        bag_fraction=args.forest_bag,
        seed=args.seed,
    )


def _cmd_estimate(args) -> int:
    ds = read_dataset_csv(args.data)
    name = args.estimator
    needs_flows = name in ("dlw", "ate_dlw", "dr_dlw_ols", "dr_dlw_forest")
    if needs_flows:
        if not args.model_t or not args.model_c:
            _log(f"estimator {name} requires --model-t and --model-c")
            return 1
        model_t = load_model(args.model_t)
        model_c = load_model(args.model_c)
    rep = args.replication
    if name == "base":
        report = est.att_base(ds, rep)
    elif name == "ols":
        report = om.att_ols_regression(ds, rep)
    elif name == "iptw":
        report = est.att_iptw(ds, est.fit_propensity_logistic(ds), rep)
    elif name == "dlw":
        report = est.att_dlw(ds, model_t, model_c, replication=rep)
    elif name == "ate_dlw":
        ate = est.ate_dlw(ds, model_t, model_c)
        report = est.EstimateReport("ate_dlw", ate, ds.n1, ds.n0, (1.0, 1.0, float(ds.n0)), rep)
    elif name.startswith("dr_"):
        _, weight_kind, outcome_kind = name.split("_")
        if weight_kind == "dlw":
            weights = est.dlw_weights(ds, model_t, model_c)
        else:
            weights = est.iptw_weights(ds, est.fit_propensity_logistic(ds))
        outcome = _control_outcome(ds, outcome_kind, args)
        report = est.att_doubly_robust(ds, weights, outcome, name, rep)
    else:  # pragma: no cover - argparse restricts choices
        raise ValueError(name)
    print(report.to_csv_row())
    return 0


def _cmd_experiment(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    table = run_experiment(cfg)
    _log(f"wrote {len(table.rows)} summary rows under {cfg.output_dir}")
    return 0


# ---------------------------------------------------------------------------
# verify: built-in invariant suite
# ---------------------------------------------------------------------------


def _check_gradients() -> bool:
    from . import numerics as nm
    from .flow import _log_prob_rows

    rng = np.random.default_rng(0)
    ok = True
    for kind in ("affine", "neural"):
        cfg = FitConfig(
            layers=2,
            nn1_hidden_layers=1,
            nn1_hidden_units=12,
            nn2_hidden_units=4,
            transformer=kind,
            seed=5,
        )
        model = build_flow(3, cfg)
        model.params.values += rng.uniform(-0.3, 0.3, model.params.size)
        for _ in range(2):
            batch = rng.uniform(-2.0, 2.0, (12, 3))
            tape = nm.Tape()
            loss = nm.neg(nm.mean(_log_prob_rows(model, batch, tape)))
            grads = nm.backward(tape, loss, model.params)
            fd = nm.finite_difference_grad(
                lambda: -float(np.mean(model.log_prob(batch))), model.params
            )
            err = np.abs(grads - fd) / np.maximum(1e-8, np.maximum(np.abs(grads), np.abs(fd)))
            if err.max() > 1e-4:
                ok = False
    return ok


def _check_normalization() -> bool:
    rng = np.random.default_rng(1)
    ok = True
    for kind in ("affine", "neural"):
        cfg = FitConfig(
            layers=3,
            nn1_hidden_layers=1,
            nn1_hidden_units=12,
            nn2_hidden_units=4,
            transformer=kind,
            seed=2,
        )
        model = build_flow(2, cfg)
        model.params.values += rng.normal(0.0, 0.15, model.params.size)
        integral = grid_quadrature(model, -8.0, 8.0, 200, 2)
        if not 0.98 <= integral <= 1.02:
            ok = False
    return ok


def _check_bayes_identity() -> bool:
    rng = np.random.default_rng(2)
    g_t = DiagonalGaussian(mean=np.array([1.0]), std=np.array([1.0]))
    g_c = DiagonalGaussian(mean=np.array([-1.0]), std=np.array([1.0]))
    sample = np.concatenate([rng.normal(1.0, 1.0, 500), rng.normal(-1.0, 1.0, 500)])[:, None]

    def true_e(x):
        return 0.5 * (1.0 + np.tanh(x[:, 0]))  # sigmoid(2x)

    dev = est.verify_bayes_identity(true_e, g_t, g_c, sample, p1=0.5)
    return dev < 1e-10


def _cmd_verify(_args) -> int:
    checks = [
        ("gradient finite differences", _check_gradients),
        ("density normalization", _check_normalization),
        ("density ratio vs propensity odds", _check_bayes_identity),
    ]
    failed = 0
    for label, check in checks:
        passed = check()
        _log(f"verify: {label}: {'ok' if passed else 'FAILED'}")
        failed += 0 if passed else 1
    return 1 if failed else 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "gen": _cmd_gen,
        "fit": _cmd_fit,
        "estimate": _cmd_estimate,
        "experiment": _cmd_experiment,
        "verify": _cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except (
        DataError,
        FlowError,
        HarnessError,
        est.EstimatorError,
        om.OutcomeModelError,
        OSError,
    ) as exc:
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
