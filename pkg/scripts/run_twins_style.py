#!/usr/bin/env python3
"""Confounded-assignment experiment over an ingested potential-outcome CSV.

Takes any CSV that records both potential outcomes per row (e.g. twin pairs,
where the lighter twin's mortality is y1 and the heavier twin's is y0),
introduces confounded treatment assignment driven by one covariate
(probability 0.1 above the median of log(1+z^2) + 0.01 * sum of the others,
0.9 at or below), then compares estimators against the known true ATT.

Example:
    python scripts/run_twins_style.py --csv twins.csv \
        --covariates gestat10,sex,incervix,dtotord,anemia,cardiac,wtgain \
        --z-col gestat10 --y0 mort_heavier --y1 mort_lighter --reps 10
"""

import argparse
import sys
from dataclasses import replace

import numpy as np

from dlw import estimators as est
from dlw import outcome_models as om
from dlw.datagen import assign_twins_treatment, dataset_from_potential_outcomes, ingest_potential_outcome_csv
from dlw.flow import FitConfig, fit


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--csv", required=True)
    parser.add_argument("--covariates", required=True, help="comma-separated column names")
    parser.add_argument("--z-col", required=True, help="covariate driving the confounding")
    parser.add_argument("--y0", required=True, help="column with the untreated outcome")
    parser.add_argument("--y1", required=True, help="column with the treated outcome")
    parser.add_argument("--reps", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--layers", type=int, default=2)
    args = parser.parse_args()

    cov_cols = args.covariates.split(",")
    X_raw, y0, y1 = ingest_potential_outcome_csv(args.csv, cov_cols, args.y0, args.y1)
    z_index = cov_cols.index(args.z_col)
    fit_cfg = FitConfig(
        layers=args.layers,
        nn1_hidden_layers=1,
        nn1_hidden_units=32,
        transformer="neural",
        batch_size=256,
        lr=1e-3,
        max_epochs=500,
        patience=20,
    )

    errors: dict[str, list] = {}
    for rep in range(args.reps):
        W = assign_twins_treatment(X_raw, z_index, seed=args.seed + rep)
        ds = dataset_from_potential_outcomes(X_raw, y0, y1, W)
        model_t = fit(ds.X[ds.W == 1], replace(fit_cfg, seed=2 * rep))
        model_c = fit(ds.X[ds.W == 0], replace(fit_cfg, seed=2 * rep + 1))
        control = ds.W == 0
        h0 = om.fit_ols(ds.X[control], ds.y_obs[control])
        reports = {
            "base": est.att_base(ds, rep),
            "iptw": est.att_iptw(ds, est.fit_propensity_logistic(ds), rep),
            "dlw": est.att_dlw(ds, model_t, model_c, replication=rep),
            "dr_dlw_ols": est.att_doubly_robust(
                ds, est.dlw_weights(ds, model_t, model_c), h0, "dr_dlw_ols", rep
            ),
        }
        for name, report in reports.items():
            errors.setdefault(name, []).append(report.att_hat - ds.true_att)
        print(f"replication {rep}: true ATT {ds.true_att:+.4f}", file=sys.stderr)

    for name, errs in errors.items():
        arr = np.asarray(errs)
        print(
            f"{name:>10}: bias {arr.mean():+.4f}  rmse {np.sqrt((arr**2).mean()):.4f}",
            file=sys.stderr,
        )
    return 0


if __name__ == "__main__":
    sys.exit(main())
