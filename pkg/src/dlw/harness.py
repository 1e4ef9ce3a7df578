"""Monte Carlo experiment runner: replicate -> fit -> estimate -> aggregate.

For replication i the generator seed is base_seed + i; each replication fits
one flow per treatment arm on the standardized covariates and evaluates every
requested estimator on the same dataset (paired comparison). Aggregation
reports bias = mean(estimate) - truth and RMSE = sqrt(mean((estimate -
truth)^2)) across replications. All outputs use repr() float formatting, so a
rerun with the same config reproduces every file byte-for-byte.

Output layout under output_dir:
    cell_<setting>_<d>_<n>_<sc>/rep_<i>_estimates.csv
    cell_<setting>_<d>_<n>_<sc>/rep_<i>_nll_treated.csv / _nll_control.csv
    cell_<setting>_<d>_<n>_<sc>/summary.csv
    summary.csv, summary.md
"""

from __future__ import annotations

import csv
import json
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from . import estimators as est
from . import outcome_models as om
from .datagen import Dataset, DgpConfig, gen_setting
from .flow import FitConfig, FlowError, FlowModel, fit


class HarnessError(RuntimeError):
    """Raised when a grid cell cannot be completed."""


# estimators needing flows fit lazily through the replication context
ESTIMATOR_NAMES = (
    "base",
    "ols",
    "iptw",
    "dlw",
    "ate_dlw",
    "dr_dlw_ols",
    "dr_dlw_forest",
    "dr_iptw_ols",
    "dr_iptw_forest",
)


@dataclass(frozen=True)
class ExperimentConfig:
    settings: tuple = (2,)
    ds: tuple = (8,)
    ns: tuple = (5000,)
    s_cs: tuple = (0.2,)
    reps: int = 10
    fit: FitConfig = field(default_factory=FitConfig)
    estimators: tuple = ("base", "dlw")
    output_dir: str = "out"
    base_seed: int = 0
    forest_trees: int = 200
    forest_depth: int = 8
    forest_bag: float = 0.8

    def __post_init__(self):
        if self.reps < 1:
            raise HarnessError("reps must be >= 1")
        unknown = [e for e in self.estimators if e not in ESTIMATOR_NAMES]
        if unknown:
            raise HarnessError(f"unknown estimators {unknown}; valid: {list(ESTIMATOR_NAMES)}")

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        fit_cfg = FitConfig(**raw.pop("fit", {}))
        grid = raw.pop("grid", {})
        kwargs = dict(
            settings=tuple(grid.get("settings", (2,))),
            ds=tuple(grid.get("d", (8,))),
            ns=tuple(grid.get("n", (5000,))),
            s_cs=tuple(grid.get("s_c", (0.2,))),
            fit=fit_cfg,
        )
        if "estimators" in raw:
            raw["estimators"] = tuple(raw["estimators"])
        kwargs.update(raw)
        return cls(**kwargs)


@dataclass
class CellResult:
    setting: int
    d: int
    n: int
    s_c: float
    estimator: str
    bias: float
    rmse: float
    reps: int
    mean_ess: float

    def __post_init__(self):
        # RMSE^2 - bias^2 is the sample variance of the estimates (Jensen)
        if self.rmse < abs(self.bias) - 1e-9:
            raise HarnessError("aggregation produced rmse < |bias|")


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)


class ReplicationContext:
    """Caches per-replication fits shared between estimators."""

    def __init__(self, data: Dataset, fit_cfg: FitConfig, seed: int, exp: "ExperimentConfig|None"):
        self.data = data
        self.fit_cfg = fit_cfg
        self.seed = seed
        self.exp = exp
        self.model_t: FlowModel | None = None
        self.model_c: FlowModel | None = None
        self._ps = None
        self._ols_control = None
        self._forest_control = None

    def flows(self):
        if self.model_t is None:
            treated = self.data.W == 1
            self.model_t = fit(self.data.X[treated], replace(self.fit_cfg, seed=2 * self.seed))
            self.model_c = fit(self.data.X[~treated], replace(self.fit_cfg, seed=2 * self.seed + 1))
        return self.model_t, self.model_c

    def propensity(self):
        if self._ps is None:
            self._ps = est.fit_propensity_logistic(self.data)
        return self._ps

    def ols_control(self):
        if self._ols_control is None:
            control = self.data.W == 0
            self._ols_control = om.fit_ols(self.data.X[control], self.data.y_obs[control])
        return self._ols_control

    def forest_control(self):
        if self._forest_control is None:
            control = self.data.W == 0
            exp = self.exp
            self._forest_control = om.fit_forest(
                self.data.X[control],
                self.data.y_obs[control],
                trees=exp.forest_trees if exp else 200,
                max_depth=exp.forest_depth if exp else 8,
                bag_fraction=exp.forest_bag if exp else 0.8,
                seed=self.seed,
            )
        return self._forest_control

    def dlw_weights(self):
        return est.dlw_weights(self.data, *self.flows())

    def iptw_weights(self):
        return est.iptw_weights(self.data, self.propensity())


def _run_estimator(name: str, ctx: ReplicationContext, rep: int) -> est.EstimateReport:
    data = ctx.data
    if name == "base":
        return est.att_base(data, rep)
    if name == "ols":
        return om.att_ols_regression(data, rep)
    if name == "iptw":
        return est.att_iptw(data, ctx.propensity(), rep)
    if name == "dlw":
        return est.att_dlw(data, *ctx.flows(), replication=rep)
    if name == "ate_dlw":
        ate = est.ate_dlw(data, *ctx.flows())
        return est.EstimateReport(
            "ate_dlw", ate, data.n1, data.n0, (1.0, 1.0, float(data.n0)), rep
        )
    if name == "dr_dlw_ols":
        return est.att_doubly_robust(data, ctx.dlw_weights(), ctx.ols_control(), name, rep)
    if name == "dr_dlw_forest":
        return est.att_doubly_robust(data, ctx.dlw_weights(), ctx.forest_control(), name, rep)
    if name == "dr_iptw_ols":
        return est.att_doubly_robust(data, ctx.iptw_weights(), ctx.ols_control(), name, rep)
    if name == "dr_iptw_forest":
        return est.att_doubly_robust(data, ctx.iptw_weights(), ctx.forest_control(), name, rep)
    raise HarnessError(f"unknown estimator {name!r}")


def run_replication(
    data: Dataset,
    estimator_names,
    fit_cfg: FitConfig,
    rep: int = 0,
    seed: int = 0,
    exp: ExperimentConfig | None = None,
) -> tuple[list, ReplicationContext]:
    ctx = ReplicationContext(data, fit_cfg, seed, exp)
    reports = [_run_estimator(name, ctx, rep) for name in estimator_names]
    return reports, ctx


def needs_truth(name: str) -> str:
    return "ate" if name.startswith("ate") else "att"


def aggregate(per_rep: dict, truths: dict) -> list:
    """per_rep: estimator -> list of (rep, report); truths: rep -> (att, ate)."""
    rows = []
    for name, items in per_rep.items():
        errors = []
        esses = []
        for rep, report in items:
            truth = truths[rep][0] if needs_truth(name) == "att" else truths[rep][1]
            errors.append(report.att_hat - truth)
            esses.append(report.weight_summary[2])
        errors = np.asarray(errors)
        rows.append(
            {
                "estimator": name,
                "bias": float(errors.mean()),
                "rmse": float(np.sqrt(np.mean(errors**2))),
                "reps": len(errors),
                "mean_ess": float(np.mean(esses)),
            }
        )
    return rows


def _fmt(x) -> str:
    return repr(float(x))


def cell_dir_name(setting: int, d: int, n: int, s_c: float) -> str:
    return f"cell_{setting}_{d}_{n}_{s_c!r}"


def smoothed_val_flatness(val_nll, window: int = 10) -> float:
    """How far the smoothed validation curve at the stopping epoch sits above
    its minimum, relative to max(|minimum|, 1). Near zero means the curve
    flattened before training stopped."""
    vals = np.asarray(val_nll, dtype=np.float64)
    if vals.size == 0:
        raise HarnessError("empty validation curve")
    kernel = np.ones(min(window, vals.size))
    counts = np.convolve(np.ones_like(vals), kernel, mode="valid")
    smoothed = np.convolve(vals, kernel, mode="valid") / counts
    low = smoothed.min()
    return float((smoothed[-1] - low) / max(abs(low), 1.0))


def emit_convergence(model: FlowModel, path: str) -> None:
    """CSV of the per-epoch training curve: epoch, train_nll, val_nll."""
    if not model.train_log:
        raise HarnessError("model has an empty training log")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_nll", "val_nll"])
        for epoch, (train_nll, val_nll) in enumerate(model.train_log):
            writer.writerow([epoch, _fmt(train_nll), _fmt(val_nll)])


def run_experiment(cfg: ExperimentConfig, log=sys.stderr) -> ResultTable:
    os.makedirs(cfg.output_dir, exist_ok=True)
    table = ResultTable()
    for setting in cfg.settings:
        for d in cfg.ds:
            for n in cfg.ns:
                for s_c in cfg.s_cs:
                    rows = _run_cell(cfg, setting, d, n, s_c, log)
                    table.rows.extend(rows)
    _write_summary_csv(table, os.path.join(cfg.output_dir, "summary.csv"))
    _write_summary_md(table, os.path.join(cfg.output_dir, "summary.md"))
    return table


def _run_cell(cfg: ExperimentConfig, setting: int, d: int, n: int, s_c: float, log):
    cell = cell_dir_name(setting, d, n, s_c)
    cell_path = os.path.join(cfg.output_dir, cell)
    os.makedirs(cell_path, exist_ok=True)
    per_rep: dict = {name: [] for name in cfg.estimators}
    truths: dict = {}
    failures = 0
    uses_flows = any(
        name in ("dlw", "ate_dlw", "dr_dlw_ols", "dr_dlw_forest") for name in cfg.estimators
    )
    for rep in range(cfg.reps):
        seed = cfg.base_seed + rep
        try:
            data = gen_setting(DgpConfig(setting=setting, d=d, n=n, s_c=s_c, seed=seed))
            reports, ctx = run_replication(data, cfg.estimators, cfg.fit, rep, seed, cfg)
        except (FlowError, est.EstimatorError, om.OutcomeModelError) as exc:
            failures += 1
            print(f"[{cell}] replication {rep} failed: {exc}", file=log)
            if failures > 0.2 * cfg.reps:
                raise HarnessError(
                    f"{cell}: {failures} of {cfg.reps} replications failed; aborting cell"
                ) from exc
            continue
        truths[rep] = (data.true_att, data.true_ate())
        for name, report in zip(cfg.estimators, reports):
            per_rep[name].append((rep, report))
        with open(
            os.path.join(cell_path, f"rep_{rep}_estimates.csv"), "w", encoding="utf-8"
        ) as fh:
            fh.write(est.EstimateReport.CSV_HEADER + "\n")
            for report in reports:
                fh.write(report.to_csv_row() + "\n")
        if uses_flows and ctx.model_t is not None:
            emit_convergence(ctx.model_t, os.path.join(cell_path, f"rep_{rep}_nll_treated.csv"))
            emit_convergence(ctx.model_c, os.path.join(cell_path, f"rep_{rep}_nll_control.csv"))
        print(f"[{cell}] replication {rep} done", file=log)
    rows = []
    for agg in aggregate(per_rep, truths):
        rows.append(
            CellResult(
                setting=setting,
                d=d,
                n=n,
                s_c=s_c,
                estimator=agg["estimator"],
                bias=agg["bias"],
                rmse=agg["rmse"],
                reps=agg["reps"],
                mean_ess=agg["mean_ess"],
            )
        )
    _write_cell_summary(rows, os.path.join(cell_path, "summary.csv"))
    return rows


SUMMARY_HEADER = ["setting", "d", "n", "s_c", "estimator", "bias", "rmse", "reps", "mean_ess"]


def _summary_row(row: CellResult) -> list[str]:
    return [
        str(row.setting),
        str(row.d),
        str(row.n),
        _fmt(row.s_c),
        row.estimator,
        _fmt(row.bias),
        _fmt(row.rmse),
        str(row.reps),
        _fmt(row.mean_ess),
    ]


def _write_cell_summary(rows, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for row in rows:
            writer.writerow(_summary_row(row))


def _write_summary_csv(table: ResultTable, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for row in table.rows:
            writer.writerow(_summary_row(row))


def _write_summary_md(table: ResultTable, path: str) -> None:
    """Markdown layout: estimator rows, (d, n) column pairs, grouped by setting/s_c."""
    groups: dict = {}
    for row in table.rows:
        groups.setdefault((row.setting, row.s_c), []).append(row)
    lines = []
    for (setting, s_c), rows in sorted(groups.items()):
        cells = sorted({(r.d, r.n) for r in rows})
        estimator_order = []
        for r in rows:
            if r.estimator not in estimator_order:
                estimator_order.append(r.estimator)
        lines.append(f"## Setting {setting}, s_c = {s_c!r}")
        lines.append("")
        header = ["estimator"]
        for d, n in cells:
            header += [f"bias (d={d}, N={n})", f"rmse (d={d}, N={n})"]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for name in estimator_order:
            parts = [name]
            for d, n in cells:
                match = [r for r in rows if r.estimator == name and (r.d, r.n) == (d, n)]
                if match:
                    parts += [f"{match[0].bias:.3f}", f"{match[0].rmse:.3f}"]
                else:
                    parts += ["-", "-"]
            lines.append("| " + " | ".join(parts) + " |")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def emit_tables(table: ResultTable, fmt: str, output_dir: str) -> list[str]:
    """Write per-cell files plus one combined file; returns written paths."""
    if not table.rows:
        raise HarnessError("result table is empty")
    if fmt not in ("csv", "markdown"):
        raise HarnessError(f"unknown format {fmt!r}")
    os.makedirs(output_dir, exist_ok=True)
    written = []
    cells: dict = {}
    for row in table.rows:
        cells.setdefault((row.setting, row.d, row.n, row.s_c), []).append(row)
    for (setting, d, n, s_c), rows in sorted(cells.items()):
        name = cell_dir_name(setting, d, n, s_c)
        if fmt == "csv":
            path = os.path.join(output_dir, f"{name}.csv")
            _write_cell_summary(rows, path)
        else:
            path = os.path.join(output_dir, f"{name}.md")
            _write_summary_md(ResultTable(rows=rows), path)
        written.append(path)
    combined = os.path.join(output_dir, "summary.csv" if fmt == "csv" else "summary.md")
    if fmt == "csv":
        _write_summary_csv(table, combined)
    else:
        _write_summary_md(table, combined)
    written.append(combined)
    return written


def read_summary_csv(path: str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
