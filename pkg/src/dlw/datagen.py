"""Synthetic data generation, CSV ingestion, and standardization.

Covariates are drawn i.i.d. from a three-component Gaussian mixture with means
(-3, 0, 3), unit variance and equal proportions, then standardized column-wise
(pooled mean/std) BEFORE treatment assignment; the assignment and outcome
formulas below consume standardized values. Every synthetic outcome is
f(x) + W + noise with the noise shared between potential outcomes, so the
unit-level effect is exactly 1 and so is the true ATT.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

MIXTURE_MEANS = np.array([-3.0, 0.0, 3.0])


class DataError(ValueError):
    """Raised on invalid generator configuration or inconsistent datasets."""


class CsvParseError(DataError):
    """CSV ingestion failure; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class DgpConfig:
    setting: int
    d: int
    n: int
    s_c: float
    seed: int = 0

    def __post_init__(self):
        if self.setting not in (1, 2, 3):
            raise DataError(f"setting must be 1, 2 or 3, got {self.setting}")
        if self.d < 1 or self.n < 1:
            raise DataError("d and n must be >= 1")
        if self.s_c < 0:
            raise DataError("confounding strength s_c must be >= 0")


@dataclass
class Dataset:
    """Standardized covariates, treatment, observed and potential outcomes."""

    X: np.ndarray
    W: np.ndarray
    y_obs: np.ndarray
    y0: np.ndarray | None = None
    y1: np.ndarray | None = None
    true_att: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.X.shape[0]
        if self.W.shape != (n,) or self.y_obs.shape != (n,):
            raise DataError("W and y_obs must have one entry per covariate row")
        if not np.all((self.W == 0) | (self.W == 1)):
            raise DataError("W must be binary")
        if self.y0 is not None and self.y1 is not None:
            chosen = np.where(self.W == 1, self.y1, self.y0)
            if not np.allclose(self.y_obs, chosen, rtol=0, atol=1e-12):
                raise DataError("y_obs is inconsistent with (W, y0, y1)")

    @property
    def n1(self) -> int:
        return int(self.W.sum())

    @property
    def n0(self) -> int:
        return int((1 - self.W).sum())

    def true_ate(self) -> float | None:
        if self.y0 is None or self.y1 is None:
            return None
        return float(np.mean(self.y1 - self.y0))


def standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Column-wise (x - mean) / std with population std; errors on constants."""
    X = np.asarray(X, dtype=np.float64)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    dead = np.flatnonzero(std == 0.0)
    if dead.size:
        raise DataError(f"column {int(dead[0])} is constant; cannot standardize")
    return (X - mean) / std, mean, std


def _draw_mixture(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    comps = rng.integers(0, 3, size=(n, d))
    return rng.standard_normal((n, d)) + MIXTURE_MEANS[comps]


def gen_covariates(cfg: DgpConfig) -> np.ndarray:
    """Raw (unstandardized) mixture draws; mean 0 and variance 7 per column."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    return _draw_mixture(rng, cfg.n, cfg.d)


def _pair_products(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    iu = np.triu_indices(X.shape[1], k=0)  # i <= j, diagonal included
    return X[:, iu[0]] * X[:, iu[1]], iu[0], iu[1]


def gen_setting(cfg: DgpConfig) -> Dataset:
    """Generate one replication of the configured scenario.

    Setting 1 (linear/additive):      e(x) = 1/(1+exp(s_c * sum x_i)),
                                      y = sum b1_j x_j + W + eps.
    Setting 2 (moderate non-linear):  e(x) = 1/(1+exp(s_c * (sum(x_i^2-1) + sum_{i<=j} x_i x_j))),
                                      y = sum b1_j x_j^2 + sum_{i<=j} b2_p x_i x_j + W + eps.
    Setting 3 (strong non-linear):    e(x) = 1/(1+exp(s_c * (sum(log(x_i^2+1)-0.5) + sum_{i<=j} x_i x_j))),
                                      y = sum b1_j log(x_j^2+1) + sum_{i<=j} 2 b2_p sin(x_i x_j) + W + eps.

    b1, b2 ~ Uniform(0,1) are redrawn per replication; interaction sums run
    over the upper triangle INCLUDING the diagonal (pairs i <= j, one b2 per
    pair); eps ~ N(0,1) is shared between y0 and y1, so y1 - y0 == 1 for
    every unit.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    raw = _draw_mixture(rng, cfg.n, cfg.d)
    X, raw_mean, raw_std = standardize(raw)

    n_pairs = cfg.d * (cfg.d + 1) // 2
    beta1 = rng.uniform(0.0, 1.0, cfg.d)
    beta2 = rng.uniform(0.0, 1.0, n_pairs)

    if cfg.setting == 1:
        conf = X.sum(axis=1)
        f = X @ beta1
    elif cfg.setting == 2:
        pairs, _, _ = _pair_products(X)
        conf = (X * X - 1.0).sum(axis=1) + pairs.sum(axis=1)
        f = (X * X) @ beta1 + pairs @ beta2
    else:
        pairs, _, _ = _pair_products(X)
        logs = np.log(X * X + 1.0)
        conf = (logs - 0.5).sum(axis=1) + pairs.sum(axis=1)
        f = logs @ beta1 + 2.0 * (np.sin(pairs) @ beta2)

    e = 1.0 / (1.0 + np.exp(cfg.s_c * conf))
    W = (rng.random(cfg.n) < e).astype(np.int64)
    eps = rng.standard_normal(cfg.n)
    y0 = f + eps
    y1 = f + 1.0 + eps
    y_obs = np.where(W == 1, y1, y0)
    if W.sum() == 0 or W.sum() == cfg.n:
        raise DataError("degenerate draw: one group is empty; change seed or n")
    true_att = float(np.mean((y1 - y0)[W == 1]))
    meta = {
        "setting": cfg.setting,
        "s_c": cfg.s_c,
        "seed": cfg.seed,
        "raw_means": raw_mean.tolist(),
        "raw_stds": raw_std.tolist(),
    }
    return Dataset(X=X, W=W, y_obs=y_obs, y0=y0, y1=y1, true_att=true_att, meta=meta)


# ---------------------------------------------------------------------------
# CSV ingestion (potential-outcome data, e.g. twin-pair studies)
# ---------------------------------------------------------------------------


def ingest_potential_outcome_csv(
    path: str,
    covariate_columns: list[str],
    y0_column: str,
    y1_column: str,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read raw covariates and both potential outcomes from a headed CSV.

    No standardization is applied. Parse failures (missing column, short row,
    non-numeric or empty cell) raise CsvParseError with the 1-based file line.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError("file is empty", line=1) from None
        header = [h.strip() for h in header]
        wanted = list(covariate_columns) + [y0_column, y1_column]
        indices = []
        for name in wanted:
            if name not in header:
                raise CsvParseError(f"missing column {name!r}", line=1)
            indices.append(header.index(name))

        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvParseError(
                    f"expected {len(header)} fields, found {len(row)}", line=line_no
                )
            parsed = []
            for name, idx in zip(wanted, indices):
                cell = row[idx].strip()
                if cell == "":
                    raise CsvParseError(f"missing value in column {name!r}", line=line_no)
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise CsvParseError(
                        f"non-numeric value {cell!r} in column {name!r}", line=line_no
                    ) from None
            rows.append(parsed)
    if not rows:
        raise CsvParseError("no data rows", line=2)
    data = np.asarray(rows, dtype=np.float64)
    k = len(covariate_columns)
    return data[:, :k], data[:, k], data[:, k + 1]


def assign_twins_treatment(X_raw: np.ndarray, z_col: int, seed: int) -> np.ndarray:
    """Confounded assignment over raw covariates.

    conf = log(1 + z^2) + 0.01 * sum of the other covariates; treatment
    probability is 0.1 strictly above the sample median of conf and 0.9 at or
    below it.
    """
    X_raw = np.asarray(X_raw, dtype=np.float64)
    if not 0 <= z_col < X_raw.shape[1]:
        raise DataError(f"z_col {z_col} out of range for {X_raw.shape[1]} covariates")
    z = X_raw[:, z_col]
    conf = np.log1p(z * z) + 0.01 * (X_raw.sum(axis=1) - z)
    e = np.where(conf > np.median(conf), 0.1, 0.9)
    rng = np.random.Generator(np.random.PCG64(seed))
    return (rng.random(X_raw.shape[0]) < e).astype(np.int64)


def dataset_from_potential_outcomes(
    X_raw: np.ndarray,
    y0: np.ndarray,
    y1: np.ndarray,
    W: np.ndarray,
    meta: dict | None = None,
) -> Dataset:
    """Standardize covariates and assemble a Dataset with observed outcomes."""
    X, raw_mean, raw_std = standardize(X_raw)
    W = np.asarray(W, dtype=np.int64)
    y_obs = np.where(W == 1, y1, y0)
    if W.sum() == 0 or W.sum() == W.size:
        raise DataError("one treatment group is empty")
    info = dict(meta or {})
    info.update({"raw_means": raw_mean.tolist(), "raw_stds": raw_std.tolist()})
    return Dataset(
        X=X,
        W=W,
        y_obs=y_obs,
        y0=np.asarray(y0, dtype=np.float64),
        y1=np.asarray(y1, dtype=np.float64),
        true_att=float(np.mean((y1 - y0)[W == 1])),
        meta=info,
    )


# ---------------------------------------------------------------------------
# Dataset CSV round trip
# ---------------------------------------------------------------------------


def write_dataset_csv(ds: Dataset, path: str) -> None:
    """Columns x1..xd, w, y_obs and, when present, y0, y1."""
    d = ds.X.shape[1]
    has_po = ds.y0 is not None and ds.y1 is not None
    header = [f"x{i + 1}" for i in range(d)] + ["w", "y_obs"]
    if has_po:
        header += ["y0", "y1"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.X.shape[0]):
            row = [repr(float(v)) for v in ds.X[i]] + [str(int(ds.W[i])), repr(float(ds.y_obs[i]))]
            if has_po:
                row += [repr(float(ds.y0[i])), repr(float(ds.y1[i]))]
            writer.writerow(row)


def read_dataset_csv(path: str) -> Dataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError("file is empty", line=1) from None
        x_cols = [h for h in header if h.startswith("x")]
        for col in ("w", "y_obs"):
            if col not in header:
                raise CsvParseError(f"missing column {col!r}", line=1)
        has_po = "y0" in header and "y1" in header
        idx = {h: i for i, h in enumerate(header)}
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvParseError(
                    f"expected {len(header)} fields, found {len(row)}", line=line_no
                )
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise CsvParseError("non-numeric value", line=line_no) from None
    data = np.asarray(rows, dtype=np.float64)
    X = data[:, [idx[c] for c in x_cols]]
    W = data[:, idx["w"]].astype(np.int64)
    y_obs = data[:, idx["y_obs"]]
    y0 = data[:, idx["y0"]] if has_po else None
    y1 = data[:, idx["y1"]] if has_po else None
    true_att = float(np.mean((y1 - y0)[W == 1])) if has_po and W.sum() else None
    return Dataset(X=X, W=W, y_obs=y_obs, y0=y0, y1=y1, true_att=true_att)
