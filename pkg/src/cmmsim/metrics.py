"""Run metrics and the CSV reports.

Report schemas (stable column order):

steps.csv    seed, mechanism, step, t_s, vehicle_id, true_e, true_n, raw_e, raw_n,
             est_e, est_n, err_e, err_n, bias_err_e, bias_err_n, n_neighbors,
             packets_received
summary.csv  seed, mechanism, n_vehicles, mode, channel, rmse_m, raw_rmse_m,
             sqrt_variance_m, sqrt_mse_m, loss_rate, attempts, drops,
             max_identity_residual, degeneracy_events, mean_neighbors
             (with several seeds, extra rows with seed "mean" and "std")
links.csv    seed, mechanism, step, receiver_id, sender_id, distance_m, delivered

Vehicle ids are 1-based in every file. ``bias_err`` is the vehicle's
estimate of the horizontal common error minus the true one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .channel import loss_stats
from .fusion import mse, network_variance

STEP_COLUMNS = ["seed", "mechanism", "step", "t_s", "vehicle_id", "true_e", "true_n", "raw_e", "raw_n",
                "est_e", "est_n", "err_e", "err_n", "bias_err_e", "bias_err_n", "n_neighbors",
                "packets_received"]
SUMMARY_COLUMNS = ["seed", "mechanism", "n_vehicles", "mode", "channel", "rmse_m", "raw_rmse_m",
                   "sqrt_variance_m", "sqrt_mse_m", "loss_rate", "attempts", "drops",
                   "max_identity_residual", "degeneracy_events", "mean_neighbors"]
LINK_COLUMNS = ["seed", "mechanism", "step", "receiver_id", "sender_id", "distance_m", "delivered"]
_METRICS = ["rmse_m", "raw_rmse_m", "sqrt_variance_m", "sqrt_mse_m", "loss_rate", "attempts", "drops",
            "max_identity_residual", "degeneracy_events", "mean_neighbors"]


def rmse(errors) -> float:
    """Root of the mean squared Euclidean norm of error vectors."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("rmse of an empty error list")
    e = e.reshape(-1, e.shape[-1]) if e.ndim > 1 else e[:, None]
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))


@dataclass(eq=False)
class MechanismResult:
    seed: int
    mechanism: str
    n_vehicles: int
    mode: str
    channel: str
    dt: float
    truth: np.ndarray             # (N, n, 2)
    raw: np.ndarray               # (N, n, 2)
    estimate: np.ndarray          # (N, n, 2)
    common_estimate: np.ndarray   # (N, n, 2)
    common_true: np.ndarray       # (N, 2)
    neighbors: np.ndarray         # (N, n)
    received: np.ndarray          # (N, n)
    links: np.ndarray             # (L, 5): step, receiver, sender, distance, delivered
    degeneracy_events: int = 0

    @property
    def n_steps(self) -> int:
        return self.truth.shape[0]

    @property
    def errors(self) -> np.ndarray:
        return self.estimate - self.truth

    @cached_property
    def rmse(self) -> float:
        return rmse(self.errors)

    @cached_property
    def raw_rmse(self) -> float:
        return rmse(self.raw - self.truth)

    @cached_property
    def error_series(self) -> np.ndarray:
        """Per-step RMS position error over the vehicles."""
        e = self.errors
        return np.sqrt(np.mean(np.sum(e * e, axis=2), axis=1))

    @cached_property
    def _decomposition(self):
        var = np.empty(self.n_steps)
        err = np.empty(self.n_steps)
        bias2 = np.empty(self.n_steps)
        for k in range(self.n_steps):
            x, c = self.common_estimate[k], self.common_true[k]
            var[k] = network_variance(x)
            err[k] = mse(x, c)
            bias2[k] = float(np.sum((x.mean(axis=0) - c) ** 2))
        return var, err, bias2

    @property
    def variance_series(self) -> np.ndarray:
        return self._decomposition[0]

    @property
    def mse_series(self) -> np.ndarray:
        return self._decomposition[1]

    @property
    def identity_residual(self) -> float:
        var, err, bias2 = self._decomposition
        return float(np.max(np.abs(err - (var + bias2))))

    @property
    def sqrt_variance(self) -> float:
        return float(np.sqrt(np.mean(self.variance_series)))

    @property
    def sqrt_mse(self) -> float:
        return float(np.sqrt(np.mean(self.mse_series)))

    @property
    def link_stats(self):
        return loss_stats(self.links[:, 4].astype(bool))

    @property
    def loss_rate(self) -> float:
        return self.link_stats.loss_rate

    def summary(self) -> dict:
        st = self.link_stats
        return {
            "seed": self.seed, "mechanism": self.mechanism, "n_vehicles": self.n_vehicles,
            "mode": self.mode, "channel": self.channel, "rmse_m": self.rmse, "raw_rmse_m": self.raw_rmse,
            "sqrt_variance_m": self.sqrt_variance, "sqrt_mse_m": self.sqrt_mse,
            "loss_rate": st.loss_rate, "attempts": st.attempts, "drops": st.drops,
            "max_identity_residual": self.identity_residual,
            "degeneracy_events": self.degeneracy_events,
            "mean_neighbors": float(self.neighbors.mean()),
        }


@dataclass(eq=False)
class MetricsReport:
    config: object
    results: list = field(default_factory=list)

    def by_mechanism(self) -> dict:
        out = {}
        for r in self.results:
            out.setdefault(r.mechanism, []).append(r)
        return out

    def aggregate(self) -> list:
        """Mean and standard deviation across seeds per mechanism."""
        rows = []
        for mech, rs in self.by_mechanism().items():
            if len(rs) < 2:
                continue
            table = np.array([[r.summary()[k] for k in _METRICS] for r in rs], dtype=float)
            first = rs[0].summary()
            for tag, vals in (("mean", table.mean(axis=0)), ("std", table.std(axis=0, ddof=1))):
                row = {k: first[k] for k in ("mechanism", "n_vehicles", "mode", "channel")}
                row["seed"] = tag
                row.update(zip(_METRICS, vals.tolist()))
                rows.append(row)
        return rows


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{v:.6f}" if abs(v) >= 1e-4 or v == 0 else f"{v:.6e}"
    return str(v)


def _write(path: Path, header, lines):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for chunk in lines:
                fh.write(chunk)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _step_lines(r: MechanismResult):
    N, n = r.truth.shape[:2]
    err = r.errors
    berr = r.common_estimate - r.common_true[:, None, :]
    num = np.concatenate([r.truth, r.raw, r.estimate, err, berr], axis=2)
    for k in range(N):
        rows = []
        prefix = f"{r.seed},{r.mechanism},{k},{k * r.dt:.1f},"
        for v in range(n):
            vals = ",".join(f"{x:.6f}" for x in num[k, v])
            rows.append(f"{prefix}{v + 1},{vals},{r.neighbors[k, v]},{r.received[k, v]}\n")
        yield "".join(rows)


def _link_lines(r: MechanismResult):
    L = r.links
    prefix = f"{r.seed},{r.mechanism},"
    for lo in range(0, len(L), 10_000):
        block = L[lo:lo + 10_000]
        yield "".join(f"{prefix}{int(s)},{int(i) + 1},{int(j) + 1},{d:.3f},{int(ok)}\n"
                      for s, i, j, d, ok in block)


def emit_reports(report: MetricsReport, out_dir) -> dict:
    """Write steps.csv, summary.csv and links.csv; returns their paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    paths = {name: out / f"{name}.csv" for name in ("steps", "summary", "links")}
    _write(paths["steps"], STEP_COLUMNS, (ln for r in report.results for ln in _step_lines(r)))
    rows = [r.summary() for r in report.results] + report.aggregate()
    _write(paths["summary"], SUMMARY_COLUMNS,
           (",".join(_fmt(row[c]) for c in SUMMARY_COLUMNS) + "\n" for row in rows))
    _write(paths["links"], LINK_COLUMNS, (ln for r in report.results for ln in _link_lines(r)))
    return paths
