"""Data-driven Jacobian estimation by least squares, with bias reporting."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionError, IllConditioned, Underdetermined
from .network import Network
from .powerflow import (JacobianEvaluator, JacobianMatrix, Provenance, StateIndexMap, entry_label,
                        flat_state)
from .telemetry import DeltaMatrices, TelemetrySeries, form_deltas


@dataclass(frozen=True)
class JacobianBenchmark:
    j_mean: np.ndarray
    j_std: np.ndarray
    index_map: StateIndexMap
    samples: int = 0


def benchmark_jacobian(net: Network, series: TelemetrySeries) -> JacobianBenchmark:
    """Elementwise mean and standard deviation of the model Jacobian over a series.

    Each sample's θ and V are taken from telemetry; slack and PV magnitudes
    come from the network setpoints.  Accumulation is Welford-style, so the
    memory cost is independent of the series length.
    """
    if series.samples < 1:
        raise DimensionError("series is empty")
    ev = JacobianEvaluator(net)
    if ev.index_map != series.index_map:
        raise DimensionError("series layout does not match the network")
    base_v, base_theta = flat_state(net)
    mean = m2 = None
    for k in range(series.samples):
        v, theta = ev.full_state(series.x_series[:, k], base_v, base_theta)
        j = ev.jacobian(v, theta)
        if mean is None:
            mean = j.copy()
            m2 = np.zeros_like(j)
            continue
        delta = j - mean
        mean += delta / (k + 1)
        m2 += delta * (j - mean)
    std = np.sqrt(m2 / series.samples)
    return JacobianBenchmark(mean, std, series.index_map, series.samples)


def lse_jacobian(deltas: DeltaMatrices, rank_tol: float | None = None) -> JacobianMatrix:
    """Least-squares solution of ``B ≈ J A``.

    Solves ``Aᵀ Jᵀ = Bᵀ`` with a column-pivoted QR of ``Aᵀ``; the minimizer is
    the same as ``((A Aᵀ)⁻¹ A Bᵀ)ᵀ`` but avoids squaring the condition number.
    The result is the plain derivative ``dy/dx`` (``v_scaled=False``).
    Raises :class:`Underdetermined` unless there are more difference columns
    than states, and :class:`IllConditioned` when ``A`` is rank deficient.
    """
    a, b = np.asarray(deltas.a, float), np.asarray(deltas.b, float)
    p, t = a.shape
    if b.shape != a.shape:
        raise DimensionError(f"A {a.shape} and B {b.shape} differ in shape")
    if t <= p:
        raise Underdetermined(f"{t} difference columns cannot determine a {p}x{p} Jacobian")
    q, r, perm = scipy.linalg.qr(a.T, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = rank_tol if rank_tol is not None else max(t, p) * np.finfo(float).eps * diag[0]
    rank = int(np.sum(diag > tol))
    if diag[0] == 0 or rank < p:
        cond = np.inf if diag[-1] == 0 else diag[0] / diag[-1]
        raise IllConditioned(f"state differences have rank {rank} < {p} "
                             f"(condition estimate {cond:.3e})", rank, cond)
    sol = scipy.linalg.solve_triangular(r, q.T @ b.T)
    jt = np.empty_like(sol)
    jt[perm] = sol
    index_map = deltas.index_map or StateIndexMap(tuple(range(1, p + 1)), ())
    return JacobianMatrix(jt.T, index_map, Provenance.LSE, v_scaled=False)


def estimate_jacobian(series: TelemetrySeries, start: int = 0,
                      length: int | None = None) -> JacobianMatrix:
    """LSE over a window, converted to the V-scaled convention at the window's mean voltages."""
    if length is None:
        length = series.samples - start
    raw = lse_jacobian(form_deltas(series, start, length))
    nth = len(series.index_map.theta_positions)
    v_mean = series.x_series[nth:, start:start + length].mean(axis=1)
    return raw.scaled_by(v_mean)


# ---------------------------------------------------------------------------
# bias reporting


@dataclass(frozen=True)
class OutlierRule:
    """Robust z-score on ``|bias|``: ``(|b| - median) / (1.4826 * MAD) >= threshold``.

    Flagged entries are ranked by their bias relative to the benchmark entry,
    ``|b| / (|J_mean| + s)`` with ``s`` the median nonzero ``|J_mean|``, so an
    entry is judged against the sensitivity it is supposed to reproduce.
    """

    threshold: float = 5.0
    max_outliers: int | None = 50


@dataclass(frozen=True)
class Outlier:
    row: int
    col: int
    label: str
    value: float
    score: float


@dataclass(frozen=True)
class BiasReport:
    bias: np.ndarray
    max_abs: float
    frobenius_rel: float
    outliers: list[Outlier]
    threshold_value: float
    index_map: StateIndexMap = field(repr=False)

    def summary(self) -> dict:
        return {
            "max_abs": float(self.max_abs),
            "frobenius_rel": float(self.frobenius_rel),
            "threshold_value": float(self.threshold_value),
            "outliers": [{"row": o.row, "col": o.col, "label": o.label,
                          "value": float(o.value), "score": float(o.score)}
                         for o in self.outliers],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, ensure_ascii=False)
            fh.write("\n")

    def write_csv(self, path) -> None:
        write_matrix_csv(path, self.bias, self.index_map)


def bias_report(estimate: JacobianMatrix, benchmark: JacobianBenchmark,
                rule: OutlierRule = OutlierRule()) -> BiasReport:
    """Compare an estimate against the benchmark mean and flag outlying entries.

    Outlier ``row``/``col`` are 1-based (row = injection, col = state), the
    same positions :func:`~gridtwin.powerflow.index_to_label` accepts.
    """
    if estimate.values.shape != benchmark.j_mean.shape:
        raise DimensionError(f"estimate {estimate.values.shape} vs benchmark "
                             f"{benchmark.j_mean.shape}")
    if estimate.index_map != benchmark.index_map:
        raise DimensionError("estimate and benchmark use different index maps")
    if not estimate.v_scaled:
        raise DimensionError("estimate must be V-scaled before comparison; see scaled_by()")
    bias = estimate.values - benchmark.j_mean
    mag = np.abs(bias)
    ref_norm = np.linalg.norm(benchmark.j_mean)
    frob_rel = float(np.linalg.norm(bias) / ref_norm) if ref_norm > 0 else float("inf")

    med = float(np.median(mag))
    scale = 1.4826 * float(np.median(np.abs(mag - med)))
    if scale > 0:
        cut = med + rule.threshold * scale
        flagged = mag >= cut
    else:
        cut = med
        flagged = mag > med
    rows, cols = np.nonzero(flagged)

    ref = np.abs(benchmark.j_mean)
    nz = ref[ref > 0]
    floor = float(np.median(nz)) if nz.size else 1.0
    severity = mag / (ref + floor)
    order = np.lexsort((cols, rows, -mag[rows, cols], -severity[rows, cols]))
    if rule.max_outliers is not None:
        order = order[: rule.max_outliers]
    outliers = [Outlier(int(rows[k]) + 1, int(cols[k]) + 1,
                        entry_label(estimate.index_map, int(rows[k]) + 1, int(cols[k]) + 1),
                        float(bias[rows[k], cols[k]]), float(severity[rows[k], cols[k]]))
                for k in order]
    return BiasReport(bias, float(mag.max()) if mag.size else 0.0, frob_rel, outliers,
                      float(cut), estimate.index_map)


def monotonicity_study(series: TelemetrySeries, windows, benchmark: JacobianBenchmark,
                       start: int = 0) -> dict[int, float]:
    """Relative Frobenius error of the LSE estimate for each window length."""
    out = {}
    for length in windows:
        length = int(length)
        est = estimate_jacobian(series, start, length)
        bias = est.values - benchmark.j_mean
        out[length] = float(np.linalg.norm(bias) / np.linalg.norm(benchmark.j_mean))
    return out


# ---------------------------------------------------------------------------
# exports


def write_matrix_csv(path, matrix: np.ndarray, index_map: StateIndexMap) -> None:
    """Dump a Jacobian-shaped matrix with injection labels on rows, state labels on columns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["", *index_map.state_labels()])
        for lab, row in zip(index_map.injection_labels(), matrix):
            w.writerow([lab, *(repr(float(v)) for v in row)])


def write_heatmap_pgm(path, matrix: np.ndarray) -> None:
    """Write ``|matrix|ᵀ`` as an 8-bit binary PGM (row = state, column = injection).

    Intensity is linear in magnitude, white = largest entry.
    """
    mag = np.abs(np.asarray(matrix, float)).T
    top = mag.max()
    img = np.zeros(mag.shape, dtype=np.uint8) if top == 0 else \
        np.round(255 * mag / top).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
