"""Synthetic operating-point telemetry under i.i.d. Gaussian load fluctuation."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateData, DimensionError, NonConvergence
from .network import BusKind, Network
from .powerflow import StateIndexMap, _Model, _newton, solve_powerflow


@dataclass(frozen=True)
class FluctuationConfig:
    relative_sigma: float = 0.02
    artificial_noise_sigma: float = 1e-6
    seed: int = 0
    samples: int = 9600
    background_sigma: float = 5e-3

    def __post_init__(self):
        if min(self.relative_sigma, self.artificial_noise_sigma, self.background_sigma) < 0:
            raise ValueError("fluctuation and noise sigmas must be nonnegative")
        if self.samples < 2:
            raise ValueError("need at least two samples")


@dataclass(frozen=True)
class TelemetrySeries:
    """States (p×T) and injections (p×T), one converged power flow per column."""

    x_series: np.ndarray
    y_series: np.ndarray
    index_map: StateIndexMap
    timestamps: np.ndarray

    @property
    def samples(self) -> int:
        return self.x_series.shape[1]

    def window(self, start: int, length: int) -> "TelemetrySeries":
        if start < 0 or length < 1 or start + length > self.samples:
            raise IndexError(f"window [{start}, {start + length}) outside 0..{self.samples}")
        sl = slice(start, start + length)
        return TelemetrySeries(self.x_series[:, sl], self.y_series[:, sl], self.index_map,
                               self.timestamps[sl])


@dataclass(frozen=True)
class DeltaMatrices:
    a: np.ndarray
    b: np.ndarray
    index_map: StateIndexMap | None = None


def sample_rng(seed: int, sample: int) -> np.random.Generator:
    """Generator for one sample; independent of evaluation order."""
    return np.random.default_rng([seed, sample])


def perturbed_injections(net: Network, relative_sigma: float, rng: np.random.Generator,
                         background_sigma: float = 0.0):
    """Scheduled (P, Q) under one random draw.

    Every demand and PV-bus generation is scaled by ``1 + relative_sigma·ε``;
    every bus injection additionally receives ``background_sigma·ε`` so that
    buses with zero nominal injection still move.
    """
    n, ng = net.n_buses, len(net.generators)
    eps_pd = rng.standard_normal(n)
    eps_qd = rng.standard_normal(n)
    eps_pg = rng.standard_normal(ng)
    eps_bg = rng.standard_normal((2, n))
    p = np.array([-b.p_demand for b in net.buses]) * (1.0 + relative_sigma * eps_pd)
    q = np.array([-b.q_demand for b in net.buses]) * (1.0 + relative_sigma * eps_qd)
    p += background_sigma * eps_bg[0]
    q += background_sigma * eps_bg[1]
    for k, g in enumerate(net.generators):
        pos = net.bus_position(g.bus)
        pg = g.p_gen
        if net.buses[pos].kind is BusKind.PV:
            pg *= 1.0 + relative_sigma * eps_pg[k]
        p[pos] += pg
        q[pos] += g.q_gen
    return p, q


def simulate_series(net: Network, cfg: FluctuationConfig, tolerance: float = 1e-10,
                    max_iter: int = 20) -> TelemetrySeries:
    """Solve one power flow per sample under independent Gaussian load draws.

    Each sample is warm-started from the nominal solution, so the result does
    not depend on sample order.  The slack bus absorbs the imbalance.
    """
    model = _Model(net)
    nominal = solve_powerflow(net, tolerance=tolerance, max_iter=max_iter)
    start = (nominal.v, nominal.theta)
    p_dim = model.index_map.size
    xs = np.empty((p_dim, cfg.samples))
    ys = np.empty((p_dim, cfg.samples))
    for t in range(cfg.samples):
        spec = perturbed_injections(net, cfg.relative_sigma, sample_rng(cfg.seed, t),
                                    cfg.background_sigma)
        try:
            sol = _newton(model, net, spec, tolerance, max_iter, start)
        except NonConvergence as exc:
            raise NonConvergence(f"sample {t}: {exc}", exc.iterations, exc.mismatch,
                                 sample=t) from exc
        xs[:, t] = sol.point.x
        ys[:, t] = sol.point.y
    return TelemetrySeries(xs, ys, model.index_map, np.arange(cfg.samples))


def standardize(matrix: np.ndarray, artificial_noise_sigma: float = 1e-6,
                seed: int = 0) -> np.ndarray:
    """Add small Gaussian noise, then z-score every row (population std)."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[1] < 2:
        raise DimensionError("standardize needs a 2-D matrix with at least two columns")
    if artificial_noise_sigma > 0:
        m = m + np.random.default_rng(seed).normal(0.0, artificial_noise_sigma, m.shape)
    mu = m.mean(axis=1, keepdims=True)
    centered = m - mu
    sd = np.sqrt(np.mean(centered**2, axis=1, keepdims=True))
    bad = np.flatnonzero(sd.ravel() == 0)
    if bad.size:
        raise DegenerateData(f"zero-variance rows {bad.tolist()} cannot be standardized")
    return centered / sd


def form_deltas(series: TelemetrySeries, start: int = 0, length: int | None = None) -> DeltaMatrices:
    """Consecutive differences of states (A) and injections (B) over a window."""
    if length is None:
        length = series.samples - start
    if length < 2:
        raise IndexError("window length must be at least 2")
    w = series.window(start, length)
    return DeltaMatrices(np.diff(w.x_series, axis=1), np.diff(w.y_series, axis=1), series.index_map)


# ---------------------------------------------------------------------------
# CSV exchange


def write_series_csv(series: TelemetrySeries, states_path, injections_path) -> None:
    im = series.index_map
    for path, data, labels in ((states_path, series.x_series, im.state_labels()),
                               (injections_path, series.y_series, im.injection_labels())):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", *labels])
            for t, col in zip(series.timestamps, data.T):
                w.writerow([int(t), *(repr(float(v)) for v in col)])


def _parse_labels(labels: list[str], first: str, second: str) -> tuple[list[int], list[int]]:
    a, b = [], []
    for lab in labels:
        if lab.startswith(first):
            if b:
                raise ValueError(f"{first} columns must precede {second} columns")
            a.append(int(lab[len(first):]))
        elif lab.startswith(second):
            b.append(int(lab[len(second):]))
        else:
            raise ValueError(f"unrecognized column label {lab!r}")
    return a, b


def read_series_csv(states_path, injections_path) -> TelemetrySeries:
    def load(path):
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        data = np.array([[float(v) for v in r[1:]] for r in body]).T
        return header[1:], np.array([int(r[0]) for r in body]), data

    xlab, ts, xs = load(states_path)
    ylab, ts_y, ys = load(injections_path)
    theta, v = _parse_labels(xlab, "θ", "V")
    p, q = _parse_labels(ylab, "P", "Q")
    if (theta, v) != (p, q) or not np.array_equal(ts, ts_y):
        raise DimensionError("state and injection files describe different layouts")
    return TelemetrySeries(xs, ys, StateIndexMap(tuple(theta), tuple(v)), ts)
