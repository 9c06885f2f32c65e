"""Factor models and Marchenko-Pastur spectral analysis of residue matrices."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import DegenerateData, DimensionError

# 99% quantile of the Tracy-Widom (beta = 1) law
TW1_Q99 = 2.0234


@dataclass(frozen=True)
class FactorDecomposition:
    factors: np.ndarray
    loadings: np.ndarray
    residues: np.ndarray
    num_factors: int

    def reconstruct(self) -> np.ndarray:
        return self.loadings @ self.factors + self.residues


def factor_decompose(x, num_factors: int) -> FactorDecomposition:
    """``X = L F + R`` with the top principal components of the row-scaled matrix.

    Rows are divided by their root mean square (not centered), so an exactly
    low-rank ``X`` leaves no residue.  Factor scores satisfy ``F Fᵀ = T·I``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DimensionError("factor_decompose needs a 2-D matrix")
    n, t = x.shape
    if not 0 <= num_factors < min(n, t):
        raise ValueError(f"num_factors={num_factors} must lie in [0, {min(n, t)})")
    if num_factors == 0:
        return FactorDecomposition(np.zeros((0, t)), np.zeros((n, 0)), x.copy(), 0)
    scale = np.sqrt(np.mean(x**2, axis=1))
    scale[scale == 0] = 1.0
    u, s, vt = np.linalg.svd(x / scale[:, None], full_matrices=False)
    k = num_factors
    factors = np.sqrt(t) * vt[:k]
    loadings = scale[:, None] * u[:, :k] * (s[:k] / np.sqrt(t))
    return FactorDecomposition(factors, loadings, x - loadings @ factors, k)


# ---------------------------------------------------------------------------
# Marchenko-Pastur law


def mp_edges(ratio: float) -> tuple[float, float]:
    """Bulk edges for ``ratio = N/T`` and unit variance."""
    r = np.sqrt(ratio)
    return (1.0 - r) ** 2, (1.0 + r) ** 2


def mp_cdf(x, ratio: float, grid: int = 4097) -> np.ndarray:
    """CDF of the Marchenko-Pastur law at unit variance.

    The density is integrated on ``x = m - h cos φ`` which removes the square
    root singularities at both edges.  For ``ratio > 1`` the law has an atom of
    mass ``1 - 1/ratio`` at zero.
    """
    lo, hi = mp_edges(ratio)
    m, h = (hi + lo) / 2, (hi - lo) / 2
    phi = np.linspace(0.0, np.pi, grid)
    xs = m - h * np.cos(phi)
    # density·dx/dφ; finite at φ = 0 even when lo = 0
    with np.errstate(invalid="ignore", divide="ignore"):
        integrand = (h * np.sin(phi)) ** 2 / (2 * np.pi * ratio * xs)
    if xs[0] == 0:
        integrand[0] = 2 * h / (2 * np.pi * ratio) if h > 0 else 0.0
    cont = cumulative_trapezoid(integrand, phi, initial=0.0)
    atom = max(0.0, 1.0 - 1.0 / ratio)
    x = np.asarray(x, dtype=float)
    return np.where(x < 0, 0.0, atom + np.interp(x, xs, cont, left=0.0, right=cont[-1]))


def tracy_widom_threshold(n: int, t: int) -> float:
    """Largest-eigenvalue 99% cutoff for white data, on the ``(1/T) X Xᵀ`` scale."""
    a, b = np.sqrt(max(t - 1, 1)), np.sqrt(n)
    mu = (a + b) ** 2
    sigma = (a + b) * (1 / a + 1 / b) ** (1 / 3)
    return (mu + TW1_Q99 * sigma) / t


def ks_distance(eigenvalues, ratio: float) -> float:
    e = np.sort(np.asarray(eigenvalues, float))
    n = e.size
    f = mp_cdf(e, ratio)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - f), np.max(f - (i - 1) / n)))


# ---------------------------------------------------------------------------
# spectrum reports


@dataclass(frozen=True)
class SpectrumReport:
    eigenvalues: np.ndarray
    mp_bulk_edges: tuple[float, float]
    spike_threshold: float
    spikes: np.ndarray
    ks_distance: float
    ratio: float
    scaling: str

    @property
    def outside_bulk_fraction(self) -> float:
        lo, hi = self.mp_bulk_edges
        e = self.eigenvalues
        return float(np.mean((e < lo) | (e > hi)))

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "mp_bulk_edges": [float(v) for v in self.mp_bulk_edges],
            "spike_threshold": float(self.spike_threshold),
            "spikes": [float(v) for v in self.spikes],
            "ks_distance": float(self.ks_distance),
            "ratio_n_over_t": float(self.ratio),
            "scaling": self.scaling,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    def write_histogram_csv(self, path, bins: int = 40) -> None:
        """Eigenvalue histogram (density) next to the bulk-law mass of each bin."""
        lo, hi = self.mp_bulk_edges
        top = max(hi, float(self.eigenvalues.max()))
        edges = np.linspace(0.0, top, bins + 1)
        counts, _ = np.histogram(self.eigenvalues, bins=edges)
        law = np.diff(mp_cdf(edges, self.ratio))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["left", "right", "count", "fraction", "mp_fraction"])
            for k in range(bins):
                w.writerow([repr(float(edges[k])), repr(float(edges[k + 1])), int(counts[k]),
                            repr(float(counts[k] / self.eigenvalues.size)), repr(float(law[k]))])


def _scale_rows(r: np.ndarray) -> np.ndarray:
    centered = r - r.mean(axis=1, keepdims=True)
    sd = np.sqrt(np.mean(centered**2, axis=1))
    bad = np.flatnonzero(sd == 0)
    if bad.size:
        raise DegenerateData(f"zero-variance rows {bad.tolist()} cannot be standardized")
    return centered / sd[:, None]


def _scale_robust(r: np.ndarray) -> np.ndarray:
    centered = r - r.mean(axis=1, keepdims=True)
    med = np.median(centered)
    s = 1.4826 * np.median(np.abs(centered - med))
    if s == 0:
        s = np.sqrt(np.mean(centered**2))
    if s == 0:
        raise DegenerateData("matrix is constant along every row")
    return centered / s


def _mad(y: np.ndarray) -> np.ndarray:
    c = y - np.median(y, axis=1, keepdims=True)
    s = 1.4826 * np.median(np.abs(c), axis=1)
    flat = s == 0
    s[flat] = np.sqrt(np.mean(c[flat] ** 2, axis=1))
    return s


def _clipped_rms(y: np.ndarray, clip: float = 3.0) -> np.ndarray:
    c = y - np.median(y, axis=1, keepdims=True)
    return np.sqrt(np.mean(np.clip(c, -clip, clip) ** 2, axis=1))


def _scale_two_way(r: np.ndarray, rounds: int = 5) -> np.ndarray:
    # alternating row and column scales; the data is only divided, never
    # shifted, until the end so that no offsets leak across rows.  MAD rounds
    # find the scales, clipped-RMS rounds remove the spread of the MAD.
    a, b = np.ones(r.shape[0]), np.ones(r.shape[1])
    for est in [_mad] * rounds + [_clipped_rms] * rounds:
        for axis in (0, 1):
            y = r / np.outer(a, b)
            s = est(y if axis == 0 else y.T)
            if np.any(s == 0) or not np.all(np.isfinite(s)):
                side = "rows" if axis == 0 else "columns"
                bad = np.flatnonzero(~(s > 0)).tolist()
                raise DegenerateData(f"{side} {bad} have no spread to scale by")
            if axis == 0:
                a = a * s
            else:
                b = b * s
    y = r / np.outer(a, b)
    return y - np.median(y, axis=1, keepdims=True)


_SCALERS = {"rows": _scale_rows, "robust": _scale_robust, "two-way": _scale_two_way}


def spectrum_report(r, scaling: str = "rows", spike_rule: str = "tracy-widom") -> SpectrumReport:
    """Eigenvalues of ``(1/T) R̃ R̃ᵀ`` against the Marchenko-Pastur law.

    ``scaling="rows"`` z-scores every row.  ``scaling="robust"`` centers rows
    and divides the whole matrix by one robust noise level (1.4826·MAD of the
    entries), which keeps differences in magnitude between rows visible.
    ``scaling="two-way"`` centers and scales rows and then columns by median
    and MAD, so heteroscedastic noise is whitened but sparse outliers are not.

    A spike is an eigenvalue above the bulk edge plus a 99% Tracy-Widom
    margin (``spike_rule="tracy-widom"``) or above the bare edge (``"edge"``).
    """
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] < 2 or r.shape[1] < 2:
        raise DimensionError(f"spectrum needs N >= 2 rows and T >= 2 columns, got {r.shape}")
    if scaling not in _SCALERS:
        raise ValueError(f"unknown scaling {scaling!r}")
    z = _SCALERS[scaling](r)
    n, t = z.shape
    eig = np.sort(np.linalg.eigvalsh(z @ z.T / t))
    eig = np.clip(eig, 0.0, None)
    ratio = n / t
    edges = mp_edges(ratio)
    if spike_rule == "tracy-widom":
        cut = max(edges[1], tracy_widom_threshold(n, t))
    elif spike_rule == "edge":
        cut = edges[1]
    else:
        raise ValueError(f"unknown spike rule {spike_rule!r}")
    spikes = eig[eig > cut][::-1]
    return SpectrumReport(eig, edges, float(cut), spikes, ks_distance(eig, ratio), ratio, scaling)


def count_factors(x, scaling: str = "rows") -> int:
    """Number of spikes, capped so that the factor model stays well defined."""
    x = np.asarray(x, float)
    return min(len(spectrum_report(x, scaling).spikes), min(x.shape) - 1)


@dataclass(frozen=True)
class SpectraComparison:
    bias_a: SpectrumReport
    bias_b: SpectrumReport
    residue_a: SpectrumReport
    residue_b: SpectrumReport
    factors_a: int
    factors_b: int

    def summary(self) -> dict:
        na, nb = len(self.bias_a.spikes), len(self.bias_b.spikes)
        return {
            "spikes_a": na,
            "spikes_b": nb,
            "factors_a": self.factors_a,
            "factors_b": self.factors_b,
            "ks_a": self.bias_a.ks_distance,
            "ks_b": self.bias_b.ks_distance,
            "residue_ks_a": self.residue_a.ks_distance,
            "residue_ks_b": self.residue_b.ks_distance,
            "fewer_spikes": "b" if nb < na else "a" if na < nb else "neither",
        }

    def write_json(self, path) -> None:
        doc = {"summary": self.summary(),
               "bias_a": self.bias_a.to_dict(), "bias_b": self.bias_b.to_dict(),
               "residue_a": self.residue_a.to_dict(), "residue_b": self.residue_b.to_dict()}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")


def compare_bias_spectra(bias_a, bias_b, num_factors: int | None = None,
                         scaling: str = "two-way") -> SpectraComparison:
    """Spectra of two bias matrices and of their factor-model residues.

    Each p×p bias matrix is read as an N×T data matrix (ratio 1).  With
    ``num_factors=None`` each matrix removes as many factors as it has spikes.
    """
    a, b = np.asarray(bias_a, float), np.asarray(bias_b, float)
    if a.shape != b.shape:
        raise DimensionError(f"bias matrices differ in shape: {a.shape} vs {b.shape}")
    sa, sb = spectrum_report(a, scaling), spectrum_report(b, scaling)
    cap = min(a.shape) - 1
    ka = min(len(sa.spikes), cap) if num_factors is None else num_factors
    kb = min(len(sb.spikes), cap) if num_factors is None else num_factors
    ra = spectrum_report(factor_decompose(a, ka).residues, scaling)
    rb = spectrum_report(factor_decompose(b, kb).residues, scaling)
    return SpectraComparison(sa, sb, ra, rb, ka, kb)
