"""Injection equations, the analytic Jacobian, and Newton-Raphson power flow.

Sign convention: P and Q are net injections into the network (generation
positive).  The Jacobian uses the voltage-scaled convention on its V columns,
i.e. the N and L blocks hold ``dP/dV * V`` and ``dQ/dV * V``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, NonConvergence, SingularJacobian
from .network import BusKind, Network, build_ybus

THETA, V, P, Q = "θ", "V", "P", "Q"


@dataclass(frozen=True)
class StateIndexMap:
    """Positions of buses inside the flattened state and injection vectors.

    State ``x = [θ at theta_positions..., V at v_positions...]`` and injection
    ``y = [P at p_positions..., Q at q_positions...]``.
    """

    theta_positions: tuple[int, ...]
    v_positions: tuple[int, ...]

    @classmethod
    def from_network(cls, net: Network) -> "StateIndexMap":
        ids = sorted(net.bus_ids)
        theta = tuple(i for i in ids if net.bus(i).kind is not BusKind.SLACK)
        v = tuple(i for i in ids if net.bus(i).kind is BusKind.PQ)
        return cls(theta, v)

    @property
    def p_positions(self) -> tuple[int, ...]:
        return self.theta_positions

    @property
    def q_positions(self) -> tuple[int, ...]:
        return self.v_positions

    @property
    def size(self) -> int:
        return len(self.theta_positions) + len(self.v_positions)

    def state_labels(self) -> list[str]:
        return [f"{THETA}{b}" for b in self.theta_positions] + \
               [f"{V}{b}" for b in self.v_positions]

    def injection_labels(self) -> list[str]:
        return [f"{P}{b}" for b in self.p_positions] + [f"{Q}{b}" for b in self.q_positions]


def index_to_label(index_map: StateIndexMap, position: int, axis: str = "state") -> tuple[int, str]:
    """Map a 1-based vector position to ``(bus id, quantity)``.

    ``axis`` is ``"state"`` (θ, V) or ``"injection"`` (P, Q).
    """
    nth = len(index_map.theta_positions)
    if not 1 <= position <= index_map.size:
        raise IndexError(f"position {position} outside 1..{index_map.size}")
    if axis not in ("state", "injection"):
        raise ValueError(f"axis must be 'state' or 'injection', not {axis!r}")
    k = position - 1
    first, second = (THETA, V) if axis == "state" else (P, Q)
    if k < nth:
        return index_map.theta_positions[k], first
    return index_map.v_positions[k - nth], second


def entry_label(index_map: StateIndexMap, row: int, col: int) -> str:
    """Label of Jacobian entry (1-based row = injection, col = state), e.g. ``∂P66/∂θ49``."""
    yb, yq = index_to_label(index_map, row, "injection")
    xb, xq = index_to_label(index_map, col, "state")
    return f"∂{yq}{yb}/∂{xq}{xb}"


class Provenance(enum.Enum):
    ANALYTIC = "Analytic"
    LSE = "LSE"
    CHAIN_RULE = "ChainRule"


@dataclass(frozen=True)
class JacobianMatrix:
    """A p×p sensitivity matrix with its layout.

    ``v_scaled`` tells whether the V columns hold ``dy/dV * V`` (the analytic
    convention) or plain ``dy/dV`` (what a regression on raw state
    differences produces).
    """

    values: np.ndarray
    index_map: StateIndexMap
    provenance: Provenance
    v_scaled: bool = True

    def __post_init__(self):
        p = self.index_map.size
        if self.values.shape != (p, p):
            raise DimensionError(f"Jacobian shape {self.values.shape} does not match p={p}")

    def scaled_by(self, v_reference) -> "JacobianMatrix":
        """Convert raw V columns to the V-scaled convention at ``v_reference`` (PQ-bus order)."""
        if self.v_scaled:
            return self
        nth = len(self.index_map.theta_positions)
        v_reference = np.asarray(v_reference, dtype=float)
        if v_reference.shape != (len(self.index_map.v_positions),):
            raise DimensionError("reference voltages must cover every PQ bus")
        values = self.values.copy()
        values[:, nth:] *= v_reference[None, :]
        return JacobianMatrix(values, self.index_map, self.provenance, True)


@dataclass(frozen=True)
class OperatingPoint:
    x: np.ndarray
    y: np.ndarray
    index_map: StateIndexMap


@dataclass(frozen=True)
class PowerFlowSolution:
    point: OperatingPoint
    iterations: int
    final_mismatch: float
    bus_ids: tuple[int, ...]
    v: np.ndarray
    theta: np.ndarray
    p: np.ndarray
    q: np.ndarray
    mismatch_history: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "converged": True,
            "iterations": self.iterations,
            "final_mismatch": float(self.final_mismatch),
            "mismatch_history": [float(m) for m in self.mismatch_history],
            "buses": [
                {"id": int(b), "V": float(v), "theta_deg": float(np.degrees(t)),
                 "P": float(p), "Q": float(q)}
                for b, v, t, p, q in zip(self.bus_ids, self.v, self.theta, self.p, self.q)
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# physics on a dense admittance matrix


class _Model:
    """Dense Y-bus plus the position bookkeeping shared by the kernels below."""

    def __init__(self, net: Network):
        self.net = net
        ybus = build_ybus(net)
        self.y = ybus.to_dense()
        ground = ybus.ground()
        # branch-only part of Y; the node-to-ground admittance enters separately
        self.y_net = self.y - np.diag(ground)
        self.g_ground = ground.real
        self.b_ground = ground.imag
        self.index_map = StateIndexMap.from_network(net)
        self.theta_idx = np.array([net.bus_position(b) for b in self.index_map.theta_positions],
                                  dtype=int)
        self.v_idx = np.array([net.bus_position(b) for b in self.index_map.v_positions],
                              dtype=int)
        self.slack_idx = net.bus_position(net.slack.id)
        ti, vi = self.theta_idx, self.v_idx
        self.blocks = (np.ix_(ti, ti), np.ix_(ti, vi), np.ix_(vi, ti), np.ix_(vi, vi))
        self.pq_mask = np.array([b.kind is BusKind.PQ for b in net.buses])


def _check_state(n: int, v, theta) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if v.shape != (n,) or theta.shape != (n,):
        raise DimensionError(f"expected V and θ of length {n}, got {v.shape} and {theta.shape}")
    return v, theta


def _injections(m: _Model, v, theta):
    # P_i = V_i Σ_{k≠i} V_k (G_ik cos θ_ik + B_ik sin θ_ik) − V_i² Σ_{k≠i} G_ik + V_i² g_i
    # with G, B branch-only and g + jb the ground admittance; Q analogous.
    dt = theta[:, None] - theta[None, :]
    c, s = np.cos(dt), np.sin(dt)
    g, b = m.y_net.real, m.y_net.imag
    vv = v[:, None] * v[None, :]
    p = np.sum(vv * (g * c + b * s), axis=1) + v**2 * m.g_ground
    q = np.sum(vv * (g * s - b * c), axis=1) - v**2 * m.b_ground
    return p, q


def _jacobian(m: _Model, v, theta) -> np.ndarray:
    p, q = _injections(m, v, theta)
    dt = theta[:, None] - theta[None, :]
    c, s = np.cos(dt), np.sin(dt)
    g, b = m.y_net.real, m.y_net.imag
    vv = v[:, None] * v[None, :]
    sin_term = vv * (g * s - b * c)
    cos_term = vv * (g * c + b * s)
    v2 = v**2
    h = sin_term.copy()
    n = cos_term.copy()
    k = -cos_term
    ll = sin_term
    d = np.arange(len(v))
    h[d, d] += -q - v2 * m.b_ground
    n[d, d] += p + v2 * m.g_ground
    k[d, d] += p - v2 * m.g_ground
    ll[d, d] += q - v2 * m.b_ground
    bh, bn, bk, bl = m.blocks
    nth = len(m.theta_idx)
    out = np.empty((m.index_map.size, m.index_map.size))
    out[:nth, :nth] = h[bh]
    out[:nth, nth:] = n[bn]
    out[nth:, :nth] = k[bk]
    out[nth:, nth:] = ll[bl]
    return out


def injections(net: Network, v, theta) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus active and reactive injections at the given polar voltages."""
    m = _Model(net)
    v, theta = _check_state(net.n_buses, v, theta)
    return _injections(m, v, theta)


def analytic_jacobian(net: Network, v, theta) -> JacobianMatrix:
    """Jacobian ``[[H, N], [K, L]]`` of the reduced injection vector w.r.t. the state."""
    m = _Model(net)
    v, theta = _check_state(net.n_buses, v, theta)
    return JacobianMatrix(_jacobian(m, v, theta), m.index_map, Provenance.ANALYTIC)


class JacobianEvaluator:
    """Reusable evaluator for many states of one network (avoids rebuilding Y)."""

    def __init__(self, net: Network):
        self._m = _Model(net)
        self.index_map = self._m.index_map

    def full_state(self, x: np.ndarray, base_v: np.ndarray, base_theta: np.ndarray):
        v, theta = base_v.copy(), base_theta.copy()
        nth = len(self._m.theta_idx)
        theta[self._m.theta_idx] = x[:nth]
        v[self._m.v_idx] = x[nth:]
        return v, theta

    def jacobian(self, v, theta) -> np.ndarray:
        return _jacobian(self._m, np.asarray(v, float), np.asarray(theta, float))

    def injections(self, v, theta):
        return _injections(self._m, np.asarray(v, float), np.asarray(theta, float))


def state_vector(index_map: StateIndexMap, net: Network, v, theta) -> np.ndarray:
    pos = net.bus_position
    return np.concatenate([[theta[pos(b)] for b in index_map.theta_positions],
                           [v[pos(b)] for b in index_map.v_positions]])


def injection_vector(index_map: StateIndexMap, net: Network, p, q) -> np.ndarray:
    pos = net.bus_position
    return np.concatenate([[p[pos(b)] for b in index_map.p_positions],
                           [q[pos(b)] for b in index_map.q_positions]])


# ---------------------------------------------------------------------------
# Newton-Raphson


def flat_state(net: Network) -> tuple[np.ndarray, np.ndarray]:
    v = np.array([1.0 if b.kind is BusKind.PQ else b.v_setpoint for b in net.buses])
    theta = np.zeros(net.n_buses)
    theta[net.bus_position(net.slack.id)] = net.slack.theta_setpoint
    return v, theta


def solve_powerflow(net: Network, tolerance: float = 1e-8, max_iter: int = 20,
                    flat_start: bool = True, initial: tuple | None = None) -> PowerFlowSolution:
    """Solve the power flow by full Newton-Raphson.

    Without ``flat_start`` the iteration starts from ``initial`` (a ``(v, theta)``
    pair) or, if that is None, from the voltages stored on the buses.  Slack
    and PV setpoints are enforced either way.

    Raises :class:`NonConvergence` when the infinity-norm mismatch is still
    above ``tolerance`` after ``max_iter`` updates and
    :class:`SingularJacobian` when a Newton step cannot be solved.
    """
    if not flat_start and initial is None:
        initial = (np.array([b.v_setpoint for b in net.buses]),
                   np.array([b.theta_setpoint for b in net.buses]))
    return _newton(_Model(net), net, net.specified_injections(), tolerance, max_iter,
                   None if flat_start else initial)


def _newton(m: _Model, net: Network, spec, tolerance, max_iter, initial=None):
    v0, th0 = flat_state(net)
    if initial is not None:
        v_init, th_init = (np.asarray(a, dtype=float) for a in initial)
        v = np.where(m.pq_mask, v_init, v0)
        theta = th_init.copy()
        theta[m.slack_idx] = th0[m.slack_idx]
    else:
        v, theta = v0, th0
    p_spec, q_spec = spec
    target = np.concatenate([p_spec[m.theta_idx], q_spec[m.v_idx]])
    nth = len(m.theta_idx)

    history = []
    it = 0
    while True:
        p, q = _injections(m, v, theta)
        mismatch = target - np.concatenate([p[m.theta_idx], q[m.v_idx]])
        err = float(np.max(np.abs(mismatch))) if mismatch.size else 0.0
        history.append(err)
        if not np.isfinite(err):
            raise NonConvergence(f"power flow diverged at iteration {it}", it, err)
        if err < tolerance:
            break
        if it >= max_iter:
            raise NonConvergence(
                f"power flow did not converge in {max_iter} iterations (mismatch {err:.3e})",
                it, err)
        jac = _jacobian(m, v, theta)
        try:
            lu = scipy.linalg.lu_factor(jac, check_finite=True)
            if np.any(np.abs(np.diag(lu[0])) < 1e-14 * max(1.0, np.abs(jac).max())):
                raise np.linalg.LinAlgError("zero pivot")
            step = scipy.linalg.lu_solve(lu, mismatch)
        except (np.linalg.LinAlgError, ValueError, scipy.linalg.LinAlgWarning) as exc:
            raise SingularJacobian(f"Jacobian solve failed at iteration {it}: {exc}") from exc
        theta = theta.copy()
        v = v.copy()
        theta[m.theta_idx] += step[:nth]
        v[m.v_idx] *= 1.0 + step[nth:]
        it += 1
        if np.any(v[m.v_idx] <= 0):
            raise NonConvergence(f"voltage collapsed to nonpositive magnitude at iteration {it}",
                                 it, err)

    x = np.concatenate([theta[m.theta_idx], v[m.v_idx]])
    y = np.concatenate([p[m.theta_idx], q[m.v_idx]])
    return PowerFlowSolution(OperatingPoint(x, y, m.index_map), it, err,
                             tuple(net.bus_ids), v, theta, p, q, tuple(history))
