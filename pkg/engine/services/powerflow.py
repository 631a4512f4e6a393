"""
AC power flow oracle and linear power-flow sensitivities
Full nodal injection vectors are ordered like network.buses; the slack
bus absorbs any imbalance.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from models.case import Network
from models.errors import PowerFlowError, SingularJacobianError
from models.schemas import LinearizationReport

logger = logging.getLogger(__name__)

MISMATCH_TOL = 1e-8
MAX_ITERATIONS = 50
SINGULAR_COND = 1e13


@dataclass(frozen=True)
class PowerFlowState:
    v: np.ndarray
    theta: np.ndarray
    p_inj: np.ndarray
    q_inj: np.ndarray
    converged: bool
    iterations: int
    mismatch: float = 0.0


@dataclass(frozen=True)
class SensitivityBundle:
    """First-order Taylor coefficients around one operating point"""
    bus_ids: List[int]
    non_slack: List[int]
    branch_keys: List[str]
    a_p: np.ndarray
    a_q: np.ndarray
    b_p: np.ndarray
    b_q: np.ndarray
    f_p: np.ndarray
    f_q: np.ndarray
    fq_p: np.ndarray
    fq_q: np.ndarray
    point: PowerFlowState
    flow_p0: np.ndarray
    flow_q0: np.ndarray

    @property
    def s_theta(self) -> np.ndarray:
        return self.a_p

    @property
    def s_v(self) -> np.ndarray:
        return self.b_p

    @property
    def theta0(self) -> np.ndarray:
        return self.point.theta[self._ns_index]

    @property
    def v0(self) -> np.ndarray:
        return self.point.v[self._ns_index]

    @property
    def _ns_index(self) -> np.ndarray:
        position = {b: i for i, b in enumerate(self.bus_ids)}
        return np.array([position[b] for b in self.non_slack], dtype=int)

    def column(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)


@dataclass
class _Topology:
    ybus: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    f: np.ndarray
    t: np.ndarray
    slack: int
    pq: np.ndarray
    keys: List[str] = field(default_factory=list)


def _topology(network: Network) -> _Topology:
    """Admittance matrix of the pi-model network, branch end admittances"""
    index = network.bus_index
    nb = len(network.buses)
    ybus = np.zeros((nb, nb), dtype=complex)
    f = np.array([index[br.from_bus] for br in network.branches], dtype=int)
    t = np.array([index[br.to_bus] for br in network.branches], dtype=int)
    ys = np.array([1.0 / complex(br.r, br.x) for br in network.branches], dtype=complex)
    bc = np.array([br.b_shunt for br in network.branches], dtype=float)
    yff = ys + 0.5j * bc
    yft = -ys
    for k in range(len(network.branches)):
        ybus[f[k], f[k]] += yff[k]
        ybus[t[k], t[k]] += yff[k]
        ybus[f[k], t[k]] += yft[k]
        ybus[t[k], f[k]] += yft[k]
    slack = index[network.slack]
    pq = np.array([i for i in range(nb) if i != slack], dtype=int)
    keys = [br.key for br in network.branches]
    return _Topology(ybus, yff, yft, f, t, slack, pq, keys)


def _injections(ybus: np.ndarray, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
    voltage = v * np.exp(1j * theta)
    return voltage * np.conj(ybus @ voltage)


def _jacobian(ybus: np.ndarray, v: np.ndarray, theta: np.ndarray, pq: np.ndarray) -> np.ndarray:
    """d[P;Q]/d[theta;v] restricted to the non-slack buses"""
    voltage = v * np.exp(1j * theta)
    current = ybus @ voltage
    diag_v = np.diag(voltage)
    diag_i = np.diag(current)
    diag_vnorm = np.diag(voltage / np.abs(voltage))
    ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
    ds_dva = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
    block = np.ix_(pq, pq)
    return np.block([
        [ds_dva[block].real, ds_dvm[block].real],
        [ds_dva[block].imag, ds_dvm[block].imag],
    ])


def _degenerate_bus(jac: np.ndarray, network: Network, pq: np.ndarray) -> int:
    _, _, vt = np.linalg.svd(jac)
    null = np.abs(vt[-1])
    n = len(pq)
    position = int(np.argmax(null[:n] + null[n:]))
    return network.buses[pq[position]].id


def _solve_jacobian(jac: np.ndarray, rhs: np.ndarray, network: Network, pq: np.ndarray) -> np.ndarray:
    if jac.size == 0:
        return np.zeros(0)
    if not np.isfinite(jac).all() or np.linalg.cond(jac) > SINGULAR_COND:
        raise SingularJacobianError(_degenerate_bus(np.nan_to_num(jac), network, pq))
    return np.linalg.solve(jac, rhs)


def flat_state(network: Network) -> PowerFlowState:
    """v = 1, theta = 0 with the injections that make it an exact solution"""
    topo = _topology(network)
    nb = len(network.buses)
    v = np.ones(nb)
    theta = np.zeros(nb)
    s = _injections(topo.ybus, v, theta)
    return PowerFlowState(v=v, theta=theta, p_inj=s.real, q_inj=s.imag, converged=True, iterations=0)


def solve_ac_powerflow(
    network: Network,
    p_inj: Sequence[float],
    q_inj: Sequence[float],
    start: Optional[PowerFlowState] = None,
    tol: float = MISMATCH_TOL,
    max_iter: int = MAX_ITERATIONS,
) -> PowerFlowState:
    """
    Newton-Raphson power flow, every non-slack bus treated as PQ
    Slack entries of p_inj / q_inj are ignored; the returned state carries
    the realized slack injection.
    """
    topo = _topology(network)
    nb = len(network.buses)
    p_spec = np.asarray(p_inj, dtype=float)
    q_spec = np.asarray(q_inj, dtype=float)
    if p_spec.shape != (nb,) or q_spec.shape != (nb,):
        raise ValueError(f"injection vectors must have length {nb}")

    v = np.ones(nb) if start is None else np.array(start.v, dtype=float)
    theta = np.zeros(nb) if start is None else np.array(start.theta, dtype=float)
    pq = topo.pq
    n = len(pq)

    mismatch = np.inf
    for iteration in range(max_iter + 1):
        s = _injections(topo.ybus, v, theta)
        residual = np.concatenate([s.real[pq] - p_spec[pq], s.imag[pq] - q_spec[pq]])
        mismatch = float(np.max(np.abs(residual))) if n else 0.0
        if mismatch <= tol:
            logger.debug(f"Newton converged on {network.name} in {iteration} iterations")
            return PowerFlowState(v=v, theta=theta, p_inj=s.real, q_inj=s.imag,
                                  converged=True, iterations=iteration, mismatch=mismatch)
        if iteration == max_iter or not np.isfinite(mismatch):
            break
        jac = _jacobian(topo.ybus, v, theta, pq)
        step = _solve_jacobian(jac, -residual, network, pq)
        theta[pq] += step[:n]
        v[pq] += step[n:]

    raise PowerFlowError(f"Newton power flow on {network.name} did not converge", mismatch)


def _branch_flow_derivatives(topo: _Topology, v: np.ndarray, theta: np.ndarray):
    """From-end complex flow and its derivatives w.r.t. all bus angles / magnitudes"""
    nl, nb = len(topo.f), len(v)
    voltage = v * np.exp(1j * theta)
    vf, vt = voltage[topo.f], voltage[topo.t]
    cross = vf * np.conj(topo.yft) * np.conj(vt)
    flow = np.abs(vf) ** 2 * np.conj(topo.yff) + cross

    rows = np.arange(nl)
    d_theta = np.zeros((nl, nb), dtype=complex)
    d_v = np.zeros((nl, nb), dtype=complex)
    d_theta[rows, topo.f] += 1j * cross
    d_theta[rows, topo.t] -= 1j * cross
    d_v[rows, topo.f] += 2 * v[topo.f] * np.conj(topo.yff) + cross / v[topo.f]
    d_v[rows, topo.t] += cross / v[topo.t]
    return flow, d_theta, d_v


def branch_flows(network: Network, state: PowerFlowState) -> Tuple[np.ndarray, np.ndarray]:
    """AC from-end active / reactive branch flows"""
    topo = _topology(network)
    flow, _, _ = _branch_flow_derivatives(topo, state.v, state.theta)
    return flow.real, flow.imag


def build_sensitivities(network: Network, point: Optional[PowerFlowState] = None) -> SensitivityBundle:
    """Linear map from nodal injections to non-slack angles, magnitudes and branch flows"""
    point = point or flat_state(network)
    topo = _topology(network)
    pq = topo.pq
    n, nb = len(pq), len(network.buses)

    jac = _jacobian(topo.ybus, point.v, point.theta, pq)
    if n:
        if np.linalg.cond(jac) > SINGULAR_COND:
            raise SingularJacobianError(_degenerate_bus(jac, network, pq))
        inverse = np.linalg.inv(jac)
    else:
        inverse = np.zeros((0, 0))

    # scatter the non-slack columns into full nodal width; slack column stays zero
    def widen(block: np.ndarray) -> np.ndarray:
        out = np.zeros((n, nb))
        out[:, pq] = block
        return out

    a_p, a_q = widen(inverse[:n, :n]), widen(inverse[:n, n:])
    b_p, b_q = widen(inverse[n:, :n]), widen(inverse[n:, n:])

    flow, d_theta, d_v = _branch_flow_derivatives(topo, point.v, point.theta)
    d_theta_ns, d_v_ns = d_theta[:, pq], d_v[:, pq]
    flow_dp = d_theta_ns @ a_p + d_v_ns @ b_p
    flow_dq = d_theta_ns @ a_q + d_v_ns @ b_q

    return SensitivityBundle(
        bus_ids=network.bus_ids,
        non_slack=[network.buses[i].id for i in pq],
        branch_keys=topo.keys,
        a_p=a_p, a_q=a_q, b_p=b_p, b_q=b_q,
        f_p=flow_dp.real, f_q=flow_dq.real,
        fq_p=flow_dp.imag, fq_q=flow_dq.imag,
        point=point,
        flow_p0=flow.real, flow_q0=flow.imag,
    )


def predict_linear(bundle: SensitivityBundle, p_inj: Sequence[float], q_inj: Sequence[float]) -> Dict[str, np.ndarray]:
    """Affine prediction of non-slack theta / v and from-end branch flows"""
    p = np.asarray(p_inj, dtype=float)
    q = np.asarray(q_inj, dtype=float)
    nb = len(bundle.bus_ids)
    if p.shape != (nb,) or q.shape != (nb,):
        raise ValueError(f"injection vectors must have length {nb}, got {p.shape} / {q.shape}")
    dp = p - bundle.point.p_inj
    dq = q - bundle.point.q_inj
    return {
        "theta": bundle.theta0 + bundle.a_p @ dp + bundle.a_q @ dq,
        "v": bundle.v0 + bundle.b_p @ dp + bundle.b_q @ dq,
        "line_p": bundle.flow_p0 + bundle.f_p @ dp + bundle.f_q @ dq,
        "line_q": bundle.flow_q0 + bundle.fq_p @ dp + bundle.fq_q @ dq,
    }


def linearization_error_report(
    network: Network,
    bundle: SensitivityBundle,
    samples: Sequence[Tuple[Sequence[float], Sequence[float]]],
) -> LinearizationReport:
    """Compare linear predictions to the Newton oracle over injection samples"""
    ns_index = bundle._ns_index
    v_err, theta_err, flow_err = [], [], []
    failures = 0
    for p, q in samples:
        try:
            state = solve_ac_powerflow(network, p, q, start=bundle.point)
        except (PowerFlowError, SingularJacobianError) as e:
            failures += 1
            logger.warning(f"⚠️ oracle failed on a linearization sample: {e}")
            continue
        linear = predict_linear(bundle, p, q)
        line_p, _ = branch_flows(network, state)
        v_err.append(np.abs(linear["v"] - state.v[ns_index]))
        theta_err.append(np.abs(linear["theta"] - state.theta[ns_index]))
        flow_err.append(np.abs(linear["line_p"] - line_p))

    def reduce(errors: List[np.ndarray], width: int, fn) -> List[float]:
        if not errors:
            return [0.0] * width
        return [float(x) for x in fn(np.vstack(errors), axis=0)]

    n_bus, n_line = len(bundle.non_slack), len(bundle.branch_keys)
    return LinearizationReport(
        buses=bundle.non_slack,
        lines=bundle.branch_keys,
        samples=len(samples),
        failures=failures,
        v_max_error=reduce(v_err, n_bus, np.max),
        v_mean_error=reduce(v_err, n_bus, np.mean),
        theta_max_error=reduce(theta_err, n_bus, np.max),
        theta_mean_error=reduce(theta_err, n_bus, np.mean),
        flow_max_error=reduce(flow_err, n_line, np.max),
        flow_mean_error=reduce(flow_err, n_line, np.mean),
    )


def export_matrix_csv(bundle: SensitivityBundle, name: str, path: Path) -> Path:
    """Dump one coefficient matrix with bus / branch id headers"""
    matrix = getattr(bundle, name)
    rows = bundle.branch_keys if name.startswith("f") else bundle.non_slack
    frame = pd.DataFrame(matrix, index=rows, columns=bundle.bus_ids)
    frame.index.name = "row"
    frame.to_csv(path)
    logger.info(f"✅ Wrote {name} ({matrix.shape[0]}x{matrix.shape[1]}) to {path}")
    return Path(path)
