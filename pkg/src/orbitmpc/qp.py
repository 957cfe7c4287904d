"""Condensed QP construction and the constraint-set projections.

States are eliminated from the horizon-N optimal control problem through
the prediction matrices G (input-to-state) and H (initial-state), giving

    min_u 0.5 u^T J u + q^T u    s.t.  u in U_N,

with J = G^T ((I_N (x) Q) (+) P) G + I_N (x) R and q affine in the current
state estimate and the disturbance estimate (the steady-state setpoint
relation is folded into the q maps so no setpoints are computed online).

U_N couples amplitude and slew-rate limits.  For N = 1 each coordinate is
clipped to an interval; for N = 2 each actuator's stage pair is projected
exactly onto a (possibly degenerate) hexagon whose corners depend on the
previously applied input.
"""

from __future__ import annotations

import dataclasses
from functools import cached_property

import numpy as np

from .errors import DimensionError, InfeasibleError, NumericalError
from .model import StateSpace

SUPPORTED_HORIZONS = (1, 2)


@dataclasses.dataclass(frozen=True, eq=False)
class Prediction:
    """Block prediction maps: x_stack = G u_stack + H x0."""

    G: np.ndarray
    H: np.ndarray
    N: int
    n_u: int


@dataclasses.dataclass(frozen=True, eq=False)
class CondensedQP:
    """Hessian, linear-term maps and spectral data of the condensed QP."""

    J: np.ndarray
    q_map_x0: np.ndarray
    q_map_d: np.ndarray
    lambda_min: float
    lambda_max: float
    beta: float
    N: int
    n_u: int

    def linear_term(self, x0: np.ndarray, d_bar: np.ndarray) -> np.ndarray:
        return self.q_map_x0 @ x0 + self.q_map_d @ d_bar


def build_prediction(ss: StateSpace, N: int) -> Prediction:
    """Stack A^i powers into the G and H block maps (diagonal A, B)."""
    if N < 1:
        raise DimensionError(f"horizon must be >= 1, got {N}")
    n_u = ss.n_u
    G = np.zeros(((N + 1) * n_u, N * n_u))
    H = np.zeros(((N + 1) * n_u, n_u))
    idx = np.arange(n_u)
    for i in range(N + 1):
        H[i * n_u + idx, idx] = ss.a_power(i)
        for j in range(i):
            G[i * n_u + idx, j * n_u + idx] = ss.a_power(i - 1 - j) * ss.B
    return Prediction(G=G, H=H, N=N, n_u=n_u)


def _stage_cost_blockdiag(weights, terminal, N: int) -> np.ndarray:
    """(I_N (x) Q) (+) P."""
    n_u = weights.Q.shape[0]
    omega = np.zeros(((N + 1) * n_u, (N + 1) * n_u))
    for i in range(N):
        omega[i * n_u : (i + 1) * n_u, i * n_u : (i + 1) * n_u] = weights.Q
    omega[N * n_u :, N * n_u :] = terminal.P
    return omega


def build_hessian(pred: Prediction, weights, terminal, N: int) -> np.ndarray:
    """J = G^T ((I_N (x) Q) (+) P) G + I_N (x) R, verified positive definite."""
    if N != pred.N:
        raise DimensionError("horizon mismatch between prediction and request")
    omega = _stage_cost_blockdiag(weights, terminal, N)
    J = pred.G.T @ omega @ pred.G + np.kron(np.eye(N), weights.R_w)
    J = 0.5 * (J + J.T)
    try:
        np.linalg.cholesky(J)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("condensed Hessian is not positive definite") from exc
    return J


def build_linear_maps(pred: Prediction, weights, terminal, setpoint_map, N: int):
    """Affine maps from (x0, d_bar) to the QP linear term q.

    q = (G^T Omega H) x0 - (G^T Omega 1_(N+1)(x)I M_x + 1_N(x)R M_u) d_bar,
    i.e. the steady-state setpoints (x, u) = M d_bar are substituted so the
    online update is two matrix-vector products.
    """
    n_u = pred.n_u
    omega = _stage_cost_blockdiag(weights, terminal, N)
    gt_omega = pred.G.T @ omega
    q_map_x0 = gt_omega @ pred.H
    stack_x = np.tile(np.eye(n_u), (N + 1, 1))
    stack_r = np.tile(weights.R_w, (N, 1))
    q_map_d = -(gt_omega @ stack_x @ setpoint_map.M_x + stack_r @ setpoint_map.M_u)
    return q_map_x0, q_map_d


def spectral_bounds(J: np.ndarray):
    """(lambda_min, lambda_max, beta) from a full symmetric eigensolve."""
    eigs = np.linalg.eigvalsh(0.5 * (J + J.T))
    lmin, lmax = float(eigs[0]), float(eigs[-1])
    if lmin <= 0.0:
        raise NumericalError(f"Hessian not positive definite (lambda_min = {lmin:.3e})")
    beta = (np.sqrt(lmax) - np.sqrt(lmin)) / (np.sqrt(lmax) + np.sqrt(lmin))
    return lmin, lmax, float(beta)


def build_condensed(ss: StateSpace, weights, terminal, setpoint_map, N: int) -> CondensedQP:
    """Assemble the full CondensedQP for one horizon."""
    if N not in SUPPORTED_HORIZONS:
        raise DimensionError(f"horizon must be one of {SUPPORTED_HORIZONS}, got {N}")
    pred = build_prediction(ss, N)
    J = build_hessian(pred, weights, terminal, N)
    q_map_x0, q_map_d = build_linear_maps(pred, weights, terminal, setpoint_map, N)
    lmin, lmax, beta = spectral_bounds(J)
    return CondensedQP(
        J=J,
        q_map_x0=q_map_x0,
        q_map_d=q_map_d,
        lambda_min=lmin,
        lambda_max=lmax,
        beta=beta,
        N=N,
        n_u=ss.n_u,
    )


# ---------------------------------------------------------------------------
# Constraint sets and projections
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True, eq=False)
class ConstraintSet:
    """Per-actuator amplitude/slew-rate limits around the last applied input.

    Stage-0 inputs live in [max(-alpha, u_prev - rho), min(alpha,
    u_prev + rho)]; for N = 2 the stage pair is additionally coupled by
    |u1 - u0| <= rho and |u1| <= alpha.  The set is laid out stage-major:
    a horizon-N iterate stacks N blocks of n_u entries.
    """

    alpha: np.ndarray
    rho: np.ndarray
    u_prev: np.ndarray
    N: int

    def __post_init__(self):
        object.__setattr__(self, "alpha", np.atleast_1d(np.asarray(self.alpha, dtype=float)))
        object.__setattr__(self, "rho", np.atleast_1d(np.asarray(self.rho, dtype=float)))
        object.__setattr__(self, "u_prev", np.atleast_1d(np.asarray(self.u_prev, dtype=float)))
        if self.N not in SUPPORTED_HORIZONS:
            raise DimensionError(f"horizon must be one of {SUPPORTED_HORIZONS}")
        if not (self.alpha.shape == self.rho.shape == self.u_prev.shape):
            raise DimensionError("alpha, rho, u_prev must share one shape")

    @property
    def n_u(self) -> int:
        return self.alpha.shape[0]

    @cached_property
    def _bounds(self):
        lo = np.maximum(-self.alpha, self.u_prev - self.rho)
        hi = np.minimum(self.alpha, self.u_prev + self.rho)
        return lo, hi

    def stage0_bounds(self):
        return self._bounds

    def check_feasible(self) -> None:
        if not self._feasible:
            lo, hi = self._bounds
            bad = np.nonzero(lo > hi)[0]
            raise InfeasibleError(
                f"empty stage set for actuator(s) {bad.tolist()}: "
                "|u_prev| exceeds alpha + rho"
            )

    @cached_property
    def _feasible(self) -> bool:
        lo, hi = self._bounds
        return bool(np.all(lo <= hi))

    @cached_property
    def _hexagons(self):
        return _hexagon_geometry(self)

    def project(self, t: np.ndarray) -> np.ndarray:
        """Euclidean projection of a stage-major stacked iterate onto U_N."""
        if t.shape != (self.N * self.n_u,):
            raise DimensionError(f"iterate shape {t.shape} != {(self.N * self.n_u,)}")
        if self.N == 1:
            return project_stage_n1(t, self)
        pairs = t.reshape(2, self.n_u).T
        out = project_stage_n2(pairs, self)
        return out.T.reshape(-1).copy()

    def diameter_sq(self) -> float:
        """Squared Euclidean diameter of U_N (for the iteration-bound Delta)."""
        if self.N == 1:
            lo, hi = self.stage0_bounds()
            return float(np.sum((hi - lo) ** 2))
        geom = self._hexagons
        verts = geom.verts
        diff = verts[:, :, None, :] - verts[:, None, :, :]
        per_act = np.max(np.sum(diff ** 2, axis=-1), axis=(1, 2))
        return float(np.sum(per_act))


def project_stage_n1(t: np.ndarray, cset: ConstraintSet) -> np.ndarray:
    """Component-wise clip to the stage-0 interval."""
    lo, hi = cset.stage0_bounds()
    cset.check_feasible()
    return np.clip(t, lo, hi)


@dataclasses.dataclass(frozen=True, eq=False)
class _HexagonGeometry:
    """Per-actuator stage-polytope data, built once per constraint set."""

    verts: np.ndarray      # (n, 6, 2) ordered vertices (possibly repeated)
    edge_a: np.ndarray     # (n, 6, 2) segment starts
    edge_w: np.ndarray     # (n, 6, 2) segment direction vectors
    edge_ww: np.ndarray    # (n, 6) squared segment lengths
    hp_normals: np.ndarray  # (6, 2) halfplane normals
    hp_offsets: np.ndarray  # (n, 6) halfplane offsets, inside iff t.n <= offset
    atol: np.ndarray       # (n, 1) inside-test tolerance
    row_index: np.ndarray  # arange(n), for the argmin gather


def _hexagon_geometry(cset: ConstraintSet) -> _HexagonGeometry:
    """Vertex/edge/halfplane data of each actuator's stage polytope.

    Candidate vertices are the corners at u0 = lo and u0 = hi plus the two
    band/amplitude breakpoints; invalid candidates are replaced by the
    first corner so every actuator carries exactly six (possibly repeated)
    vertices sorted by angle around their centroid.
    """
    cset.check_feasible()
    alpha, rho = cset.alpha, cset.rho
    lo, hi = cset.stage0_bounds()

    def y_lo(x):
        return np.maximum(-alpha, x - rho)

    def y_hi(x):
        return np.minimum(alpha, x + rho)

    n = cset.n_u
    cand = np.empty((n, 6, 2))
    valid = np.ones((n, 6), dtype=bool)
    cand[:, 0] = np.stack([lo, y_lo(lo)], axis=1)
    cand[:, 1] = np.stack([lo, y_hi(lo)], axis=1)
    cand[:, 2] = np.stack([hi, y_lo(hi)], axis=1)
    cand[:, 3] = np.stack([hi, y_hi(hi)], axis=1)
    bp_up = alpha - rho
    bp_dn = rho - alpha
    cand[:, 4] = np.stack([bp_up, alpha], axis=1)
    cand[:, 5] = np.stack([bp_dn, -alpha], axis=1)
    valid[:, 4] = (lo <= bp_up) & (bp_up <= hi)
    valid[:, 5] = (lo <= bp_dn) & (bp_dn <= hi)
    cand = np.where(valid[:, :, None], cand, cand[:, :1])

    centroid = cand.mean(axis=1, keepdims=True)
    angles = np.arctan2(cand[:, :, 1] - centroid[:, :, 1], cand[:, :, 0] - centroid[:, :, 0])
    order = np.argsort(angles, axis=1, kind="stable")
    verts = np.take_along_axis(cand, order[:, :, None], axis=1)

    edge_a = verts
    edge_w = np.roll(verts, -1, axis=1) - verts
    edge_ww = np.einsum("nkd,nkd->nk", edge_w, edge_w)
    # x >= lo, x <= hi, y <= alpha, y >= -alpha, y - x <= rho, x - y <= rho
    hp_normals = np.array([
        [-1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0], [-1.0, 1.0], [1.0, -1.0],
    ])
    hp_offsets = np.stack([-lo, hi, alpha, alpha, rho, rho], axis=1)
    atol = (1e-12 * (1.0 + alpha + rho))[:, None]
    return _HexagonGeometry(
        verts=verts,
        edge_a=edge_a,
        edge_w=edge_w,
        edge_ww=np.where(edge_ww > 0.0, edge_ww, 1.0),
        hp_normals=hp_normals,
        hp_offsets=hp_offsets,
        atol=atol,
        row_index=np.arange(n),
    )


def project_stage_n2(t_pairs: np.ndarray, cset: ConstraintSet) -> np.ndarray:
    """Exact per-actuator projection of (u0, u1) pairs onto the hexagon.

    Interior points (within a 1e-12-scale tolerance, which also makes the
    projection exactly idempotent) pass through unchanged; boundary
    projections take the nearest point over the six edge segments, ties
    resolved by the lowest edge index.
    """
    if t_pairs.shape != (cset.n_u, 2):
        raise DimensionError(f"expected {(cset.n_u, 2)} stage pairs, got {t_pairs.shape}")
    geom = cset._hexagons
    inside = np.all(t_pairs @ geom.hp_normals.T <= geom.hp_offsets + geom.atol, axis=1)
    tp = t_pairs[:, None, :] - geom.edge_a
    frac = np.einsum("nkd,nkd->nk", tp, geom.edge_w) / geom.edge_ww
    np.clip(frac, 0.0, 1.0, out=frac)
    offset = frac[:, :, None] * geom.edge_w - tp
    d2 = np.einsum("nkd,nkd->nk", offset, offset)
    best = np.argmin(d2, axis=1)                      # first minimum = lowest edge index
    proj = geom.edge_a[geom.row_index, best] + frac[geom.row_index, best, None] * geom.edge_w[geom.row_index, best]
    return np.where(inside[:, None], t_pairs, proj)


def update_constraint_set(cset: ConstraintSet, u_applied: np.ndarray) -> ConstraintSet:
    """New set centred on the applied input (must respect amplitude limits)."""
    u_applied = np.asarray(u_applied, dtype=float)
    if u_applied.shape != (cset.n_u,):
        raise DimensionError(f"applied input shape {u_applied.shape} != {(cset.n_u,)}")
    excess = np.abs(u_applied) - cset.alpha
    if np.any(excess > 1e-9):
        worst = int(np.argmax(excess))
        raise InfeasibleError(
            f"applied input {u_applied[worst]:.6g} outside amplitude limit "
            f"{cset.alpha[worst]:.6g} on actuator {worst}"
        )
    return ConstraintSet(alpha=cset.alpha, rho=cset.rho, u_prev=u_applied, N=cset.N)


def default_delta(lambda_max: float, cset: ConstraintSet) -> float:
    """Documented helper default Delta = lambda_max * D^2 / 2 with D the
    Euclidean diameter of U_N."""
    return 0.5 * lambda_max * cset.diameter_sq()
