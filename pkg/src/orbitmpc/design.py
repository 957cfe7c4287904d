"""Offline controller synthesis.

Everything the online controller consumes is produced here: the terminal
cost from the discrete-time Riccati equation (DARE), modal weight designs
that precondition the condensed Hessian, the regularized modal baseline
gains, the setpoint map that folds disturbance estimates into the QP, and
the steady-state observer gain for the delay-augmented plant.

The DARE is solved by fixed-point iteration.  The plant's A matrix is
diagonal and strictly stable, which makes the recursion contractive, and
the diagonal structure keeps every iteration at one dense solve.
"""

from __future__ import annotations

import dataclasses
import math
import warnings

import numpy as np

from .errors import ConfigError, NumericalError
from .model import StateSpace

# Sentinel input weight for modes that cannot influence the output
# (zero singular value); keeps them quiescent without a root-find.
R_HAT_MAX = 1e12

_DARE_TOL = 1e-12
_DARE_MAX_ITER = 10_000
_DARE_RESIDUAL_TOL = 1e-8

_KALMAN_TOL = 1e-10
_KALMAN_MAX_ITER = 200_000


@dataclasses.dataclass(frozen=True, eq=False)
class Weights:
    """Modal and dense weighting matrices for the MPC objective.

    q_hat holds the r modal state weights, r_hat the n_u modal input
    weights; Q = V diag(q_hat) V^T and R_w is the dense input weight.
    """

    q_hat: np.ndarray
    r_hat: np.ndarray
    Q: np.ndarray
    R_w: np.ndarray


@dataclasses.dataclass(frozen=True, eq=False)
class TerminalCost:
    """Stabilizing terminal cost P, plus its modal values when available."""

    P: np.ndarray
    p_hat: np.ndarray | None = None


@dataclasses.dataclass(frozen=True)
class IterationBoundParams:
    epsilon: float
    Delta: float
    kappa: float

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ConfigError("epsilon must be positive")
        if self.Delta < 0.0:
            raise ConfigError("Delta must be non-negative")
        if self.kappa < 1.0:
            raise ConfigError("kappa must be >= 1")


@dataclasses.dataclass(frozen=True, eq=False)
class SetpointMap:
    """Maps a disturbance estimate to steady-state (x, u) setpoints.

    M is the last n_y columns of the pseudoinverse of the steady-state
    coefficient matrix; M_x / M_u are its state / input row blocks.
    """

    M: np.ndarray
    n_u: int
    n_y: int
    rank_deficient: bool = False

    @property
    def M_x(self) -> np.ndarray:
        return self.M[: self.n_u]

    @property
    def M_u(self) -> np.ndarray:
        return self.M[self.n_u :]


@dataclasses.dataclass(frozen=True, eq=False)
class PartitionedGain:
    """Observer gain partitioned as [L_x; L_z1; ...; L_zmu; L_d]."""

    L_x: np.ndarray
    L_z: tuple[np.ndarray, ...]
    L_d: np.ndarray

    @property
    def mu(self) -> int:
        return len(self.L_z)

    @property
    def full(self) -> np.ndarray:
        return np.vstack([self.L_x, *self.L_z, self.L_d])

    @classmethod
    def from_full(cls, L: np.ndarray, n_u: int, n_y: int, mu: int) -> "PartitionedGain":
        expected = (mu + 1) * n_u + n_y
        if L.shape != (expected, n_y):
            raise ConfigError(f"gain shape {L.shape} != {(expected, n_y)}")
        blocks = [L[i * n_u : (i + 1) * n_u] for i in range(mu + 1)]
        return cls(L_x=blocks[0], L_z=tuple(blocks[1:]), L_d=L[(mu + 1) * n_u :])

    def propagation_consistent(self, A: np.ndarray) -> "PartitionedGain":
        """Rebuild L_x and L_z1..L_z(mu-1) from L_zmu via diagonal powers.

        The fast observer update propagates the innovation forward with
        A^(mu-i); this constructor makes that propagation exact.
        """
        mu = self.mu
        if mu == 0:
            return self
        L_zmu = self.L_z[-1]
        L_z = tuple((A ** (mu - i))[:, None] * L_zmu for i in range(1, mu + 1))
        return PartitionedGain(L_x=(A ** mu)[:, None] * L_zmu, L_z=L_z, L_d=self.L_d)

    def consistency_error(self, A: np.ndarray) -> float:
        """Max deviation from the propagation-consistent structure."""
        ref = self.propagation_consistent(A)
        err = np.max(np.abs(self.L_x - ref.L_x)) if self.mu else 0.0
        for got, want in zip(self.L_z, ref.L_z):
            err = max(err, np.max(np.abs(got - want)))
        return float(err)


# ---------------------------------------------------------------------------
# Riccati equations
# ---------------------------------------------------------------------------

def _dare_step(a, b, P, Q, R_w, diagonal: bool) -> np.ndarray:
    if diagonal:
        APA = P * np.outer(a, a)
        APB = P * np.outer(a, b)
        M = P * np.outer(b, b) + R_w
        BPA = APB.T
    else:
        APA = a.T @ P @ a
        APB = a.T @ P @ b
        M = b.T @ P @ b + R_w
        BPA = b.T @ P @ a
    return APA - APB @ np.linalg.solve(M, BPA) + Q


def dare_residual(A, B, P, Q, R_w) -> float:
    """|| f(P) - P || / ||P|| for the DARE fixed-point map f."""
    A = np.asarray(A, dtype=float)
    diagonal = A.ndim == 1
    next_P = _dare_step(A, np.asarray(B, dtype=float), P, Q, R_w, diagonal)
    return float(np.linalg.norm(next_P - P) / max(np.linalg.norm(P), np.finfo(float).tiny))


def solve_dare(A, B, Q, R_w) -> TerminalCost:
    """Fixed-point DARE solve from P_0 = Q.

    A and B may be 1-D (diagonals) or dense.  Iterates until the relative
    change drops below 1e-12 (at most 10,000 iterations), then verifies
    the residual against a 1e-8 relative bound.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R_w = np.asarray(R_w, dtype=float)
    diagonal = A.ndim == 1
    P = Q.copy()
    for _ in range(_DARE_MAX_ITER):
        next_P = _dare_step(A, B, P, Q, R_w, diagonal)
        next_P = 0.5 * (next_P + next_P.T)
        if not np.all(np.isfinite(next_P)):
            raise NumericalError("DARE iteration produced non-finite values")
        change = np.linalg.norm(next_P - P) / max(np.linalg.norm(next_P), np.finfo(float).tiny)
        P = next_P
        if change < _DARE_TOL:
            break
    residual = dare_residual(A, B, P, Q, R_w)
    if residual >= _DARE_RESIDUAL_TOL:
        raise NumericalError(f"DARE residual {residual:.3e} exceeds {_DARE_RESIDUAL_TOL:.1e}")
    return TerminalCost(P=P)


def solve_dare_modal(a: float, b: float, q_hat_i: float, r_hat_i: float) -> float:
    """Closed-form scalar DARE solution for one decoupled mode.

    With xi = r(1 - a^2) - b^2 q the solution is
    p = (-xi + sqrt(xi^2 + 4 b^2 q r)) / (2 b^2).  b == 0 degenerates to
    the Lyapunov limit p = q / (1 - a^2).  The a == 0 and q == 0 branches
    are returned directly so the algebraic identities p = q and p = 0
    hold without rounding.
    """
    if r_hat_i <= 0.0:
        raise ConfigError("modal input weight must be positive")
    if q_hat_i < 0.0:
        raise ConfigError("modal state weight must be non-negative")
    if b == 0.0:
        if abs(a) >= 1.0:
            raise NumericalError("b = 0 with |a| >= 1 has no bounded cost")
        return q_hat_i / (1.0 - a * a)
    if q_hat_i == 0.0:
        return 0.0
    if a == 0.0:
        return float(q_hat_i)
    xi = r_hat_i * (1.0 - a * a) - b * b * q_hat_i
    p = (-xi + math.sqrt(xi * xi + 4.0 * b * b * q_hat_i * r_hat_i)) / (2.0 * b * b)
    return float(max(p, 0.0))


def lqr_gain_modal(a: float, b: float, p_hat_i: float, r_hat_i: float) -> float:
    """Scalar LQR gain k = a b p / (r + b^2 p) for one mode."""
    denom = r_hat_i + b * b * p_hat_i
    if denom <= 0.0:
        raise ConfigError("r + b^2 p must be positive")
    return a * b * p_hat_i / denom


def imc_gain(sigma, lam: float):
    """Regularized pseudo-inverse gain sigma / (sigma^2 + lambda) per mode."""
    sigma = np.asarray(sigma, dtype=float)
    if lam < 0.0:
        raise ConfigError("regularization must be non-negative")
    if lam == 0.0 and np.any(sigma == 0.0):
        raise ConfigError("unregularized zero singular value: need lambda > 0")
    return sigma / (sigma * sigma + lam)


# ---------------------------------------------------------------------------
# Weight designs
# ---------------------------------------------------------------------------

def _dense_weights(V: np.ndarray, diag_modal: np.ndarray, null_value: float) -> np.ndarray:
    """V diag(w) V^T completed with `null_value` on the orthogonal complement."""
    n_u = V.shape[0]
    W = (V * diag_modal) @ V.T
    if V.shape[1] < n_u:
        W = W + null_value * (np.eye(n_u) - V @ V.T)
    return 0.5 * (W + W.T)


def design_weights_saturated(basis, q_min: float, q_max: float) -> Weights:
    """Clamp the natural modal state weights sigma^2 into [q_min, q_max].

    Input weights are identity.  Limiting the spread of the state weights
    is what keeps the condensed Hessian well conditioned on severely
    ill-conditioned response matrices.
    """
    if not (0.0 < q_min <= q_max):
        raise ConfigError("need 0 < q_min <= q_max")
    q_hat = np.clip(basis.S ** 2, q_min, q_max)
    n_u = basis.V.shape[0]
    Q = _dense_weights(basis.V, q_hat, 0.0)
    return Weights(q_hat=q_hat, r_hat=np.ones(n_u), Q=Q, R_w=np.eye(n_u))


def _match_gain(a: float, b: float, q_hat_i: float, target: float, mode: int) -> float:
    """Bisect on the modal input weight until the LQR gain hits `target`."""
    lo, hi = 1e-12, R_HAT_MAX

    def gain(r):
        return lqr_gain_modal(a, b, solve_dare_modal(a, b, q_hat_i, r), r)

    g_lo, g_hi = gain(lo), gain(hi)
    if not (g_hi <= target <= g_lo):
        raise NumericalError(
            f"mode {mode}: IMC gain {target:.6g} not achievable by any input weight "
            f"(achievable range [{g_hi:.3g}, {g_lo:.6g}], supremum a/b = {a / b:.6g})"
        )
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if gain(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-10 * hi:
            break
    return hi  # ties toward the larger (more conservative) weight


def design_weights_imc_matched(basis, a: float, b: float, lam: float) -> Weights:
    """Choose modal input weights so each mode's LQR gain equals the
    regularized-inverse baseline gain sigma/(sigma^2 + lambda).

    State weights are fixed at sigma^2.  Modes with sigma = 0 get the
    R_HAT_MAX sentinel (gain 0).  Raises when a target gain exceeds the
    supremum a/b reachable by the scalar LQR.
    """
    sigma = basis.S
    q_hat = sigma ** 2
    k_imc = imc_gain(sigma, lam)
    r_hat_modes = np.empty(basis.r)
    for i in range(basis.r):
        if sigma[i] == 0.0:
            r_hat_modes[i] = R_HAT_MAX
        else:
            r_hat_modes[i] = _match_gain(a, b, q_hat[i], float(k_imc[i]), i)
    n_u = basis.V.shape[0]
    r_hat = np.concatenate([r_hat_modes, np.full(n_u - basis.r, R_HAT_MAX)])
    Q = _dense_weights(basis.V, q_hat, 0.0)
    R_w = _dense_weights(basis.V, r_hat_modes, R_HAT_MAX)
    return Weights(q_hat=q_hat, r_hat=r_hat, Q=Q, R_w=R_w)


# ---------------------------------------------------------------------------
# Setpoints
# ---------------------------------------------------------------------------

def setpoint_matrix(ss: StateSpace) -> SetpointMap:
    """Solve the steady-state conditions for (x, u) given a disturbance.

    Builds S = [[I - A, -B], [-C, 0]] and keeps the last n_y columns of
    its pseudoinverse: the steady state is then (x, u) = M d for a
    disturbance estimate d, with C x = -d cancelling it at the output.
    Rank deficiency degrades to least-squares semantics and is flagged.
    """
    n_u, n_y = ss.n_u, ss.n_y
    S = np.zeros((n_u + n_y, 2 * n_u))
    S[:n_u, :n_u] = np.diag(1.0 - ss.A)
    S[:n_u, n_u:] = -np.diag(ss.B)
    S[n_u:, :n_u] = -ss.C
    rank = np.linalg.matrix_rank(S)
    deficient = rank < S.shape[0]
    if deficient:
        warnings.warn(
            f"setpoint system has row rank {rank} < {S.shape[0]}: setpoints take "
            "least-squares semantics",
            stacklevel=2,
        )
    M = np.linalg.pinv(S)[:, n_u:]
    return SetpointMap(M=M, n_u=n_u, n_y=n_y, rank_deficient=bool(deficient))


# ---------------------------------------------------------------------------
# Observer gain
# ---------------------------------------------------------------------------

def _riccati_predictor_step(ss: StateSpace, P, sigma_v, sigma_w, sigma_m):
    """One filter-Riccati step on the delay-augmented system.

    The augmented state is [x; z1..zmu; d] where z_i tracks x at delay i
    and d holds the output disturbance (random-walk model).  F has a
    diagonal A block, an identity shift chain, and identity on d, so
    F P F^T reduces to row/column shuffles plus diagonal scaling.
    """
    n_u, n_y, mu = ss.n_u, ss.n_y, ss.mu
    n = (mu + 1) * n_u + n_y
    a = ss.A
    d0 = (mu + 1) * n_u

    def f_rows(Min):
        out = np.empty_like(Min)
        out[:n_u] = a[:, None] * Min[:n_u]
        for i in range(mu):
            out[(i + 1) * n_u : (i + 2) * n_u] = Min[i * n_u : (i + 1) * n_u]
        out[d0:] = Min[d0:]
        return out

    FP = f_rows(P)
    FPFt = f_rows(FP.T).T

    # process noise: actuator states and disturbance drive only
    Qn_diag = np.zeros(n)
    Qn_diag[:n_u] = sigma_w ** 2
    Qn_diag[d0:] = sigma_v ** 2

    zmu = slice(mu * n_u, (mu + 1) * n_u)
    HP = ss.C @ P[zmu] + P[d0:]                      # n_y x n
    FPHt = FP[:, zmu] @ ss.C.T + FP[:, d0:]          # n x n_y
    S_in = HP[:, zmu] @ ss.C.T + HP[:, d0:] + (sigma_m ** 2) * np.eye(n_y)
    S_in = 0.5 * (S_in + S_in.T)
    gain = np.linalg.solve(S_in, FPHt.T).T           # n x n_y 'FPHt S^-1'

    P_next = FPFt - gain @ FPHt.T
    P_next[np.diag_indices(n)] += Qn_diag
    return 0.5 * (P_next + P_next.T), gain


def _error_spectral_radius(ss: StateSpace, gain: PartitionedGain) -> float:
    """Spectral radius of the estimation-error transition F - L H."""
    n_u, n_y, mu = ss.n_u, ss.n_y, ss.mu
    n = (mu + 1) * n_u + n_y
    L = gain.full
    d0 = (mu + 1) * n_u
    zmu = slice(mu * n_u, (mu + 1) * n_u)

    def apply(v_block):
        # (F - L H) V for a block of column vectors
        out = np.empty_like(v_block)
        out[:n_u] = ss.A[:, None] * v_block[:n_u]
        for i in range(mu):
            out[(i + 1) * n_u : (i + 2) * n_u] = v_block[i * n_u : (i + 1) * n_u]
        out[d0:] = v_block[d0:]
        out -= L @ (ss.C @ v_block[zmu] + v_block[d0:])
        return out

    if n <= 600:
        F_cl = apply(np.eye(n))
        return float(np.max(np.abs(np.linalg.eigvals(F_cl))))
    # orthogonal (subspace) iteration, enough to flag instability at sizes
    # where a dense eigensolve would be wasteful
    rng = np.random.default_rng(0)
    V, _ = np.linalg.qr(rng.standard_normal((n, 4)))
    rho = 0.0
    for _ in range(500):
        W = apply(V)
        V, R = np.linalg.qr(W)
        rho = float(np.max(np.abs(np.diag(R))))
        if rho < 1e-300:
            return 0.0
    return rho


def kalman_gain(
    ss: StateSpace,
    sigma_v: float = 1.0,
    sigma_w: float = 1e-4,
    sigma_m: float = 1e-2,
    *,
    propagation_consistent: bool = True,
) -> PartitionedGain:
    """Steady-state predictor gain for the delay-augmented plant.

    Iterates the filter Riccati recursion until the covariance settles
    (relative change < 1e-10), then partitions the gain.  By default the
    z/x blocks are rebuilt from L_zmu so the fast partitioned observer
    update is exact; pass propagation_consistent=False for the raw
    Riccati blocks.  Raises if the error dynamics are not contractive.
    """
    if sigma_m <= 0.0:
        raise ConfigError("measurement noise sigma_m must be positive")
    if sigma_v <= 0.0:
        raise ConfigError("disturbance drive sigma_v must be positive")
    if sigma_w < 0.0:
        raise ConfigError("process noise sigma_w must be non-negative")
    n_u, n_y, mu = ss.n_u, ss.n_y, ss.mu
    n = (mu + 1) * n_u + n_y
    P = np.eye(n)
    gain_mat = None
    for _ in range(_KALMAN_MAX_ITER):
        P_next, gain_mat = _riccati_predictor_step(ss, P, sigma_v, sigma_w, sigma_m)
        if not np.all(np.isfinite(P_next)):
            raise NumericalError("observer Riccati iteration diverged")
        change = np.linalg.norm(P_next - P) / max(np.linalg.norm(P_next), np.finfo(float).tiny)
        P = P_next
        if change < _KALMAN_TOL:
            break
    else:
        raise NumericalError("observer Riccati iteration did not settle")
    gain = PartitionedGain.from_full(gain_mat, n_u, n_y, mu)
    if propagation_consistent:
        gain = gain.propagation_consistent(ss.A)
    rho = _error_spectral_radius(ss, gain)
    if rho >= 1.0:
        raise NumericalError(f"estimation-error spectral radius {rho:.6f} >= 1")
    return gain


# ---------------------------------------------------------------------------
# Conditioning and the iteration budget
# ---------------------------------------------------------------------------

def condition_number(J: np.ndarray) -> float:
    """lambda_max / lambda_min of a symmetric positive-definite matrix."""
    eigs = np.linalg.eigvalsh(0.5 * (J + J.T))
    if eigs[0] <= 0.0:
        raise NumericalError(f"matrix is not positive definite (lambda_min = {eigs[0]:.3e})")
    return float(eigs[-1] / eigs[0])


def iteration_bound(p: IterationBoundParams) -> int:
    """Iteration budget guaranteeing the target accuracy.

    max{0, min{ceil((ln eps - ln Delta)/ln(1 - sqrt(1/kappa))),
               ceil(2 sqrt(Delta/eps) - 2)}}, with the log branch skipped
    at kappa = 1 where the contraction factor degenerates.
    """
    if p.Delta <= p.epsilon:
        return 0
    sqrt_branch = math.ceil(2.0 * math.sqrt(p.Delta / p.epsilon) - 2.0)
    if p.kappa > 1.0:
        log_branch = math.ceil(
            (math.log(p.epsilon) - math.log(p.Delta)) / math.log(1.0 - math.sqrt(1.0 / p.kappa))
        )
        bound = min(log_branch, sqrt_branch)
    else:
        bound = sqrt_branch
    return max(0, int(bound))
