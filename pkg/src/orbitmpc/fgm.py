"""Fast gradient method with a fixed iteration budget.

The real-time solve runs exactly I_max iterations of

    t   = (I - J / lambda_max) v - q / lambda_max
    p+  = proj_U(t)
    v+  = (1 + beta) p+ - beta p

warm-started from the previous solution (projected onto the current set)
and returns the final projected iterate.

The gradient step is the dominant cost and is the one parallelized
operation: rows of the scaled Hessian are sliced across a persistent
worker pool.  Per-row arithmetic follows a frozen accumulation order
(products summed in 4-wide groups left to right, group sums accumulated
left to right), and every array operation involved treats rows
independently, so the parallel result is bit-identical to the serial
reference for any worker count.
"""

from __future__ import annotations

import atexit
import dataclasses
import threading
import time

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError
from .qp import CondensedQP, ConstraintSet

DEFAULT_I_MAX = 20
CONVERGENCE_CAP = 100_000
ALIGNMENT_ROWS = 4

SOLVE_STAGES = ("observer", "q_update", "set_update", "gradient", "projection", "momentum")


# ---------------------------------------------------------------------------
# Row slicing
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class WorkerPlan:
    """Disjoint row slices covering a matrix, one slice per worker."""

    n_workers: int
    row_slices: tuple[tuple[int, int], ...]

    def __post_init__(self):
        pos = 0
        for start, count in self.row_slices:
            if start != pos or count < 0:
                raise DimensionError("row slices must be contiguous and non-negative")
            pos = start + count

    @property
    def rows(self) -> int:
        start, count = self.row_slices[-1]
        return start + count


def make_worker_plan(rows: int, n_workers: int, alignment_rows: int = ALIGNMENT_ROWS) -> WorkerPlan:
    """Near-equal slices whose lengths are multiples of the alignment unit.

    Each slice takes ceil(remaining / workers_left) rounded up to the
    alignment; the last slice absorbs whatever remains.
    """
    if rows < 1 or n_workers < 1 or alignment_rows < 1:
        raise ConfigError("rows, n_workers and alignment_rows must all be >= 1")
    slices = []
    start, remaining = 0, rows
    for w in range(n_workers):
        left = n_workers - w
        if left == 1:
            size = remaining
        else:
            per = -(-remaining // left)            # ceil divide
            size = min(remaining, -(-per // alignment_rows) * alignment_rows)
        slices.append((start, size))
        start += size
        remaining -= size
    return WorkerPlan(n_workers=n_workers, row_slices=tuple(slices))


# ---------------------------------------------------------------------------
# Frozen-order gradient engine
# ---------------------------------------------------------------------------

class _FrozenMatvec:
    """Row-sliceable matrix-vector product with a pinned reduction order.

    Columns are zero-padded to a multiple of four.  For each row, the
    elementwise products are reduced as ``((p0 + p1) + p2) + p3`` within
    each 4-group, then group sums are accumulated left to right (a
    cumulative sum).  No step mixes rows, so any row subset reproduces
    the full computation bit for bit.

    Scratch buffers are preallocated per engine; workers write disjoint
    row slices of them, and one engine never serves two concurrent
    solves (the solve entry point is not reentrant).
    """

    GROUP = 4

    def __init__(self, m: np.ndarray):
        rows, cols = m.shape
        pad = (-cols) % self.GROUP
        self._m = np.ascontiguousarray(np.pad(m, ((0, 0), (0, pad))))
        self.rows = rows
        self.cols = cols
        self._pad = pad
        groups = self._m.shape[1] // self.GROUP
        self._prod = np.empty_like(self._m)
        self._p3 = self._prod.reshape(rows, groups, self.GROUP)
        self._gsum = np.empty((rows, groups))
        self._cum = np.empty((rows, groups))
        self._vbuf = np.empty(self._m.shape[1])

    def pad_vector(self, v: np.ndarray) -> np.ndarray:
        self._vbuf[: v.shape[0]] = v
        self._vbuf[v.shape[0] :] = 0.0
        return self._vbuf

    def apply_rows(self, v_padded: np.ndarray, out: np.ndarray, start: int, stop: int) -> None:
        if stop <= start:
            return
        rows = slice(start, stop)
        prod, p3 = self._prod[rows], self._p3[rows]
        gsum, cum = self._gsum[rows], self._cum[rows]
        np.multiply(self._m[rows], v_padded, out=prod)
        np.add(p3[:, :, 0], p3[:, :, 1], out=gsum)
        np.add(gsum, p3[:, :, 2], out=gsum)
        np.add(gsum, p3[:, :, 3], out=gsum)
        np.cumsum(gsum, axis=1, out=cum)
        out[start:stop] = cum[:, -1]

    def apply(self, v_padded: np.ndarray, out: np.ndarray) -> None:
        self.apply_rows(v_padded, out, 0, self.rows)


def _gradient_engine(qp: CondensedQP) -> _FrozenMatvec:
    """Cached (I - J / lambda_max) engine attached to the QP instance."""
    engine = qp.__dict__.get("_fgm_engine")
    if engine is None:
        w = -(qp.J / qp.lambda_max)
        w[np.diag_indices_from(w)] += 1.0
        engine = _FrozenMatvec(w)
        qp.__dict__["_fgm_engine"] = engine
    return engine


# ---------------------------------------------------------------------------
# Worker pool
# ---------------------------------------------------------------------------

class WorkerPool:
    """Persistent manager-worker thread pool with barrier handoff.

    A dispatch barrier releases the workers onto the current task and a
    gather barrier blocks the manager until every worker is done; no
    worker output is visible before the gather completes.
    """

    def __init__(self, n_workers: int):
        self.n_workers = n_workers
        self._dispatch = threading.Barrier(n_workers + 1)
        self._gather = threading.Barrier(n_workers + 1)
        self._task = None
        self._errors: list[BaseException | None] = [None] * n_workers
        self._closed = False
        self._threads = [
            threading.Thread(target=self._worker, args=(i,), daemon=True, name=f"fgm-worker-{i}")
            for i in range(n_workers)
        ]
        for t in self._threads:
            t.start()

    def _worker(self, index: int) -> None:
        while True:
            self._dispatch.wait()
            if self._closed:
                return
            try:
                self._task(index)
            except BaseException as exc:  # propagated to the manager
                self._errors[index] = exc
            self._gather.wait()

    def run(self, task) -> None:
        if self._closed:
            raise NumericalError("worker pool is closed")
        self._errors = [None] * self.n_workers
        self._task = task
        self._dispatch.wait()
        self._gather.wait()
        for exc in self._errors:
            if exc is not None:
                raise NumericalError(f"worker failed: {exc!r}") from exc

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._dispatch.wait()
        for t in self._threads:
            t.join(timeout=5.0)


_pools: dict[int, WorkerPool] = {}
_pools_lock = threading.Lock()


def get_pool(n_workers: int) -> WorkerPool:
    """Process-wide pool per worker count; workers persist across solves."""
    with _pools_lock:
        pool = _pools.get(n_workers)
        if pool is None:
            pool = WorkerPool(n_workers)
            _pools[n_workers] = pool
        return pool


def shutdown_pools() -> None:
    with _pools_lock:
        for pool in _pools.values():
            pool.close()
        _pools.clear()


atexit.register(shutdown_pools)


# ---------------------------------------------------------------------------
# Gradient step
# ---------------------------------------------------------------------------

def _check_solve_inputs(qp: CondensedQP, v: np.ndarray) -> None:
    n = qp.N * qp.n_u
    if v.shape != (n,):
        raise DimensionError(f"iterate shape {v.shape} != {(n,)}")


def gradient_step(qp: CondensedQP, v: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Serial reference: t = (I - J/lambda_max) v - q/lambda_max."""
    _check_solve_inputs(qp, v)
    engine = _gradient_engine(qp)
    out = np.empty(engine.rows)
    engine.apply(engine.pad_vector(v), out)
    out -= q / qp.lambda_max
    return out


def gradient_step_parallel(qp: CondensedQP, v: np.ndarray, q: np.ndarray, plan: WorkerPlan) -> np.ndarray:
    """Row-sliced gradient step; bit-identical to the serial reference."""
    _check_solve_inputs(qp, v)
    engine = _gradient_engine(qp)
    if plan.rows != engine.rows:
        raise DimensionError(f"plan covers {plan.rows} rows, matrix has {engine.rows}")
    out = np.empty(engine.rows)
    v_padded = engine.pad_vector(v)
    if plan.n_workers == 1:
        engine.apply(v_padded, out)
    else:
        pool = get_pool(plan.n_workers)

        def task(index: int) -> None:
            start, count = plan.row_slices[index]
            engine.apply_rows(v_padded, out, start, start + count)

        pool.run(task)
    out -= q / qp.lambda_max
    return out


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def _prepare(qp: CondensedQP, q: np.ndarray, cset: ConstraintSet, warm: np.ndarray):
    q = np.asarray(q, dtype=float)
    warm = np.asarray(warm, dtype=float)
    n = qp.N * qp.n_u
    if q.shape != (n,):
        raise DimensionError(f"linear term shape {q.shape} != {(n,)}")
    if cset.N != qp.N or cset.n_u != qp.n_u:
        raise DimensionError("constraint set does not match the QP dimensions")
    _check_solve_inputs(qp, warm)
    return q, cset.project(warm)


def solve(
    qp: CondensedQP,
    q: np.ndarray,
    cset: ConstraintSet,
    warm: np.ndarray,
    i_max: int = DEFAULT_I_MAX,
    n_workers: int = 1,
    record: list | None = None,
    timers: dict | None = None,
) -> np.ndarray:
    """Run exactly i_max fast-gradient iterations and return the final
    projected iterate.

    `record`, when given, collects every projected iterate.  `timers`,
    when given, accumulates per-stage nanoseconds under the keys
    'gradient', 'projection' and 'momentum' (used by the benchmark).
    """
    q, p = _prepare(qp, q, cset, warm)
    engine = _gradient_engine(qp)
    plan = make_worker_plan(engine.rows, n_workers) if n_workers > 1 else None
    pool = get_pool(n_workers) if n_workers > 1 else None
    beta = qp.beta
    q_scaled = q / qp.lambda_max
    v = p.copy()
    t = np.empty(engine.rows)

    if plan is not None:
        slices = plan.row_slices

        def task(index: int) -> None:
            start, count = slices[index]
            engine.apply_rows(v_padded, t, start, start + count)

    for i in range(i_max):
        tic = time.perf_counter_ns() if timers is not None else 0
        v_padded = engine.pad_vector(v)
        if pool is None:
            engine.apply(v_padded, t)
        else:
            pool.run(task)
        t -= q_scaled
        if not np.all(np.isfinite(t)):
            raise NumericalError(f"non-finite iterate at iteration {i}")
        if timers is not None:
            now = time.perf_counter_ns()
            timers["gradient"] = timers.get("gradient", 0) + (now - tic)
            tic = now
        p_new = cset.project(t)
        if timers is not None:
            now = time.perf_counter_ns()
            timers["projection"] = timers.get("projection", 0) + (now - tic)
            tic = now
        v = (1.0 + beta) * p_new - beta * p
        p = p_new
        if timers is not None:
            now = time.perf_counter_ns()
            timers["momentum"] = timers.get("momentum", 0) + (now - tic)
        if record is not None:
            record.append(p.copy())
    return p


@dataclasses.dataclass(frozen=True)
class ConvergenceResult:
    iterations: int
    capped: bool


def converged_iterations(
    qp: CondensedQP,
    q: np.ndarray,
    cset: ConstraintSet,
    warm: np.ndarray,
    epsilon: float,
    cap: int = CONVERGENCE_CAP,
) -> ConvergenceResult:
    """Iterations until both ||p+ - p||_inf < eps and < eps ||p||_inf.

    Benchmark-only diagnostic; the real-time path always runs the fixed
    budget.  An exactly stationary iterate counts as converged even when
    ||p||_inf is zero.
    """
    if epsilon <= 0.0:
        raise ConfigError("epsilon must be positive")
    q, p = _prepare(qp, q, cset, warm)
    engine = _gradient_engine(qp)
    beta = qp.beta
    q_scaled = q / qp.lambda_max
    v = p.copy()
    t = np.empty(engine.rows)
    for i in range(1, cap + 1):
        engine.apply(engine.pad_vector(v), t)
        t -= q_scaled
        if not np.all(np.isfinite(t)):
            raise NumericalError(f"non-finite iterate at iteration {i}")
        p_new = cset.project(t)
        diff = float(np.max(np.abs(p_new - p)))
        scale = float(np.max(np.abs(p)))
        converged = diff < epsilon and (diff < epsilon * scale or diff == 0.0)
        v = (1.0 + beta) * p_new - beta * p
        p = p_new
        if converged:
            return ConvergenceResult(iterations=i, capped=False)
    return ConvergenceResult(iterations=cap, capped=True)
