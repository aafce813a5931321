"""Normal equations, truncated-SVD updates and the Levenberg-Marquardt driver."""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from typing import Generic, Protocol, TypeVar

import numpy as np
from scipy import linalg, sparse

from licalib.errors import ConvergenceError, InvalidArgumentError
from licalib.estimation.residuals import ResidualBlock, block_cost, huber_weights
from licalib.geometry import FloatArray

logger = logging.getLogger(__name__)

StateT = TypeVar("StateT")


@dataclass(slots=True)
class NormalSystem:
    """Gauss-Newton system ``A dx = b`` with ``A = J^T W J`` and ``b = -J^T W r``."""

    information: FloatArray
    rhs: FloatArray
    cost: float
    num_residuals: int
    cost_by_kind: dict[str, float] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.rhs)

    def diagonal_scale(self) -> float:
        diag = np.diag(self.information)
        scale = float(np.mean(diag)) if diag.size else 0.0
        return scale if scale > 0.0 else 1.0

    def __add__(self, other: NormalSystem) -> NormalSystem:
        kinds = dict(self.cost_by_kind)
        for kind, value in other.cost_by_kind.items():
            kinds[kind] = kinds.get(kind, 0.0) + value
        return NormalSystem(
            self.information + other.information,
            self.rhs + other.rhs,
            self.cost + other.cost,
            self.num_residuals + other.num_residuals,
            kinds,
        )


def robust_weights(block: ResidualBlock, huber_delta: float | None) -> FloatArray:
    if block.robust and huber_delta is not None:
        return block.weights * huber_weights(block.residuals, huber_delta)
    return block.weights


def block_jacobian(block: ResidualBlock, size: int) -> sparse.csr_matrix:
    """Sparse ``(rows, size)`` Jacobian; inactive ``-1`` columns are dropped, duplicates summed."""

    if block.jac_values is None or block.jac_cols is None:
        raise InvalidArgumentError(f"{block.kind} block was built without Jacobians")
    rows = np.broadcast_to(np.arange(len(block))[:, None], block.jac_cols.shape)
    keep = block.jac_cols >= 0
    return sparse.coo_matrix(
        (block.jac_values[keep], (rows[keep], block.jac_cols[keep])), shape=(len(block), size)
    ).tocsr()


def assemble_normal_system(
    blocks: Iterable[ResidualBlock], size: int, huber_delta: float | None = None
) -> NormalSystem:
    """Accumulate ``A`` and ``b`` block by block in the given order."""

    information = np.zeros((size, size))
    rhs = np.zeros(size)
    cost = 0.0
    count = 0
    by_kind: dict[str, float] = {}
    for block in blocks:
        block.check_finite()
        if len(block) == 0:
            continue
        jac = block_jacobian(block, size)
        weights = robust_weights(block, huber_delta)
        weighted = sparse.diags(weights) @ jac
        information += (jac.T @ weighted).toarray()
        rhs -= jac.T @ (weights * block.residuals)
        value = block_cost(block, huber_delta)
        cost += value
        by_kind[block.kind] = by_kind.get(block.kind, 0.0) + value
        count += len(block)
    information = 0.5 * (information + information.T)
    return NormalSystem(information, rhs, cost, count, by_kind)


def solve_full(system: NormalSystem, damping: float = 0.0) -> FloatArray:
    """Solve ``(A + mu I) dx = b``; singular systems fall back to the least-squares solution."""

    if system.size == 0:
        return np.zeros(0)
    lhs = system.information + damping * np.eye(system.size)
    try:
        return linalg.solve(lhs, system.rhs, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        solution, *_ = linalg.lstsq(lhs, system.rhs)
        return solution


def tsvd_threshold(singular_values: FloatArray, relative: float, absolute: float | None = None) -> float:
    if absolute is not None:
        return absolute
    return relative * float(singular_values[0]) if singular_values.size else 0.0


@dataclass(slots=True)
class TsvdResult:
    """Truncated solution with the retained rank and the frozen directions (rows)."""

    step: FloatArray
    rank: int
    singular_values: FloatArray
    dropped: FloatArray
    threshold: float
    all_dropped: bool = False


def symmetric_spectrum(matrix: FloatArray) -> tuple[FloatArray, FloatArray]:
    """Eigenvalues in decreasing order (clipped at zero) with matching eigenvector columns."""

    values, vectors = linalg.eigh(0.5 * (matrix + matrix.T))
    order = np.argsort(values)[::-1]
    return np.clip(values[order], 0.0, None), vectors[:, order]


def solve_tsvd(system: NormalSystem, epsilon: float, damping: float = 0.0) -> TsvdResult:
    """``dx = sum_{sigma_i > eps} u_i (u_i^T b) / (sigma_i + mu)`` over the eigenbasis of ``A``."""

    if epsilon <= 0.0:
        raise InvalidArgumentError("information threshold must be positive")
    sigma, vectors = symmetric_spectrum(system.information)
    return _truncated(sigma, vectors, system.rhs, epsilon, damping)


def _truncated(
    sigma: FloatArray, vectors: FloatArray, rhs: FloatArray, epsilon: float, damping: float
) -> TsvdResult:
    keep = sigma > epsilon
    retained = vectors[:, keep]
    step = retained @ ((retained.T @ rhs) / (sigma[keep] + damping))
    dropped = vectors[:, ~keep].T
    all_dropped = not np.any(keep)
    if all_dropped:
        logger.warning("every singular value is below the information threshold %.3g", epsilon)
    return TsvdResult(step, int(np.count_nonzero(keep)), sigma, dropped, epsilon, all_dropped)


def schur_complement(
    information: FloatArray, keep: np.ndarray, prior: float = 0.0
) -> tuple[FloatArray, FloatArray, tuple[FloatArray, bool] | None, np.ndarray]:
    """Reduce ``A`` onto columns ``keep``; returns ``S``, ``A_kr``, the factor of ``A_rr`` and ``rest``."""

    mask = np.zeros(len(information), dtype=bool)
    mask[keep] = True
    rest = np.flatnonzero(~mask)
    a_kk = information[np.ix_(keep, keep)]
    if rest.size == 0:
        return a_kk, np.zeros((len(keep), 0)), None, rest
    a_kr = information[np.ix_(keep, rest)]
    a_rr = information[np.ix_(rest, rest)] + prior * np.eye(rest.size)
    factor = linalg.cho_factor(a_rr)
    reduced = a_kk - a_kr @ linalg.cho_solve(factor, a_kr.T)
    return 0.5 * (reduced + reduced.T), a_kr, factor, rest


@dataclass(slots=True)
class StepInfo:
    """Diagnostics of one observability-aware step."""

    rank: int
    singular_values: FloatArray
    dropped: FloatArray
    threshold: float
    all_dropped: bool = False


def observability_aware_step(
    system: NormalSystem,
    protected: np.ndarray,
    damping: float,
    relative: float,
    absolute: float | None = None,
) -> tuple[FloatArray, StepInfo]:
    """Damped step whose ``protected`` block is truncated in its reduced eigenbasis.

    The other blocks are eliminated by Schur complement, the reduced block is
    solved by truncated SVD and the rest is recovered by back-substitution, so
    ``u^T dx[protected] == 0`` for every dropped direction ``u``.
    """

    protected = np.asarray(protected, dtype=int)
    if protected.size == 0:
        step = solve_full(system, damping)
        return step, StepInfo(system.size, np.zeros(0), np.zeros((0, 0)), 0.0)
    damped = system.information + damping * np.eye(system.size)
    reduced, a_kr, factor, rest = schur_complement(system.information, protected, damping)
    b_k = system.rhs[protected]
    if factor is not None:
        b_r = system.rhs[rest]
        b_k = b_k - a_kr @ linalg.cho_solve(factor, b_r)
    sigma, vectors = symmetric_spectrum(reduced)
    epsilon = tsvd_threshold(sigma, relative, absolute)
    truncated = _truncated(sigma, vectors, b_k, epsilon, damping)
    step = np.zeros(system.size)
    step[protected] = truncated.step
    if factor is not None:
        coupling = damped[np.ix_(rest, protected)] @ truncated.step
        step[rest] = linalg.cho_solve(factor, system.rhs[rest] - coupling)
    info = StepInfo(truncated.rank, sigma, truncated.dropped, epsilon, truncated.all_dropped)
    return step, info


def covariance_diagonal(system: NormalSystem, relative: float = 1e-3) -> FloatArray:
    """Marginal variances from the pseudo-inverse of ``A`` restricted to retained directions."""

    if system.size == 0:
        return np.zeros(0)
    sigma, vectors = symmetric_spectrum(system.information)
    keep = sigma > tsvd_threshold(sigma, relative)
    return np.einsum("ik,k,ik->i", vectors[:, keep], 1.0 / sigma[keep], vectors[:, keep])


# -- Levenberg-Marquardt -------------------------------------------------------------


class LeastSquaresProblem(Protocol[StateT]):
    def linearize(self, state: StateT) -> NormalSystem: ...

    def cost(self, state: StateT) -> float: ...

    def retract(self, state: StateT, step: FloatArray) -> StateT: ...


StepSolver = Callable[[NormalSystem, float], tuple[FloatArray, StepInfo | None]]


@dataclass(slots=True)
class DampingOptions:
    initial_ratio: float = 1e-4
    increase: float = 5.0
    decrease: float = 0.3
    max_ratio: float = 1e8
    cost_tolerance: float = 1e-12


@dataclass
class LmResult(Generic[StateT]):
    state: StateT
    cost: float
    iterations: int
    accepted: int
    damping: float
    converged: bool
    system: NormalSystem | None = None
    step_info: StepInfo | None = None


def damped_full_step(system: NormalSystem, damping: float) -> tuple[FloatArray, StepInfo | None]:
    return solve_full(system, damping), None


def levenberg_marquardt(
    problem: LeastSquaresProblem[StateT],
    state: StateT,
    iterations: int,
    options: DampingOptions | None = None,
    step_solver: StepSolver = damped_full_step,
) -> LmResult[StateT]:
    """Minimize ``problem`` from ``state``; accepted steps never increase the cost."""

    options = options or DampingOptions()
    system = problem.linearize(state)
    cost = system.cost
    scale = system.diagonal_scale()
    damping = options.initial_ratio * scale
    accepted = 0
    info: StepInfo | None = None
    converged = False
    iteration = -1
    for iteration in range(iterations):
        while True:
            step, info = step_solver(system, damping)
            if step.size == 0 or not np.any(step):
                converged = True
                break
            try:
                candidate = problem.retract(state, step)
                new_cost = problem.cost(candidate)
            except InvalidArgumentError as exc:
                logger.debug("rejecting step outside the parameter domain: %s", exc)
                candidate, new_cost = state, np.inf
            logger.debug("lm iteration=%d damping=%.3g cost=%.6g -> %.6g", iteration, damping, cost, new_cost)
            if np.isfinite(new_cost) and new_cost <= cost:
                converged = cost - new_cost <= options.cost_tolerance * max(cost, 1e-300)
                state, cost = candidate, new_cost
                damping *= options.decrease
                accepted += 1
                break
            damping *= options.increase
            if damping > options.max_ratio * scale:
                raise ConvergenceError(
                    f"damping {damping:.3g} exceeded {options.max_ratio:.0e} x mean diagonal without progress"
                )
        if converged:
            break
        if iteration + 1 < iterations:
            system = problem.linearize(state)
            scale = system.diagonal_scale()
    return LmResult(state, cost, iteration + 1, accepted, damping, converged, system, info)
