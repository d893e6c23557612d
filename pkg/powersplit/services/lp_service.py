"""
LP Service: dense linear programs and a bounded-variable primal simplex.

Problems are stated as

    minimize    c @ x
    subject to  A_eq @ x == b_eq
                A_ub @ x <= b_ub
                lower <= x <= upper

and solved by a two-phase revised simplex that treats variable bounds
natively: nonbasic variables sit at either bound and the ratio test
includes bound flips of the entering variable. The constraint matrix is
kept in compressed sparse column form; the basis is held as a sparse LU
factorization followed by a file of product-form eta updates and is
refactored every REFACTOR_EVERY pivots.

Features:
- Dantzig pricing over the nonbasic columns with a permanent fallback to
  Bland's rule on long degenerate runs, or pure Bland pricing
- Lowest-index tie-breaking everywhere, so solves are bit-reproducible
- Optional starting basis (and a second one to fall back on); a primal
  infeasible start is repaired through a single artificial column
  instead of a full phase 1
- The optimal basis is returned for warm-starting related problems
- Residual report for any candidate point
- CPLEX LP text dump for cross-checking with external solvers
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
from scipy import sparse
from scipy.sparse.linalg import splu

from services.errors import ConfigError

logger = structlog.get_logger(__name__)

PIVOT_TOL = 1e-9
REFACTOR_EVERY = 50
DEGENERATE_SWITCH = 50


class LpStatus(Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITERATION_LIMIT = "IterationLimit"


def _as_matrix(a, n: int, name: str) -> np.ndarray:
    if a is None:
        return np.zeros((0, n))
    a = np.asarray(a, dtype=float)
    if a.ndim == 1 and a.size == 0:
        return a.reshape(0, n)
    if a.ndim != 2 or a.shape[1] != n:
        raise ConfigError(f"{name} must have shape (rows, {n})", shape=a.shape)
    return a


def _as_vector(v, size: int, name: str, fill: float = 0.0) -> np.ndarray:
    if v is None:
        return np.full(size, fill)
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != size:
        raise ConfigError(f"{name} must have {size} entries", received=int(v.size))
    return v


@dataclass
class LpProblem:
    """Dense LP in ``min c@x`` form with equality, inequality and bound constraints"""
    c: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_ub: Optional[np.ndarray] = None
    b_ub: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    var_names: Optional[List[str]] = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.A_eq = _as_matrix(self.A_eq, n, 'A_eq')
        self.b_eq = _as_vector(self.b_eq, self.A_eq.shape[0], 'b_eq')
        self.A_ub = _as_matrix(self.A_ub, n, 'A_ub')
        self.b_ub = _as_vector(self.b_ub, self.A_ub.shape[0], 'b_ub')
        self.lower = _as_vector(self.lower, n, 'lower', 0.0)
        self.upper = _as_vector(self.upper, n, 'upper', math.inf)

        for name in ('c', 'A_eq', 'b_eq', 'A_ub', 'b_ub'):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ConfigError(f"LP {name} contains non-finite coefficients")
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise ConfigError("LP bounds contain NaN")
        bad = np.flatnonzero(self.lower > self.upper)
        if bad.size:
            raise ConfigError("LP lower bound exceeds upper bound",
                              variable=int(bad[0]), count=int(bad.size))
        if self.var_names is not None and len(self.var_names) != n:
            raise ConfigError("var_names must name every variable",
                              n_vars=n, n_names=len(self.var_names))

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_ub(self) -> int:
        return self.A_ub.shape[0]

    def names(self) -> List[str]:
        return list(self.var_names) if self.var_names else [f"x{j}" for j in range(self.n_vars)]


@dataclass
class LpSolution:
    """Solver outcome.

    ``start`` tells which starting point phase 2 came from: ``'initial'`` or
    ``'fallback'`` for the supplied bases, ``'phase1'`` for the artificial
    basis. ``basis`` lists the optimal basis in problem-space columns.
    """
    x: np.ndarray
    objective: float
    status: LpStatus
    iterations: int
    phase1_iterations: int = 0
    start: str = 'phase1'
    basis: Optional[List[int]] = None
    message: str = ''

    @property
    def is_optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL

    @property
    def crashed(self) -> bool:
        return self.start != 'phase1'


@dataclass
class FeasibilityReport:
    """Largest violation per constraint class (0 when satisfied)"""
    equality: float
    inequality: float
    lower: float
    upper: float

    @property
    def max_violation(self) -> float:
        return max(self.equality, self.inequality, self.lower, self.upper)

    def is_feasible(self, tol: float = 1e-7) -> bool:
        return self.max_violation <= tol

    def to_dict(self) -> Dict[str, float]:
        return {'equality': self.equality, 'inequality': self.inequality,
                'lower': self.lower, 'upper': self.upper}


def check_feasible(problem: LpProblem, x, tol: float = 1e-7) -> FeasibilityReport:
    """Residuals of ``x`` against every constraint class of ``problem``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != problem.n_vars:
        raise ConfigError("Point dimension does not match problem",
                          n_vars=problem.n_vars, received=int(x.size))

    def _max(v):
        return float(np.max(v)) if v.size else 0.0

    eq = _max(np.abs(problem.A_eq @ x - problem.b_eq))
    ub = _max(np.maximum(problem.A_ub @ x - problem.b_ub, 0.0))
    lo = _max(np.maximum(problem.lower - x, 0.0))
    hi = _max(np.maximum(x - problem.upper, 0.0))
    report = FeasibilityReport(equality=eq, inequality=ub, lower=lo, upper=hi)
    if not report.is_feasible(tol):
        logger.debug('lp_point_infeasible', tol=tol, **report.to_dict())
    return report


@dataclass
class _StandardForm:
    """``A @ y == b, 0 <= y <= upper`` with ``x = offset + T y``"""
    A: sparse.csc_matrix
    b: np.ndarray
    cost: np.ndarray
    upper: np.ndarray
    offset: np.ndarray
    source: np.ndarray          # original variable of each structural column
    sign: np.ndarray            # +1 shifted, -1 mirrored / negative part
    primary: np.ndarray         # first structural column of each original variable
    n_struct: int
    constant: float = 0.0

    @classmethod
    def build(cls, problem: LpProblem) -> '_StandardForm':
        source, sign, upper = [], [], []
        n = problem.n_vars
        offset = np.zeros(n)
        primary = np.empty(n, dtype=int)
        for j in range(n):
            lo, hi = problem.lower[j], problem.upper[j]
            primary[j] = len(source)
            if np.isfinite(lo):
                offset[j] = lo
                source.append(j); sign.append(1.0); upper.append(hi - lo)
            elif np.isfinite(hi):
                offset[j] = hi
                source.append(j); sign.append(-1.0); upper.append(math.inf)
            else:
                source.append(j); sign.append(1.0); upper.append(math.inf)
                source.append(j); sign.append(-1.0); upper.append(math.inf)

        source = np.array(source, dtype=int)
        sign = np.array(sign)
        n_struct = source.size
        m_eq, m_ub = problem.n_eq, problem.n_ub
        m = m_eq + m_ub

        rows = sparse.csc_matrix(np.vstack([problem.A_eq, problem.A_ub]))
        A = (rows[:, source] @ sparse.diags(sign)).tocsc()
        if m_ub:
            slacks = sparse.csc_matrix((np.ones(m_ub), (np.arange(m_eq, m), np.arange(m_ub))),
                                       shape=(m, m_ub))
            A = sparse.hstack([A, slacks], format='csc')
        A.sum_duplicates()
        b = np.concatenate([problem.b_eq - problem.A_eq @ offset,
                            problem.b_ub - problem.A_ub @ offset])
        cost = np.concatenate([problem.c[source] * sign, np.zeros(m_ub)])
        upper = np.concatenate([np.array(upper, dtype=float), np.full(m_ub, math.inf)])
        return cls(A=A, b=b, cost=cost, upper=upper, offset=offset, source=source,
                   sign=sign, primary=primary, n_struct=n_struct,
                   constant=float(problem.c @ offset))

    @property
    def m(self) -> int:
        return self.A.shape[0]

    def recover(self, y: np.ndarray) -> np.ndarray:
        x = self.offset.copy()
        np.add.at(x, self.source, self.sign * y[:self.n_struct])
        return x

    def column_of(self, index: int, n_vars: int) -> int:
        """Standard-form column of a problem-space index (variables, then ub slacks)."""
        if index < n_vars:
            return int(self.primary[index])
        return self.n_struct + (index - n_vars)

    def index_of(self, column: int, n_vars: int) -> Optional[int]:
        """Problem-space index of a standard-form column; None for artificials."""
        if column < self.n_struct:
            return int(self.source[column])
        if column < self.A.shape[1]:
            return n_vars + (column - self.n_struct)
        return None


class _BasisFactor:
    """Sparse LU of the basis matrix followed by product-form eta updates.

    After k pivots ``B_k = B_0 E_1 ... E_k`` where ``E_i`` is the identity
    with column ``r_i`` replaced by the entering column in the basis of the
    time, so both solves run through the LU and then the etas.
    """

    def __init__(self, B: sparse.csc_matrix):
        self.m = B.shape[0]
        self.etas: List[Tuple[int, np.ndarray]] = []
        self.lu = None
        if self.m:
            try:
                self.lu = splu(B, permc_spec='COLAMD')
            except RuntimeError as exc:
                raise np.linalg.LinAlgError(str(exc)) from None

    def ftran(self, a: np.ndarray) -> np.ndarray:
        """``x`` with ``B x = a``"""
        if not self.m:
            return np.zeros(0)
        x = self.lu.solve(np.asarray(a, dtype=float))
        for row, alpha in self.etas:
            pivot = x[row] / alpha[row]
            x -= pivot * alpha
            x[row] = pivot
        return x

    def btran(self, c: np.ndarray) -> np.ndarray:
        """``y`` with ``B.T y = c``"""
        if not self.m:
            return np.zeros(0)
        y = np.array(c, dtype=float)
        for row, alpha in reversed(self.etas):
            y[row] = (y[row] - (y @ alpha - y[row] * alpha[row])) / alpha[row]
        return self.lu.solve(y, trans='T')

    def update(self, row: int, alpha: np.ndarray):
        self.etas.append((row, alpha.copy()))


class _BoundedSimplex:
    """Revised simplex state over a standard-form problem"""

    def __init__(self, A: sparse.csc_matrix, b: np.ndarray, upper: np.ndarray,
                 basis: np.ndarray, tol: float, pricing: str, at_upper: Sequence[int] = ()):
        self.A = A.tocsc()
        self.AT = self.A.T.tocsr()
        self.b = b
        self.upper = upper.copy()
        self.m, self.n = A.shape
        self.basis = np.asarray(basis, dtype=int).copy()
        self.is_basic = np.zeros(self.n, dtype=bool)
        self.is_basic[self.basis] = True
        self.at_upper = np.zeros(self.n, dtype=bool)
        self.at_upper[np.asarray(at_upper, dtype=int)] = True
        self.enterable = np.ones(self.n, dtype=bool)
        self.tol = tol
        self.bland = pricing == 'bland'
        self.iterations = 0
        self._since_refactor = 0
        self.refactor()

    def column(self, j: int) -> np.ndarray:
        a = np.zeros(self.m)
        start, end = self.A.indptr[j], self.A.indptr[j + 1]
        a[self.A.indices[start:end]] = self.A.data[start:end]
        return a

    def nonbasic_values(self) -> np.ndarray:
        values = np.zeros(self.n)
        mask = self.at_upper & ~self.is_basic
        values[mask] = self.upper[mask]
        return values

    def refactor(self):
        self.factor = _BasisFactor(self.A[:, self.basis])
        self.x_B = self.factor.ftran(self.b - self.A @ self.nonbasic_values())
        self._since_refactor = 0

    def values(self) -> np.ndarray:
        y = self.nonbasic_values()
        y[self.basis] = self.x_B
        return y

    def _pivot_col(self, cost: np.ndarray) -> int:
        duals = self.factor.btran(cost[self.basis])
        d = cost - self.AT @ duals
        free = ~self.is_basic & self.enterable
        increase = free & ~self.at_upper & (d < -self.tol) & (self.upper > 0)
        decrease = free & self.at_upper & (d > self.tol)
        candidates = increase | decrease
        if not candidates.any():
            return -1
        if self.bland:
            return int(np.flatnonzero(candidates)[0])
        score = np.where(candidates, np.abs(d), -1.0)
        return int(np.argmax(score))

    def _pivot_row(self, delta: np.ndarray, limit: float):
        """Ratio test. Returns (row or -1 for a bound flip, step length)."""
        if self.m == 0:
            return -1, limit
        ub = self.upper[self.basis]
        ratios = np.full(self.m, math.inf)
        dec = delta > PIVOT_TOL
        inc = delta < -PIVOT_TOL
        ratios[dec] = np.maximum(self.x_B[dec], 0.0) / delta[dec]
        ratios[inc] = np.maximum(ub[inc] - self.x_B[inc], 0.0) / -delta[inc]
        best = float(ratios.min())
        if not best < limit:
            return -1, limit
        ties = np.flatnonzero(ratios <= best + 1e-12 * max(1.0, best))
        row = int(ties[np.argmin(self.basis[ties])])
        return row, float(ratios[row])

    def _apply_pivot(self, row: int, col: int, alpha: np.ndarray):
        self.factor.update(row, alpha)
        leaving = self.basis[row]
        self.is_basic[leaving] = False
        self.is_basic[col] = True
        self.basis[row] = col
        self._since_refactor += 1

    def run(self, cost: np.ndarray, max_iter: int) -> LpStatus:
        degenerate_run = 0
        while True:
            if self.iterations >= max_iter:
                return LpStatus.ITERATION_LIMIT
            if self._since_refactor >= REFACTOR_EVERY:
                self.refactor()

            col = self._pivot_col(cost)
            if col < 0:
                return LpStatus.OPTIMAL

            direction = -1.0 if self.at_upper[col] else 1.0
            alpha = self.factor.ftran(self.column(col))
            delta = direction * alpha
            row, theta = self._pivot_row(delta, self.upper[col])
            if not math.isfinite(theta):
                return LpStatus.UNBOUNDED

            self.x_B -= theta * delta
            if row < 0:
                self.at_upper[col] = not self.at_upper[col]
            else:
                leaving = self.basis[row]
                self.at_upper[leaving] = delta[row] < 0
                entering_value = theta if direction > 0 else self.upper[col] - theta
                self._apply_pivot(row, col, alpha)
                self.at_upper[col] = False
                self.x_B[row] = entering_value

            self.iterations += 1
            degenerate_run = degenerate_run + 1 if theta <= self.tol else 0
            if not self.bland and degenerate_run > DEGENERATE_SWITCH:
                self.bland = True
                logger.debug('lp_switch_to_bland', iterations=self.iterations)


class SimplexSolver:
    """Two-phase bounded-variable primal simplex"""

    def __init__(self, tol: float = 1e-7, max_iter: int = 50000, pricing: str = 'dantzig'):
        if pricing not in ('dantzig', 'bland'):
            raise ConfigError(f"Unknown pricing rule '{pricing}'", pricing=pricing)
        if tol <= 0 or max_iter < 1:
            raise ConfigError("Solver tolerance and iteration limit must be positive",
                              tol=tol, max_iter=max_iter)
        self.tol = tol
        self.max_iter = max_iter
        self.pricing = pricing

    def solve(self, problem: LpProblem, initial_basis: Optional[Sequence[int]] = None,
              fallback_basis: Optional[Sequence[int]] = None) -> LpSolution:
        std = _StandardForm.build(problem)
        feas_tol = self.tol * max(1.0, float(np.max(np.abs(std.b))) if std.m else 1.0)

        engine, status, start = None, None, 'phase1'
        for label, candidate in (('initial', initial_basis), ('fallback', fallback_basis)):
            if candidate is None:
                continue
            crashed = self._crash(std, problem.n_vars, candidate, feas_tol)
            if crashed is not None:
                (engine, status), start = crashed, label
                break
        if engine is None:
            engine, status = self._phase_one(std, feas_tol)
        phase1_iterations = engine.iterations
        if status is not None:
            return self._result(std, problem, engine, status, phase1_iterations, start)

        cost = np.zeros(engine.n)
        cost[:std.cost.size] = std.cost
        status = engine.run(cost, self.max_iter)
        return self._result(std, problem, engine, status, phase1_iterations, start)

    def _crash(self, std: _StandardForm, n_vars: int, initial_basis: Sequence[int],
               feas_tol: float) -> Optional[Tuple[_BoundedSimplex, Optional[LpStatus]]]:
        """Engine on ``initial_basis`` with the outcome of its repair (None when
        phase 2 may start), or None when the basis is unusable."""
        m = std.m
        basis = [std.column_of(int(i), n_vars) for i in initial_basis]
        if len(basis) != m or len(set(basis)) != m:
            logger.debug('lp_crash_rejected', reason='size', basis_size=len(basis), rows=m)
            return None
        try:
            engine = _BoundedSimplex(std.A, std.b, std.upper, np.array(basis, dtype=int),
                                     self.tol, self.pricing)
        except np.linalg.LinAlgError:
            logger.debug('lp_crash_rejected', reason='singular')
            return None

        if not np.all(np.isfinite(engine.x_B)):
            logger.debug('lp_crash_rejected', reason='ill_conditioned')
            return None
        ub_B = std.upper[engine.basis]

        # bounded columns that price in start at their upper bound when that stays feasible
        cost = np.zeros(engine.n)
        cost[:std.cost.size] = std.cost
        d = cost - engine.AT @ engine.factor.btran(cost[engine.basis])
        priced = ~engine.is_basic & np.isfinite(engine.upper) & (d < -self.tol)
        if priced.any():
            at_lower = engine.x_B
            engine.at_upper = priced
            engine.x_B = engine.factor.ftran(std.b - engine.A @ engine.nonbasic_values())
            if not np.all(np.abs(engine.x_B - np.clip(engine.x_B, 0.0, ub_B)) <= feas_tol):
                engine.at_upper = np.zeros(engine.n, dtype=bool)
                engine.x_B = at_lower

        excess = engine.x_B - np.clip(engine.x_B, 0.0, ub_B)
        violated = np.abs(excess) > feas_tol
        if not violated.any():
            return engine, None

        # one artificial column at its upper bound 1 carries every bound violation
        n = std.A.shape[1]
        residual = std.A[:, engine.basis] @ excess
        A = sparse.hstack([std.A, sparse.csc_matrix(residual.reshape(-1, 1))], format='csc')
        repaired = _BoundedSimplex(A, std.b, np.append(std.upper, 1.0), engine.basis,
                                   self.tol, self.pricing, at_upper=[n])
        logger.debug('lp_crash_repair', violated=int(violated.sum()),
                     worst=float(np.max(np.abs(excess))))
        return repaired, self._drive_out_artificials(repaired, n, feas_tol)

    def _phase_one(self, std: _StandardForm, feas_tol: float):
        m, n = std.A.shape
        n_slack = n - std.n_struct
        first_slack_row = m - n_slack

        basis, art_rows, art_signs = [], [], []
        for i in range(m):
            if i >= first_slack_row and std.b[i] >= 0:
                basis.append(std.n_struct + (i - first_slack_row))
            else:
                art_rows.append(i)
                art_signs.append(1.0 if std.b[i] >= 0 else -1.0)
                basis.append(n + len(art_rows) - 1)

        k = len(art_rows)
        A = std.A
        if k:
            artificial = sparse.csc_matrix((art_signs, (art_rows, np.arange(k))), shape=(m, k))
            A = sparse.hstack([std.A, artificial], format='csc')
        upper = np.concatenate([std.upper, np.full(k, math.inf)])
        engine = _BoundedSimplex(A, std.b, upper, np.array(basis, dtype=int),
                                 self.tol, self.pricing)
        if k == 0:
            return engine, None
        return engine, self._drive_out_artificials(engine, n, feas_tol)

    def _drive_out_artificials(self, engine: _BoundedSimplex, first: int,
                               feas_tol: float) -> Optional[LpStatus]:
        """Minimize the artificial columns ``first:``; None once they are all zero."""
        cost = np.zeros(engine.n)
        cost[first:] = 1.0
        status = engine.run(cost, self.max_iter)
        if status is LpStatus.ITERATION_LIMIT:
            return status

        infeasibility = float(engine.values()[first:].sum())
        if infeasibility > feas_tol:
            logger.debug('lp_phase1_infeasible', residual=infeasibility, tol=feas_tol)
            return LpStatus.INFEASIBLE

        # artificials stay pinned at zero for phase 2
        engine.upper[first:] = 0.0
        engine.enterable[first:] = False
        engine.at_upper[first:] = False
        return None

    def _result(self, std: _StandardForm, problem: LpProblem, engine: _BoundedSimplex,
                status: LpStatus, phase1_iterations: int, start: str) -> LpSolution:
        basis = None
        if status is LpStatus.OPTIMAL:
            if engine.m:
                engine.refactor()
            mapped = (std.index_of(int(col), problem.n_vars) for col in engine.basis)
            basis = sorted(j for j in mapped if j is not None)
        y = engine.values()[:std.A.shape[1]]
        x = std.recover(y)
        objective = float(problem.c @ x) if status is LpStatus.OPTIMAL else math.nan
        logger.debug('lp_solved', status=status.value, iterations=engine.iterations,
                     phase1=phase1_iterations, start=start,
                     n_vars=problem.n_vars, n_rows=engine.m)
        return LpSolution(x=x, objective=objective, status=status,
                          iterations=engine.iterations, phase1_iterations=phase1_iterations,
                          start=start, basis=basis)


def solve(problem: LpProblem, tol: float = 1e-7, max_iter: int = 50000,
          pricing: str = 'dantzig', initial_basis: Optional[Sequence[int]] = None,
          fallback_basis: Optional[Sequence[int]] = None) -> LpSolution:
    """Solve ``problem``; a starting basis lists problem-space columns
    (variable indices, then ``n_vars + i`` for the slack of inequality row i).
    ``fallback_basis`` is tried when ``initial_basis`` is unusable."""
    return SimplexSolver(tol=tol, max_iter=max_iter, pricing=pricing).solve(
        problem, initial_basis=initial_basis, fallback_basis=fallback_basis)


def _format_terms(coefficients: np.ndarray, names: List[str]) -> List[str]:
    terms = []
    for j in np.flatnonzero(coefficients):
        value = float(coefficients[j])
        terms.append(f"{'-' if value < 0 else '+'} {abs(value)!r} {names[j]}")
    return terms or [f"+ 0 {names[0]}"]


def _wrap(prefix: str, terms: List[str], suffix: str = '', per_line: int = 6) -> List[str]:
    lines = []
    for k in range(0, len(terms), per_line):
        head = prefix if k == 0 else ' ' * len(prefix)
        lines.append(head + ' '.join(terms[k:k + per_line]))
    lines[-1] += suffix
    return lines


def write_lp_file(problem: LpProblem, path) -> None:
    """Dump ``problem`` in CPLEX LP format."""
    names = problem.names()
    lines = ['\\ powersplit LP dump', 'Minimize']
    lines += _wrap(' obj: ', _format_terms(problem.c, names))
    lines.append('Subject To')
    for i in range(problem.n_eq):
        lines += _wrap(f' e{i}: ', _format_terms(problem.A_eq[i], names),
                       f" = {float(problem.b_eq[i])!r}")
    for i in range(problem.n_ub):
        lines += _wrap(f' u{i}: ', _format_terms(problem.A_ub[i], names),
                       f" <= {float(problem.b_ub[i])!r}")
    lines.append('Bounds')
    for j, name in enumerate(names):
        lo, hi = problem.lower[j], problem.upper[j]
        if np.isinf(lo) and np.isinf(hi):
            lines.append(f' {name} free')
        elif np.isinf(hi):
            if lo != 0:
                lines.append(f' {name} >= {float(lo)!r}')
        elif np.isinf(lo):
            lines.append(f' -inf <= {name} <= {float(hi)!r}')
        else:
            lines.append(f' {float(lo)!r} <= {name} <= {float(hi)!r}')
    lines.append('End')

    with open(path, 'w', encoding='utf-8') as handle:
        handle.write('\n'.join(lines) + '\n')
    logger.info('lp_written', path=str(path), n_vars=problem.n_vars,
                n_eq=problem.n_eq, n_ub=problem.n_ub)
