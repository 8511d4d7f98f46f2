"""Sparse nonlinear least-squares factor graph over manifold-valued variables.

Variables are either vehicle states (retracted through boxplus, tangent
dimension 9) or plain control vectors (retracted by addition). Factors
carry a residual, analytic Jacobians in the tangent space of each
connected variable, and a Mahalanobis noise model; the solver minimizes
the sum of squared whitened residuals by Levenberg-Marquardt.

The normal equations are eliminated in a fixed time order (state k,
control k, state k+1, ...), which keeps the MPC chain banded; a banded
Cholesky is used whenever the fill pattern allows it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse

from .manifold import State, state_boxplus


class GraphError(ValueError):
    """Malformed graph construction (unknown keys, dimension mismatches)."""


class SolverError(RuntimeError):
    """Numerical failure during a solve, naming the offending factor."""


class Key(NamedTuple):
    """Variable key: ('state' | 'control', time index)."""

    kind: str
    index: int

    def __repr__(self):
        return f"{self.kind[0]}{self.index}"


def state_key(index: int) -> Key:
    return Key("state", index)


def control_key(index: int) -> Key:
    return Key("control", index)


class NoiseModel:
    """Gaussian noise model stored as its square-root information matrix W,
    with W^T W = Sigma^-1."""

    def __init__(self, sqrt_info: np.ndarray):
        W = np.asarray(sqrt_info, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise GraphError(f"sqrt information must be square, got shape {W.shape}")
        self.sqrt_info = W
        self.dim = W.shape[0]
        # structure flags let whiten() skip the dense matmul
        diag = np.diag(W)
        self._diag = diag.copy()
        self._diag_col = self._diag[:, None]
        self._is_diagonal = bool(np.count_nonzero(W - np.diag(diag)) == 0)
        self._scalar = float(diag[0]) if (self._is_diagonal and
                                          np.all(diag == diag[0])) else None

    @classmethod
    def from_covariance(cls, cov: np.ndarray, jitter: float = 0.0) -> "NoiseModel":
        """Whitening from a covariance; jitter*I is added before inversion to
        admit the rank-deficient covariances produced by exact noise
        integration."""
        cov = np.asarray(cov, dtype=float)
        if jitter:
            cov = cov + jitter * np.eye(cov.shape[0])
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise GraphError(f"covariance is not positive definite: {exc}") from exc
        W = scipy.linalg.solve_triangular(L, np.eye(cov.shape[0]), lower=True)
        return cls(W)

    @classmethod
    def from_information(cls, info: np.ndarray) -> "NoiseModel":
        info = np.asarray(info, dtype=float)
        try:
            L = np.linalg.cholesky(info)
        except np.linalg.LinAlgError as exc:
            raise GraphError(f"information matrix is not positive definite: {exc}") from exc
        return cls(L.T)

    @classmethod
    def from_sigmas(cls, sigmas: Sequence[float]) -> "NoiseModel":
        s = np.asarray(sigmas, dtype=float)
        if np.any(s <= 0):
            raise GraphError("noise sigmas must be positive")
        return cls(np.diag(1.0 / s))

    @classmethod
    def isotropic(cls, dim: int, weight: float) -> "NoiseModel":
        """Scalar information weight: cost contribution weight * ||r||^2."""
        if weight <= 0:
            raise GraphError("information weight must be positive")
        return cls(np.sqrt(weight) * np.eye(dim))

    def whiten(self, x: np.ndarray) -> np.ndarray:
        if self._scalar is not None:
            return self._scalar * x
        if self._is_diagonal:
            return self._diag * x if x.ndim == 1 else self._diag_col * x
        return self.sqrt_info @ x

    def covariance(self) -> np.ndarray:
        info = self.sqrt_info.T @ self.sqrt_info
        return np.linalg.inv(info)


class Factor:
    """Base class: residual over an ordered tuple of variables.

    Subclasses set `keys`, `dim`, `noise`, `family` and implement
    residual()/jacobians() taking the connected variable values
    positionally, in key order. Factors are immutable after construction
    and shareable across threads.
    """

    keys: tuple[Key, ...]
    dim: int
    noise: NoiseModel
    family: str = "factor"
    name: str = ""

    def residual(self, *vals) -> np.ndarray:
        raise NotImplementedError

    def jacobians(self, *vals) -> tuple[np.ndarray, ...]:
        raise NotImplementedError

    def residual_and_jacobians(self, *vals):
        """Combined evaluation; hot factors override this to share work."""
        return self.residual(*vals), self.jacobians(*vals)


class CallableFactor(Factor):
    """Factor defined by plain residual/Jacobian callables (test scaffolding
    and one-off constraints)."""

    def __init__(self, keys, dim, noise, residual_fn: Callable, jacobian_fns: Sequence[Callable],
                 family: str = "custom", name: str = ""):
        self.keys = tuple(keys)
        self.dim = dim
        self.noise = noise
        self._residual_fn = residual_fn
        self._jacobian_fns = tuple(jacobian_fns)
        if len(self._jacobian_fns) != len(self.keys):
            raise GraphError("one jacobian callable required per key")
        self.family = family
        self.name = name

    def residual(self, *vals):
        return self._residual_fn(*vals)

    def jacobians(self, *vals):
        return tuple(fn(*vals) for fn in self._jacobian_fns)


class PerturbedJacobianFactor(Factor):
    """Wraps a factor, corrupting one analytic Jacobian entry.

    Fault-injection harness for verifying that the finite-difference
    check actually catches wrong Jacobians.
    """

    def __init__(self, inner: Factor, key_index: int = 0, row: int = 0, col: int = 0,
                 delta: float = 0.1):
        self.inner = inner
        self.keys = inner.keys
        self.dim = inner.dim
        self.noise = inner.noise
        self.family = inner.family
        self.name = inner.name or f"perturbed({inner.family})"
        self._where = (key_index, row, col)
        self._delta = delta

    def residual(self, *vals):
        return self.inner.residual(*vals)

    def jacobians(self, *vals):
        Js = [np.array(J, dtype=float, copy=True) for J in self.inner.jacobians(*vals)]
        k, r, c = self._where
        Js[k][r, c] += self._delta
        return tuple(Js)


class Values:
    """Assignment of every variable: Key -> State or control vector."""

    def __init__(self, data: dict | None = None):
        self._data: dict[Key, object] = dict(data) if data else {}

    def __getitem__(self, key: Key):
        return self._data[key]

    def __setitem__(self, key: Key, value):
        if key.kind == "state":
            if not isinstance(value, State):
                raise GraphError(f"key {key} expects a State, got {type(value).__name__}")
        else:
            value = np.asarray(value, dtype=float).reshape(-1)
        self._data[key] = value

    def __contains__(self, key: Key) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def keys(self):
        return self._data.keys()

    def copy(self) -> "Values":
        return Values(self._data)

    @staticmethod
    def tangent_dim(value) -> int:
        return State.TANGENT_DIM if isinstance(value, State) else len(value)

    @staticmethod
    def retract_one(value, delta: np.ndarray):
        if isinstance(value, State):
            return state_boxplus(value, delta)
        return value + delta


@dataclass
class SolverParams:
    """Levenberg-Marquardt schedule and stopping tolerances."""

    lambda_init: float = 1e-4
    lambda_grow: float = 10.0
    lambda_shrink: float = 2.0
    lambda_min: float = 1e-9
    lambda_max: float = 1e9
    max_iterations: int = 50
    rel_cost_tol: float = 1e-6
    gradient_tol: float = 1e-8

    def __post_init__(self):
        if self.lambda_init <= 0:
            raise GraphError("lambda_init must be positive")
        if self.lambda_grow <= 1 or self.lambda_shrink <= 1:
            raise GraphError("lambda growth/shrink factors must exceed 1")
        if self.rel_cost_tol <= 0 or self.max_iterations < 1:
            raise GraphError("tolerances must be positive and max_iterations >= 1")


@dataclass
class SolveStats:
    iterations: int = 0
    accepted: int = 0
    rejected: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    gradient_norm: float = 0.0
    lambda_final: float = 0.0
    termination: str = ""
    wall_time_ms: float = 0.0
    cost_history: list = field(default_factory=list)


class FactorGraph:
    """Factor container plus the variable layout used for elimination."""

    def __init__(self):
        self._variables: dict[Key, int] = {}
        self.factors: list[Factor] = []
        self._layout: dict[Key, tuple[int, int]] | None = None
        self._hw: int | None = None

    # -- variables ---------------------------------------------------------

    def declare_state(self, index: int) -> Key:
        return self.declare(state_key(index), State.TANGENT_DIM)

    def declare_control(self, index: int, dim: int) -> Key:
        return self.declare(control_key(index), dim)

    def declare(self, key: Key, tangent_dim: int) -> Key:
        if key in self._variables:
            if self._variables[key] != tangent_dim:
                raise GraphError(f"variable {key} redeclared with a different dimension")
            return key
        self._variables[key] = tangent_dim
        self._layout = None
        self._hw = None
        return key

    @property
    def variables(self) -> dict[Key, int]:
        return dict(self._variables)

    def layout(self) -> dict[Key, tuple[int, int]]:
        """Column offsets per variable in fixed time order (state before
        control within a step)."""
        if self._layout is None:
            order = sorted(self._variables, key=lambda k: (k.index, 0 if k.kind == "state" else 1))
            offsets: dict[Key, tuple[int, int]] = {}
            at = 0
            for key in order:
                dim = self._variables[key]
                offsets[key] = (at, dim)
                at += dim
            self._layout = offsets
        return self._layout

    def tangent_size(self) -> int:
        return sum(self._variables.values())

    # -- factors -----------------------------------------------------------

    def insert(self, factor: Factor) -> Factor:
        for key in factor.keys:
            if key not in self._variables:
                raise GraphError(f"factor references undeclared variable {key}")
        if factor.noise.dim != factor.dim:
            raise GraphError(
                f"noise dimension {factor.noise.dim} does not match residual "
                f"dimension {factor.dim} for factor '{factor.name or factor.family}'"
            )
        if not factor.name:
            factor.name = f"{factor.family}#{len(self.factors)}"
        self.factors.append(factor)
        self._hw = None
        return factor

    def _gather(self, factor: Factor, values: Values):
        try:
            return tuple(values[k] for k in factor.keys)
        except KeyError as exc:
            raise GraphError(f"values missing variable {exc.args[0]} for factor "
                             f"'{factor.name}'") from None

    def cost(self, values: Values) -> float:
        total = 0.0
        data = values._data
        try:
            for f in self.factors:
                rw = f.noise.whiten(f.residual(*[data[k] for k in f.keys]))
                total += float(rw @ rw)
        except KeyError as exc:
            raise GraphError(f"values missing variable {exc.args[0]}") from None
        return total

    def family_residual_norms(self, values: Values) -> dict[str, float]:
        """Whitened residual norms accumulated per factor family."""
        sq: dict[str, float] = {}
        data = values._data
        for f in self.factors:
            rw = f.noise.whiten(f.residual(*[data[k] for k in f.keys]))
            sq[f.family] = sq.get(f.family, 0.0) + float(rw @ rw)
        return {fam: float(np.sqrt(v)) for fam, v in sq.items()}

    def linearize(self, values: Values):
        """Whitened linear system (J, b) at the given values, with
        J sparse (CSR) and b = -W r stacked over factors."""
        layout = self.layout()
        rows, cols, data = [], [], []
        b = np.zeros(sum(f.dim for f in self.factors))
        row0 = 0
        for f in self.factors:
            vals = self._gather(f, values)
            r = np.asarray(f.residual(*vals), dtype=float).reshape(-1)
            Js = f.jacobians(*vals)
            if r.shape[0] != f.dim:
                raise GraphError(f"factor '{f.name}' produced residual of dimension "
                                 f"{r.shape[0]}, declared {f.dim}")
            b[row0:row0 + f.dim] = -f.noise.whiten(r)
            for key, J in zip(f.keys, Js):
                off, dim = layout[key]
                Jw = f.noise.whiten(np.asarray(J, dtype=float))
                if Jw.shape != (f.dim, dim):
                    raise GraphError(
                        f"factor '{f.name}' jacobian for {key} has shape {Jw.shape}, "
                        f"expected ({f.dim}, {dim})")
                rows.append(np.repeat(np.arange(f.dim), dim) + row0)
                cols.append(np.tile(np.arange(dim), f.dim) + off)
                data.append(Jw.ravel())
            row0 += f.dim
        n = self.tangent_size()
        J = scipy.sparse.csr_matrix(
            (np.concatenate(data) if data else np.zeros(0),
             (np.concatenate(rows) if rows else np.zeros(0, dtype=int),
              np.concatenate(cols) if cols else np.zeros(0, dtype=int))),
            shape=(row0, n))
        return J, b

    def retract(self, values: Values, delta: np.ndarray) -> Values:
        layout = self.layout()
        out = values.copy()
        for key, (off, dim) in layout.items():
            out[key] = Values.retract_one(values[key], delta[off:off + dim])
        return out

    # -- normal equations ---------------------------------------------------

    def _half_bandwidth(self) -> int:
        if self._hw is None:
            layout = self.layout()
            hw = 0
            for f in self.factors:
                spans = [layout[k] for k in f.keys]
                lo = min(off for off, _ in spans)
                hi = max(off + dim for off, dim in spans)
                hw = max(hw, hi - lo - 1)
            self._hw = hw
        return self._hw


class _FactorBatch:
    """Factors sharing a noise model and a key-window layout, assembled and
    whitened together.

    Each factor's Jacobians are copied into one padded row-block spanning
    the window [lo, lo+width) of its keys; the products J^T J and J^T r of
    the whole batch are then single einsum calls. Gap columns (keys that
    are not adjacent in the elimination order) stay zero and contribute
    nothing to the normal equations. Factor math is untouched: evaluation
    still goes through each factor's own residual/jacobian methods.
    """

    def __init__(self, noise: NoiseModel, dim: int, width: int, rel_cols):
        self.noise = noise
        self.dim = dim
        self.width = width
        self.rel_cols = rel_cols
        self.evals = []      # residual_and_jacobians bound methods
        self.residuals = []  # residual bound methods (trial cost)
        self.keys = []
        self.los = []
        self._J = None
        self._r = None

    def add(self, factor: Factor, lo: int):
        self.evals.append(factor.residual_and_jacobians)
        self.residuals.append(factor.residual)
        self.keys.append(factor.keys)
        self.los.append(lo)

    def finalize(self):
        b = len(self.evals)
        self._J = np.zeros((b, self.dim, self.width))
        self._r = np.empty((b, self.dim))

    def _whiten_batch(self):
        noise = self.noise
        if noise._scalar is not None:
            if noise._scalar == 1.0:
                return self._J, self._r
            return noise._scalar * self._J, noise._scalar * self._r
        if noise._is_diagonal:
            return noise._diag[None, :, None] * self._J, noise._diag * self._r
        W = noise.sqrt_info
        return np.einsum("ij,bjk->bik", W, self._J), self._r @ W.T

    def accumulate(self, data: dict, H: np.ndarray, grad: np.ndarray) -> float:
        J, r, rel_cols = self._J, self._r, self.rel_cols
        for i, (evaluate, keys) in enumerate(zip(self.evals, self.keys)):
            ri, Js = evaluate(*[data[k] for k in keys])
            r[i] = ri
            Ji = J[i]
            for (c0, w), Jk in zip(rel_cols, Js):
                Ji[:, c0:c0 + w] = Jk
        Jw, rw = self._whiten_batch()
        cost = float(np.einsum("bi,bi->", rw, rw))
        Hb = np.einsum("bri,brj->bij", Jw, Jw)
        gb = np.einsum("bri,br->bi", Jw, rw)
        width = self.width
        for i, lo in enumerate(self.los):
            H[lo:lo + width, lo:lo + width] += Hb[i]
            grad[lo:lo + width] += gb[i]
        return cost

    def cost(self, data: dict) -> float:
        r = self._r
        for i, (residual, keys) in enumerate(zip(self.residuals, self.keys)):
            r[i] = residual(*[data[k] for k in keys])
        noise = self.noise
        if noise._scalar is not None:
            return float(noise._scalar ** 2 * np.einsum("bi,bi->", r, r))
        if noise._is_diagonal:
            rw = noise._diag * r
        else:
            rw = r @ noise.sqrt_info.T
        return float(np.einsum("bi,bi->", rw, rw))


def _build_batches(graph: FactorGraph) -> list[_FactorBatch]:
    """Group the graph's factors by (noise, residual dim, window layout)."""
    layout = graph.layout()
    batches: dict[tuple, _FactorBatch] = {}
    for f in graph.factors:
        spans = [layout[k] for k in f.keys]
        lo = min(off for off, _ in spans)
        width = max(off + dim for off, dim in spans) - lo
        rel_cols = tuple((off - lo, dim) for off, dim in spans)
        key = (id(f.noise), f.dim, width, rel_cols)
        batch = batches.get(key)
        if batch is None:
            batch = batches[key] = _FactorBatch(f.noise, f.dim, width, rel_cols)
        batch.add(f, lo)
    out = list(batches.values())
    for batch in out:
        batch.finalize()
    return out


def _accumulate_normal(graph: FactorGraph, batches, data: dict, H: np.ndarray,
                       grad: np.ndarray, iteration: int) -> float:
    """Assemble H = J^T J and grad = J^T (W r) of the whitened system into
    the preallocated buffers, batch-wise over factor groups; returns the
    cost. Finiteness is checked once on the assembled system, with a slow
    pass to name the offending factor only on failure."""
    H.fill(0.0)
    grad.fill(0.0)
    cost = 0.0
    for batch in batches:
        cost += batch.accumulate(data, H, grad)
    if not (np.isfinite(cost) and np.isfinite(grad).all() and np.isfinite(H).all()):
        _raise_nonfinite(graph, data, iteration)
    return cost


def _raise_nonfinite(graph: FactorGraph, data: dict, iteration: int):
    """Attribute a non-finite entry to its factor and raise."""
    for f in graph.factors:
        vals = [data[k] for k in f.keys]
        r = np.asarray(f.residual(*vals), dtype=float)
        if not np.isfinite(r).all():
            raise SolverError(f"non-finite residual in factor '{f.name}' "
                              f"at iteration {iteration}")
        for J in f.jacobians(*vals):
            if not np.isfinite(np.asarray(J, dtype=float)).all():
                raise SolverError(f"non-finite jacobian in factor '{f.name}' "
                                  f"at iteration {iteration}")
    raise SolverError(f"non-finite normal equations at iteration {iteration}")


def _make_linear_solver(n: int, hw: int):
    """Pick banded Cholesky when the band is narrow, dense otherwise.

    Returns prepare(H) -> solve(lam, rhs), so the band extraction of one
    linearization is shared across damping retries. Solvers raise
    LinAlgError when the damped system is not positive definite.
    """
    if 0 < hw < max(n // 2, 1):
        def prepare(H):
            ab = np.zeros((hw + 1, n))
            for d in range(hw + 1):
                ab[hw - d, d:] = H.diagonal(d)

            def solve(lam, rhs):
                abl = ab.copy()
                abl[hw, :] += lam
                return scipy.linalg.solveh_banded(abl, rhs, lower=False,
                                                  check_finite=False)
            return solve
        return prepare

    def prepare(H):
        def solve(lam, rhs):
            Hl = H + lam * np.eye(n)
            c, low = scipy.linalg.cho_factor(Hl, check_finite=False)
            return scipy.linalg.cho_solve((c, low), rhs, check_finite=False)
        return solve
    return prepare


def solve_lm(graph: FactorGraph, initial: Values, params: SolverParams | None = None
             ) -> tuple[Values, SolveStats]:
    """Minimize the graph cost by damped Gauss-Newton (Levenberg-Marquardt).

    States are updated through boxplus, controls by addition. A step is
    accepted iff the cost strictly decreases; on accept lambda shrinks, on
    reject it grows, clamped to [lambda_min, lambda_max]. Terminates on
    relative cost decrease below tolerance, gradient norm below tolerance,
    the iteration cap, or a stalled damping schedule.
    """
    params = params or SolverParams()
    t0 = time.perf_counter()
    stats = SolveStats(lambda_final=params.lambda_init)
    values = initial.copy()
    n = graph.tangent_size()
    prepare = _make_linear_solver(n, graph._half_bandwidth())
    try:
        batches = _build_batches(graph)
        for f in graph.factors:
            for k in f.keys:
                if k not in values:
                    raise GraphError(f"values missing variable {k} for factor '{f.name}'")
    except KeyError as exc:
        raise GraphError(f"factor references undeclared variable {exc.args[0]}") from None
    H = np.empty((n, n))
    grad = np.empty(n)

    def trial_cost(vals: Values) -> float:
        data = vals._data
        return sum(batch.cost(data) for batch in batches)

    lam = params.lambda_init
    cost = None
    for iteration in range(1, params.max_iterations + 1):
        stats.iterations = iteration
        try:
            cost = _accumulate_normal(graph, batches, values._data, H, grad, iteration)
        except SolverError as exc:
            stats.wall_time_ms = (time.perf_counter() - t0) * 1e3
            stats.termination = "error"
            exc.stats = stats
            raise
        if iteration == 1:
            stats.initial_cost = cost
            stats.cost_history.append(cost)
        stats.gradient_norm = float(np.max(np.abs(grad))) if n else 0.0
        if stats.gradient_norm < params.gradient_tol:
            stats.termination = "converged_gradient"
            break

        accepted_step = False
        solve = prepare(H)
        while True:
            try:
                delta = solve(lam, -grad)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                trial = graph.retract(values, delta)
                new_cost = trial_cost(trial)
            else:
                new_cost = np.inf
            if np.isfinite(new_cost) and new_cost < cost:
                values = trial
                lam = max(lam / params.lambda_shrink, params.lambda_min)
                stats.accepted += 1
                accepted_step = True
                rel_decrease = (cost - new_cost) / max(cost, 1e-300)
                cost = new_cost
                stats.cost_history.append(cost)
                if rel_decrease < params.rel_cost_tol:
                    stats.termination = "converged_cost"
                break
            stats.rejected += 1
            if lam >= params.lambda_max:
                stats.termination = "stalled"
                break
            lam = min(lam * params.lambda_grow, params.lambda_max)

        if stats.termination:
            break
        if not accepted_step:
            break

    if not stats.termination:
        stats.termination = "max_iterations"
    stats.final_cost = cost if cost is not None else graph.cost(values)
    stats.lambda_final = lam
    stats.wall_time_ms = (time.perf_counter() - t0) * 1e3
    return values, stats


def jacobian_fd_errors(factor: Factor, values: Values, step: float = 1e-6
                       ) -> tuple[float, float]:
    """Compare analytic Jacobians against central finite differences.

    Perturbations go through boxplus for states and plain addition for
    controls. Returns (max relative error over entries with magnitude
    >= 1e-6, max absolute error over the near-zero entries).
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    vals = [values[k] for k in factor.keys]
    analytic = [np.asarray(J, dtype=float) for J in factor.jacobians(*vals)]
    worst_rel = 0.0
    worst_abs = 0.0
    for ki, val in enumerate(vals):
        dim = Values.tangent_dim(val)
        J_fd = np.zeros((factor.dim, dim))
        for j in range(dim):
            e = np.zeros(dim)
            e[j] = step
            plus = list(vals)
            minus = list(vals)
            plus[ki] = Values.retract_one(val, e)
            minus[ki] = Values.retract_one(val, -e)
            rp = np.asarray(factor.residual(*plus), dtype=float).reshape(-1)
            rm = np.asarray(factor.residual(*minus), dtype=float).reshape(-1)
            J_fd[:, j] = (rp - rm) / (2.0 * step)
        A = analytic[ki].reshape(factor.dim, dim)
        diff = np.abs(A - J_fd)
        near_zero = np.maximum(np.abs(A), np.abs(J_fd)) < 1e-6
        if np.any(near_zero):
            worst_abs = max(worst_abs, float(diff[near_zero].max()))
        if np.any(~near_zero):
            scale = np.maximum(np.abs(A), np.abs(J_fd))
            rel = diff[~near_zero] / scale[~near_zero]
            worst_rel = max(worst_rel, float(rel.max()))
    return worst_rel, worst_abs


def check_jacobians(factor: Factor, values: Values, step: float = 1e-6) -> float:
    """Max mismatch between analytic Jacobians and central finite
    differences: relative error, except absolute where both entries are
    below 1e-6 in magnitude."""
    worst_rel, worst_abs = jacobian_fd_errors(factor, values, step)
    return max(worst_rel, worst_abs)
