"""Small builder for linear-objective SDPs with affine block-LMI constraints.

An expression is ``const + sum_v coef[v] . params(v)`` with one dense
coefficient tensor of shape ``(rows, cols, n_params(v))`` per variable,
which keeps products with small constant matrices cheap. LMIs are given as
lower-triangular block lists (the upper part follows by symmetry), compiled
to the scaled upper-triangular vectorization of Clarabel's PSD triangle
cone, and every optimum is re-verified here before it is reported as
``Optimal``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import clarabel
import numpy as np
import scipy.sparse as sp

__all__ = [
    "Affine",
    "Variable",
    "SdpProblem",
    "SdpSettings",
    "SdpSolution",
    "SdpStatus",
    "NonAffineError",
    "trace",
    "scalar_times",
]

_SQRT2 = np.sqrt(2.0)


class NonAffineError(TypeError):
    """Raised when an operation would leave the affine expression class."""


class SdpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ILL_CONDITIONED = "IllConditioned"
    ITERATION_LIMIT = "IterationLimit"


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    return arr


class Affine:
    """Affine matrix expression in the variables of one :class:`SdpProblem`."""

    # let numpy defer ``ndarray @ Affine`` to __rmatmul__
    __array_ufunc__ = None

    def __init__(self, const, coeffs: dict | None = None, variables: dict | None = None):
        self.const = _as_matrix(const)
        self.coeffs: dict[int, np.ndarray] = coeffs or {}
        self._vars: dict[int, Variable] = variables or {}

    @property
    def shape(self) -> tuple[int, int]:
        return self.const.shape

    @property
    def variables(self) -> list["Variable"]:
        return list(self._vars.values())

    def _coerce(self, other) -> "Affine":
        if isinstance(other, Affine):
            return other
        arr = np.asarray(other, dtype=float)
        if arr.ndim == 0:
            if arr == 0 or self.shape == (1, 1):
                return Affine(np.full(self.shape, float(arr)))
            raise ValueError("scalars other than 0 cannot be added to a matrix expression")
        return Affine(arr)

    def __add__(self, other) -> "Affine":
        other = self._coerce(other)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        coeffs = dict(self.coeffs)
        for vid, c in other.coeffs.items():
            coeffs[vid] = coeffs[vid] + c if vid in coeffs else c
        return Affine(self.const + other.const, coeffs, {**self._vars, **other._vars})

    __radd__ = __add__

    def __neg__(self) -> "Affine":
        return Affine(-self.const, {k: -c for k, c in self.coeffs.items()}, self._vars)

    def __sub__(self, other) -> "Affine":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Affine":
        return (-self) + other

    def __mul__(self, scalar) -> "Affine":
        if isinstance(scalar, Affine) or np.ndim(scalar) != 0:
            raise NonAffineError("use @ for matrix products; only scalar * expression is supported")
        s = float(scalar)
        return Affine(s * self.const, {k: s * c for k, c in self.coeffs.items()}, self._vars)

    __rmul__ = __mul__

    def __matmul__(self, right) -> "Affine":
        if isinstance(right, Affine):
            if right.coeffs and self.coeffs:
                raise NonAffineError("product of two variable expressions is not affine")
            if not self.coeffs:
                return self.const @ right
            right = right.const
        r = _as_matrix(right)
        if r.shape[0] != self.shape[1]:
            raise ValueError(f"shape mismatch {self.shape} @ {r.shape}")
        coeffs = {k: np.einsum("ijn,jk->ikn", c, r) for k, c in self.coeffs.items()}
        return Affine(self.const @ r, coeffs, self._vars)

    def __rmatmul__(self, left) -> "Affine":
        lm = _as_matrix(left)
        if lm.shape[1] != self.shape[0]:
            raise ValueError(f"shape mismatch {lm.shape} @ {self.shape}")
        coeffs = {k: np.einsum("ij,jkn->ikn", lm, c) for k, c in self.coeffs.items()}
        return Affine(lm @ self.const, coeffs, self._vars)

    @property
    def T(self) -> "Affine":
        coeffs = {k: np.swapaxes(c, 0, 1) for k, c in self.coeffs.items()}
        return Affine(self.const.T, coeffs, self._vars)

    def value(self, values: dict[int, np.ndarray]) -> np.ndarray:
        """Evaluate at parameter vectors keyed by variable id."""
        out = self.const.copy()
        for vid, c in self.coeffs.items():
            out += c @ values[vid]
        return out

    def is_symmetric(self, tol: float = 1e-12) -> bool:
        p, q = self.shape
        if p != q:
            return False
        scale = max(1.0, float(np.max(np.abs(self.const), initial=0.0)))
        if np.max(np.abs(self.const - self.const.T), initial=0.0) > tol * scale:
            return False
        for c in self.coeffs.values():
            cscale = max(1.0, float(np.max(np.abs(c), initial=0.0)))
            if np.max(np.abs(c - np.swapaxes(c, 0, 1)), initial=0.0) > tol * cscale:
                return False
        return True


class Variable(Affine):
    """A decision variable, symmetric ``n x n`` or rectangular ``m x n``.

    Symmetric variables are parameterized by their lower triangle in
    column-major order, rectangular ones by their column-major entries.
    """

    def __init__(self, vid: int, name: str, shape: tuple[int, int], symmetric: bool):
        m, n = shape
        if m < 1 or n < 1:
            raise ValueError(f"variable shape must be positive, got {shape}")
        if symmetric and m != n:
            raise ValueError("symmetric variables must be square")
        self.id = vid
        self.name = name
        self.symmetric = symmetric
        if symmetric:
            cols, rows = np.triu_indices(n)  # column-major walk of the lower triangle
            size = rows.size
            basis = np.zeros((n, n, size))
            basis[rows, cols, np.arange(size)] = 1.0
            basis[cols, rows, np.arange(size)] = 1.0
        else:
            size = m * n
            basis = np.zeros((m, n, size))
            jj, ii = np.meshgrid(np.arange(n), np.arange(m))
            basis[ii.ravel(order="F"), jj.ravel(order="F"), np.arange(size)] = 1.0
        self.size = size
        super().__init__(np.zeros((m, n)), {vid: basis})
        self._vars = {vid: self}

    def __repr__(self) -> str:
        kind = "sym" if self.symmetric else "mat"
        return f"Variable({self.name!r}, {kind} {self.shape[0]}x{self.shape[1]})"

    def __hash__(self) -> int:
        return hash(self.id)


def trace(expr: Affine) -> Affine:
    """Trace of a square expression as a 1 x 1 expression."""
    p, q = expr.shape
    if p != q:
        raise ValueError("trace of a non-square expression")
    coeffs = {k: np.einsum("iin->n", c)[None, None, :] for k, c in expr.coeffs.items()}
    return Affine(np.array([[np.trace(expr.const)]]), coeffs, expr._vars)


def scalar_times(expr: Affine, matrix) -> Affine:
    """Product of a 1 x 1 expression with a constant matrix."""
    if expr.shape != (1, 1):
        raise ValueError("scalar_times needs a 1 x 1 expression")
    m = _as_matrix(matrix)
    coeffs = {k: m[:, :, None] * c[0, 0][None, None, :] for k, c in expr.coeffs.items()}
    return Affine(expr.const[0, 0] * m, coeffs, expr._vars)


@dataclass(frozen=True)
class SdpSettings:
    feas_tol: float = 1e-7
    gap_tol: float = 1e-7
    max_iter: int = 20_000
    # solver-internal tolerance; tighter than the verification tolerances
    solver_tol: float = 1e-9
    verbose: bool = False


@dataclass
class SdpSolution:
    status: SdpStatus
    objective: float
    values: dict[int, np.ndarray] = field(default_factory=dict)
    iterations: int = 0
    primal_residual: float = np.nan
    dual_residual: float = np.nan
    gap: float = np.nan
    min_lmi_eig: float = np.nan
    solver_status: str = ""

    @property
    def optimal(self) -> bool:
        return self.status is SdpStatus.OPTIMAL

    def value(self, expr: Affine) -> np.ndarray:
        """Value of a variable or affine expression at the returned point."""
        missing = [v.name for vid, v in expr._vars.items() if vid not in self.values]
        if missing:
            raise KeyError(f"no value for {missing}")
        return expr.value(self.values)


@dataclass
class _Lmi:
    name: str
    size: int
    rows: dict[int, tuple]  # vid -> (svec row, param, coefficient) arrays
    const: np.ndarray  # svec of the constant matrix
    const_norm: float
    blocks: list


def _svec_index(row, col):
    """Position of entry ``(min, max)`` in the upper-triangular column-major svec."""
    a = np.minimum(row, col)
    b = np.maximum(row, col)
    return b * (b + 1) // 2 + a


def _smat(vec: np.ndarray, n: int) -> np.ndarray:
    cols, rows = np.triu_indices(n)
    rows, cols = np.minimum(rows, cols), np.maximum(rows, cols)
    vals = vec[_svec_index(rows, cols)]
    vals = np.where(rows == cols, vals, vals / _SQRT2)
    out = np.zeros((n, n))
    out[rows, cols] = vals
    out[cols, rows] = vals
    return out


def _is_zero_block(entry) -> bool:
    return entry is None or (not isinstance(entry, Affine) and np.ndim(entry) == 0 and entry == 0)


class SdpProblem:
    """Minimize a linear objective subject to block LMIs and affine equalities."""

    def __init__(self, name: str = "sdp"):
        self.name = name
        self._variables: list[Variable] = []
        self._lmis: list[_Lmi] = []
        self._equalities: list[Affine] = []
        self._objective: Affine | None = None
        self._solution: SdpSolution | None = None

    def _check_open(self):
        if self._solution is not None:
            raise RuntimeError("problem has already been solved and is immutable")

    def variable(self, name: str, shape, symmetric: bool = False) -> Variable:
        self._check_open()
        if isinstance(shape, int):
            shape = (shape, shape)
        var = Variable(len(self._variables), name, tuple(shape), symmetric)
        self._variables.append(var)
        return var

    def symmetric(self, name: str, n: int) -> Variable:
        return self.variable(name, (n, n), symmetric=True)

    @property
    def variables(self) -> list[Variable]:
        return list(self._variables)

    @property
    def n_lmis(self) -> int:
        return len(self._lmis)

    def _owns(self, expr: Affine):
        for vid, var in expr._vars.items():
            if vid >= len(self._variables) or self._variables[vid] is not var:
                raise ValueError(f"{var!r} was not declared on this problem")

    def add_lmi(self, blocks: Sequence[Sequence], name: str | None = None) -> int:
        """Add ``F >= 0`` where ``blocks[r][c]`` (``c <= r``) is the lower block triangle.

        ``None`` or ``0`` entries are zero blocks; block sizes are read off
        the diagonal, whose entries must be symmetric. Returns the
        constraint index.
        """
        self._check_open()
        nb = len(blocks)
        if nb == 0 or any(len(row) != r + 1 for r, row in enumerate(blocks)):
            raise ValueError("blocks must be given as a non-empty lower-triangular list of rows")
        sizes = []
        for r in range(nb):
            d = blocks[r][r]
            if _is_zero_block(d):
                raise ValueError(f"diagonal block {r} must be a matrix or expression")
            shape = d.shape if isinstance(d, Affine) else _as_matrix(d).shape
            if shape[0] != shape[1]:
                raise ValueError(f"diagonal block {r} is not square")
            sizes.append(shape[0])
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        n = int(offsets[-1])

        parts: dict[int, list] = {}
        const = np.zeros(n * (n + 1) // 2)
        const_full = np.zeros((n, n))
        for r in range(nb):
            for c in range(r + 1):
                entry = blocks[r][c]
                if _is_zero_block(entry):
                    continue
                expr = entry if isinstance(entry, Affine) else Affine(entry)
                self._owns(expr)
                if expr.shape != (sizes[r], sizes[c]):
                    raise ValueError(
                        f"block ({r},{c}) has shape {expr.shape}, expected {(sizes[r], sizes[c])}"
                    )
                if r == c and not expr.is_symmetric():
                    raise ValueError(f"diagonal block {r} is not symmetric")
                p, q = expr.shape
                ii, jj = np.meshgrid(np.arange(p), np.arange(q), indexing="ij")
                grow, gcol = ii + offsets[r], jj + offsets[c]
                # diagonal blocks contribute their lower triangle only
                keep = grow >= gcol
                scale = np.where(grow == gcol, 1.0, _SQRT2)
                sv = _svec_index(grow, gcol)
                const[sv[keep]] += (scale * expr.const)[keep]
                const_full[grow, gcol] = expr.const
                const_full[gcol, grow] = expr.const
                for vid, coef in expr.coeffs.items():
                    bi, bj, par = np.nonzero(coef * keep[:, :, None])
                    parts.setdefault(vid, []).append(
                        (sv[bi, bj], par, scale[bi, bj] * coef[bi, bj, par])
                    )
        rows = {
            vid: tuple(np.concatenate([pt[k] for pt in pl]) for k in range(3))
            for vid, pl in parts.items()
        }
        idx = len(self._lmis)
        self._lmis.append(
            _Lmi(name or f"lmi{idx}", n, rows, const, float(np.linalg.norm(const_full)), blocks)
        )
        return idx

    def add_psd(self, expr: Affine, name: str | None = None) -> int:
        """Single-block LMI ``expr >= 0``."""
        return self.add_lmi([[expr]], name=name)

    def add_equality(self, expr: Affine) -> None:
        """Affine equality ``expr == 0``."""
        self._check_open()
        expr = expr if isinstance(expr, Affine) else Affine(expr)
        self._owns(expr)
        self._equalities.append(expr)

    def minimize(self, expr) -> None:
        self._check_open()
        expr = expr if isinstance(expr, Affine) else Affine(expr)
        if expr.shape != (1, 1):
            raise ValueError("objective must be scalar (use trace())")
        self._owns(expr)
        self._objective = expr

    def solve(self, settings: SdpSettings | None = None) -> SdpSolution:
        """Solve once; later calls return the same solution."""
        if self._solution is not None:
            return self._solution
        settings = settings or SdpSettings()
        sizes = np.array([v.size for v in self._variables], dtype=int)
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        nvar = int(offsets[-1])

        q = np.zeros(nvar)
        obj_const = 0.0
        if self._objective is not None:
            obj_const = float(self._objective.const[0, 0])
            for vid, c in self._objective.coeffs.items():
                q[offsets[vid]:offsets[vid + 1]] += c[0, 0]

        # Clarabel form: A x + s = b with s in the cone, so an LMI F0 + sum F_j x_j >= 0
        # has b = svec(F0) and A = -svec(F_j)
        ri, ci, vv, b_parts, cones = [], [], [], [], []
        row0 = 0
        for eq in self._equalities:
            p, qq = eq.shape
            for vid, coef in eq.coeffs.items():
                bi, bj, par = np.nonzero(coef)
                ri.append(bi + bj * p + row0)
                ci.append(par + offsets[vid])
                vv.append(-coef[bi, bj, par])
            b_parts.append(eq.const.flatten(order="F"))
            row0 += p * qq
        if row0:
            cones.append(clarabel.ZeroConeT(row0))
        lmi_rows = []
        for lmi in self._lmis:
            for vid, (r_, c_, v_) in lmi.rows.items():
                ri.append(r_ + row0)
                ci.append(c_ + offsets[vid])
                vv.append(-v_)
            b_parts.append(lmi.const)
            cones.append(clarabel.PSDTriangleConeT(lmi.size))
            lmi_rows.append((row0, row0 + lmi.const.size))
            row0 += lmi.const.size

        if nvar == 0 or not ri:
            return self._solve_trivial(q, obj_const, settings)

        a_mat = sp.csc_matrix(
            (np.concatenate(vv), (np.concatenate(ri), np.concatenate(ci))), shape=(row0, nvar)
        )
        b_vec = np.concatenate(b_parts)
        cs = clarabel.DefaultSettings()
        cs.verbose = settings.verbose
        cs.max_iter = settings.max_iter
        cs.tol_gap_abs = settings.solver_tol
        cs.tol_gap_rel = settings.solver_tol
        cs.tol_feas = settings.solver_tol
        cs.presolve_enable = False
        cs.chordal_decomposition_enable = False
        solver = clarabel.DefaultSolver(sp.csc_matrix((nvar, nvar)), q, a_mat, b_vec, cones, cs)
        res = solver.solve()
        status_name = str(res.status)
        x = np.asarray(res.x, dtype=float)
        values = {v.id: x[offsets[v.id]:offsets[v.id + 1]].copy() for v in self._variables}
        objective = float(q @ x) + obj_const
        gap = abs(float(res.obj_val) - float(res.obj_val_dual))

        if status_name in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
            status = SdpStatus.INFEASIBLE
        elif status_name == "MaxIterations":
            status = SdpStatus.ITERATION_LIMIT
        elif status_name in ("Solved", "AlmostSolved"):
            status = SdpStatus.OPTIMAL
        else:
            status = SdpStatus.ILL_CONDITIONED

        min_eig = np.inf
        if status is SdpStatus.OPTIMAL:
            slack = b_vec - a_mat @ x
            ok = True
            for lmi, (lo, hi) in zip(self._lmis, lmi_rows):
                eig = float(np.linalg.eigvalsh(_smat(slack[lo:hi], lmi.size))[0])
                min_eig = min(min_eig, eig)
                ok &= eig >= -settings.feas_tol * (1.0 + lmi.const_norm)
            for eq in self._equalities:
                resid = np.max(np.abs(eq.value(values)), initial=0.0)
                ok &= resid <= settings.feas_tol * (1.0 + np.max(np.abs(eq.const), initial=0.0))
            ok &= gap <= settings.gap_tol * max(1.0, abs(objective))
            if not ok:
                status = SdpStatus.ILL_CONDITIONED

        self._solution = SdpSolution(
            status=status,
            objective=objective if status is SdpStatus.OPTIMAL else np.nan,
            values=values,
            iterations=int(res.iterations),
            primal_residual=float(res.r_prim),
            dual_residual=float(res.r_dual),
            gap=gap,
            min_lmi_eig=min_eig,
            solver_status=status_name,
        )
        return self._solution

    def _solve_trivial(self, q: np.ndarray, obj_const: float, settings: SdpSettings) -> SdpSolution:
        # no constraint touches a variable, so feasibility is decided by the constants
        values = {v.id: np.zeros(v.size) for v in self._variables}
        if np.any(q != 0):
            self._solution = SdpSolution(
                SdpStatus.ILL_CONDITIONED, np.nan, values, solver_status="Unbounded"
            )
            return self._solution
        ok = True
        min_eig = np.inf
        for lmi in self._lmis:
            eig = float(np.linalg.eigvalsh(_smat(lmi.const, lmi.size))[0])
            min_eig = min(min_eig, eig)
            ok &= eig >= -settings.feas_tol * (1.0 + lmi.const_norm)
        for eq in self._equalities:
            ok &= bool(np.max(np.abs(eq.const), initial=0.0) <= settings.feas_tol)
        status = SdpStatus.OPTIMAL if ok else SdpStatus.INFEASIBLE
        self._solution = SdpSolution(
            status, obj_const if ok else np.nan, values, gap=0.0, min_lmi_eig=min_eig,
            solver_status="Trivial",
        )
        return self._solution

    def dump(self, stream) -> None:
        """Write every LMI nonzero as one whitespace-separated line.

        Format::

            <constraint> <block_row> <block_col> <row> <col> <variable|const> <param> <coefficient>

        covering the lower block triangle only. ``row``/``col`` index the
        entry inside the block and ``param`` the variable's parameter vector
        (``-`` for constants).
        """
        for cid, lmi in enumerate(self._lmis):
            for r, brow in enumerate(lmi.blocks):
                for c, entry in enumerate(brow):
                    if _is_zero_block(entry):
                        continue
                    expr = entry if isinstance(entry, Affine) else Affine(entry)
                    for i, j in zip(*np.nonzero(expr.const)):
                        stream.write(f"{cid} {r} {c} {i} {j} const - {expr.const[i, j]!r}\n")
                    for vid in sorted(expr.coeffs):
                        coef = expr.coeffs[vid]
                        for i, j, par in zip(*np.nonzero(coef)):
                            stream.write(f"{cid} {r} {c} {i} {j} {vid} {par} {coef[i, j, par]!r}\n")
