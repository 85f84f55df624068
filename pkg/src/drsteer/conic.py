"""Solver-neutral cone program container and its interior-point backend.

A :class:`ConicProgram` collects, over one flat variable vector:

* a linear cost, a constant, and factored PSD quadratic cost blocks
  (each block adds ``||F x + g||^2`` to the objective),
* labelled equality rows, nonnegativity rows, second-order-cone
  constraints and PSD blocks.

``solve_conic`` lowers the container to Clarabel's standard form
``A x + s = b`` with ``s`` in a product cone and a native quadratic
objective.  Tolerances of 1e-8 are requested; solutions that stall at
reduced accuracy are accepted when their recomputed residuals are
within 1e-6, otherwise a diagnostic failure is raised.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ConicProgram",
    "ConicSolution",
    "SolverSettings",
    "InfeasibleProgramError",
    "UnboundedProgramError",
    "SolverFailureError",
    "solve_conic",
]


class InfeasibleProgramError(Exception):
    """The cone program admits no feasible point."""


class UnboundedProgramError(Exception):
    """The cone program is unbounded below."""


class SolverFailureError(Exception):
    """Numerical failure; carries residual diagnostics in the message."""


@dataclass
class _Row:
    label: str
    cols: np.ndarray
    coefs: np.ndarray
    offset: float


@dataclass
class _SocConstraint:
    label: str
    rows: list  # list of (cols, coefs, offset); rows[0] is the bound


@dataclass
class _PsdBlock:
    label: str
    side: int
    const: np.ndarray                # side x side symmetric
    entries: list                    # (i, j, col, coef) with i <= j


@dataclass
class _QuadBlock:
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    g: np.ndarray
    n_rows: int


class ConicProgram:
    """Cone program: quadratic-plus-linear cost over equality, nonnegative,
    second-order and PSD cones."""

    def __init__(self):
        self.n_vars = 0
        self._var_groups: list[tuple[str, int, int]] = []  # (name, start, count)
        self._lin_cols: list[np.ndarray] = []
        self._lin_vals: list[np.ndarray] = []
        self.cost_constant = 0.0
        self.quad_blocks: list[_QuadBlock] = []
        self.equalities: list[_Row] = []
        self.nonneg: list[_Row] = []
        self.soc: list[_SocConstraint] = []
        self.psd: list[_PsdBlock] = []

    # ---------------- variables and cost ----------------

    def add_variables(self, name: str, count: int) -> np.ndarray:
        """Register ``count`` scalar variables under one group name."""
        if count < 0:
            raise ValueError("variable count must be nonnegative")
        start = self.n_vars
        self._var_groups.append((name, start, count))
        self.n_vars += count
        return np.arange(start, start + count)

    def var_name(self, idx: int) -> str:
        for name, start, count in self._var_groups:
            if start <= idx < start + count:
                return f"{name}[{idx - start}]" if count > 1 else name
        return f"x[{idx}]"

    def add_linear_cost(self, cols, coefs) -> None:
        self._lin_cols.append(np.atleast_1d(np.asarray(cols, dtype=int)))
        self._lin_vals.append(np.atleast_1d(np.asarray(coefs, dtype=float)))

    def add_cost_constant(self, value: float) -> None:
        self.cost_constant += float(value)

    def add_quadratic_cost(self, cols, F, g=None) -> None:
        """Add ``||F x_cols + g||^2`` to the objective; F maps the listed
        columns only (PSD by construction)."""
        cols = np.atleast_1d(np.asarray(cols, dtype=int))
        Fc = sp.coo_matrix(F)
        if Fc.shape[1] != cols.size:
            raise ValueError(
                f"quadratic block has {Fc.shape[1]} columns for {cols.size} variables"
            )
        g = np.zeros(Fc.shape[0]) if g is None else np.asarray(g, dtype=float)
        if g.size != Fc.shape[0]:
            raise ValueError("quadratic block offset length mismatch")
        self.quad_blocks.append(
            _QuadBlock(Fc.row.copy(), cols[Fc.col], Fc.data.copy(), g, Fc.shape[0])
        )

    # ---------------- constraint rows ----------------

    @staticmethod
    def _row(label, cols, coefs, offset) -> _Row:
        cols = np.atleast_1d(np.asarray(cols, dtype=int))
        coefs = np.atleast_1d(np.asarray(coefs, dtype=float))
        if cols.size != coefs.size:
            raise ValueError(f"row {label}: {cols.size} columns for {coefs.size} coefficients")
        return _Row(label, cols, coefs, float(offset))

    def add_equality(self, label, cols, coefs, offset=0.0) -> None:
        """Constrain ``coefs . x_cols + offset == 0``."""
        self.equalities.append(self._row(label, cols, coefs, offset))

    def add_nonneg(self, label, cols, coefs, offset=0.0) -> None:
        """Constrain ``coefs . x_cols + offset >= 0``."""
        self.nonneg.append(self._row(label, cols, coefs, offset))

    def add_soc(self, label, rows) -> None:
        """Constrain ``||(expr_1, ..., expr_d)|| <= expr_0``.

        ``rows`` is a list of (cols, coefs, offset) affine coordinates,
        the first being the bound.
        """
        if len(rows) < 1:
            raise ValueError("a second-order cone needs at least the bound row")
        built = [self._row(label, c, v, o) for (c, v, o) in rows]
        self.soc.append(_SocConstraint(label, built))

    def add_psd_block(self, label, side, const, entries) -> None:
        """Constrain the symmetric matrix ``const + sum coef * x[col] * E_ij``
        to be PSD, with ``entries`` as (i, j, col, coef), i <= j."""
        const = np.asarray(const, dtype=float)
        if const.shape != (side, side):
            raise ValueError(f"psd block {label}: const shape {const.shape} != side {side}")
        for (i, j, col, coef) in entries:
            if i > j:
                raise ValueError(f"psd block {label}: entry ({i},{j}) below the diagonal")
        self.psd.append(_PsdBlock(label, side, const, list(entries)))

    # ---------------- inspection ----------------

    @property
    def n_equalities(self) -> int:
        return len(self.equalities)

    @property
    def n_nonneg(self) -> int:
        return len(self.nonneg)

    @property
    def n_soc(self) -> int:
        return len(self.soc)

    @property
    def n_psd(self) -> int:
        return len(self.psd)

    def equality_labels(self):
        return [row.label for row in self.equalities]

    def soc_labels(self):
        return [c.label for c in self.soc]

    def _fmt_expr(self, cols, coefs, offset, max_terms=6) -> str:
        parts = []
        for c, v in list(zip(cols, coefs))[:max_terms]:
            parts.append(f"{v:+.6g}*{self.var_name(int(c))}")
        extra = len(cols) - max_terms
        if extra > 0:
            parts.append(f"... (+{extra} terms)")
        if offset or not parts:
            parts.append(f"{offset:+.6g}")
        return " ".join(parts)

    def dump(self) -> str:
        """Human-readable row listing for debugging."""
        lines = [f"conic program: {self.n_vars} variables"]
        for name, start, count in self._var_groups:
            lines.append(f"  var {name}: {count} entries at offset {start}")
        lines.append(f"cost: {len(self.quad_blocks)} quadratic blocks, "
                     f"constant {self.cost_constant:+.6g}")
        lines.append(f"equalities ({len(self.equalities)}):")
        for row in self.equalities:
            lines.append(f"  [{row.label}] {self._fmt_expr(row.cols, row.coefs, row.offset)} == 0")
        lines.append(f"nonnegative ({len(self.nonneg)}):")
        for row in self.nonneg:
            lines.append(f"  [{row.label}] {self._fmt_expr(row.cols, row.coefs, row.offset)} >= 0")
        lines.append(f"second-order cones ({len(self.soc)}):")
        for con in self.soc:
            bound = con.rows[0]
            lines.append(
                f"  [{con.label}] ||z||_2 <= {self._fmt_expr(bound.cols, bound.coefs, bound.offset)}"
                f"  (dim z = {len(con.rows) - 1})"
            )
        lines.append(f"psd blocks ({len(self.psd)}):")
        for blk in self.psd:
            lines.append(f"  [{blk.label}] side {blk.side}, {len(blk.entries)} variable entries")
        return "\n".join(lines)

    # ---------------- evaluation (used for reduced-accuracy acceptance) ------

    def linear_cost_vector(self) -> np.ndarray:
        q = np.zeros(self.n_vars)
        for cols, vals in zip(self._lin_cols, self._lin_vals):
            np.add.at(q, cols, vals)
        return q

    def objective_value(self, x: np.ndarray) -> float:
        val = self.cost_constant + float(self.linear_cost_vector() @ x)
        for blk in self.quad_blocks:
            Fx = np.zeros(blk.n_rows)
            np.add.at(Fx, blk.rows, blk.vals * x[blk.cols])
            val += float(((Fx + blk.g) ** 2).sum())
        return val

    def worst_violation(self, x: np.ndarray) -> dict:
        """Scaled feasibility violations of x per section (for acceptance)."""
        def ev(row):
            return float(row.coefs @ x[row.cols] + row.offset)

        out = {"equality": 0.0, "nonneg": 0.0, "soc": 0.0, "psd": 0.0}
        for row in self.equalities:
            out["equality"] = max(out["equality"], abs(ev(row)) / (1.0 + abs(row.offset)))
        for row in self.nonneg:
            out["nonneg"] = max(out["nonneg"], -ev(row) / (1.0 + abs(row.offset)))
        for con in self.soc:
            t = ev(con.rows[0])
            z = np.array([ev(r) for r in con.rows[1:]])
            out["soc"] = max(out["soc"], (np.linalg.norm(z) - t) / (1.0 + abs(t)))
        for blk in self.psd:
            Mx = blk.const.copy()
            for (i, j, col, coef) in blk.entries:
                Mx[i, j] += coef * x[col]
                if i != j:
                    Mx[j, i] += coef * x[col]
            w = np.linalg.eigvalsh(Mx)
            scale = 1.0 + float(np.abs(blk.const).max(initial=0.0))
            out["psd"] = max(out["psd"], -w.min() / scale)
        return out


@dataclass(frozen=True)
class SolverSettings:
    """Requested interior-point tolerances and acceptance threshold."""

    tol: float = 1e-8
    accept_tol: float = 1e-6
    max_iter: int = 200
    verbose: bool = False


@dataclass(frozen=True)
class ConicSolution:
    x: np.ndarray
    status: str                      # always "optimal" on return
    solver_status: str               # backend's own status string
    objective: float                 # includes the cost constant
    objective_dual: float
    iterations: int
    solve_time: float
    reduced_accuracy: bool = False
    violations: dict = field(default_factory=dict)


def _svec_index(i: int, j: int) -> int:
    # column-major upper triangle: (0,0),(0,1),(1,1),(0,2),...
    return j * (j + 1) // 2 + i


def _lower(program: ConicProgram):
    import clarabel

    rows = []
    cols = []
    vals = []
    b = []
    cones = []
    nrow = 0

    def put(row_obj, sign):
        nonlocal nrow
        rows.append(np.full(row_obj.cols.size, nrow))
        cols.append(row_obj.cols)
        vals.append(sign * row_obj.coefs)
        nrow += 1

    for row in program.equalities:   # expr == 0: A = coefs, b = -offset
        put(row, +1.0)
        b.append(-row.offset)
    if program.equalities:
        cones.append(clarabel.ZeroConeT(len(program.equalities)))
    for row in program.nonneg:       # expr >= 0: A = -coefs, b = offset
        put(row, -1.0)
        b.append(row.offset)
    if program.nonneg:
        cones.append(clarabel.NonnegativeConeT(len(program.nonneg)))
    for con in program.soc:          # s = (t, z): A = -coefs, b = offsets
        for row in con.rows:
            put(row, -1.0)
            b.append(row.offset)
        cones.append(clarabel.SecondOrderConeT(len(con.rows)))
    sqrt2 = np.sqrt(2.0)
    for blk in program.psd:
        base = nrow
        tri = blk.side * (blk.side + 1) // 2
        bblk = np.empty(tri)
        for j in range(blk.side):
            for i in range(j + 1):
                scale = 1.0 if i == j else sqrt2
                bblk[_svec_index(i, j)] = scale * blk.const[i, j]
        for (i, j, col, coef) in blk.entries:
            scale = 1.0 if i == j else sqrt2
            rows.append(np.array([base + _svec_index(i, j)]))
            cols.append(np.array([col]))
            vals.append(np.array([-scale * coef]))
        b.extend(bblk.tolist())
        nrow += tri
        cones.append(clarabel.PSDTriangleConeT(blk.side))

    if rows:
        A = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nrow, program.n_vars),
        )
    else:
        A = sp.csc_matrix((0, program.n_vars))

    # objective: 0.5 x'Px + q'x with P = 2 F'F, q = lin + 2 F'g
    q = program.linear_cost_vector()
    const = program.cost_constant
    if program.quad_blocks:
        Fs = []
        gs = []
        row_base = 0
        for blk in program.quad_blocks:
            Fs.append(sp.coo_matrix(
                (blk.vals, (blk.rows + row_base, blk.cols)),
                shape=(row_base + blk.n_rows, program.n_vars),
            ))
            gs.append(blk.g)
            row_base += blk.n_rows
        F = sp.vstack([sp.coo_matrix(
            (blk.vals, (blk.rows, blk.cols)), shape=(blk.n_rows, program.n_vars))
            for blk in program.quad_blocks]).tocsr()
        g = np.concatenate(gs)
        P = sp.triu(2.0 * (F.T @ F)).tocsc()
        q = q + 2.0 * (F.T @ g)
        const += float(g @ g)
    else:
        P = sp.csc_matrix((program.n_vars, program.n_vars))
    return P, q, A, np.asarray(b), cones, const


def solve_conic(program: ConicProgram,
                settings: SolverSettings | None = None) -> ConicSolution:
    """Solve the container with Clarabel and vet the returned status.

    Raises InfeasibleProgramError / UnboundedProgramError on certified
    certificates and SolverFailureError when the iterate is neither
    solved to the requested 1e-8 nor acceptable at 1e-6.
    """
    import clarabel

    settings = settings or SolverSettings()
    P, q, A, b, cones, const = _lower(program)
    cfg = clarabel.DefaultSettings()
    cfg.verbose = settings.verbose
    cfg.max_iter = settings.max_iter
    cfg.tol_gap_abs = settings.tol
    cfg.tol_gap_rel = settings.tol
    cfg.tol_feas = settings.tol
    cfg.max_threads = 1  # keep factorization deterministic for reproducible runs
    t0 = time.perf_counter()
    solver = clarabel.DefaultSolver(P, q, A, b, cones, cfg)
    raw = solver.solve()
    elapsed = time.perf_counter() - t0
    status = str(raw.status)

    if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
        raise InfeasibleProgramError(f"solver reports {status}")
    if status in ("DualInfeasible", "AlmostDualInfeasible"):
        raise UnboundedProgramError(f"solver reports {status}")

    x = np.asarray(raw.x)
    obj = float(raw.obj_val) + const
    obj_dual = float(raw.obj_val_dual) + const
    if status == "Solved":
        return ConicSolution(x, "optimal", status, obj, obj_dual,
                             int(raw.iterations), elapsed)

    # stalled short of 1e-8: recompute residuals and accept at 1e-6
    viol = program.worst_violation(x)
    gap = abs(obj - obj_dual) / max(1.0, abs(obj))
    worst = max(max(viol.values()), gap)
    if status in ("AlmostSolved", "MaxIterations", "NumericalError",
                  "InsufficientProgress") and worst <= settings.accept_tol:
        return ConicSolution(x, "optimal", status, obj, obj_dual,
                             int(raw.iterations), elapsed,
                             reduced_accuracy=True, violations=viol)
    raise SolverFailureError(
        f"solver status {status}; residuals eq={viol['equality']:.2e} "
        f"nonneg={viol['nonneg']:.2e} soc={viol['soc']:.2e} "
        f"psd={viol['psd']:.2e} gap={gap:.2e} exceed accept "
        f"tolerance {settings.accept_tol:.1e}"
    )
