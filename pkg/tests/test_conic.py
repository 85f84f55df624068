from __future__ import annotations

import numpy as np
import pytest

from drsteer import (
    ConicProgram,
    InfeasibleProgramError,
    SolverSettings,
    UnboundedProgramError,
    solve_conic,
)


class TestSmallPrograms:
    def test_soc_projection(self):
        # min x s.t. y = 3, z = 4, ||(y, z)|| <= x  ->  x* = 5
        prog = ConicProgram()
        x, y, z = prog.add_variables("x", 1)[0], prog.add_variables("y", 1)[0], \
            prog.add_variables("z", 1)[0]
        prog.add_linear_cost([x], [1.0])
        prog.add_equality("fix_y", [y], [1.0], -3.0)
        prog.add_equality("fix_z", [z], [1.0], -4.0)
        prog.add_soc("norm_bound", [([x], [1.0], 0.0),
                                    ([y], [1.0], 0.0),
                                    ([z], [1.0], 0.0)])
        sol = solve_conic(prog)
        assert sol.status == "optimal"
        np.testing.assert_allclose(sol.x, [5.0, 3.0, 4.0], atol=1e-6)
        assert sol.objective == pytest.approx(5.0, abs=1e-6)

    def test_psd_block(self):
        # min t s.t. [[t, 1], [1, t]] >= 0  ->  t* = 1
        prog = ConicProgram()
        t = prog.add_variables("t", 1)[0]
        prog.add_linear_cost([t], [1.0])
        const = np.array([[0.0, 1.0], [1.0, 0.0]])
        prog.add_psd_block("toy", 2, const, [(0, 0, t, 1.0), (1, 1, t, 1.0)])
        sol = solve_conic(prog)
        assert sol.x[0] == pytest.approx(1.0, abs=1e-6)

    def test_quadratic_cost_and_constant(self):
        # min ||x - (1, 2)||^2 + 3  ->  x* = (1, 2), objective 3
        prog = ConicProgram()
        x = prog.add_variables("x", 2)
        prog.add_quadratic_cost(x, np.eye(2), np.array([-1.0, -2.0]))
        prog.add_cost_constant(3.0)
        sol = solve_conic(prog)
        np.testing.assert_allclose(sol.x, [1.0, 2.0], atol=1e-6)
        assert sol.objective == pytest.approx(3.0, abs=1e-6)
        assert prog.objective_value(sol.x) == pytest.approx(3.0, abs=1e-8)

    def test_nonneg_rows(self):
        # min x s.t. x - 2.5 >= 0
        prog = ConicProgram()
        x = prog.add_variables("x", 1)[0]
        prog.add_linear_cost([x], [1.0])
        prog.add_nonneg("lower", [x], [1.0], -2.5)
        sol = solve_conic(prog)
        assert sol.x[0] == pytest.approx(2.5, abs=1e-7)

    def test_infeasible_raises(self):
        prog = ConicProgram()
        x = prog.add_variables("x", 1)[0]
        prog.add_equality("pin", [x], [1.0], 0.0)
        prog.add_nonneg("conflict", [x], [1.0], -1.0)   # x >= 1 but x == 0
        with pytest.raises(InfeasibleProgramError):
            solve_conic(prog)

    def test_unbounded_raises(self):
        prog = ConicProgram()
        x = prog.add_variables("x", 1)[0]
        prog.add_linear_cost([x], [1.0])
        prog.add_nonneg("one_side", [x], [-1.0], 1.0)   # x <= 1, min x
        with pytest.raises(UnboundedProgramError):
            solve_conic(prog)


class TestContainer:
    def build(self):
        prog = ConicProgram()
        x = prog.add_variables("x", 3)
        prog.add_linear_cost([x[0]], [1.0])
        prog.add_equality("eq", [x[1]], [1.0], -1.0)
        prog.add_nonneg("pos", [x[2]], [1.0], 0.0)
        prog.add_soc("cone", [([x[0]], [1.0], 0.0), ([x[1]], [1.0], 0.0)])
        prog.add_psd_block("blk", 2, np.eye(2), [(0, 1, int(x[2]), 1.0)])
        return prog, x

    def test_counts_and_labels(self):
        prog, _ = self.build()
        assert prog.n_equalities == 1
        assert prog.n_nonneg == 1
        assert prog.n_soc == 1
        assert prog.n_psd == 1
        assert prog.equality_labels() == ["eq"]
        assert prog.soc_labels() == ["cone"]

    def test_dump_is_readable(self):
        prog, _ = self.build()
        text = prog.dump()
        for token in ("conic program", "var x", "[eq]", "[pos]", "[cone]",
                      "[blk]", "== 0", ">= 0", "||z||_2"):
            assert token in text

    def test_worst_violation_flags_bad_point(self):
        prog, x = self.build()
        bad = np.array([0.0, 2.0, -1.0])     # violates eq, nonneg, soc
        viol = prog.worst_violation(bad)
        assert viol["equality"] > 0.4
        assert viol["nonneg"] > 0.9
        assert viol["soc"] > 0.0

    def test_worst_violation_clean_at_solution(self):
        prog, _ = self.build()
        sol = solve_conic(prog)
        viol = prog.worst_violation(sol.x)
        assert max(viol.values()) <= 1e-6

    def test_var_names(self):
        prog = ConicProgram()
        x = prog.add_variables("alpha", 2)
        y = prog.add_variables("beta", 1)
        assert prog.var_name(int(x[1])) == "alpha[1]"
        assert prog.var_name(int(y[0])) == "beta"


class TestSettings:
    def test_tight_tolerance_respected(self):
        prog = ConicProgram()
        x = prog.add_variables("x", 1)[0]
        prog.add_quadratic_cost([x], [[1.0]], [-2.0])
        sol = solve_conic(prog, SolverSettings(tol=1e-10))
        assert sol.x[0] == pytest.approx(2.0, abs=1e-8)
