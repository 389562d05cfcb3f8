"""Collocation solver: transcription consistency, optima, oracle dominance."""

import json

import numpy as np
import pytest

from thermoforge.config_enum import ConfigGraph
from thermoforge.errors import SizeError, ValidationError
from thermoforge.oloc_solver import (
    OlocOptions,
    OlocSolution,
    Transcription,
    brute_force_piecewise_oracle,
    solve,
    transcribe,
    verify_feasibility,
)
from thermoforge.thermal_physics import (
    build_physics_graph,
    constant_flow_endurance,
    endurance_from_trajectory,
    equal_split_flows,
    simulate,
)

PARALLEL2 = ConfigGraph(2, (-1, -1))
PARALLEL3 = ConfigGraph(3, (-1, -1, -1))
SERIES3 = ConfigGraph(3, (-1, 1, 2))
NESTED4 = ConfigGraph(4, (-1, -1, 1, 1))


class TestOptions:
    def test_segment_floor(self):
        with pytest.raises(ValidationError):
            OlocOptions(segments=7).validate()

    def test_bad_tolerances(self):
        with pytest.raises(ValidationError):
            OlocOptions(defect_tol=0.0).validate()
        with pytest.raises(ValidationError):
            OlocOptions(t_end_min=10.0, t_end_max=5.0).validate()

    def test_dict_round_trip(self):
        opt = OlocOptions(segments=12, defect_tol=5e-5)
        assert OlocOptions.from_dict(opt.to_dict()) == opt

    def test_unknown_option_rejected(self):
        with pytest.raises(ValidationError, match="unknown"):
            OlocOptions.from_dict({"segmants": 10})


class TestTranscription:
    def test_series_has_no_controls(self):
        tr = transcribe(SERIES3, [5.0, 5.0, 5.0], options=OlocOptions(segments=10))
        assert tr.dof == 0
        # decision vector is exactly the states plus the final time
        assert tr.n_vars == 11 * tr.n_temps + 1

    def test_parallel3_control_dimension(self):
        tr = transcribe(PARALLEL3, [5.0, 5.0, 5.0], options=OlocOptions(segments=20))
        assert tr.dof == 2
        _, phi, u, _ = tr.unpack(tr.upper)
        assert u.shape == (21, 2)
        assert phi.shape == (21, 2)

    def test_bounds(self):
        tr = transcribe(PARALLEL3, [5.0, 5.0, 5.0], options=OlocOptions(segments=10))
        lo_th, lo_phi, lo_u, lo_s = tr.unpack(tr.lower)
        hi_th, hi_phi, hi_u, hi_s = tr.unpack(tr.upper)
        p = tr.pg.params
        # slew box at every grid node, in physical units
        assert np.all(lo_u * tr.u_scale == -p.flow_accel_max)
        assert np.all(hi_u * tr.u_scale == p.flow_accel_max)
        # flows in [0, pump], including the free initial row
        assert np.all(lo_phi == 0.0) and np.all(hi_phi == 1.0)
        # initial temperatures pinned, later ones open up to the class bound
        assert np.all(lo_th[0] == hi_th[0])
        assert np.all(hi_th[1:, 0] * tr.temp_scale + tr.temp_ref == p.fluid_temp_max)
        assert lo_s * 100.0 == 1.0 and hi_s * 100.0 == 500.0

    def test_residual_shapes(self):
        tr = transcribe(NESTED4, [5.0, 5.0, 5.0, 5.0], options=OlocOptions(segments=9))
        x0 = 0.5 * (tr.lower + tr.upper)
        c, g = tr.residuals(x0)
        assert c.shape == (9 * (tr.n_temps + 2),)
        assert g.shape == (10 * 2 * tr.n_dep,)

    def test_graph_params_exclusive(self):
        pg = build_physics_graph(PARALLEL2)
        with pytest.raises(ValidationError):
            transcribe(pg, [5.0, 5.0], params=pg.params)

    def _random_point(self, tr, rng):
        x = tr.lower + (tr.upper - tr.lower) * rng.uniform(0.1, 0.9, tr.n_vars)
        x[-1] = rng.uniform(0.05, 1.0)
        return x

    def test_gradient_matches_central_difference(self):
        tr = transcribe(PARALLEL2, [9.0, 5.0], options=OlocOptions(segments=10))
        rng = np.random.default_rng(4)
        x = self._random_point(tr, rng)
        w_eq = rng.normal(size=tr.n_eq)
        w_g = rng.normal(size=tr.n_ineq)

        def scalar(xv):
            c, g = tr.residuals(xv)
            return float(w_eq @ c + w_g @ g)

        grad = tr.constraint_gradient(x, w_eq, w_g)
        d = rng.normal(size=tr.n_vars)
        d /= np.linalg.norm(d)
        h = 1e-5
        fd = (scalar(x + h * d) - scalar(x - h * d)) / (2 * h)
        assert abs(fd - float(grad @ d)) <= 1e-7 * max(1.0, abs(fd))

    def test_fd_richardson_ratio(self):
        # central differences at h and h/2: truncation error must drop 4x
        tr = transcribe(
            ConfigGraph(3, (-1, 1, -1)), [6.0, 9.0, 4.0], options=OlocOptions(segments=12)
        )
        rng = np.random.default_rng(11)
        ratios = []
        for _ in range(4):
            x = self._random_point(tr, rng)
            w_eq = rng.normal(size=tr.n_eq)
            w_g = rng.normal(size=tr.n_ineq)

            def scalar(xv):
                c, g = tr.residuals(xv)
                return float(w_eq @ c + w_g @ g)

            d = rng.normal(size=tr.n_vars)
            d /= np.linalg.norm(d)
            exact = float(tr.constraint_gradient(x, w_eq, w_g) @ d)
            h = 2e-3
            e1 = abs((scalar(x + h * d) - scalar(x - h * d)) / (2 * h) - exact)
            e2 = abs((scalar(x + h / 2 * d) - scalar(x - h / 2 * d)) / h - exact)
            ratios.append(e1 / e2)
        assert all(3.5 <= r <= 4.5 for r in ratios), ratios

    def test_al_gradient_consistent(self):
        tr = transcribe(PARALLEL2, [9.0, 5.0], options=OlocOptions(segments=10))
        rng = np.random.default_rng(21)
        x = self._random_point(tr, rng)
        lam = rng.normal(size=tr.n_eq)
        mu = np.abs(rng.normal(size=tr.n_ineq))
        val, grad = tr.al_value_and_grad(x, lam, mu, 7.0)
        d = rng.normal(size=tr.n_vars)
        d /= np.linalg.norm(d)
        h = 1e-6
        vp, _ = tr.al_value_and_grad(x + h * d, lam, mu, 7.0)
        vm, _ = tr.al_value_and_grad(x - h * d, lam, mu, 7.0)
        fd = (vp - vm) / (2 * h)
        assert abs(fd - float(grad @ d)) <= 1e-5 * max(1.0, abs(fd))


class TestSolve:
    def test_symmetric_matches_equal_split(self):
        pg = build_physics_graph(PARALLEL3)
        loads = [5.0, 5.0, 5.0]
        sol = solve(pg, loads, options=OlocOptions(segments=16))
        policy = constant_flow_endurance(pg, loads, equal_split_flows(pg), dt=1e-3, t_stop=500.0)
        assert sol.converged
        assert sol.t_end >= policy * 0.99
        # optimal flows stay within 2% of the even split
        even = pg.params.pump_flow / 3.0
        assert np.max(np.abs(sol.indep_flows - even)) <= 0.02 * pg.params.pump_flow

    def test_series_fast_path_matches_integrator(self):
        pg = build_physics_graph(SERIES3)
        loads = [7.0, 5.0, 6.0]
        sol = solve(pg, loads)
        traj = simulate(pg, loads, t_max=30.0, dt=1e-3)
        ref = endurance_from_trajectory(pg, traj)
        assert sol.converged
        assert abs(sol.t_end - ref) <= 0.005 * ref
        assert sol.indep_flows.shape == (sol.times.shape[0], 0)

    def test_load_doubling_decreases_t_end(self):
        pg = build_physics_graph(PARALLEL2)
        opt = OlocOptions(segments=12)
        lo = solve(pg, [6.0, 4.0], options=opt)
        hi = solve(pg, [12.0, 8.0], options=opt)
        assert hi.t_end < lo.t_end

    def test_deterministic_report(self):
        opt = OlocOptions(segments=12)
        a = solve(PARALLEL2, [10.0, 6.0], options=opt).to_dict()
        b = solve(PARALLEL2, [10.0, 6.0], options=opt).to_dict()
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_solution_dict_round_trip(self):
        sol = solve(PARALLEL2, [10.0, 6.0], options=OlocOptions(segments=12))
        back = OlocSolution.from_dict(json.loads(json.dumps(sol.to_dict())))
        assert back.t_end == sol.t_end
        assert back.converged == sol.converged
        np.testing.assert_array_equal(back.temps, sol.temps)
        np.testing.assert_array_equal(back.indep_flows, sol.indep_flows)
        assert back.feasibility.endurance == sol.feasibility.endurance

    def test_feasible_solution_report_clean(self):
        pg = build_physics_graph(PARALLEL2)
        sol = solve(pg, [10.0, 6.0], options=OlocOptions(segments=16))
        assert sol.converged
        fz = sol.feasibility
        assert fz.mismatch <= 0.02 and not fz.flagged
        assert fz.slew_ok
        # overshoot within the claimed horizon stays at path-tolerance scale
        assert fz.max_violation <= 0.05

    def test_unreachable_tolerance_reports_nonconvergence(self):
        opt = OlocOptions(segments=10, defect_tol=1e-13, outer_max=2)
        sol = solve(PARALLEL2, [10.0, 6.0], options=opt)
        assert not sol.converged
        assert sol.max_defect > 1e-13
        assert sol.feasibility is not None
        assert sol.feasibility.endurance is not None  # re-simulated truth survives

    def test_subcritical_hits_cap(self):
        sol = solve(PARALLEL3, [1.0, 1.0, 1.0], options=OlocOptions(segments=12))
        assert sol.t_end == 500.0
        assert sol.feasibility.endurance is None
        assert not sol.feasibility.flagged

    def test_nested_junctions_converge(self):
        sol = solve(NESTED4, [12.0, 6.0, 9.0, 5.0], options=OlocOptions(segments=16))
        assert sol.converged
        assert sol.feasibility.mismatch <= 0.02
        assert sol.indep_flows.shape[1] == 2


class TestVerify:
    def test_corrupted_flows_detected(self):
        pg = build_physics_graph(PARALLEL2)
        sol = solve(pg, [10.0, 6.0], options=OlocOptions(segments=12))
        corrupted = OlocSolution.from_dict(sol.to_dict())
        corrupted.indep_flows = np.zeros_like(corrupted.indep_flows)
        report = verify_feasibility(corrupted, pg, [10.0, 6.0])
        # starving branch 1 must show up as an endurance drop or an overshoot
        dropped = report.endurance is not None and report.endurance < 0.98 * sol.t_end
        assert dropped or report.max_violation > 0.0
        assert report.flagged

    def test_slew_check(self):
        pg = build_physics_graph(PARALLEL2)
        sol = solve(pg, [10.0, 6.0], options=OlocOptions(segments=12))
        assert verify_feasibility(sol, pg, [10.0, 6.0]).slew_ok
        jerky = OlocSolution.from_dict(sol.to_dict())
        jerky.indep_flows = jerky.indep_flows.copy()
        jerky.indep_flows[1::2] = 0.0
        jerky.indep_flows[::2] = pg.params.pump_flow
        assert not verify_feasibility(jerky, pg, [10.0, 6.0]).slew_ok


class TestOracle:
    def test_series_single_evaluation(self):
        pg = build_physics_graph(SERIES3)
        loads = [7.0, 5.0, 6.0]
        res = brute_force_piecewise_oracle(pg, loads, n_segments=3, n_levels=5)
        assert res.n_total == 1 and res.n_feasible == 1
        traj = simulate(pg, loads, t_max=30.0, dt=1e-3)
        ref = endurance_from_trajectory(pg, traj)
        assert abs(res.endurance - ref) <= 1e-6 * ref

    def test_solver_dominates_oracle(self):
        pg = build_physics_graph(PARALLEL2)
        loads = [10.0, 6.0]
        res = brute_force_piecewise_oracle(pg, loads, n_segments=3, n_levels=5)
        sol = solve(pg, loads, options=OlocOptions(segments=16))
        assert sol.converged
        assert res.endurance <= sol.t_end * 1.01

    def test_symmetric_ties(self):
        res = brute_force_piecewise_oracle(PARALLEL2, [8.0, 8.0], n_segments=2, n_levels=5)
        best = res.endurance
        tied = np.flatnonzero(res.endurances >= best - 1e-6)
        assert tied.size >= 2
        # winner is the first (lowest-index) profile among the ties
        assert res.feasible_indices[tied[0]] == min(res.feasible_indices[tied])
        first = res.profile(int(tied[0]), n_levels=5)
        np.testing.assert_allclose(res.levels, first)

    def test_slew_prunes_profiles(self):
        # 1 s segments cannot absorb a full 0 -> 0.4 swing at 0.05 kg/s^2
        res = brute_force_piecewise_oracle(
            PARALLEL2, [10.0, 6.0], n_segments=3, n_levels=5, horizon=3.0
        )
        assert res.n_feasible < res.n_total

    def test_space_cap(self):
        with pytest.raises(SizeError):
            brute_force_piecewise_oracle(PARALLEL3, [5.0, 5.0, 5.0], n_segments=3, n_levels=11)

    def test_levels_stay_in_flow_box(self):
        res = brute_force_piecewise_oracle(PARALLEL2, [10.0, 6.0], n_segments=2, n_levels=3)
        assert np.all(res.levels >= 0.0)
        assert np.all(res.levels <= build_physics_graph(PARALLEL2).params.pump_flow)
