# =================================================================
# convex/tests/test_control.py - Cost, solvers, adapters and the closed loop
# =================================================================

import numpy as np

from convex.control import (
    CostSpec, IcnnAdapter, IcrnnAdapter, ModelAdapter, MpcController, MpcProblem, OracleAdapter, SetpointController,
    SolverConfig, Trajectory, ZeroController, adapter_for, adapter_rmse, constraint_effect_study, cost_for_plant,
    evaluate_sequences, fit_linear_models, fit_window_model, lattice_oracle, mpc_solve, random_shooting,
    rc_mpc_baseline, receding_horizon_run, savings, single_shot_minimize, stage_costs, trajectory_metrics,
)
from convex.exceptions import DimensionMismatch, InfeasibleProblem, InvalidParameter, SingularRegression
from convex.icnn import TrainingConfig, init_icnn
from convex.icrnn import init_icrnn
from convex.numeric import finite_difference_gradient, relative_error, seeded_stream
from convex.plants import BatteryPlant, PointMassPlant, PriceSignal, RcThermalParams, RcThermalPlant
from convex.sysid import FrameLayout, collect_random_rollouts, make_windows, simulate, split

from .base import ConvexTestCase, abs_model


def small_building():
    return RcThermalPlant(RcThermalParams(months=1, days_per_month=1))


def battery_problem(horizon=3, **kwargs):
    plant = BatteryPlant()
    layout = FrameLayout.for_plant(plant)
    return MpcProblem(
        OracleAdapter(plant, 'output'), OracleAdapter(plant, 'state'),
        CostSpec.quadratic(q=1.0, reference=0.8), horizon, layout,
        plant.action_low, plant.action_high, [0.5], **kwargs,
    )


FAST = SolverConfig(max_iters=300, restarts=2, lr=0.01, lr_decay_steps=100)


# EXPLANATION: Test minimizing one ICNN over a box
class SingleShotTestCase(ConvexTestCase):

    def test_abs_minimum_is_zero(self):
        u, value = single_shot_minimize(abs_model(), [-1.0], [1.0], FAST)
        self.assertAlmostEqual(value, 0.0, delta=1e-9)
        self.assertAlmostEqual(u[0], 0.0, delta=1e-6)

    def test_minimum_on_the_box_edge(self):
        u, value = single_shot_minimize(abs_model(), [0.5], [2.0], FAST)
        self.assertAlmostEqual(u[0], 0.5, delta=1e-9)
        self.assertAlmostEqual(value, 0.5, delta=1e-9)

    def test_empty_box(self):
        with self.assertRaises(InfeasibleProblem):
            single_shot_minimize(abs_model(), [1.0], [0.0])


# EXPLANATION: Test the finite-horizon problem and its solvers
class MpcSolveTestCase(ConvexTestCase):

    def test_battery_tracking_matches_lattice(self):
        """EXPLANATION: Charging at full power every step is optimal; the grid contains it"""
        problem = battery_problem()
        solution = mpc_solve(problem, FAST)
        oracle = lattice_oracle(problem, 0.05)
        self.assertAllClose(oracle.actions[:, 0], [0.2, 0.2, 0.2], atol=1e-12)
        self.assertAlmostEqual(oracle.objective, 0.05, delta=1e-12)
        self.assertLessEqual(solution.objective, oracle.objective + 1e-6)
        self.assertAllClose(solution.predicted_states[:, 0], [0.6, 0.7, 0.8], atol=1e-3)

    def test_sequence_gradient_matches_finite_differences(self):
        plant = small_building()
        layout = FrameLayout.for_plant(plant)
        rng = seeded_stream(3, 0)
        f = init_icrnn(layout.monotone_dim, layout.action_dim, 6, 1, window=2, rng=rng)
        g = init_icrnn(layout.monotone_dim, layout.action_dim, 6, 4, window=2, rng=rng)
        f.b_h[:] = rng.gaussian(0, 0.5, 6)
        g.b_h[:] = rng.gaussian(0, 0.5, 6)
        cost = CostSpec('mixed', output_weight=1.0, state_quadratic=0.1, state_reference=20.0)
        problem = MpcProblem(
            IcrnnAdapter(f, layout), IcrnnAdapter(g, layout), cost, 4, layout,
            plant.action_low, plant.action_high, np.full(4, 0.2),
            history=rng.uniform(0, 0.3, (2, layout.frame_dim)), exogenous=np.full((4, 1), 0.1),
        )
        actions = rng.uniform(0, 1, (1, 4, 4))
        _, _, grad, _, _ = evaluate_sequences(problem, actions)
        fd = finite_difference_gradient(
            lambda a: float(evaluate_sequences(problem, a[None], need_grad=False)[1][0]), actions[0]
        )
        self.assertLess(relative_error(grad[0], fd, floor=1e-6), 1e-4)

    def test_icnn_delta_adapter_gradient(self):
        plant = BatteryPlant()
        layout = FrameLayout.for_plant(plant)
        rng = seeded_stream(4, 0)
        f = init_icnn(1, [5], 1, 1, rng)
        g = init_icnn(1, [5], 1, 1, rng)
        f.biases[0][:] = rng.gaussian(0, 0.5, 5)
        g.biases[0][:] = rng.gaussian(0, 0.5, 5)
        problem = MpcProblem(
            IcnnAdapter(f, layout), IcnnAdapter(g, layout, delta=True), CostSpec.quadratic(reference=0.8), 3,
            layout, plant.action_low, plant.action_high, [0.4],
        )
        actions = rng.uniform(-0.2, 0.2, (1, 3, 1))
        _, _, grad, _, states = evaluate_sequences(problem, actions)
        fd = finite_difference_gradient(
            lambda a: float(evaluate_sequences(problem, a[None], need_grad=False)[1][0]), actions[0]
        )
        self.assertLess(relative_error(grad[0], fd, floor=1e-6), 1e-4)
        step, _ = IcnnAdapter(g, layout).evaluate(np.array([[[0.4, actions[0, 0, 0]]]]))
        self.assertAlmostEqual(states[0, 0, 0], 0.4 + step[0, 0], delta=1e-12)

    def test_state_band_is_enforced_by_penalty(self):
        problem = battery_problem(state_high=[0.65])
        solution = mpc_solve(problem, SolverConfig(max_iters=500, restarts=1, lr=0.01, lr_decay_steps=100))
        self.assertLess(solution.violation, 0.01)
        self.assertEqual(solution.flagged, solution.violation > 1e-3)
        self.assertGreater(solution.penalized_objective, solution.objective - 1e-12)

    def test_unreachable_band_is_flagged(self):
        problem = battery_problem(horizon=1, state_low=[0.9])
        with self.assertLogs('convex.control', 'WARNING'):
            solution = mpc_solve(problem, FAST)
        self.assertTrue(solution.flagged)
        self.assertAlmostEqual(solution.violation, 0.3, delta=1e-6)

    def test_warm_start_is_never_worse(self):
        problem = battery_problem()
        warm = np.full((3, 1), 0.2)
        solution = mpc_solve(problem, SolverConfig(max_iters=0, restarts=1), warm_start=warm)
        self.assertAlmostEqual(solution.objective, 0.05, delta=1e-12)

    def test_shooting_is_seeded(self):
        problem = battery_problem()
        a = random_shooting(problem, 20, seed=1)
        b = random_shooting(problem, 20, seed=1)
        self.assertTrue(np.array_equal(a.actions, b.actions))
        self.assertTrue(np.all(np.abs(a.actions) <= 0.2))
        with self.assertRaises(InvalidParameter):
            random_shooting(problem, 0)

    def test_lattice_size_limit(self):
        with self.assertRaises(InvalidParameter):
            lattice_oracle(battery_problem(horizon=5), 0.001)

    def test_problem_validation(self):
        with self.assertRaises(InvalidParameter):
            battery_problem(horizon=0)
        plant = BatteryPlant()
        layout = FrameLayout.for_plant(plant)
        oracle = OracleAdapter(plant, 'state')
        with self.assertRaises(InfeasibleProblem):
            MpcProblem(oracle, oracle, CostSpec.energy(), 2, layout, [0.1], [-0.1], [0.5])
        with self.assertRaises(InfeasibleProblem):
            battery_problem(state_low=[0.7], state_high=[0.6])
        with self.assertRaises(DimensionMismatch):
            icrnn = IcrnnAdapter(init_icrnn(1, 1, 3, window=2), layout)
            MpcProblem(icrnn, oracle, CostSpec.energy(), 2, layout, [-0.1], [0.1], [0.5])


# EXPLANATION: Test objectives and their structural audit
class CostTestCase(ConvexTestCase):

    def test_objectives_per_plant(self):
        self.assertEqual(cost_for_plant(PointMassPlant(), 'reward').kind, 'reward')
        self.assertEqual(cost_for_plant(BatteryPlant(), 'energy').kind, 'energy')
        with self.assertRaises(InvalidParameter):
            cost_for_plant(small_building(), 'reward')
        with self.assertRaises(InvalidParameter):
            cost_for_plant(PointMassPlant(), 'energy')
        with self.assertRaises(InvalidParameter):
            cost_for_plant(BatteryPlant(), 'comfort')

    def test_battery_tou_prices_the_charging_power(self):
        cost = cost_for_plant(BatteryPlant(), 'tou', PriceSignal(steps_per_day=24))
        terms = cost.terms(np.array([16, 18]), 1, 1, 1)
        self.assertAllClose(terms.action_price[:, 0], [0.1, 0.3])

    def test_tou_weights_follow_the_clock(self):
        cost = CostSpec.tou(PriceSignal(steps_per_day=24))
        terms = cost.terms(np.array([0, 17, 21]), 1, 4, 4)
        self.assertAllClose(terms.output_weights[:, 0], [0.1, 0.3, 0.1])

    def test_reward_cost_negates_the_reward(self):
        plant = PointMassPlant()
        cost = cost_for_plant(plant, 'reward')
        s, u = np.array([0.0, 0.0, 0.2, 0.0]), np.array([0.5, 0.5])
        s_next = plant.state_map(s, np.zeros(0), u)
        terms = cost.terms(np.array([0]), 1, 2, 4)
        value, *_ = terms.value_and_grads(np.zeros((1, 1, 1)), u[None, None], s_next[None, None])
        self.assertAlmostEqual(value[0], -plant.reward(s, u, s_next), delta=1e-15)

    def test_structural_check(self):
        self.assertTrue(CostSpec.energy().structural_check()['convex'])
        quadratic = CostSpec.quadratic(reference=21.0).structural_check()
        self.assertFalse(quadratic['monotone_in_state'])
        self.assertFalse(quadratic['convex'])
        self.assertTrue(CostSpec.quadratic(reference=21.0).structural_check(state_model_affine=True)['convex'])
        reward = CostSpec.reward(4, 2).structural_check()
        self.assertFalse(reward['monotone_in_state'])

    def test_savings(self):
        self.assertAlmostEqual(savings(100.0, 80.0), 20.0, delta=1e-12)
        self.assertEqual(savings(0.0, 5.0), 0.0)


# EXPLANATION: Test fitted models and their adapters
class AdapterTestCase(ConvexTestCase):

    def setUp(self):
        super().setUp()
        self.plant = small_building()
        self.rollouts = collect_random_rollouts(self.plant, 2, 40, seed=0)

    def test_linear_fit_recovers_linear_dynamics(self):
        fit = fit_linear_models(self.rollouts)
        self.assertLess(fit.state_rmse, 1e-8)
        self.assertGreater(fit.output_rmse, 0.0)

    def test_linear_fit_rejects_constant_actions(self):
        plant = BatteryPlant()
        rollout = simulate(plant, lambda *args: np.zeros(1), 10, [0.5])
        with self.assertRaises(SingularRegression):
            fit_linear_models([rollout])

    def test_window_model_carries_normalization(self):
        windows = make_windows(self.rollouts, 2)
        config = TrainingConfig(widths=(4,), epochs=2, batch_size=32)
        model, history = fit_window_model(windows, 'icnn', 'state', delta=True, config=config)
        self.assertEqual(len(history), 2)
        self.assertIsNotNone(model.normalization)
        adapter = adapter_for(model, windows.layout, delta=True)
        predicted, _ = adapter.evaluate(windows.inputs)
        self.assertEqual(predicted.shape, (len(windows), 4))
        self.assertTrue(np.isfinite(adapter_rmse(adapter, windows, 'state')))

    def test_unknown_model_kind(self):
        with self.assertRaises(InvalidParameter):
            fit_window_model(make_windows(self.rollouts, 1), 'lstm')
        with self.assertRaises(InvalidParameter):
            adapter_for(object(), FrameLayout.for_plant(self.plant))

    def test_mismatched_adapter(self):
        with self.assertRaises(DimensionMismatch):
            IcrnnAdapter(init_icrnn(1, 4, 3), FrameLayout.for_plant(self.plant))

    def test_adapter_interface_is_abstract(self):
        with self.assertRaises(TypeError):
            ModelAdapter()

        class OutputOnly(ModelAdapter):
            def evaluate(self, windows):
                return windows, None

        with self.assertRaises(TypeError):
            OutputOnly()


# EXPLANATION: Test controllers in closed loop on the true plants
class ClosedLoopTestCase(ConvexTestCase):

    def test_zero_episode_is_empty(self):
        plant = BatteryPlant()
        trajectory = receding_horizon_run(plant, ZeroController(plant), 0, [0.5])
        self.assertEqual(trajectory.rollout.horizon, 0)
        self.assertEqual(len(trajectory.to_frame(CostSpec.energy())), 0)
        self.assertEqual(trajectory_metrics(trajectory, CostSpec.energy())['total_cost'], 0.0)

    def test_initial_state_shape(self):
        plant = BatteryPlant()
        with self.assertRaises(DimensionMismatch):
            receding_horizon_run(plant, ZeroController(plant), 3, [0.5, 0.5])

    def test_setpoint_controller_holds_the_setpoint(self):
        plant = small_building()
        trajectory = receding_horizon_run(plant, SetpointController(plant), 10, np.full(4, 22.0), start=72)
        self.assertAllClose(trajectory.rollout.states, np.full((11, 4), 22.0), atol=1e-9)
        with self.assertRaises(InvalidParameter):
            SetpointController(BatteryPlant())

    def test_mpc_controller_on_the_battery(self):
        plant = BatteryPlant()
        controller = MpcController(
            plant, OracleAdapter(plant, 'output'), OracleAdapter(plant, 'state'),
            CostSpec.quadratic(reference=0.8), 3, FAST,
        )
        trajectory = receding_horizon_run(plant, controller, 4, [0.5])
        self.assertAllClose(trajectory.rollout.states[:4, 0], [0.5, 0.6, 0.7, 0.8], atol=2e-3)
        frame = trajectory.to_frame(CostSpec.quadratic(reference=0.8))
        self.assertEqual(list(frame.columns), ['t', 's0', 'u0', 'y0', 'cost', 'objective', 'iterations', 'violation'])
        self.assertAllClose(frame['cost'], stage_costs(trajectory, CostSpec.quadratic(reference=0.8)))

    def test_clipped_charge_is_counted_in_metrics(self):
        """EXPLANATION: Full charging from 0.95 overshoots 1.0 on every step"""
        plant = BatteryPlant()

        def full_charge(step, t, state, frames):
            return plant.action_high

        with self.assertLogs('convex.plants', 'WARNING'):
            trajectory = receding_horizon_run(plant, full_charge, 3, [0.95])
        self.assertEqual(trajectory.clip_events, 3)
        self.assertEqual(trajectory_metrics(trajectory)['clip_events'], 3)
        idle = receding_horizon_run(plant, ZeroController(plant), 3, [0.5])
        self.assertEqual(trajectory_metrics(idle)['clip_events'], 0)

    def test_history_is_padded_with_resting_frames(self):
        plant = small_building()
        layout = FrameLayout.for_plant(plant)
        f = IcrnnAdapter(init_icrnn(5, 4, 3, window=2), layout)
        controller = MpcController(plant, f, OracleAdapter(plant, 'state'), CostSpec.energy(), 2, FAST)
        history = controller.history(5, np.full(4, 21.0), np.zeros((0, layout.frame_dim)))
        self.assertEqual(history.shape, (2, 9))
        self.assertAllClose(history[:, :4], np.full((2, 4), 21.0))
        self.assertAllClose(history[:, 4], plant.exogenous(np.array([3, 4]))[:, 0])
        self.assertAllClose(history[:, 5:], np.zeros((2, 4)))

    def test_band_and_peak_metrics(self):
        plant = small_building()
        trajectory = receding_horizon_run(plant, ZeroController(plant), 24, np.full(4, 22.0), start=100)
        metrics = trajectory_metrics(trajectory, CostSpec.energy(), PriceSignal(), band=(21.0, 24.0))
        self.assertEqual(metrics['steps'], 24)
        self.assertGreater(metrics['band_violation_steps'], 0)
        self.assertAlmostEqual(metrics['energy'], 24 * 0.5, delta=1e-9)
        self.assertAlmostEqual(metrics['peak_energy'], 22 * 0.5, delta=1e-9)

    def test_constraint_study_rows(self):
        plant = small_building()
        rows = constraint_effect_study(
            plant, lambda band: ZeroController(plant), [None, (19.0, 24.0)], 5, np.full(4, 22.0), 0, PriceSignal(),
        )
        self.assertEqual([row['band'] for row in rows], ['none', '19-24'])
        self.assertIn('max_band_violation', rows[1])
        self.assertNotIn('max_band_violation', rows[0])

    def test_linear_baseline_runs(self):
        plant = small_building()
        train, test = split(collect_random_rollouts(plant, 3, 30, seed=1), 0.67)
        result = rc_mpc_baseline(
            plant, train, test, CostSpec.energy(), 2, 2, np.full(4, 22.0),
            config=SolverConfig(max_iters=50, restarts=1),
        )
        self.assertLess(result['test_state_rmse'], 1e-8)
        self.assertEqual(result['metrics']['steps'], 2)
        self.assertIsInstance(result['trajectory'], Trajectory)
