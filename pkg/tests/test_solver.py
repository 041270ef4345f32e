"""Unit test module for the simplex and calibration solvers."""

import pathlib
import tempfile
import unittest
from unittest import TestCase

import numpy as np
import pandas as pd

from demandforge.config import SolverConfig
from demandforge.errors import DivergenceError
from demandforge.errors import InputError
from demandforge.estimation import estimate_mnl_mle
from demandforge.estimation import generate_hier_mnl_observations
from demandforge.estimation import generate_observations
from demandforge.estimation import simulate_mnl_sample
from demandforge.files import read_scenario
from demandforge.programs import build_first_stage
from demandforge.programs import build_first_stage_variant
from demandforge.programs import build_hier_mnl
from demandforge.programs import build_max_entropy_mnl
from demandforge.programs import build_max_satis_mnl
from demandforge.solver import DIVERGENCE_STREAK
from demandforge.solver import DUAL_BOUND
from demandforge.solver import HISTORY_COLUMNS
from demandforge.solver import DualSolution
from demandforge.solver import _MultiplierCodec
from demandforge.solver import _ResidualTrace
from demandforge.solver import check_kkt
from demandforge.solver import solve_calibration
from demandforge.solver import solve_simplex_program

FIXTURES = pathlib.Path(__file__).parent.joinpath('fixtures')
LOGISTIC_ONE = 0.7310585786300049
LOGISTIC_HALF = 0.6224593312018546


class SimplexSolverTest(TestCase):

    """Will perform a unit test for the mirror ascent solver."""

    def setUp(self) -> None:
        """Set up a two alternative MNL program."""

        self.program = build_max_satis_mnl(utilities=[1.0, 0.0], theta=1.0)

    def test_mnl_shares(self):
        """Utilities one and zero split as the logistic of one."""

        state, _ = solve_simplex_program(program=self.program)

        self.assertTrue(state.converged)
        np.testing.assert_allclose(state.x, [LOGISTIC_ONE, 1.0 - LOGISTIC_ONE], rtol=1e-8)
        self.assertLess(state.kkt_residual, self.program.config.tol_inner)

    def test_history(self):
        """One history row per iteration, the last at the converged residual."""

        state, _ = solve_simplex_program(program=self.program)

        self.assertEqual(list(state.history.columns), HISTORY_COLUMNS)
        self.assertEqual(len(state.history), state.iterations)
        self.assertEqual(state.history['step_size'].iloc[-1], 0.0)

        # The objective never decreases.
        self.assertTrue((state.history['objective'].diff().dropna() >= -1e-10).all())

    def test_iteration_log(self):
        """The log file carries the documented header."""

        with tempfile.TemporaryDirectory() as directory:

            path = pathlib.Path(directory).joinpath('iterations.csv')
            solve_simplex_program(program=self.program, log_path=path)
            log = pd.read_csv(path)

        self.assertEqual(list(log.columns), ['iter', 'objective', 'kkt_residual', 'step_size'])

    def test_iteration_cap(self):
        """Hitting the cap returns the iterate flagged non-converged."""

        state, _ = solve_simplex_program(program=self.program, config=SolverConfig(max_inner_iter=1))

        self.assertFalse(state.converged)
        self.assertEqual(state.iterations, 1)
        self.assertAlmostEqual(state.x.sum(), 1.0)

    def test_bad_start(self):
        """Start points must be positive and of the right length."""

        with self.assertRaises(InputError):
            solve_simplex_program(program=self.program, x0=np.array([1.0, 0.0]))

        with self.assertRaises(InputError):
            solve_simplex_program(program=self.program, x0=np.ones(3))

    def test_warm_start(self):
        """Starting at the optimum converges at once."""

        state, _ = solve_simplex_program(program=self.program)
        warm, _ = solve_simplex_program(program=self.program, x0=state.x)

        self.assertEqual(warm.iterations, 1)

    def tearDown(self) -> None:
        """Teardown the program."""

        self.program = None


class KKTReportTest(TestCase):

    """Will perform a unit test for the first-order checks."""

    def setUp(self) -> None:
        """Set up a solved MNL program."""

        self.program = build_max_satis_mnl(utilities=[1.0, 0.0, -1.0], theta=1.0)
        self.state, _ = solve_simplex_program(program=self.program)

    def test_solution_passes(self):
        """The solved state meets every tolerance."""

        report = check_kkt(program=self.program, solution=self.state)

        self.assertTrue(report.passed())
        self.assertLess(report.max_simplex_residual, 1e-12)
        self.assertEqual(report.max_constraint_residual, 0.0)

    def test_uniform_point_fails(self):
        """Uniform shares are feasible but not stationary."""

        report = check_kkt(program=self.program, solution=np.full(3, 1.0 / 3.0))

        self.assertFalse(report.passed())
        self.assertAlmostEqual(report.gradient_norm, 1.0)

    def test_frame(self):
        """The report frame lists the residuals by name."""

        frame = check_kkt(program=self.program, solution=self.state).to_frame()

        self.assertEqual(list(frame.columns), ['check', 'value'])
        self.assertEqual(list(frame['check']), ['kkt_residual', 'lagrangian_gradient_norm', 'simplex[lambda]'])

    def test_wrong_length(self):
        """A vector of the wrong length is refused."""

        with self.assertRaises(InputError):
            check_kkt(program=self.program, solution=np.ones(2))


class DualSolutionTest(TestCase):

    """Will perform a unit test for the DualSolution object."""

    def test_labels(self):
        """Every parameter gets one label in the flat series."""

        solution = DualSolution.from_parameters(
            parameters={'theta_j': 0.8, 'tau': {'transit': 0.6}, 'beta_k': {'attraction': 0.5}}
        )
        parameters = solution.parameters()

        self.assertEqual(list(parameters.index), ['theta_j', 'tau[transit]', 'beta_k[attraction]'])
        self.assertEqual(solution.warnings, [])

    def test_tau_drift(self):
        """A dissimilarity clearly above one is kept but reported."""

        solution = DualSolution.from_parameters(parameters={'tau': {'transit': 1.01, 'private': 1.0005}})

        self.assertAlmostEqual(solution.tau['transit'], 1.01)
        self.assertEqual(len(solution.warnings), 1)
        self.assertIn('transit', solution.warnings[0])


class ResidualTraceTest(TestCase):

    """Will perform a unit test for the outer residual bookkeeping."""

    def test_divergence(self):
        """Ten consecutive increases above the best norm stop the search."""

        trace = _ResidualTrace(function=lambda z: np.asarray(z, dtype=float))

        with self.assertRaises(DivergenceError) as context:
            for value in range(1, 12):
                trace(np.array([float(value)]))

        self.assertEqual(len(context.exception.trace), 11)
        self.assertEqual(trace.best, 1.0)

    def test_recovery_resets_streak(self):
        """A decrease in between keeps the search going."""

        trace = _ResidualTrace(function=lambda z: np.asarray(z, dtype=float))

        for value in [1.0, 2.0, 3.0, 0.5, 0.6, 0.7]:
            trace(np.array([value]))

        self.assertEqual(trace.streak, 2)
        np.testing.assert_allclose(trace.best_z, [0.5])

    def test_jacobian_columns_not_counted(self):
        """Jacobian columns reuse the last residual and leave the trace alone."""

        trace = _ResidualTrace(function=lambda z: 2.0 * np.asarray(z, dtype=float))
        z = np.array([1.0, -3.0])

        trace(z)
        jacobian = trace.jacobian(z)

        self.assertEqual(len(trace.norms), 1)
        np.testing.assert_allclose(jacobian, 2.0 * np.eye(2), rtol=1e-6)

        for _ in range(DIVERGENCE_STREAK + 2):
            trace.jacobian(z + 100.0)

        self.assertEqual(trace.streak, 0)

    def test_codec_bounds(self):
        """Positive multipliers live in log space and are clipped on decoding."""

        codec = _MultiplierCodec(names=['inv_theta_j', 'beta_k[size]'], positive={'inv_theta_j'})

        np.testing.assert_allclose(codec.encode({'inv_theta_j': 1.0, 'beta_k[size]': -2.0}), [0.0, -2.0])

        decoded = codec.decode(np.array([50.0, 50.0]))
        self.assertAlmostEqual(decoded['inv_theta_j'], np.exp(DUAL_BOUND))
        self.assertAlmostEqual(decoded['beta_k[size]'], 50.0)


class CalibrationTest(TestCase):

    """Will perform a unit test for the calibration solver."""

    def setUp(self) -> None:
        """Set up the flat scenario and its observations."""

        self.scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))
        self.bundle = generate_observations(scenario=self.scenario)

    def test_first_stage_recovers_parameters(self):
        """Calibrating on exact observations gives back the generating parameters."""

        program = build_first_stage(
            network=self.scenario.network,
            route_set=self.scenario.routes(),
            bundle=self.bundle,
            tree=self.scenario.tree,
            theta_r=self.scenario.tree.theta_r
        )
        state, duals = solve_calibration(program=program)

        self.assertTrue(state.converged)
        self.assertAlmostEqual(duals.theta_j, 0.8, places=4)
        self.assertAlmostEqual(duals.theta_m, 1.2, places=4)
        self.assertAlmostEqual(duals.tau['transit'], 0.6, places=4)
        self.assertAlmostEqual(duals.tau['private'], 1.0, places=4)
        self.assertAlmostEqual(duals.beta_k['attraction'], 0.5, places=4)
        self.assertAlmostEqual(duals.beta_q['comfort'], 0.7, places=4)

        # Constraints are reported, and the outer search is traced.
        report = check_kkt(program=program, solution=state)
        self.assertTrue(report.passed(outer_tol=1e-6))
        self.assertEqual(list(state.outer_history.columns), ['evaluation', 'residual_norm'])

    def test_nothing_to_calibrate(self):
        """With every multiplier fixed the solve is a single forecast."""

        scenario = read_scenario(path=FIXTURES.joinpath('two_route.scenario'))
        program = build_first_stage(
            network=scenario.network,
            route_set=scenario.routes(),
            bundle=generate_observations(scenario=scenario),
            tree=scenario.tree,
            theta_r=1.0
        )
        state, duals = solve_calibration(program=program)

        self.assertTrue(state.converged)
        self.assertEqual(duals.theta_j, 1.0)
        np.testing.assert_allclose(
            state.probabilities['route'].to_numpy(),
            [0.6224593312018546, 0.3775406687981454],
            rtol=1e-7
        )

    def test_hier_mnl(self):
        """With the mode scale anchored the destination scale and tastes are recovered."""

        spec = self.scenario.utility_spec
        bundle = generate_hier_mnl_observations(
            origins=self.scenario.origins,
            dest_attributes=spec.dest_attributes,
            mode_attributes=spec.mode_attributes,
            beta_k=spec.beta_k,
            beta_q=spec.beta_q,
            theta_j=0.8,
            theta_m=1.2
        )
        program = build_hier_mnl(bundle=bundle, inv_theta_m=1.0 / 1.2)
        _, duals = solve_calibration(program=program)

        self.assertNotIn('inv_theta_m', program.free_duals)
        self.assertAlmostEqual(duals.theta_j, 0.8, places=4)
        self.assertAlmostEqual(duals.beta_k['attraction'], 0.5, places=4)
        self.assertAlmostEqual(duals.beta_q['comfort'], 0.7, places=4)

    def test_hier_mnl_random_bundles(self):
        """Ten seeded parameter draws are each recovered from their own bundle."""

        spec = self.scenario.utility_spec
        rng = np.random.default_rng(seed=23)

        for trial in range(10):

            theta_j, theta_m = rng.uniform(0.5, 1.5), rng.uniform(0.8, 2.0)
            beta_k = {'attraction': float(rng.uniform(0.2, 1.0))}
            beta_q = {'comfort': float(rng.uniform(0.2, 1.0))}

            bundle = generate_hier_mnl_observations(
                origins=self.scenario.origins,
                dest_attributes=spec.dest_attributes,
                mode_attributes=spec.mode_attributes,
                beta_k=beta_k,
                beta_q=beta_q,
                theta_j=float(theta_j),
                theta_m=float(theta_m)
            )
            state, duals = solve_calibration(program=build_hier_mnl(bundle=bundle, inv_theta_m=1.0 / theta_m))

            with self.subTest(trial=trial):
                self.assertTrue(state.converged)
                self.assertAlmostEqual(duals.theta_j, theta_j, delta=1e-3)
                self.assertAlmostEqual(duals.beta_k['attraction'], beta_k['attraction'], delta=1e-3)
                self.assertAlmostEqual(duals.beta_q['comfort'], beta_q['comfort'], delta=1e-3)

    def test_max_entropy_is_maximum_likelihood(self):
        """The MaxEntropy multipliers are the MNL maximum-likelihood estimates."""

        choices, attributes = simulate_mnl_sample(n=400, beta=[1.0, -0.5], asc=[0.3, -0.2, 0.0], seed=3)
        estimates = estimate_mnl_mle(choices=choices, attributes=attributes)
        program = build_max_entropy_mnl(choices=choices, attributes=attributes)

        state, duals = solve_calibration(program=program)

        self.assertTrue(state.converged)
        np.testing.assert_allclose([duals.beta_k['0'], duals.beta_k['1']], estimates.beta, atol=1e-4)
        np.testing.assert_allclose([duals.asc['0'], duals.asc['1'], duals.asc['2']], estimates.asc, atol=1e-4)

    def test_collinear_multipliers_fixed(self):
        """One origin and two destinations cannot separate the destination scale from its taste."""

        scenario = read_scenario(path=FIXTURES.joinpath('congested.scenario'))
        program = build_first_stage(
            network=scenario.network,
            route_set=scenario.routes(),
            bundle=generate_observations(scenario=scenario),
            tree=scenario.tree,
            theta_r=scenario.tree.theta_r
        )
        state, _ = solve_calibration(program=program)

        self.assertTrue(set(program.fixed) & {'inv_theta_j', 'beta_k[attraction]'})
        self.assertTrue(any('collinear' in warning for warning in program.warnings))
        self.assertTrue(state.converged)

    def test_calibration_state_needed(self):
        """A calibration program cannot be checked from a bare vector."""

        program = build_first_stage(
            network=self.scenario.network,
            route_set=self.scenario.routes(),
            bundle=self.bundle,
            tree=self.scenario.tree,
            theta_r=2.0
        )

        with self.assertRaises(InputError):
            check_kkt(program=program, solution=np.ones(3))


class FlowPenaltyTest(TestCase):

    """Will perform a unit test for the link count penalty solved through its dual."""

    def setUp(self) -> None:
        """Set up the two route pair with counts its route split cannot match."""

        self.scenario = read_scenario(path=FIXTURES.joinpath('two_route.scenario'))
        self.bundle = generate_observations(scenario=self.scenario)
        self.counts = pd.Series(
            [8.0, 2.0, 2.0],
            index=pd.MultiIndex.from_tuples(
                [('car', 'a', 'b'), ('car', 'a', 'm'), ('car', 'm', 'b')],
                names=['mode', 'tail', 'head']
            ),
            name='flow'
        )

    def solve(self, sigma: float):

        program = build_first_stage_variant(
            network=self.scenario.network,
            route_set=self.scenario.routes(),
            bundle=self.bundle,
            tree=self.scenario.tree,
            theta_r=1.0,
            sigma=sigma,
            observed_flows=self.counts
        )
        state, _ = solve_calibration(program=program)
        flows = state.link_flows.series.reindex(self.counts.index)

        return state, float((flows - self.counts).abs().sum())

    def test_gap_shrinks_with_sigma(self):
        """The count gap is nonincreasing over sigma in 0, 1, 10 and 100."""

        gaps = []

        for sigma in [0.0, 1.0, 10.0, 100.0]:
            state, gap = self.solve(sigma=sigma)
            self.assertTrue(state.converged)
            gaps.append(gap)

        # Unpenalized, the logit split of 10 trips on costs 2 and 2.5.
        self.assertAlmostEqual(gaps[0], 3.0 * (8.0 - 10.0 * LOGISTIC_HALF), places=6)

        for before, after in zip(gaps[:-1], gaps[1:]):
            self.assertLessEqual(after, before + 1e-9)

        # A large weight pins the flows to the counts within the Huber width.
        self.assertLess(gaps[-1], 3.0 * SolverConfig().huber_width)

    def test_tolls_within_bounds(self):
        """Every toll of the dual stays in [-sigma, sigma] and unpenalized states carry none."""

        state, _ = self.solve(sigma=1.0)

        self.assertEqual(state.tolls.shape, (self.scenario.network.n_links,))
        self.assertLessEqual(np.abs(state.tolls).max(), 1.0 + 1e-12)
        self.assertEqual(state.program.sigma, 1.0)

        plain, _ = self.solve(sigma=0.0)
        self.assertIsNone(plain.tolls)

    def test_zero_sigma_is_first_stage(self):
        """With sigma = 0 the variant is FirstStage, bit for bit."""

        scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))
        bundle = generate_observations(scenario=scenario)
        arguments = {
            'network': scenario.network,
            'route_set': scenario.routes(),
            'bundle': bundle,
            'tree': scenario.tree,
            'theta_r': scenario.tree.theta_r
        }

        plain_state, plain_duals = solve_calibration(program=build_first_stage(**arguments))
        variant_state, variant_duals = solve_calibration(program=build_first_stage_variant(sigma=0.0, **arguments))

        np.testing.assert_array_equal(variant_state.x, plain_state.x)
        self.assertEqual(variant_duals.theta_j, plain_duals.theta_j)
        self.assertEqual(variant_duals.tau, plain_duals.tau)


if __name__ == '__main__':
    unittest.main()
