"""Unit test module for the equilibrium oracle and the synthetic harness.

The oracle is checked on an uncongested network, where it is exact after
one averaging step, and on a congested corridor, where the convex forecast
program must land on the same fixed point.
"""

import pathlib
import unittest
from unittest import TestCase

import numpy as np

from demandforge.choice import assemble_trips
from demandforge.choice import hier_extended_prob
from demandforge.config import SolverConfig
from demandforge.errors import InputError
from demandforge.estimation import calibrated_model
from demandforge.estimation import compare_parameters
from demandforge.estimation import estimate_mnl_mle
from demandforge.estimation import fixed_point_oracle
from demandforge.estimation import forecast
from demandforge.estimation import generate_observations
from demandforge.estimation import log_likelihood_mnl
from demandforge.estimation import mode_totals
from demandforge.estimation import perturb_observations
from demandforge.estimation import recover_and_compare
from demandforge.estimation import simulate_mnl_sample
from demandforge.files import read_scenario
from demandforge.solver import DualSolution

FIXTURES = pathlib.Path(__file__).parent.joinpath('fixtures')


def oracle(scenario, config=None):

    return fixed_point_oracle(
        network=scenario.network,
        route_set=scenario.routes(),
        utility_spec=scenario.utility_spec,
        tree=scenario.tree,
        origins=scenario.origins,
        config=config
    )


class FixedPointOracleTest(TestCase):

    """Will perform a unit test for the successive averages oracle."""

    def setUp(self) -> None:
        """Set up the flat and congested scenarios."""

        self.flat = read_scenario(path=FIXTURES.joinpath('flat.scenario'))
        self.congested = read_scenario(path=FIXTURES.joinpath('congested.scenario'))

    def test_flat_network(self):
        """Without congestion a single averaging step is exact."""

        equilibrium = oracle(self.flat)

        self.assertTrue(equilibrium.converged)
        self.assertEqual(equilibrium.iterations, 1)
        self.assertAlmostEqual(equilibrium.link_flows.total(), 180.0, places=8)

    def test_congested_fixed_point(self):
        """Repricing the routes at the equilibrium flows loads the same flows."""

        equilibrium = oracle(self.congested)

        self.assertTrue(equilibrium.converged)
        self.assertGreater(equilibrium.iterations, 1)

        probabilities = hier_extended_prob(
            utility_spec=self.congested.utility_spec,
            tree=self.congested.tree,
            route_set=self.congested.routes(),
            flows=equilibrium.link_flows.values
        )
        reloaded = assemble_trips(
            origins=self.congested.origins,
            probabilities=probabilities,
            route_set=self.congested.routes()
        )

        np.testing.assert_allclose(reloaded.link_flows.values, equilibrium.link_flows.values, rtol=1e-8, atol=1e-8)

    def test_iteration_cap(self):
        """Stopping early is reported, not raised."""

        equilibrium = oracle(self.congested, config=SolverConfig(max_fixed_point_iter=2))

        self.assertFalse(equilibrium.converged)
        self.assertEqual(list(equilibrium.history.columns), ['iter', 'residual'])

    def test_foreign_route_set(self):
        """Routes built on another network object are refused."""

        other = read_scenario(path=FIXTURES.joinpath('flat.scenario'))

        with self.assertRaises(InputError):
            fixed_point_oracle(
                network=self.flat.network,
                route_set=other.routes(),
                utility_spec=self.flat.utility_spec,
                tree=self.flat.tree,
                origins=self.flat.origins
            )


class ObservationsTest(TestCase):

    """Will perform a unit test for generating and perturbing observations."""

    def setUp(self) -> None:
        """Set up observations of the flat scenario."""

        self.scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))
        self.bundle = generate_observations(scenario=self.scenario)

    def test_bundle(self):
        """Generated trips are consistent and carry the link counts."""

        self.bundle.validate(tree=self.scenario.tree)

        self.assertIsNotNone(self.bundle.link_counts)
        self.assertAlmostEqual(self.bundle.trips_ij.sum(), 180.0)
        self.assertAlmostEqual(self.bundle.link_counts.sum(), 180.0)

    def test_perturb_is_seeded(self):
        """The same seed gives the same bundle, another seed another one."""

        first = perturb_observations(bundle=self.bundle, noise=0.05, seed=7, tree=self.scenario.tree)
        second = perturb_observations(bundle=self.bundle, noise=0.05, seed=7, tree=self.scenario.tree)
        third = perturb_observations(bundle=self.bundle, noise=0.05, seed=8, tree=self.scenario.tree)

        np.testing.assert_array_equal(first.trips_ijm.to_numpy(), second.trips_ijm.to_numpy())
        self.assertFalse(np.allclose(first.trips_ijm.to_numpy(), third.trips_ijm.to_numpy()))

    def test_perturb_keeps_hierarchy(self):
        """Perturbed cells are summed upward, so every hierarchy sum holds."""

        perturbed = perturb_observations(bundle=self.bundle, noise=0.1, seed=1, tree=self.scenario.tree)

        perturbed.validate(tree=self.scenario.tree)
        ratio = perturbed.trips_ijm / self.bundle.trips_ijm
        self.assertTrue(((ratio >= 0.9) & (ratio <= 1.1)).all())

    def test_bad_noise(self):
        """Noise must lie in [0, 1)."""

        with self.assertRaises(InputError):
            perturb_observations(bundle=self.bundle, noise=1.0, tree=self.scenario.tree)


class LikelihoodTest(TestCase):

    """Will perform a unit test for the MNL maximum-likelihood helpers."""

    def setUp(self) -> None:
        """Set up a seeded sample."""

        self.beta = np.array([1.0, -0.5])
        self.asc = np.array([0.3, -0.2, 0.0])
        self.choices, self.attributes = simulate_mnl_sample(n=2000, beta=self.beta, asc=self.asc, seed=11)

    def test_sample(self):
        """Choices are one-hot and the sample repeats with its seed."""

        choices, attributes = simulate_mnl_sample(n=2000, beta=self.beta, asc=self.asc, seed=11)

        np.testing.assert_array_equal(self.choices.sum(axis=1), 1.0)
        np.testing.assert_array_equal(choices, self.choices)
        np.testing.assert_array_equal(attributes, self.attributes)

    def test_estimates(self):
        """The estimates sit near the truth and beat it in likelihood."""

        results = estimate_mnl_mle(choices=self.choices, attributes=self.attributes)

        self.assertTrue(results.converged)
        self.assertLess(results.gradient_norm, 1e-5)
        self.assertEqual(results.asc[-1], 0.0)
        np.testing.assert_allclose(results.beta, self.beta, atol=0.2)

        at_truth = log_likelihood_mnl(choices=self.choices, attributes=self.attributes, beta=self.beta, asc=self.asc)
        self.assertGreaterEqual(results.log_likelihood, at_truth)


class RecoveryTest(TestCase):

    """Will perform a unit test for calibrating on generated data."""

    def setUp(self) -> None:
        """Set up the flat scenario."""

        self.scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))

    def test_recover(self):
        """Exact observations give back every generating parameter."""

        report = recover_and_compare(scenario=self.scenario)

        self.assertTrue(report.state.converged)
        self.assertLess(report.max_error, 1e-4)
        self.assertEqual(list(report.frame.columns), ['truth', 'estimate', 'relative_error'])
        self.assertIn('tau[transit]', report.frame.index)

    def test_recover_with_counts(self):
        """The flow penalty is inactive at exact counts."""

        report = recover_and_compare(scenario=self.scenario, sigma=1.0)

        self.assertLess(report.max_error, 1e-4)

    def test_recover_congested(self):
        """Calibrating on a congested hub network gives back the generating parameters."""

        scenario = read_scenario(path=FIXTURES.joinpath('congested_grid.scenario'))
        report = recover_and_compare(scenario=scenario)

        self.assertTrue(report.state.converged)
        self.assertLess(report.max_error, 1e-2)
        self.assertTrue((report.state.link_flows.values > 0).all())

    def test_noisy_counts(self):
        """With counts that disagree with the trips, the penalty pulls the flows toward them."""

        plain = recover_and_compare(scenario=self.scenario, noise=0.05, seed=1)
        penalized = recover_and_compare(scenario=self.scenario, noise=0.05, seed=1, sigma=1.0)

        def count_gap(report):
            flows = report.state.link_flows.series
            return float((flows - report.bundle.link_counts.reindex(flows.index)).abs().sum())

        self.assertTrue(penalized.state.converged)
        self.assertGreater(count_gap(plain), 0.0)
        self.assertLessEqual(count_gap(penalized), count_gap(plain))

    def test_compare_parameters(self):
        """Relative where the truth is nonzero, absolute where it is zero."""

        truth = self.scenario.parameters().copy()
        truth['beta_k[attraction]'] = 0.0
        estimate = truth.copy()
        estimate['theta_j'] = truth['theta_j'] * 1.1
        estimate['beta_k[attraction]'] = 0.05

        errors = compare_parameters(truth=truth, estimate=estimate)

        self.assertAlmostEqual(errors['theta_j'], 0.1)
        self.assertAlmostEqual(errors['beta_k[attraction]'], 0.05)


class ForecastTest(TestCase):

    """Will perform a unit test for forecasting with calibrated parameters."""

    def setUp(self) -> None:
        """Set up the congested scenario."""

        self.scenario = read_scenario(path=FIXTURES.joinpath('congested.scenario'))

    def test_forecast_matches_oracle(self):
        """The convex forecast and the averaging oracle reach the same equilibrium."""

        state, _ = forecast(
            network=self.scenario.network,
            route_set=self.scenario.routes(),
            origins=self.scenario.origins,
            utility_spec=self.scenario.utility_spec,
            tree=self.scenario.tree
        )
        equilibrium = oracle(self.scenario)

        self.assertTrue(state.converged)
        np.testing.assert_allclose(state.link_flows.values, equilibrium.link_flows.values, rtol=1e-5, atol=1e-6)

        destination = state.probabilities['destination'].reindex(equilibrium.probabilities.destination.index)
        np.testing.assert_allclose(destination.to_numpy(), equilibrium.probabilities.destination.to_numpy(), rtol=1e-6)

        # Every produced trip is assigned a mode.
        self.assertAlmostEqual(mode_totals(state).sum(), 120.0, places=6)

    def test_calibrated_model(self):
        """Recovered parameters replace the old ones, tau clipped into [0, 1]."""

        scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))
        duals = DualSolution(theta_j=0.9, theta_m=1.1, tau={'transit': 1.0005}, beta_k={'attraction': 0.4})

        spec, tree = calibrated_model(duals=duals, utility_spec=scenario.utility_spec, tree=scenario.tree)

        self.assertEqual(tree.tau['transit'], 1.0)
        self.assertEqual(tree.theta_j, 0.9)
        self.assertEqual(tree.theta_r, 2.0)
        self.assertEqual(spec.beta_k['attraction'], 0.4)
        self.assertEqual(spec.beta_q['comfort'], 0.7)


if __name__ == '__main__':
    unittest.main()
