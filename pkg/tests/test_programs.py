"""Unit test module for the convex program builders.

Every simplex program is solved and its optimum compared with the closed
form it should reproduce; the calibration programs are checked for their
constraint bookkeeping, structural fixes and inputs they refuse.
"""

import dataclasses
import pathlib
import unittest
from unittest import TestCase

import numpy as np
import pandas as pd

from demandforge.choice import ModeTree
from demandforge.choice import hier_extended_prob
from demandforge.choice import hier_mnl_prob
from demandforge.choice import mnl_prob
from demandforge.choice import mnl_satisfaction
from demandforge.choice import nl_prob
from demandforge.choice import assemble_trips
from demandforge.config import SolverConfig
from demandforge.errors import DomainError
from demandforge.errors import HierarchyError
from demandforge.errors import InputError
from demandforge.estimation import generate_hier_mnl_observations
from demandforge.estimation import generate_observations
from demandforge.files import read_scenario
from demandforge.programs import ObservationBundle
from demandforge.programs import build_first_stage
from demandforge.programs import build_first_stage_variant
from demandforge.programs import build_hier_mnl
from demandforge.programs import build_hier_mnl_variant
from demandforge.programs import build_hier_mnl_variant2
from demandforge.programs import build_max_entropy_mnl
from demandforge.programs import build_max_satis_mnl
from demandforge.programs import build_max_satis_nl
from demandforge.programs import build_second_stage
from demandforge.programs import describe
from demandforge.programs import huber
from demandforge.programs import huber_derivative
from demandforge.solver import solve_simplex_program

FIXTURES = pathlib.Path(__file__).parent.joinpath('fixtures')
LOGISTIC_HALF = 0.6224593312018546


def small_bundle() -> ObservationBundle:
    """One origin, two destinations and two modes, consistent at every level."""

    pairs = pd.MultiIndex.from_tuples([('a', 'b'), ('a', 'c')], names=['origin', 'destination'])
    modes = pd.MultiIndex.from_tuples(
        [('a', 'b', 'car'), ('a', 'b', 'bus'), ('a', 'c', 'car'), ('a', 'c', 'bus')],
        names=['origin', 'destination', 'mode']
    )

    return ObservationBundle(
        origins=pd.Series({'a': 10.0}, name='O').rename_axis('origin'),
        trips_ij=pd.Series([6.0, 4.0], index=pairs, name='T'),
        trips_ijm=pd.Series([4.0, 2.0, 3.0, 1.0], index=modes, name='T'),
        dest_attributes=pd.DataFrame({'size': [1.0, 2.0]}, index=pairs),
        mode_attributes=pd.DataFrame({'comfort': [1.0, 0.5, 0.8, 0.2]}, index=modes)
    )


class HuberTest(TestCase):

    """Will perform a unit test for the smooth absolute value."""

    def test_values(self):
        """Quadratic inside the width, linear outside."""

        values = huber(np.array([0.5, -3.0, 1.0]), width=1.0)

        np.testing.assert_allclose(values, [0.125, 2.5, 0.5])

    def test_derivative(self):
        """The slope is `x / width`, clipped to one in magnitude."""

        slopes = huber_derivative(np.array([0.5, -3.0, 2.0]), width=1.0)

        np.testing.assert_allclose(slopes, [0.5, -1.0, 1.0])


class ObservationBundleTest(TestCase):

    """Will perform a unit test for the ObservationBundle object."""

    def setUp(self) -> None:
        """Set up a consistent bundle and a single nest tree."""

        self.bundle = small_bundle()
        self.tree = ModeTree(nests={'road': ['car', 'bus']})

    def test_validate(self):
        """A consistent bundle passes."""

        self.bundle.validate()

    def test_origin_sum_violated(self):
        """Destination trips that miss the production are named in the error."""

        bundle = dataclasses.replace(self.bundle, origins=pd.Series({'a': 11.0}).rename_axis('origin'))

        with self.assertRaisesRegex(HierarchyError, 'sum_j T_ij = O_i'):
            bundle.validate()

    def test_mode_sum_violated(self):
        """Mode trips that miss the pair total are named in the error."""

        trips_ijm = self.bundle.trips_ijm.copy()
        trips_ijm.iloc[0] = 5.0

        with self.assertRaisesRegex(HierarchyError, 'sum_m T_ijm = T_ij'):
            dataclasses.replace(self.bundle, trips_ijm=trips_ijm).validate()

    def test_nonpositive_cell(self):
        """Every observed cell must be strictly positive."""

        trips_ijm = self.bundle.trips_ijm.copy()
        trips_ijm.iloc[1] = 0.0

        with self.assertRaisesRegex(HierarchyError, 'strictly positive'):
            dataclasses.replace(self.bundle, trips_ijm=trips_ijm).validate()

    def test_with_nest_totals(self):
        """Missing nest totals are summed from the mode trips."""

        bundle = self.bundle.with_nest_totals(tree=self.tree)

        self.assertAlmostEqual(bundle.trips_ijM.loc[('a', 'b', 'road')], 6.0)
        self.assertEqual(list(bundle.trips_ijM.index.names), ['origin', 'destination', 'nest'])
        bundle.validate(tree=self.tree)

        # Supplied totals are kept as they are.
        self.assertIs(bundle.with_nest_totals(tree=self.tree), bundle)

    def test_unknown_mode(self):
        """Modes outside the tree cannot be summed into nests."""

        with self.assertRaises(HierarchyError):
            self.bundle.with_nest_totals(tree=ModeTree(nests={'road': ['car']}))

    def tearDown(self) -> None:
        """Teardown the bundle."""

        self.bundle = None


class MaxSatisTest(TestCase):

    """Will perform a unit test for the single choice set programs."""

    def setUp(self) -> None:
        """Set up a two nest tree."""

        self.tree = ModeTree(nests={'private': ['car'], 'transit': ['bus', 'rail']}, tau={'transit': 0.5})
        self.utilities = {'car': 0.2, 'bus': 0.0, 'rail': -0.3}

    def test_mnl_optimum(self):
        """The optimum of MaxSatisMNL is the multinomial logit."""

        utilities = [1.0, 0.0, -0.5]
        program = build_max_satis_mnl(utilities=utilities, theta=2.0)
        state, duals = solve_simplex_program(program=program)

        self.assertTrue(state.converged)
        np.testing.assert_allclose(state.probabilities['alternative'].to_numpy(), mnl_prob(utilities, 2.0), rtol=1e-7)

        # The optimal value is the expected maximum utility.
        self.assertAlmostEqual(state.objective, mnl_satisfaction(utilities, 2.0), places=8)
        self.assertAlmostEqual(duals.theta, 2.0)

    def test_mnl_multiplier(self):
        """The simplex multiplier is the satisfaction less `1/theta`."""

        program = build_max_satis_mnl(utilities=pd.Series({'x': 1.0, 'y': 0.0}), theta=1.0)
        _, duals = solve_simplex_program(program=program)

        self.assertAlmostEqual(duals.multipliers['lambda'].iloc[0], mnl_satisfaction([1.0, 0.0], 1.0) - 1.0, places=7)

    def test_mnl_bad_arguments(self):
        """A nonpositive scale or an empty choice set is refused."""

        with self.assertRaises(DomainError):
            build_max_satis_mnl(utilities=[1.0], theta=0.0)

        with self.assertRaises(InputError):
            build_max_satis_mnl(utilities=[], theta=1.0)

    def test_nl_optimum(self):
        """The optimum of MaxSatisNL is the nested logit."""

        program = build_max_satis_nl(utilities=self.utilities, tree=self.tree)
        state, _ = solve_simplex_program(program=program)

        np.testing.assert_allclose(
            state.probabilities['mode'].reindex(self.tree.modes).to_numpy(),
            nl_prob(self.utilities, self.tree),
            rtol=1e-7
        )

    def test_nl_perfect_correlation(self):
        """With `tau = 0` the nest behaves as its best member."""

        tree = self.tree.replace(tau={'transit': 0.0})
        program = build_max_satis_nl(utilities={'car': 0.0, 'bus': 0.0, 'rail': 0.5}, tree=tree)
        state, _ = solve_simplex_program(program=program)
        probabilities = state.probabilities['mode']

        self.assertAlmostEqual(probabilities['bus'] + probabilities['rail'], LOGISTIC_HALF, places=7)
        self.assertLess(probabilities['bus'], 1e-8)

    def test_red_bus_blue_bus(self):
        """Two identical buses in a perfectly correlated nest split one share."""

        tree = ModeTree(nests={'private': ['car'], 'bus': ['red', 'blue']}, tau={'bus': 0.0})
        program = build_max_satis_nl(utilities={'car': 0.0, 'red': 0.0, 'blue': 0.0}, tree=tree)
        state, _ = solve_simplex_program(program=program)

        np.testing.assert_allclose(
            state.probabilities['mode'].reindex(['car', 'red', 'blue']).to_numpy(),
            [0.5, 0.25, 0.25],
            atol=1e-6
        )

    def test_random_nl_instances(self):
        """Fifty random trees and utilities, each optimum equal to the nested logit."""

        rng = np.random.default_rng(seed=11)

        for trial in range(50):

            n_modes = int(rng.integers(2, 7))
            n_nests = int(rng.integers(1, min(3, n_modes) + 1))
            modes = ['m{k}'.format(k=k) for k in range(n_modes)]
            codes = np.concatenate([np.arange(n_nests), rng.integers(0, n_nests, n_modes - n_nests)])
            nests = {'n{b}'.format(b=b): [mode for mode, code in zip(modes, codes) if code == b] for b in range(n_nests)}

            tree = ModeTree(
                nests=nests,
                tau={name: float(rng.uniform(0.2, 1.0)) for name in nests},
                theta_m=float(rng.uniform(0.5, 2.0))
            )
            utilities = dict(zip(modes, rng.uniform(-2.0, 2.0, n_modes)))

            state, _ = solve_simplex_program(program=build_max_satis_nl(utilities=utilities, tree=tree))

            with self.subTest(trial=trial):
                self.assertTrue(state.converged)
                np.testing.assert_allclose(
                    state.probabilities['mode'].reindex(tree.modes).to_numpy(),
                    nl_prob(utilities, tree),
                    atol=1e-6
                )


class HierMNLVariantTest(TestCase):

    """Will perform a unit test for the two level entropy programs."""

    def setUp(self) -> None:
        """Set up HierMNL observations from the flat scenario attributes."""

        scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))
        self.spec = scenario.utility_spec
        self.bundle = generate_hier_mnl_observations(
            origins=scenario.origins,
            dest_attributes=self.spec.dest_attributes,
            mode_attributes=self.spec.mode_attributes,
            beta_k=self.spec.beta_k,
            beta_q=self.spec.beta_q,
            theta_j=0.8,
            theta_m=1.2
        )
        self.expected = hier_mnl_prob(
            dest_utility=self.spec.destination_utility(),
            mode_utility=self.spec.mode_utility(),
            theta_j=0.8,
            theta_m=1.2
        )

    def test_variant_optimum(self):
        """HierMNLVariant reproduces the closed-form hierarchical logit."""

        program = build_hier_mnl_variant(
            bundle=self.bundle,
            theta_j=0.8,
            theta_m=1.2,
            dest_utility=self.spec.destination_utility(),
            mode_utility=self.spec.mode_utility()
        )
        state, _ = solve_simplex_program(program=program)

        destination = state.probabilities['destination'].reindex(self.expected.destination.index)
        mode = state.probabilities['mode'].reindex(self.expected.mode.index)

        np.testing.assert_allclose(destination.to_numpy(), self.expected.destination.to_numpy(), rtol=1e-6)
        np.testing.assert_allclose(mode.to_numpy(), self.expected.mode.to_numpy(), rtol=1e-6)

    def test_joint_trip_optimum(self):
        """In trip variables the pair weight `1/theta_j - 1/theta_m` gives the same model."""

        program = build_hier_mnl_variant2(
            bundle=self.bundle,
            theta_j=0.8,
            theta_m=1.2,
            dest_utility=self.spec.destination_utility(),
            mode_utility=self.spec.mode_utility()
        )
        state, _ = solve_simplex_program(program=program)

        self.assertEqual(program.warnings, [])

        destination = state.probabilities['destination'].reindex(self.expected.destination.index)
        np.testing.assert_allclose(destination.to_numpy(), self.expected.destination.to_numpy(), rtol=1e-6)

        # Trips add back up to the productions.
        totals = state.trips['mode'].groupby(level='origin').sum()
        np.testing.assert_allclose(totals.to_numpy(), self.bundle.origins.reindex(totals.index).to_numpy(), rtol=1e-9)

    def test_joint_trip_negative_weight(self):
        """A destination scale above the mode scale is reported."""

        program = build_hier_mnl_variant2(
            bundle=self.bundle,
            theta_j=1.5,
            theta_m=1.0,
            dest_utility=self.spec.destination_utility(),
            mode_utility=self.spec.mode_utility()
        )

        self.assertEqual(len(program.warnings), 1)
        self.assertIn('negative', program.warnings[0])

    def test_hier_mnl_anchor(self):
        """HierMNL anchors `1/theta_m` and leaves the rest free."""

        program = build_hier_mnl(bundle=self.bundle, inv_theta_m=1.0 / 1.2)

        self.assertAlmostEqual(program.fixed['inv_theta_m'], 1.0 / 1.2)
        self.assertEqual(program.free_duals, ['inv_theta_j', 'beta_k[attraction]', 'beta_q[comfort]'])
        self.assertIn('entropy_mode', program.targets.index)

        with self.assertRaises(DomainError):
            build_hier_mnl(bundle=self.bundle, inv_theta_m=0.0)


class SecondStageTest(TestCase):

    """Will perform a unit test for the forecast program."""

    def setUp(self) -> None:
        """Set up the flat scenario."""

        self.scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))
        self.spec = self.scenario.utility_spec

    def build(self, **changes):

        arguments = {
            'network': self.scenario.network,
            'route_set': self.scenario.routes(),
            'origins': self.scenario.origins,
            'dest_utility': self.spec.destination_utility(),
            'mode_utility': self.spec.mode_utility(),
            'tree': self.scenario.tree
        }
        arguments.update(changes)

        return build_second_stage(**arguments)

    def test_optimum_is_extended_logit(self):
        """On uncongested links the optimum is the closed-form hierarchy."""

        state, _ = solve_simplex_program(program=self.build())
        expected = hier_extended_prob(utility_spec=self.spec, tree=self.scenario.tree, route_set=self.scenario.routes())

        self.assertTrue(state.converged)

        for level in ['destination', 'nest', 'mode']:
            solved = state.probabilities[level].reindex(getattr(expected, level).index)
            np.testing.assert_allclose(solved.to_numpy(), getattr(expected, level).to_numpy(), rtol=1e-6)

    def test_link_flows(self):
        """Optimal link flows equal the assembled route trips."""

        state, _ = solve_simplex_program(program=self.build())
        expected = assemble_trips(
            origins=self.scenario.origins,
            probabilities=hier_extended_prob(
                utility_spec=self.spec,
                tree=self.scenario.tree,
                route_set=self.scenario.routes()
            ),
            route_set=self.scenario.routes()
        )

        np.testing.assert_allclose(state.link_flows.values, expected.link_flows.values, rtol=1e-6)
        self.assertAlmostEqual(state.link_flows.total(), 180.0, places=6)

    def test_bad_inputs(self):
        """Nonpositive productions and route scales are outside the domain."""

        with self.assertRaises(DomainError):
            self.build(origins=self.scenario.origins * 0.0)

        with self.assertRaises(DomainError):
            self.build(theta_r=0.0)

    def test_describe(self):
        """The dump names every level and the flow definition."""

        text = describe(self.build())

        self.assertIn('Program: SecondStage', text)
        self.assertIn('T_ijmr', text)
        self.assertIn('Beckmann', text)


class FirstStageTest(TestCase):

    """Will perform a unit test for the calibration program."""

    def setUp(self) -> None:
        """Set up observations of the flat scenario."""

        self.scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))
        self.bundle = generate_observations(scenario=self.scenario)

    def build(self, scenario=None, bundle=None):

        scenario = scenario or self.scenario

        return build_first_stage(
            network=scenario.network,
            route_set=scenario.routes(),
            bundle=bundle or self.bundle,
            tree=scenario.tree,
            theta_r=scenario.tree.theta_r
        )

    def test_constraints(self):
        """One entropy constraint per level and nest, one aggregate per attribute."""

        program = self.build()

        self.assertEqual(
            list(program.targets.index),
            [
                'entropy_destination', 'entropy_nest', 'entropy_mode[private]', 'entropy_mode[transit]',
                'aggregate_k[attraction]', 'aggregate_q[comfort]'
            ]
        )

    def test_single_mode_nest_is_tied(self):
        """A nest holding one mode follows `1/theta_m`."""

        program = self.build()

        self.assertEqual(program.ties, {'tau_over_theta_m[private]': 'inv_theta_m'})
        self.assertEqual(
            program.free_duals,
            ['inv_theta_j', 'inv_theta_m', 'tau_over_theta_m[transit]', 'beta_k[attraction]', 'beta_q[comfort]']
        )
        self.assertEqual(program.residual_names[-1], 'aggregate_q[comfort]')

    def test_single_destination_is_fixed(self):
        """One destination, nest and mode leaves nothing to calibrate."""

        scenario = read_scenario(path=FIXTURES.joinpath('two_route.scenario'))
        program = self.build(scenario=scenario, bundle=generate_observations(scenario=scenario))

        self.assertEqual(program.free_duals, [])
        self.assertEqual(program.fixed['inv_theta_j'], 1.0)
        self.assertEqual(program.fixed['beta_k[size]'], 0.0)
        self.assertEqual(program.ties['inv_theta_m'], 'tau_over_theta_m[private]')
        self.assertTrue(program.warnings)

    def test_true_multipliers_match_observations(self):
        """At the generating parameters every constraint holds."""

        program = self.build()
        tree = self.scenario.tree
        duals = program.resolve(
            {
                'inv_theta_j': 1.0 / tree.theta_j,
                'inv_theta_m': 1.0 / tree.theta_m,
                'tau_over_theta_m[transit]': tree.tau['transit'] / tree.theta_m,
                'beta_k[attraction]': 0.5,
                'beta_q[comfort]': 0.7
            }
        )
        inner = program.inner_program(duals=duals)
        state, _ = solve_simplex_program(program=inner)

        self.assertLess(program.constraint_residuals(program=inner, x=state.x).abs().max(), 1e-6)

        parameters = program.parameters(duals=duals)
        self.assertAlmostEqual(parameters['tau']['transit'], 0.6)
        self.assertAlmostEqual(parameters['tau']['private'], 1.0)

    def test_variant_needs_counts(self):
        """A positive flow penalty without link counts is refused."""

        with self.assertRaises(InputError):
            build_first_stage_variant(
                network=self.scenario.network,
                route_set=self.scenario.routes(),
                bundle=dataclasses.replace(self.bundle, link_counts=None),
                tree=self.scenario.tree,
                theta_r=2.0,
                sigma=1.0
            )

        program = build_first_stage_variant(
            network=self.scenario.network,
            route_set=self.scenario.routes(),
            bundle=self.bundle,
            tree=self.scenario.tree,
            theta_r=2.0,
            sigma=1.0
        )
        self.assertEqual(program.name, 'FirstStageVariant')

    def test_bad_scales(self):
        """Nonpositive route scales and negative penalties are outside the domain."""

        with self.assertRaises(DomainError):
            build_first_stage(
                network=self.scenario.network,
                route_set=self.scenario.routes(),
                bundle=self.bundle,
                tree=self.scenario.tree,
                theta_r=0.0
            )

        with self.assertRaises(DomainError):
            build_first_stage_variant(
                network=self.scenario.network,
                route_set=self.scenario.routes(),
                bundle=self.bundle,
                tree=self.scenario.tree,
                theta_r=2.0,
                sigma=-1.0
            )

    def test_describe(self):
        """The dump lists free, tied and reported constraints with the targets."""

        text = describe(self.build())

        self.assertIn('Program: FirstStage (maximize, calibration)', text)
        self.assertIn('tied to inv_theta_m', text)
        self.assertIn('Observed targets:', text)


class MaxEntropyTest(TestCase):

    """Will perform a unit test for the individual choice program."""

    def setUp(self) -> None:
        """Set up three individuals choosing among three alternatives."""

        self.choices = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        self.attributes = np.arange(9, dtype=float).reshape(3, 3, 1) / 10.0

    def test_multipliers(self):
        """All but the last constant are free, plus one taste per attribute."""

        program = build_max_entropy_mnl(choices=self.choices, attributes=self.attributes, attribute_names=['time'])

        self.assertEqual(program.free_duals, ['asc[0]', 'asc[1]', 'alpha[time]'])
        np.testing.assert_allclose(program.targets[['share[0]', 'share[1]', 'share[2]']].to_numpy(), 1.0)
        self.assertAlmostEqual(program.targets['aggregate[time]'], 0.0 + 0.4 + 0.8)

    def test_choices_must_be_one_hot(self):
        """Fractional or multiple choices are refused."""

        with self.assertRaises(InputError):
            build_max_entropy_mnl(choices=np.array([[1.0, 1.0, 0.0]]), attributes=self.attributes[:1])

        with self.assertRaises(InputError):
            build_max_entropy_mnl(choices=np.array([[0.5, 0.5, 0.0]]), attributes=self.attributes[:1])

    def test_unchosen_alternative(self):
        """An alternative nobody picks has an unreachable share constraint."""

        choices = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])

        with self.assertRaisesRegex(InputError, 'never chosen'):
            build_max_entropy_mnl(choices=choices, attributes=self.attributes)

    def test_bad_shapes(self):
        """Attributes must line up with the choices."""

        with self.assertRaises(InputError):
            build_max_entropy_mnl(choices=self.choices, attributes=self.attributes[:2])

        with self.assertRaises(DomainError):
            build_max_entropy_mnl(choices=self.choices, attributes=self.attributes, theta=0.0)


class GradientTest(TestCase):

    """Will perform a unit test for the analytic program gradients."""

    def setUp(self) -> None:
        """Set up a MNL, a nested logit and the flat forecast program."""

        scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))
        spec = scenario.utility_spec
        tree = ModeTree(nests={'private': ['car'], 'transit': ['bus', 'rail']}, tau={'transit': 0.5}, theta_m=1.3)

        self.programs = [
            build_max_satis_mnl(utilities=[0.4, -0.1, 0.0, 1.2], theta=0.7),
            build_max_satis_nl(utilities={'car': 0.2, 'bus': 0.0, 'rail': -0.3}, tree=tree),
            build_second_stage(
                network=scenario.network,
                route_set=scenario.routes(),
                origins=scenario.origins,
                dest_utility=spec.destination_utility(),
                mode_utility=spec.mode_utility(),
                tree=scenario.tree
            )
        ]
        self.rng = np.random.default_rng(seed=5)

    def interior_point(self, program) -> np.ndarray:

        x = self.rng.uniform(0.2, 1.0, program.n_variables)
        totals = np.bincount(program.groups, weights=x, minlength=program.n_groups)

        return x / totals[program.groups]

    def test_central_differences(self):
        """The gradient matches central differences of the objective at random interior points."""

        step = 1e-6

        for program in self.programs:
            for _ in range(10):

                x = self.interior_point(program)
                analytic = program.gradient(x)
                numeric = np.empty_like(x)

                for k in range(len(x)):
                    shift = np.zeros_like(x)
                    shift[k] = step
                    numeric[k] = (program.objective(x + shift) - program.objective(x - shift)) / (2.0 * step)

                with self.subTest(program=program.name):
                    scale = max(1.0, float(np.abs(analytic).max()))
                    self.assertLess(float(np.abs(numeric - analytic).max()) / scale, 1e-6)

    def test_interior_starts_agree(self):
        """Two different interior starts reach the same optimum."""

        config = SolverConfig(tol_inner=1e-10)

        for program in self.programs:

            first, _ = solve_simplex_program(program=program, config=config, x0=self.interior_point(program))
            second, _ = solve_simplex_program(program=program, config=config, x0=self.interior_point(program))

            with self.subTest(program=program.name):
                np.testing.assert_allclose(first.x, second.x, rtol=0.0, atol=1e-7)


if __name__ == '__main__':
    unittest.main()
