"""Unit test module for the input and output file formats."""

import pathlib
import tempfile
import unittest
from unittest import TestCase

import numpy as np

from demandforge.config import SolverConfig
from demandforge.errors import InputError
from demandforge.estimation import generate_observations
from demandforge.files import read_link_counts
from demandforge.files import read_links
from demandforge.files import read_observations
from demandforge.files import read_od_costs
from demandforge.files import read_parameters
from demandforge.files import read_route_set
from demandforge.files import read_scenario
from demandforge.files import read_solution
from demandforge.files import read_zones
from demandforge.files import write_observations
from demandforge.files import write_parameters
from demandforge.files import write_route_set
from demandforge.files import write_solution
from demandforge.programs import build_second_stage
from demandforge.solver import DualSolution
from demandforge.solver import solve_simplex_program

FIXTURES = pathlib.Path(__file__).parent.joinpath('fixtures')
CONFIG = pathlib.Path(__file__).parents[1].joinpath('config', 'config.ini')


class TableFileTest(TestCase):

    """Will perform a unit test for the whitespace table readers."""

    def setUp(self) -> None:
        """Set up a scratch directory."""

        self.directory = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.directory.name)

    def test_read_zones(self):
        """Zones keep their file order."""

        zones = read_zones(path=FIXTURES.joinpath('zones_2x2.txt'))

        self.assertEqual(zones.zones, ['a', 'b'])
        self.assertAlmostEqual(zones.productions.sum(), 2.0)

    def test_read_od_costs(self):
        """A cost file without a mode column belongs to the mode `all`."""

        costs = read_od_costs(path=FIXTURES.joinpath('costs_2x2.txt'))

        self.assertEqual(list(costs.columns), ['origin', 'destination', 'mode', 'cost'])
        self.assertEqual(set(costs['mode']), {'all'})

    def test_read_link_counts(self):
        """Counts are indexed by mode, tail and head."""

        path = self.root.joinpath('counts.txt')
        path.write_text('mode tail head flow\ncar a b 12.5\nbus a b 3\n')

        counts = read_link_counts(path=path)

        self.assertEqual(list(counts.index.names), ['mode', 'tail', 'head'])
        self.assertAlmostEqual(counts.loc[('car', 'a', 'b')], 12.5)

    def test_comment_headers(self):
        """A `#` header line is skipped and the columns follow the fixed order."""

        zones_path = self.root.joinpath('zones.txt')
        zones_path.write_text('# zone O D\na 1 1\nb 1 1\n')

        zones = read_zones(path=zones_path)

        self.assertEqual(zones.zones, ['a', 'b'])
        self.assertAlmostEqual(zones.productions.sum(), 2.0)

        links_path = self.root.joinpath('links.txt')
        links_path.write_text(
            '# mode tail head length t0 capacity alpha beta cost\n'
            'car a b 1 1 10 0.15 4 0\n'
            'car b a 1 1 10 0.15 4 0\n'
        )

        network = read_links(path=links_path)

        self.assertEqual(network.n_links, 2)

    def test_route_file(self):
        """Routes are read one per line and written back the same way."""

        network = read_scenario(path=FIXTURES.joinpath('two_route.scenario')).network

        path = self.root.joinpath('routes.txt')
        path.write_text('# i j mode route\na b car a>b\na b car a>m>b\n')

        route_set = read_route_set(path=path, network=network)
        labels = [route.label for route in route_set.get_routes(origin='a', destination='b', mode='car')]

        self.assertEqual(labels, ['a>b', 'a>m>b'])

        copy = self.root.joinpath('copy.txt')
        write_route_set(route_set=route_set, path=copy)

        self.assertEqual(copy.read_text(), path.read_text())

    def test_od_cost_layouts(self):
        """Four columns carry a mode, three columns do not."""

        path = self.root.joinpath('costs.txt')
        path.write_text('# i j mode cost\na b car 1.5\na b bus 2\n')

        costs = read_od_costs(path=path)

        self.assertEqual(list(costs['mode']), ['car', 'bus'])
        np.testing.assert_allclose(costs['cost'].to_numpy(), [1.5, 2.0])

        path.write_text('a b car 1.5 9\n')
        with self.assertRaises(InputError):
            read_od_costs(path=path)

    def test_bad_tables(self):
        """Missing files, missing columns and text in numeric columns are input errors."""

        with self.assertRaises(InputError):
            read_zones(path=self.root.joinpath('absent.txt'))

        path = self.root.joinpath('zones.txt')

        path.write_text('zone O\na 1\n')
        with self.assertRaises(InputError):
            read_zones(path=path)

        path.write_text('zone O D\na one 1\n')
        with self.assertRaises(InputError):
            read_zones(path=path)

    def tearDown(self) -> None:
        """Teardown the scratch directory."""

        self.directory.cleanup()


class ScenarioFileTest(TestCase):

    """Will perform a unit test for the scenario reader."""

    def setUp(self) -> None:
        """Set up a scratch directory."""

        self.directory = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.directory.name)

    def test_read_scenario(self):
        """Every section of the flat scenario is read."""

        scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))

        self.assertEqual(scenario.network.n_links, 18)
        self.assertEqual(scenario.tree.nests, {'private': ['car'], 'transit': ['bus', 'rail']})
        self.assertAlmostEqual(scenario.tree.tau['transit'], 0.6)
        self.assertAlmostEqual(scenario.tree.theta_r, 2.0)
        self.assertEqual(scenario.beta_k, {'attraction': 0.5})
        self.assertEqual(scenario.beta_q, {'comfort': 0.7})
        self.assertEqual(scenario.k_routes, 5)
        self.assertEqual(scenario.dest_attributes.shape, (6, 1))
        self.assertEqual(scenario.mode_attributes.shape, (18, 1))
        self.assertEqual(list(scenario.origins.index), ['o1', 'o2'])

    def test_missing_parameters(self):
        """A scenario without parameters is refused."""

        path = self.root.joinpath('bare.scenario')
        path.write_text('[zones]\nzone O D\na 1 0\nb 0 1\n')

        with self.assertRaises(InputError):
            read_scenario(path=path)

    def test_bad_header(self):
        """A table section must open with its header."""

        text = FIXTURES.joinpath('two_route.scenario').read_text().replace('nest tau modes', 'nest modes tau')
        path = self.root.joinpath('swapped.scenario')
        path.write_text(text)

        with self.assertRaisesRegex(InputError, r'\[nests\]'):
            read_scenario(path=path)

    def tearDown(self) -> None:
        """Teardown the scratch directory."""

        self.directory.cleanup()


class ObservationFileTest(TestCase):

    """Will perform a unit test for the observation files."""

    def setUp(self) -> None:
        """Set up the flat scenario and a scratch directory."""

        self.scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))
        self.directory = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.directory.name)

    def test_write_and_read(self):
        """Written observations read back consistent and with counts."""

        bundle = generate_observations(scenario=self.scenario)
        path = self.root.joinpath('observations.txt')

        write_observations(bundle=bundle, path=path)
        loaded = read_observations(path=path, scenario=self.scenario)

        loaded.validate(tree=self.scenario.tree)
        np.testing.assert_allclose(
            loaded.trips_ijm.reindex(bundle.trips_ijm.index).to_numpy(),
            bundle.trips_ijm.to_numpy(),
            rtol=1e-11
        )
        self.assertEqual(len(loaded.link_counts), 18)

    def test_golden_observations(self):
        """Regenerating the two route observations reproduces the stored file byte for byte."""

        golden = FIXTURES.joinpath('two_route.observations')
        scenario = read_scenario(path=FIXTURES.joinpath('two_route.scenario'))
        path = self.root.joinpath('two_route.observations')

        write_observations(bundle=generate_observations(scenario=scenario), path=path)

        self.assertEqual(path.read_bytes(), golden.read_bytes())

    def test_corrupt_observations(self):
        """Text in a numeric column is an input error."""

        with self.assertRaises(InputError):
            read_observations(path=FIXTURES.joinpath('corrupt.observations'), scenario=self.scenario)

    def tearDown(self) -> None:
        """Teardown the scratch directory."""

        self.directory.cleanup()


class ParameterFileTest(TestCase):

    """Will perform a unit test for the parameter files."""

    def setUp(self) -> None:
        """Set up the flat scenario tree and a scratch directory."""

        self.tree = read_scenario(path=FIXTURES.joinpath('flat.scenario')).tree
        self.directory = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.directory.name)

    def test_write_and_read(self):
        """Every parameter and the convergence state come back."""

        duals = DualSolution(
            theta_j=0.8,
            theta_m=1.2,
            theta_r=2.0,
            tau={'private': 1.0, 'transit': 0.6},
            beta_k={'attraction': 0.5},
            beta_q={'comfort': 0.7}
        )
        path = self.root.joinpath('parameters.ini')

        write_parameters(duals=duals, path=path, converged=False, max_residual=1e-3)
        values = read_parameters(path=path, tree=self.tree, beta_names=['attraction', 'comfort'])

        self.assertEqual(values['theta_j'], 0.8)
        self.assertEqual(values['tau'], {'private': 1.0, 'transit': 0.6})
        self.assertEqual(values['beta'], {'attraction': 0.5, 'comfort': 0.7})
        self.assertFalse(values['converged'])

    def test_missing_tau(self):
        """A nest without its dissimilarity is an input error."""

        with self.assertRaisesRegex(InputError, 'tau.transit'):
            read_parameters(
                path=FIXTURES.joinpath('missing_tau.parameters'),
                tree=self.tree,
                beta_names=['attraction', 'comfort']
            )

    def tearDown(self) -> None:
        """Teardown the scratch directory."""

        self.directory.cleanup()


class SolutionFileTest(TestCase):

    """Will perform a unit test for saved solutions."""

    def setUp(self) -> None:
        """Set up a scratch directory."""

        self.directory = tempfile.TemporaryDirectory()
        self.root = pathlib.Path(self.directory.name)

    def test_saved_vector(self):
        """The saved rows rebuild the variable vector in program order."""

        scenario = read_scenario(path=FIXTURES.joinpath('flat.scenario'))
        program = build_second_stage(
            network=scenario.network,
            route_set=scenario.routes(),
            origins=scenario.origins,
            dest_utility=scenario.utility_spec.destination_utility(),
            mode_utility=scenario.utility_spec.mode_utility(),
            tree=scenario.tree
        )
        state, _ = solve_simplex_program(program=program)
        path = self.root.joinpath('solution.csv')

        write_solution(state=state, path=path)

        np.testing.assert_allclose(read_solution(path=path), state.x, rtol=1e-11)

    def test_not_a_solution(self):
        """Any other CSV is refused."""

        path = self.root.joinpath('other.csv')
        path.write_text('a,b\n1,2\n')

        with self.assertRaises(InputError):
            read_solution(path=path)

    def tearDown(self) -> None:
        """Teardown the scratch directory."""

        self.directory.cleanup()


class ConfigFileTest(TestCase):

    """Will perform a unit test for the solver configuration files."""

    def test_shipped_config(self):
        """The shipped config holds the defaults."""

        self.assertEqual(SolverConfig.from_ini(path=CONFIG), SolverConfig())

    def test_overrides(self):
        """File values replace defaults, flags replace file values."""

        with tempfile.TemporaryDirectory() as directory:

            path = pathlib.Path(directory).joinpath('solver.ini')
            SolverConfig(tol_inner=1e-6, k_routes=3).to_ini(path=path)
            config = SolverConfig.from_ini(path=path)

        self.assertEqual(config.tol_inner, 1e-6)
        self.assertEqual(config.k_routes, 3)
        self.assertEqual(config.replace(k_routes=2, tol_outer=None).k_routes, 2)

    def test_bad_settings(self):
        """Unknown keys and out of range values are input errors."""

        with tempfile.TemporaryDirectory() as directory:

            path = pathlib.Path(directory).joinpath('solver.ini')
            path.write_text('[solver]\nstep = 1\n')

            with self.assertRaises(InputError):
                SolverConfig.from_ini(path=path)

        with self.assertRaises(InputError):
            SolverConfig(armijo_shrink=1.5)


if __name__ == '__main__':
    unittest.main()
