"""The `demandforge` command line.

Subcommands: `distribute`, `choice`, `paths`, `calibrate`, `forecast`,
`synth` and `check`. Exit codes are 0 on success, 2 on input errors and
3 when a solve does not converge. `DEMANDFORGE_LOG=debug|info|warning`
sets the logging level.
"""

import argparse
import dataclasses
import logging
import os
import pathlib
import sys

from typing import Dict
from typing import List
from typing import Optional

from demandforge import files
from demandforge.choice import hier_extended_prob
from demandforge.config import SolverConfig
from demandforge.distribution import gravity_balance
from demandforge.distribution import od_cost_matrix
from demandforge.distribution import solve_most_probable
from demandforge.errors import ConvergenceError
from demandforge.errors import DemandForgeError
from demandforge.errors import InputError
from demandforge.estimation import calibrated_model
from demandforge.estimation import forecast
from demandforge.estimation import generate_observations
from demandforge.estimation import mode_totals
from demandforge.estimation import perturb_observations
from demandforge.programs import build_first_stage
from demandforge.programs import build_first_stage_variant
from demandforge.programs import build_second_stage
from demandforge.solver import DualSolution
from demandforge.solver import check_kkt
from demandforge.solver import solve_calibration

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3


@dataclasses.dataclass
class RunManifest():

    """
    Everything one command needs: its input files, solver overrides and
    the output directory. Runs are always deterministic.
    """

    command: str
    paths: Dict[str, Optional[pathlib.Path]]
    overrides: Dict[str, object]
    out: pathlib.Path
    config_path: Optional[pathlib.Path] = None
    deterministic: bool = True

    def validate(self) -> None:
        """Checks that every given input exists and the output directory can be created.

        Raises:
        ----
        InputError: If an input file is missing or the output is not a directory.
        """

        for name, path in self.paths.items():
            if path is not None and not path.is_file():
                raise InputError("The {name} file {path} does not exist.".format(name=name, path=path))

        if self.config_path is not None and not self.config_path.is_file():
            raise InputError("The config file {path} does not exist.".format(path=self.config_path))

        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as error:
            raise InputError("The output directory {out} is not writable: {error}".format(out=self.out, error=error))

    def config(self) -> SolverConfig:
        """Defaults, then the INI file, then the command-line flags."""

        config = SolverConfig() if self.config_path is None else SolverConfig.from_ini(path=self.config_path)
        return config.replace(**self.overrides)

    def require(self, name: str) -> pathlib.Path:

        path = self.paths.get(name)

        if path is None:
            raise InputError("The `{command}` command needs --{name}.".format(command=self.command, name=name))

        return path


def _path(value: Optional[str]) -> Optional[pathlib.Path]:
    return None if value is None else pathlib.Path(value)


def build_parser() -> argparse.ArgumentParser:
    """Builds the argument parser with one subparser per command."""

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--tol-inner', type=float, help='KKT tolerance of the simplex solver.')
    common.add_argument('--tol-outer', type=float, help='Constraint tolerance of the calibration.')
    common.add_argument('--max-iter', type=int, help='Iteration cap of the simplex solver.')
    common.add_argument('--k-routes', type=int, help='Routes enumerated per origin, destination and mode.')
    common.add_argument('--sigma', type=float, default=0.0, help='Weight of the observed-flow penalty.')
    common.add_argument('--theta-r', type=float, help='Route scale, overriding the scenario.')
    common.add_argument('--huber', type=float, help='Huber width of the flow penalty.')
    common.add_argument('--config', help='INI file with a [solver] section.')
    common.add_argument('--out', default='.', help='Output directory.')

    parser = argparse.ArgumentParser(prog='demandforge', description='Combined travel demand models as convex programs.')
    commands = parser.add_subparsers(dest='command', required=True)

    distribute = commands.add_parser('distribute', parents=[common], help='Distribute trips between zones.')
    distribute.add_argument('--zones', help='Zone file `zone O D`.')
    distribute.add_argument('--costs', help='Cost file `i j mode cost`.')
    distribute.add_argument('--method', choices=['gravity', 'entropy'], default='gravity')
    distribute.add_argument('--beta', type=float, help='Cost sensitivity.')
    distribute.add_argument('--budget', type=float, help='Total cost budget, entropy method only.')
    distribute.add_argument('--mode', help='Mode of the cost file to use.')

    choice = commands.add_parser('choice', parents=[common], help='Closed-form choice probabilities of a scenario.')
    choice.add_argument('--scenario', help='Scenario file.')

    paths = commands.add_parser('paths', parents=[common], help='Enumerate the route set of a scenario.')
    paths.add_argument('--scenario', help='Scenario file.')

    calibrate = commands.add_parser('calibrate', parents=[common], help='Calibrate parameters on observations.')
    calibrate.add_argument('--scenario', help='Scenario file with network, nests and attributes.')
    calibrate.add_argument('--observations', help='Observation file.')
    calibrate.add_argument('--routes', help='Route file, enumerated from the network when omitted.')
    calibrate.add_argument('--link-counts', help='Link count file `mode tail head flow`.')

    forecasting = commands.add_parser('forecast', parents=[common], help='Forecast with calibrated parameters.')
    forecasting.add_argument('--scenario', help='Future scenario file.')
    forecasting.add_argument('--parameters', help='Parameter file written by `calibrate`.')
    forecasting.add_argument('--routes', help='Frozen route file.')

    synth = commands.add_parser('synth', parents=[common], help='Generate observations from a scenario.')
    synth.add_argument('--scenario', help='Scenario file.')
    synth.add_argument('--noise', type=float, help='Relative noise on the mode trips.')
    synth.add_argument('--seed', type=int, default=0, help='Noise seed.')

    check = commands.add_parser('check', parents=[common], help='Check the KKT conditions of a saved forecast.')
    check.add_argument('--scenario', help='Scenario file.')
    check.add_argument('--parameters', help='Parameter file.')
    check.add_argument('--routes', help='Route file.')
    check.add_argument('--solution', help='Solution file written by `forecast`.')

    return parser


def manifest_from_args(args: argparse.Namespace) -> RunManifest:

    names = ['zones', 'costs', 'scenario', 'observations', 'routes', 'link_counts', 'parameters', 'solution']

    return RunManifest(
        command=args.command,
        paths={name: _path(getattr(args, name, None)) for name in names if hasattr(args, name)},
        overrides={
            'tol_inner': args.tol_inner,
            'tol_outer': args.tol_outer,
            'max_inner_iter': args.max_iter,
            'k_routes': args.k_routes,
            'huber_width': args.huber
        },
        out=pathlib.Path(args.out),
        config_path=_path(args.config)
    )


def _route_set(manifest: RunManifest, scenario, config: SolverConfig):

    if manifest.paths.get('routes') is not None:
        route_set = files.read_route_set(path=manifest.paths['routes'], network=scenario.network)
        scenario.route_set = route_set
        return route_set

    if manifest.overrides.get('k_routes') is not None:
        scenario.k_routes = config.k_routes

    return scenario.routes()


def _scenario(manifest: RunManifest, theta_r: float = None):

    scenario = files.read_scenario(path=manifest.require('scenario'))

    if theta_r is not None:
        scenario.tree = scenario.tree.replace(theta_r=theta_r)

    return scenario


def cli_distribute(manifest: RunManifest, args: argparse.Namespace) -> int:
    """Writes `trips.csv` (`i,j,T`) and `distribution.ini` with the cost multiplier."""

    zones = files.read_zones(path=manifest.require('zones'))
    costs = files.read_od_costs(path=manifest.require('costs'))
    matrix = od_cost_matrix(od_costs=costs, mode=args.mode, zones=zones.zones)

    productions = zones.productions
    attractions = zones.attractions

    if args.method == 'gravity':

        if args.budget is not None:
            raise InputError("A cost budget needs --method entropy.")

        results = gravity_balance(
            productions=productions,
            attractions=attractions,
            costs=matrix,
            beta=0.0 if args.beta is None else args.beta
        )
        summary = {'beta': results.beta, 'iterations': results.iterations, 'max_margin_error': results.max_margin_error}

    else:

        results = solve_most_probable(
            productions=productions,
            attractions=attractions,
            costs=matrix,
            beta=args.beta,
            budget=args.budget
        )
        summary = {'beta': results.beta, 'total_cost': results.total_cost, 'entropy': results.entropy}

    files.write_trip_matrix(trips=results.trips.to_series(), path=manifest.out.joinpath('trips.csv'))
    files.write_summary(values={'distribution': {'method': args.method, **summary}}, path=manifest.out.joinpath('distribution.ini'))

    return EXIT_OK


def cli_choice(manifest: RunManifest, args: argparse.Namespace) -> int:
    """Writes the free-flow conditional probabilities of every level."""

    config = manifest.config()
    scenario = _scenario(manifest, theta_r=args.theta_r)
    route_set = _route_set(manifest, scenario, config)

    probabilities = hier_extended_prob(utility_spec=scenario.utility_spec, tree=scenario.tree, route_set=route_set)

    for level in ['destination', 'nest', 'mode_in_nest', 'mode', 'route']:
        table = getattr(probabilities, level)

        if table is None:
            continue

        files.write_csv(table.rename('p').reset_index(), manifest.out.joinpath('p_{level}.csv'.format(level=level)))

    return EXIT_OK


def cli_paths(manifest: RunManifest, args: argparse.Namespace) -> int:
    """Writes `routes.txt` and `route_frame.csv` with lengths, costs and path-size factors."""

    config = manifest.config()
    scenario = _scenario(manifest)
    route_set = _route_set(manifest, scenario, config)

    files.write_route_set(route_set=route_set, path=manifest.out.joinpath('routes.txt'))
    files.write_csv(route_set.frame.reset_index(), manifest.out.joinpath('route_frame.csv'))

    return EXIT_OK


def cli_calibrate(manifest: RunManifest, args: argparse.Namespace) -> int:
    """Writes `parameters.ini`, `kkt_report.csv` and `iterations.csv`; exit 3 marks a non-converged run."""

    config = manifest.config()
    scenario = _scenario(manifest, theta_r=args.theta_r)
    bundle = files.read_observations(path=manifest.require('observations'), scenario=scenario)
    route_set = _route_set(manifest, scenario, config)

    if manifest.paths.get('link_counts') is not None:
        bundle = dataclasses.replace(bundle, link_counts=files.read_link_counts(path=manifest.paths['link_counts']))

    if args.sigma > 0:
        program = build_first_stage_variant(
            network=scenario.network,
            route_set=route_set,
            bundle=bundle,
            tree=scenario.tree,
            theta_r=scenario.tree.theta_r,
            sigma=args.sigma,
            config=config
        )
    else:
        program = build_first_stage(
            network=scenario.network,
            route_set=route_set,
            bundle=bundle,
            tree=scenario.tree,
            theta_r=scenario.tree.theta_r,
            config=config
        )

    state, duals = solve_calibration(program=program, config=config, log_path=manifest.out.joinpath('iterations.csv'))
    report = check_kkt(program=program, solution=state)

    files.write_parameters(
        duals=duals,
        path=manifest.out.joinpath('parameters.ini'),
        converged=state.converged,
        max_residual=report.max_constraint_residual
    )
    files.write_kkt_report(report=report, path=manifest.out.joinpath('kkt_report.csv'))

    return EXIT_OK if state.converged else EXIT_NONCONVERGED


def _forecast_program(manifest: RunManifest, args: argparse.Namespace, config: SolverConfig):

    scenario = _scenario(manifest)
    route_set = _route_set(manifest, scenario, config)
    values = files.read_parameters(
        path=manifest.require('parameters'),
        tree=scenario.tree,
        beta_names=list(scenario.beta_k) + list(scenario.beta_q)
    )

    duals = DualSolution.from_parameters(
        parameters={
            'theta_j': values['theta_j'],
            'theta_m': values['theta_m'],
            'theta_r': values['theta_r'] if args.theta_r is None else args.theta_r,
            'tau': values['tau'],
            'beta_k': {name: values['beta'][name] for name in scenario.beta_k},
            'beta_q': {name: values['beta'][name] for name in scenario.beta_q}
        }
    )
    spec, tree = calibrated_model(duals=duals, utility_spec=scenario.utility_spec, tree=scenario.tree)

    return scenario, route_set, spec, tree


def cli_forecast(manifest: RunManifest, args: argparse.Namespace) -> int:
    """Writes the trip tables, link flows, `solution.csv` and `summary.ini`."""

    config = manifest.config()
    scenario, route_set, spec, tree = _forecast_program(manifest, args, config)

    state, _ = forecast(
        network=scenario.network,
        route_set=route_set,
        origins=scenario.origins,
        utility_spec=spec,
        tree=tree,
        config=config
    )

    files.write_solution_tables(state=state, directory=manifest.out, route_set=route_set)
    files.write_solution(state=state, path=manifest.out.joinpath('solution.csv'))
    files.write_route_set(route_set=route_set, path=manifest.out.joinpath('routes.txt'))
    files.write_summary(
        values={
            'trips': {mode: float(value) for mode, value in mode_totals(state).items()},
            'solver': {
                'converged': state.converged,
                'iterations': state.iterations,
                'kkt_residual': float(state.kkt_residual),
                'objective': float(state.objective)
            }
        },
        path=manifest.out.joinpath('summary.ini')
    )

    return EXIT_OK if state.converged else EXIT_NONCONVERGED


def cli_synth(manifest: RunManifest, args: argparse.Namespace) -> int:
    """Writes `observations.txt` and `routes.txt` generated from the scenario."""

    config = manifest.config()
    scenario = _scenario(manifest, theta_r=args.theta_r)
    _route_set(manifest, scenario, config)

    bundle = generate_observations(scenario=scenario, config=config)

    if args.noise:
        bundle = perturb_observations(bundle=bundle, noise=args.noise, seed=args.seed, tree=scenario.tree)

    files.write_observations(bundle=bundle, path=manifest.out.joinpath('observations.txt'))
    files.write_route_set(route_set=scenario.routes(), path=manifest.out.joinpath('routes.txt'))

    return EXIT_OK


def cli_check(manifest: RunManifest, args: argparse.Namespace) -> int:
    """Rebuilds the forecast program, loads the saved solution and writes `kkt_report.csv`."""

    config = manifest.config()
    scenario, route_set, spec, tree = _forecast_program(manifest, args, config)

    program = build_second_stage(
        network=scenario.network,
        route_set=route_set,
        origins=scenario.origins,
        dest_utility=spec.destination_utility(),
        mode_utility=spec.mode_utility(),
        tree=tree,
        config=config
    )
    report = check_kkt(program=program, solution=files.read_solution(path=manifest.require('solution')))

    files.write_kkt_report(report=report, path=manifest.out.joinpath('kkt_report.csv'))
    print(report.to_frame().to_string(index=False))

    return EXIT_OK


COMMANDS = {
    'distribute': cli_distribute,
    'choice': cli_choice,
    'paths': cli_paths,
    'calibrate': cli_calibrate,
    'forecast': cli_forecast,
    'synth': cli_synth,
    'check': cli_check
}


def setup_logging() -> None:
    """Configures the root logger from `DEMANDFORGE_LOG`, warnings only by default."""

    level = os.environ.get('DEMANDFORGE_LOG', 'warning').upper()

    if level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR'):
        level = 'WARNING'

    logging.basicConfig(level=getattr(logging, level), format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def main(argv: List[str] = None) -> int:
    """Runs one command and returns its exit code.

    Arguments:
    ----
    argv {List[str]} -- The arguments after the program name, `sys.argv` when omitted.

    Returns:
    ----
    {int} -- 0 on success, 2 on input errors, 3 on non-convergence.
    """

    setup_logging()

    args = build_parser().parse_args(argv)
    manifest = manifest_from_args(args)

    try:
        manifest.validate()
        return COMMANDS[args.command](manifest, args)
    except ConvergenceError as error:
        logger.error(str(error))
        print("demandforge: {error}".format(error=error), file=sys.stderr)
        return EXIT_NONCONVERGED
    except (DemandForgeError, ValueError, KeyError) as error:
        logger.error(str(error))
        print("demandforge: {error}".format(error=error), file=sys.stderr)
        return EXIT_INPUT


def run() -> None:
    sys.exit(main())
