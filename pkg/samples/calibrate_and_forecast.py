import pprint
import pathlib

from demandforge.estimation import fixed_point_oracle
from demandforge.estimation import forecast
from demandforge.estimation import calibrated_model
from demandforge.estimation import generate_observations
from demandforge.estimation import mode_totals
from demandforge.estimation import recover_and_compare
from demandforge.files import read_scenario
from demandforge.programs import build_first_stage
from demandforge.solver import check_kkt
from demandforge.solver import solve_calibration

# Grab the scenarios that ship with the tests.
fixtures = pathlib.Path(__file__).parents[1].joinpath('tests', 'fixtures')
base_year = read_scenario(path=fixtures.joinpath('flat.scenario'))
congested = read_scenario(path=fixtures.joinpath('congested.scenario'))

# Generate the base year observations from the known parameters.
bundle = generate_observations(scenario=base_year)
bundle.validate(tree=base_year.tree)

# Build the calibration program and print its layout.
first_stage = build_first_stage(
    network=base_year.network,
    route_set=base_year.routes(),
    bundle=bundle,
    tree=base_year.tree,
    theta_r=base_year.tree.theta_r
)
print(first_stage.describe())

# Calibrate, the parameters come back as multipliers.
state, duals = solve_calibration(program=first_stage)
pprint.pprint(duals.parameters().to_dict())

# Check the first-order conditions of the calibrated solution.
report = check_kkt(program=first_stage, solution=state)
print(report.to_frame())

# Or do all of the above in one call and compare against the truth.
recovery = recover_and_compare(scenario=base_year)
print(recovery.frame)
print('Largest relative error: {error:.2e}'.format(error=recovery.max_error))

# Plug the parameters back in and forecast with a fifth more productions.
spec, tree = calibrated_model(
    duals=duals,
    utility_spec=base_year.utility_spec,
    tree=base_year.tree
)

future_state, future_duals = forecast(
    network=base_year.network,
    route_set=base_year.routes(),
    origins=base_year.origins * 1.2,
    utility_spec=spec,
    tree=tree
)
print(mode_totals(future_state))

# On a congested network the forecast program and the averaging oracle
# should land on the same link flows.
congested_state, _ = forecast(
    network=congested.network,
    route_set=congested.routes(),
    origins=congested.origins,
    utility_spec=congested.utility_spec,
    tree=congested.tree
)
print(congested_state.link_flows.series)

equilibrium = fixed_point_oracle(
    network=congested.network,
    route_set=congested.routes(),
    utility_spec=congested.utility_spec,
    tree=congested.tree,
    origins=congested.origins
)
print(equilibrium.link_flows.series)
print('Oracle iterations: {n}, residual: {r:.2e}'.format(n=equilibrium.iterations, r=equilibrium.residual))
print(equilibrium.history.tail())
