import pprint

from demandforge.choice import ModeTree
from demandforge.choice import mnl_prob
from demandforge.choice import nl_prob
from demandforge.estimation import estimate_mnl_mle
from demandforge.estimation import simulate_mnl_sample
from demandforge.programs import build_max_entropy_mnl
from demandforge.programs import build_max_satis_mnl
from demandforge.programs import build_max_satis_nl
from demandforge.solver import check_kkt
from demandforge.solver import solve_calibration
from demandforge.solver import solve_simplex_program

# Closed form MNL shares.
utilities = [1.0, 0.0, -0.5]
print(mnl_prob(utilities=utilities, theta=1.5))

# The same shares as the optimum of the satisfaction program.
program = build_max_satis_mnl(utilities=utilities, theta=1.5)
print(program.describe())

state, duals = solve_simplex_program(program=program)
print(state.x)
print(state.history.tail())

# The simplex multiplier is the expected maximum utility less 1/theta.
pprint.pprint({label: values.to_dict() for label, values in duals.multipliers.items()})
print(check_kkt(program=program, solution=state).to_frame())

# Nested logit, with bus and rail sharing a nest.
tree = ModeTree(
    nests={'private': ['car'], 'transit': ['bus', 'rail']},
    tau={'transit': 0.6},
    theta_m=1.2
)
mode_utilities = {'car': 0.5, 'bus': 0.0, 'rail': 0.2}

print(nl_prob(utilities=mode_utilities, tree=tree))

nested_state, _ = solve_simplex_program(program=build_max_satis_nl(utilities=mode_utilities, tree=tree))
pprint.pprint({level: values.to_dict() for level, values in nested_state.probabilities.items()})

# Estimate an MNL from individual choices two ways.
choices, attributes = simulate_mnl_sample(n=500, beta=[1.0, -0.5], asc=[0.3, -0.2, 0.0], seed=3)

likelihood = estimate_mnl_mle(choices=choices, attributes=attributes)
print('Maximum likelihood: beta={beta}, asc={asc}'.format(beta=likelihood.beta, asc=likelihood.asc))

# The entropy program's multipliers are the same estimates.
entropy_program = build_max_entropy_mnl(choices=choices, attributes=attributes, attribute_names=['time', 'cost'])
entropy_state, entropy_duals = solve_calibration(program=entropy_program)
print(entropy_duals.parameters())
