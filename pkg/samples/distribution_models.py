import pprint
import pathlib

import pandas as pd

from demandforge.distribution import gravity_balance
from demandforge.distribution import multi_mode_distribution
from demandforge.distribution import od_cost_matrix
from demandforge.distribution import solve_most_probable
from demandforge.files import read_od_costs
from demandforge.files import read_zones

# Grab the two zone system that ships with the tests.
fixtures = pathlib.Path(__file__).parents[1].joinpath('tests', 'fixtures')
zones = read_zones(path=fixtures.joinpath('zones_2x2.txt'))
costs = od_cost_matrix(
    od_costs=read_od_costs(path=fixtures.joinpath('costs_2x2.txt')),
    zones=zones.zones
)

# Balance a doubly constrained gravity model.
gravity = gravity_balance(
    productions=zones.productions,
    attractions=zones.attractions,
    costs=costs,
    beta=1.0
)
print(gravity.trips.frame)
print('Balanced in {n} sweeps.'.format(n=gravity.iterations))

# The most probable matrix with the same cost sensitivity is the same table.
most_probable = solve_most_probable(
    productions=zones.productions,
    attractions=zones.attractions,
    costs=costs,
    beta=1.0
)
print(most_probable.trips.frame)

# Give a total cost budget instead, the sensitivity becomes its multiplier.
budgeted = solve_most_probable(
    productions=zones.productions,
    attractions=zones.attractions,
    costs=costs,
    budget=0.4
)
pprint.pprint({'beta': budgeted.beta, 'total_cost': budgeted.total_cost, 'entropy': budgeted.entropy})

# Distribute and split over two modes at once.
mode_costs = pd.Series(
    data=[0.0, 1.0, 1.0, 0.0, 0.5, 1.5, 1.5, 0.5],
    index=pd.MultiIndex.from_tuples(
        [
            ('a', 'a', 'car'), ('a', 'b', 'car'), ('b', 'a', 'car'), ('b', 'b', 'car'),
            ('a', 'a', 'bus'), ('a', 'b', 'bus'), ('b', 'a', 'bus'), ('b', 'b', 'bus')
        ],
        names=['origin', 'destination', 'mode']
    )
)
balanced, split = multi_mode_distribution(
    productions=zones.productions,
    attractions=zones.attractions,
    costs=mode_costs,
    beta=1.0
)
print(split)
