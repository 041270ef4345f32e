"""Convex programs equivalent to the logit models.

Every program is a maximization. Simplex programs (`HierarchicalProgram`,
`MaxSatisNLProgram`, `JointTripProgram`) are solved directly by
`demandforge.solver.solve_simplex_program`. Calibration programs
(`HierMNLProgram`, `FirstStageProgram`, `MaxEntropyProgram`) carry
nonlinear entropy and aggregate constraints; their multipliers are the
behavioral parameters and are found by `demandforge.solver.solve_calibration`,
which solves one induced simplex program per multiplier vector.
"""

import copy
import dataclasses
import logging

import numpy as np
import pandas as pd

from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

from demandforge.choice import ChoiceIndex
from demandforge.choice import ModeTree
from demandforge.choice import _mode_vector
from demandforge.choice import group_sum
from demandforge.config import SolverConfig
from demandforge.errors import DomainError
from demandforge.errors import HierarchyError
from demandforge.errors import InputError
from demandforge.network import LinkFlowVector
from demandforge.network import ModalNetwork

logger = logging.getLogger(__name__)


def huber(values: np.ndarray, width: float) -> np.ndarray:
    """Smooth absolute value: `x^2 / (2 width)` inside the width, `|x| - width/2` outside."""

    magnitude = np.abs(values)
    return np.where(magnitude <= width, values ** 2 / (2.0 * width), magnitude - width / 2.0)


def huber_derivative(values: np.ndarray, width: float) -> np.ndarray:
    return np.clip(values / width, -1.0, 1.0)


def huber_curvature(values: np.ndarray, width: float) -> np.ndarray:
    return np.where(np.abs(values) <= width, 1.0 / width, 0.0)


@dataclasses.dataclass
class ChoiceLevel():

    """
    One level of a choice hierarchy: conditional probabilities of
    `keys` grouped by `parent`, with their fixed utilities, entropy
    coefficients and log path-size factors.
    """

    label: str
    variable: str
    dual: str
    simplex_dual: str
    parent: np.ndarray
    n_parents: int
    utility: np.ndarray
    coefficient: np.ndarray
    log_path_size: np.ndarray
    keys: pd.Index

    @property
    def size(self) -> int:
        return len(self.parent)


@dataclasses.dataclass
class ObservationBundle():

    """
    Observed trips of every level of the hierarchy, the attribute
    tables and, optionally, observed link counts.
    """

    origins: pd.Series
    trips_ij: pd.Series
    trips_ijm: pd.Series
    dest_attributes: pd.DataFrame
    mode_attributes: pd.DataFrame
    trips_ijM: Optional[pd.Series] = None
    link_counts: Optional[pd.Series] = None
    sigma: float = 0.0

    def with_nest_totals(self, tree: ModeTree) -> 'ObservationBundle':
        """Returns the bundle with `T_ijM` filled in from `T_ijm` when it is missing."""

        if self.trips_ijM is not None:
            return self

        logger.warning("No nest-level observations supplied; summing mode trips within each nest.")

        nest = self.trips_ijm.index.get_level_values('mode').map(tree.nest_of)
        if nest.isna().any():
            raise HierarchyError("Observed modes are missing from the nest structure.")

        keys = [
            self.trips_ijm.index.get_level_values('origin'),
            self.trips_ijm.index.get_level_values('destination'),
            nest
        ]
        totals = self.trips_ijm.groupby(keys, sort=False).sum()
        totals.index.names = ['origin', 'destination', 'nest']

        return dataclasses.replace(self, trips_ijM=totals)

    def validate(self, tree: ModeTree = None, rel_tol: float = 1e-9) -> None:
        """Checks positivity and the hierarchy sums of the observations.

        Overview:
        ----
        Checks `sum_j T_ij = O_i` and either `sum_m T_ijm = T_ij` (no tree) or
        `sum_M T_ijM = T_ij` and `sum_{m in M} T_ijm = T_ijM` (with a tree),
        all within `rel_tol`.

        Keyword Arguments:
        ----
        tree {ModeTree} -- The nest structure, when nests are observed. (default: {None})

        rel_tol {float} -- Relative tolerance of the sums. (default: {1e-9})

        Raises:
        ----
        HierarchyError: Naming the first violated sum or nonpositive cell.
        """

        tables = {'O_i': self.origins, 'T_ij': self.trips_ij, 'T_ijm': self.trips_ijm}
        if tree is not None and self.trips_ijM is not None:
            tables['T_ijM'] = self.trips_ijM

        for name, table in tables.items():
            if table.isna().any() or (table.to_numpy(dtype=float) <= 0).any():
                raise HierarchyError(
                    "Observed {name} must be strictly positive in every cell.".format(name=name)
                )

        self._check_sum(
            children=self.trips_ij.groupby(level='origin', sort=False).sum(),
            parents=self.origins,
            label='sum_j T_ij = O_i',
            rel_tol=rel_tol
        )

        pair_levels = ['origin', 'destination']

        if tree is None or self.trips_ijM is None:
            self._check_sum(
                children=self.trips_ijm.groupby(level=pair_levels, sort=False).sum(),
                parents=self.trips_ij,
                label='sum_m T_ijm = T_ij',
                rel_tol=rel_tol
            )
            return

        self._check_sum(
            children=self.trips_ijM.groupby(level=pair_levels, sort=False).sum(),
            parents=self.trips_ij,
            label='sum_M T_ijM = T_ij',
            rel_tol=rel_tol
        )

        nest = self.trips_ijm.index.get_level_values('mode').map(tree.nest_of)
        if nest.isna().any():
            raise HierarchyError("Observed modes are missing from the nest structure.")

        keys = [
            self.trips_ijm.index.get_level_values('origin'),
            self.trips_ijm.index.get_level_values('destination'),
            nest
        ]
        within = self.trips_ijm.groupby(keys, sort=False).sum()
        within.index.names = ['origin', 'destination', 'nest']

        self._check_sum(children=within, parents=self.trips_ijM, label='sum_{m in M} T_ijm = T_ijM', rel_tol=rel_tol)

    def _check_sum(self, children: pd.Series, parents: pd.Series, label: str, rel_tol: float) -> None:

        children = children.reindex(parents.index)

        if children.isna().any():
            raise HierarchyError(
                "Hierarchy sum {label} has no children for {keys}.".format(
                    label=label,
                    keys=list(children.index[children.isna()])[:3]
                )
            )

        gap = (children - parents).abs() / parents.abs().clip(lower=1.0)

        if (gap > rel_tol).any():
            worst = gap.idxmax()
            raise HierarchyError(
                "Hierarchy sum {label} is violated at {key}: {child} vs {parent}.".format(
                    label=label,
                    key=worst,
                    child=children[worst],
                    parent=parents[worst]
                )
            )


class ConvexProgram():

    """
    Base class of every program. Programs are maximized.
    """

    def __init__(self, name: str, config: SolverConfig = None) -> None:

        self.name = name
        self.config = config or SolverConfig()
        self.warnings: List[str] = []

    def warn(self, message: str) -> None:
        logger.warning("{name}: {message}".format(name=self.name, message=message))
        self.warnings.append(message)

    def describe(self) -> str:
        raise NotImplementedError


class SimplexProgram(ConvexProgram):

    """
    A smooth concave program whose variables are partitioned into
    groups, each group constrained to the probability simplex.

    Subclasses provide `objective`, `unit_gradient`, `masses` and
    `step_scale`. The gradient of the objective is `masses * unit_gradient`,
    where every variable of a group shares the same mass, so stationarity
    on the simplex means equal unit gradients within each group.
    """

    def __init__(self, name: str, groups: np.ndarray, n_groups: int, config: SolverConfig = None) -> None:

        super().__init__(name=name, config=config)

        self.groups = np.asarray(groups, dtype=int)
        self.n_groups = int(n_groups)

        counts = np.bincount(self.groups, minlength=self.n_groups)
        if (counts == 0).any():
            raise InputError("Every simplex of {name} needs at least one variable.".format(name=name))

        self._group_sizes = counts

    @property
    def n_variables(self) -> int:
        return len(self.groups)

    def initial_point(self) -> np.ndarray:
        """Uniform probabilities within every group."""
        return 1.0 / self._group_sizes[self.groups]

    def objective(self, x: np.ndarray) -> float:
        raise NotImplementedError

    def unit_gradient(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def masses(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step_scale(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.masses(x) * self.unit_gradient(x)

    def simplex_families(self) -> List[Tuple[str, np.ndarray, pd.Index]]:
        """Each family of simplex constraints: dual label, group codes and group keys."""
        return [('lambda', np.arange(self.n_groups), pd.RangeIndex(self.n_groups))]

    def parameters(self) -> Dict:
        return {}

    def level_values(self, x: np.ndarray) -> Dict[str, pd.Series]:
        return {'x': pd.Series(x)}

    def link_flows(self, x: np.ndarray) -> Optional[LinkFlowVector]:
        return None

    def describe(self) -> str:

        lines = ["Program: {name} (maximize)".format(name=self.name), "Constraints:"]

        for label, codes, keys in self.simplex_families():
            lines.append("  simplex  {n:>6} rows  [{label}]".format(n=len(codes), label=label))

        return '\n'.join(lines)


class HierarchicalProgram(SimplexProgram):

    """
    Entropy-weighted utility maximization over a hierarchy of
    conditional probabilities:

        max  sum_levels sum_v  m_v p_v (u_v - c_v ln(p_v / PS_v))
             - Beckmann(f) - sigma * Huber(f - f_obs)

    where `m_v` is the trip mass reaching the parent of `v` and the link
    flows `f` are the route trips loaded through the incidence matrix.
    With a single level this is MaxSatisMNL, with destination and mode
    levels the HierMNL variant, with all four levels SecondStage.
    """

    def __init__(self, name: str, levels: List[ChoiceLevel], origin_mass: np.ndarray, origin_keys: pd.Index,
                 network: ModalNetwork = None, incidence=None, sigma: float = 0.0,
                 observed_flows: np.ndarray = None, parameters: Dict = None, config: SolverConfig = None) -> None:
        """Initalizes the program.

        Arguments:
        ----
        name {str} -- The program name.

        levels {List[ChoiceLevel]} -- The levels, top first.

        origin_mass {np.ndarray} -- Trips entering each top-level group.

        origin_keys {pd.Index} -- Labels of the top-level groups.

        Keyword Arguments:
        ----
        network {ModalNetwork} -- Prices the bottom level when given. (default: {None})

        incidence {scipy.sparse.csr_matrix} -- Bottom-level variable by link incidence. (default: {None})

        sigma {float} -- Weight of the observed-flow penalty. (default: {0.0})

        observed_flows {np.ndarray} -- Observed link flows, `NaN` where unobserved. (default: {None})

        parameters {Dict} -- Behavioral parameters reported with the solution. (default: {None})

        config {SolverConfig} -- Supplies the probability floor, Huber width and step cap. (default: {None})

        Raises:
        ----
        InputError: If a level does not nest in the level above.
        """

        offsets = [0]
        group_offsets = [0]
        groups = []

        for position, level in enumerate(levels):

            if position > 0 and level.n_parents != levels[position - 1].size:
                raise InputError(
                    "The level `{label}` must have one group per `{parent}` entry.".format(
                        label=level.label,
                        parent=levels[position - 1].label
                    )
                )

            groups.append(level.parent + group_offsets[-1])
            group_offsets.append(group_offsets[-1] + level.n_parents)
            offsets.append(offsets[-1] + level.size)

        super().__init__(name=name, groups=np.concatenate(groups), n_groups=group_offsets[-1], config=config)

        if sigma < 0:
            raise DomainError("The flow penalty weight sigma must be nonnegative, got {sigma}.".format(sigma=sigma))

        if network is not None and incidence is None:
            raise InputError("A priced program needs the route-link incidence.")

        self.levels = levels
        self.origin_mass = np.asarray(origin_mass, dtype=float)
        self.origin_keys = origin_keys
        self.network = network
        self.incidence = incidence
        self.sigma = float(sigma)
        self.observed_flows = None if observed_flows is None else np.asarray(observed_flows, dtype=float)
        self._parameters = dict(parameters or {})
        self.tolls = None
        self.toll_start = None
        self._offsets = offsets
        self._group_offsets = group_offsets

        if self.sigma > 0 and self.observed_flows is None:
            raise InputError("A flow penalty needs observed link flows.")

    def with_levels(self, levels: List[ChoiceLevel], parameters: Dict = None) -> 'HierarchicalProgram':
        """Returns a program with the same structure and new level data."""

        program = copy.copy(self)
        program.levels = levels
        program.warnings = []
        program._parameters = dict(parameters or {})
        return program

    def with_tolls(self, tolls: np.ndarray) -> 'HierarchicalProgram':
        """Returns the unpenalized program with a toll added to every link cost.

        Overview:
        ----
        For fixed tolls `lambda` this is the inner problem of the flow penalty
        dual: `sigma * Huber(f - f_obs)` is replaced by `lambda (f - f_obs)`
        with `|lambda| <= sigma`.
        """

        program = copy.copy(self)
        program.name = '{name}[tolls]'.format(name=self.name)
        program.sigma = 0.0
        program.tolls = np.asarray(tolls, dtype=float)
        program.warnings = []
        return program

    def flow_gap(self, x: np.ndarray) -> np.ndarray:
        """Deviation of the assembled link flows from the observed ones."""

        parts = self._split(x)
        return self._flow_gap(self._flows(parts=parts, masses=self._level_masses(parts)))

    def parameters(self) -> Dict:
        return self._parameters

    def _split(self, x: np.ndarray) -> List[np.ndarray]:
        return [x[start:stop] for start, stop in zip(self._offsets[:-1], self._offsets[1:])]

    def _level_masses(self, parts: List[np.ndarray]) -> List[np.ndarray]:

        masses = [self.origin_mass[self.levels[0].parent]]

        for position in range(1, len(self.levels)):
            above = masses[-1] * parts[position - 1]
            masses.append(above[self.levels[position].parent])

        return masses

    def _flows(self, parts: List[np.ndarray], masses: List[np.ndarray]) -> Optional[np.ndarray]:

        if self.network is None:
            return None

        return self.incidence.T @ (masses[-1] * parts[-1])

    def _flow_gap(self, flows: np.ndarray) -> np.ndarray:
        """Deviation from the observed flows, zero on unobserved links."""

        gap = flows - np.nan_to_num(self.observed_flows, nan=0.0)
        return np.where(np.isnan(self.observed_flows), 0.0, gap)

    def masses(self, x: np.ndarray) -> np.ndarray:
        return np.concatenate(self._level_masses(self._split(x)))

    def objective(self, x: np.ndarray) -> float:

        parts = self._split(x)
        masses = self._level_masses(parts)
        floor = self.config.probability_floor
        value = 0.0

        for level, p, mass in zip(self.levels, parts, masses):
            log_ratio = np.log(np.maximum(p, floor)) - level.log_path_size
            value += float(np.dot(mass * p, level.utility - level.coefficient * log_ratio))

        if self.network is not None:

            flows = self._flows(parts=parts, masses=masses)
            value -= self.network.beckmann_value(flows=flows)

            if self.tolls is not None:
                value -= float(np.dot(self.tolls, flows))

            if self.sigma > 0:
                value -= self.sigma * float(huber(self._flow_gap(flows), self.config.huber_width).sum())

        return value

    def _bottom_costs(self, parts: List[np.ndarray], masses: List[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
        """Marginal cost and curvature of the bottom level variables."""

        if self.network is None:
            zeros = np.zeros(self.levels[-1].size)
            return zeros, zeros

        flows = self._flows(parts=parts, masses=masses)
        marginal = self.network.link_costs(flows=flows)
        curvature = self.network.link_cost_derivatives(flows=flows)

        if self.tolls is not None:
            marginal = marginal + self.tolls

        if self.sigma > 0:
            gap = self._flow_gap(flows)
            marginal = marginal + self.sigma * huber_derivative(gap, self.config.huber_width)
            curvature = curvature + self.sigma * huber_curvature(gap, self.config.huber_width)

        return self.incidence @ marginal, self.incidence @ curvature

    def unit_gradient(self, x: np.ndarray) -> np.ndarray:

        parts = self._split(x)
        masses = self._level_masses(parts)
        floor = self.config.probability_floor

        costs, _ = self._bottom_costs(parts=parts, masses=masses)
        below = -costs
        units = [None] * len(self.levels)

        # Children hand their expected value up to their parent.
        for position in range(len(self.levels) - 1, -1, -1):

            level = self.levels[position]
            p = parts[position]
            log_ratio = np.log(np.maximum(p, floor)) - level.log_path_size

            units[position] = level.utility - level.coefficient * (log_ratio + 1.0) + below

            if position > 0:
                value = p * (level.utility - level.coefficient * log_ratio + below)
                below = group_sum(value, level.parent, level.n_parents)

        return np.concatenate(units)

    def step_scale(self, x: np.ndarray) -> np.ndarray:

        parts = self._split(x)
        masses = self._level_masses(parts)
        cap = self.config.step_cap

        _, curvature = self._bottom_costs(parts=parts, masses=masses)
        scales = [None] * len(self.levels)

        for position in range(len(self.levels) - 1, -1, -1):

            level = self.levels[position]
            p = parts[position]
            denominator = level.coefficient + masses[position] * p * curvature
            scales[position] = 1.0 / np.maximum(denominator, 1.0 / cap)

            if position > 0:
                curvature = group_sum(p * curvature, level.parent, level.n_parents)

        return np.concatenate(scales)

    def simplex_families(self) -> List[Tuple[str, np.ndarray, pd.Index]]:

        families = []

        for position, level in enumerate(self.levels):
            keys = self.origin_keys if position == 0 else self.levels[position - 1].keys
            codes = np.arange(self._group_offsets[position], self._group_offsets[position + 1])
            families.append((level.simplex_dual, codes, keys))

        return families

    def level_values(self, x: np.ndarray) -> Dict[str, pd.Series]:
        """Conditional probabilities per level, keyed by level label."""

        return {
            level.label: pd.Series(p, index=level.keys, name=level.variable)
            for level, p in zip(self.levels, self._split(x))
        }

    def level_trips(self, x: np.ndarray) -> Dict[str, pd.Series]:
        """Trips reaching every entry, `mass * p`, keyed by level label."""

        parts = self._split(x)
        masses = self._level_masses(parts)

        return {
            level.label: pd.Series(mass * p, index=level.keys, name='T')
            for level, p, mass in zip(self.levels, parts, masses)
        }

    def link_flows(self, x: np.ndarray) -> Optional[LinkFlowVector]:

        if self.network is None:
            return None

        parts = self._split(x)
        flows = self._flows(parts=parts, masses=self._level_masses(parts))

        return self.network.flow_vector(values=np.maximum(flows, 0.0))

    def describe(self) -> str:

        lines = ["Program: {name} (maximize)".format(name=self.name), "Blocks:"]

        for level in self.levels:
            coefficients = np.unique(np.round(level.coefficient, 12))
            lines.append(
                "  {variable:<10} {n:>6} variables  entropy weight [{dual}] = {values}".format(
                    variable=level.variable,
                    n=level.size,
                    dual=level.dual,
                    values=', '.join('{0:.6g}'.format(value) for value in coefficients[:6])
                )
            )

        lines.append("Constraints:")

        for level, (label, codes, _) in zip(self.levels, self.simplex_families()):
            lines.append(
                "  sum {variable} = 1  {n:>6} rows  [{label}]".format(variable=level.variable, n=len(codes), label=label)
            )

        if self.network is not None:
            lines.append(
                "  f = sum T_ijmr delta  {n:>6} links  (substituted)".format(n=self.network.n_links)
            )
            lines.append("Objective terms: fixed utilities, weighted entropies, -Beckmann(f)")

        if self.sigma > 0:
            lines.append("  - sigma * Huber(f - f_obs), sigma = {sigma:.6g}".format(sigma=self.sigma))

        return '\n'.join(lines)


class MaxSatisNLProgram(SimplexProgram):

    """
    Satisfaction maximization for nested logit over the joint
    probabilities of one choice set:

        max  sum V p - (1/theta) sum_m [tau_B p ln p + (1 - tau_B) p ln P_B]

    where `P_B` sums the probabilities of the nest of `m`. Nests with
    `tau = 0` (perfectly correlated alternatives) are allowed.
    """

    def __init__(self, utilities: np.ndarray, tree: ModeTree, config: SolverConfig = None) -> None:

        modes = tree.modes
        super().__init__(name='MaxSatisNL', groups=np.zeros(len(modes), dtype=int), n_groups=1, config=config)

        self.tree = tree
        self.keys = pd.Index(modes, name='mode')
        self.utilities = np.asarray(utilities, dtype=float)
        self.theta = tree.theta_m
        self.nest_codes = np.array([tree.nest_names.index(tree.nest_of[mode]) for mode in modes])
        self.tau = np.array([tree.tau[tree.nest_of[mode]] for mode in modes])

    def _nest_totals(self, x: np.ndarray) -> np.ndarray:
        return group_sum(x, self.nest_codes, len(self.tree.nest_names))[self.nest_codes]

    def objective(self, x: np.ndarray) -> float:

        floor = self.config.probability_floor
        log_p = np.log(np.maximum(x, floor))
        log_nest = np.log(np.maximum(self._nest_totals(x), floor))
        entropy = x * (self.tau * log_p + (1.0 - self.tau) * log_nest)

        return float(np.dot(self.utilities, x) - entropy.sum() / self.theta)

    def unit_gradient(self, x: np.ndarray) -> np.ndarray:

        floor = self.config.probability_floor
        log_p = np.log(np.maximum(x, floor))
        log_nest = np.log(np.maximum(self._nest_totals(x), floor))

        return self.utilities - (self.tau * (log_p + 1.0) + (1.0 - self.tau) * (log_nest + 1.0)) / self.theta

    def masses(self, x: np.ndarray) -> np.ndarray:
        return np.ones_like(x)

    def step_scale(self, x: np.ndarray) -> np.ndarray:
        return np.full_like(x, self.theta)

    def simplex_families(self) -> List[Tuple[str, np.ndarray, pd.Index]]:
        return [('lambda', np.array([0]), pd.Index(['choice']))]

    def parameters(self) -> Dict:
        return {'theta_m': self.theta, 'tau': dict(self.tree.tau)}

    def level_values(self, x: np.ndarray) -> Dict[str, pd.Series]:

        nest_share = self._nest_totals(x)

        return {
            'mode': pd.Series(x, index=self.keys, name='p_m'),
            'mode_in_nest': pd.Series(x / nest_share, index=self.keys, name='p_m/M')
        }

    def describe(self) -> str:

        lines = [
            "Program: MaxSatisNL (maximize)",
            "Blocks:",
            "  p_m        {n:>6} variables  theta = {theta:.6g}".format(n=self.n_variables, theta=self.theta),
            "Objective terms: sum V p - (1/theta) sum [tau_B p ln p + (1 - tau_B) p ln P_B]",
            "Constraints:",
            "  sum p_m = 1       1 rows  [lambda]"
        ]

        return '\n'.join(lines)


class JointTripProgram(SimplexProgram):

    """
    HierMNLVariant2 in trip variables:

        max  -(1/theta_j') sum T_ij ln T_ij - (1/theta_m) sum T_ijm ln T_ijm
             + sum T_ij V_ij + sum T_ijm V_ijm,   1/theta_j' = 1/theta_j - 1/theta_m

    with `T_ij = sum_m T_ijm` and `sum_jm T_ijm = O_i`. Each origin's trips
    are a scaled simplex, stored as `x = T_ijm / O_i`.
    """

    def __init__(self, index: ChoiceIndex, origin_mass: np.ndarray, dest_utility: np.ndarray,
                 mode_utility: np.ndarray, theta_j: float, theta_m: float, config: SolverConfig = None) -> None:

        groups = index.pair_origin[index.mode_pair]
        super().__init__(name='HierMNLVariant2', groups=groups, n_groups=len(index.origins), config=config)

        self.index = index
        self.origin_mass = np.asarray(origin_mass, dtype=float)
        self.dest_utility = np.asarray(dest_utility, dtype=float)
        self.mode_utility = np.asarray(mode_utility, dtype=float)
        self.theta_j = float(theta_j)
        self.theta_m = float(theta_m)
        self.pair_coefficient = 1.0 / theta_j - 1.0 / theta_m
        self.mode_coefficient = 1.0 / theta_m

        if self.pair_coefficient < 0:
            self.warn(
                "1/theta_j' = 1/theta_j - 1/theta_m = {value:.6g} is negative (theta_j > theta_m).".format(
                    value=self.pair_coefficient
                )
            )

    def _trips(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:

        mode_trips = self.origin_mass[self.groups] * x
        pair_trips = group_sum(mode_trips, self.index.mode_pair, len(self.index.pairs))

        return pair_trips, mode_trips

    def objective(self, x: np.ndarray) -> float:

        floor = self.config.probability_floor
        pair_trips, mode_trips = self._trips(x)

        value = -self.pair_coefficient * np.dot(pair_trips, np.log(np.maximum(pair_trips, floor)))
        value -= self.mode_coefficient * np.dot(mode_trips, np.log(np.maximum(mode_trips, floor)))
        value += np.dot(pair_trips, self.dest_utility) + np.dot(mode_trips, self.mode_utility)

        return float(value)

    def unit_gradient(self, x: np.ndarray) -> np.ndarray:

        floor = self.config.probability_floor
        pair_trips, mode_trips = self._trips(x)
        log_pair = np.log(np.maximum(pair_trips, floor))[self.index.mode_pair]

        return (
            -self.pair_coefficient * (log_pair + 1.0)
            - self.mode_coefficient * (np.log(np.maximum(mode_trips, floor)) + 1.0)
            + self.dest_utility[self.index.mode_pair]
            + self.mode_utility
        )

    def masses(self, x: np.ndarray) -> np.ndarray:
        return self.origin_mass[self.groups]

    def step_scale(self, x: np.ndarray) -> np.ndarray:

        pair_trips, mode_trips = self._trips(x)
        share = mode_trips / np.maximum(pair_trips[self.index.mode_pair], self.config.probability_floor)

        return 1.0 / (self.mode_coefficient + self.pair_coefficient * share)

    def simplex_families(self) -> List[Tuple[str, np.ndarray, pd.Index]]:
        return [('lambda_i', np.arange(self.n_groups), pd.Index(self.index.origins, name='origin'))]

    def parameters(self) -> Dict:
        return {'theta_j': self.theta_j, 'theta_m': self.theta_m}

    def level_values(self, x: np.ndarray) -> Dict[str, pd.Series]:

        pair_trips, mode_trips = self._trips(x)
        origin_mass = self.origin_mass[self.index.pair_origin]

        return {
            'destination': pd.Series(pair_trips / origin_mass, index=self.index.pairs, name='p_j/i'),
            'mode': pd.Series(mode_trips / pair_trips[self.index.mode_pair], index=self.index.modes, name='p_m/ij')
        }

    def level_trips(self, x: np.ndarray) -> Dict[str, pd.Series]:

        pair_trips, mode_trips = self._trips(x)

        return {
            'destination': pd.Series(pair_trips, index=self.index.pairs, name='T'),
            'mode': pd.Series(mode_trips, index=self.index.modes, name='T')
        }

    def describe(self) -> str:

        lines = [
            "Program: HierMNLVariant2 (maximize)",
            "Blocks:",
            "  T_ijm      {n:>6} variables  (T_ij = sum_m T_ijm)".format(n=self.n_variables),
            "  entropy weights: 1/theta_j' = {pair:.6g}, 1/theta_m = {mode:.6g}".format(
                pair=self.pair_coefficient,
                mode=self.mode_coefficient
            ),
            "Constraints:",
            "  sum_jm T_ijm = O_i  {n:>6} rows  [lambda_i]".format(n=self.n_groups)
        ]

        return '\n'.join(lines)


def _single_level(label: str, variable: str, dual: str, simplex_dual: str, parent: np.ndarray, n_parents: int,
                  utility: np.ndarray, coefficient: Union[float, np.ndarray], keys: pd.Index) -> ChoiceLevel:

    size = len(parent)

    return ChoiceLevel(
        label=label,
        variable=variable,
        dual=dual,
        simplex_dual=simplex_dual,
        parent=np.asarray(parent, dtype=int),
        n_parents=int(n_parents),
        utility=np.asarray(utility, dtype=float),
        coefficient=np.broadcast_to(np.asarray(coefficient, dtype=float), (size,)).copy(),
        log_path_size=np.zeros(size),
        keys=keys
    )


def build_max_satis_mnl(utilities: Union[pd.Series, Sequence[float]], theta: float,
                        config: SolverConfig = None) -> HierarchicalProgram:
    """Builds MaxSatisMNL: `max sum V p - (1/theta) sum p ln p` on the simplex.

    Arguments:
    ----
    utilities {Union[pd.Series, Sequence[float]]} -- Fixed utility of each alternative.

    theta {float} -- The positive scale.

    Keyword Arguments:
    ----
    config {SolverConfig} -- Solver settings. (default: {None})

    Returns:
    ----
    {HierarchicalProgram} -- A one-level program whose optimum is the MNL.

    Usage:
    ----
        >>> program = build_max_satis_mnl(utilities=[1.0, 0.0], theta=1.0)
        >>> state, duals = solve_simplex_program(program=program)
    """

    if not theta > 0:
        raise DomainError("The scale theta must be positive, got {theta}.".format(theta=theta))

    if isinstance(utilities, pd.Series):
        keys = pd.Index(utilities.index, name='alternative')
        values = utilities.to_numpy(dtype=float)
    else:
        values = np.asarray(utilities, dtype=float)
        keys = pd.RangeIndex(len(values), name='alternative')

    if values.size == 0:
        raise InputError("A choice set needs at least one alternative.")

    level = _single_level(
        label='alternative',
        variable='p_m',
        dual='1/theta',
        simplex_dual='lambda',
        parent=np.zeros(len(values)),
        n_parents=1,
        utility=values,
        coefficient=1.0 / theta,
        keys=keys
    )

    return HierarchicalProgram(
        name='MaxSatisMNL',
        levels=[level],
        origin_mass=np.ones(1),
        origin_keys=pd.Index(['choice']),
        parameters={'theta': float(theta)},
        config=config
    )


def build_max_satis_nl(utilities: Union[pd.Series, Dict[str, float], Sequence[float]], tree: ModeTree,
                       config: SolverConfig = None) -> MaxSatisNLProgram:
    """Builds MaxSatisNL over the modes of `tree`, scale `tree.theta_m`."""

    return MaxSatisNLProgram(utilities=_mode_vector(utilities, tree.modes), tree=tree, config=config)


def _aligned_frame(frame: pd.DataFrame, index: pd.MultiIndex, label: str) -> np.ndarray:

    aligned = frame.reindex(index)

    if aligned.isna().any().any():
        raise InputError(
            "{label} attributes are missing for {keys}.".format(
                label=label,
                keys=list(aligned.index[aligned.isna().any(axis=1)])[:3]
            )
        )

    return aligned.to_numpy(dtype=float).reshape(len(index), frame.shape[1])


def _aligned_series(series: pd.Series, index: pd.MultiIndex, label: str) -> np.ndarray:

    aligned = series.reindex(index)

    if aligned.isna().any():
        raise HierarchyError(
            "{label} is missing for {keys}.".format(label=label, keys=list(aligned.index[aligned.isna()])[:3])
        )

    return aligned.to_numpy(dtype=float)


def _constant_columns(values: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Marks the columns whose values never vary within a group."""

    if values.shape[1] == 0:
        return np.zeros(0, dtype=bool)

    frame = pd.DataFrame(values)
    grouped = frame.groupby(groups)
    spread = (grouped.max() - grouped.min()).abs().max(axis=0).to_numpy()
    scale = np.abs(values).max(axis=0)

    return spread <= 1e-12 * np.maximum(1.0, scale)


class CalibrationProgram(ConvexProgram):

    """
    A program with nonlinear entropy-match and aggregate-match
    constraints. For a fixed vector of their multipliers the Lagrangian
    is a `SimplexProgram`, returned by `inner_program`; the multipliers
    that make `residuals` vanish are the calibrated parameters.

    Every free multiplier is paired with the constraint it controls.
    Multipliers may be fixed or tied to another multiplier when the data
    cannot identify them.
    """

    def __init__(self, name: str, config: SolverConfig = None) -> None:

        super().__init__(name=name, config=config)

        self.dual_names: List[str] = []
        self.dual_labels: Dict[str, str] = {}
        self.positive: set = set()
        self.fixed: Dict[str, float] = {}
        self.ties: Dict[str, str] = {}
        self.pairs: Dict[str, str] = {}
        self.targets = pd.Series(dtype=float)

    def _add_dual(self, name: str, label: str, residual: Optional[str], positive: bool = False) -> None:

        self.dual_names.append(name)
        self.dual_labels[name] = label

        if residual is not None:
            self.pairs[name] = residual

        if positive:
            self.positive.add(name)

    def fix(self, name: str, value: float, reason: str) -> None:
        """Holds a multiplier at a value, with a warning naming the reason."""

        self.fixed[name] = float(value)
        self.warn("{dual} fixed at {value:.6g}: {reason}".format(dual=name, value=value, reason=reason))

    def tie(self, name: str, source: str, reason: str) -> None:
        """Makes a multiplier follow another one."""

        self.ties[name] = source
        self.warn("{dual} tied to {source}: {reason}".format(dual=name, source=source, reason=reason))

    @property
    def free_duals(self) -> List[str]:
        return [name for name in self.dual_names if name not in self.fixed and name not in self.ties]

    @property
    def residual_names(self) -> List[str]:
        return [self.pairs[name] for name in self.free_duals]

    def initial_duals(self) -> Dict[str, float]:
        return {name: (1.0 if name in self.positive else 0.0) for name in self.dual_names}

    def resolve(self, free_values: Dict[str, float]) -> Dict[str, float]:
        """Completes a free multiplier vector with the fixed and tied ones."""

        duals = self.initial_duals()
        duals.update(free_values)
        duals.update(self.fixed)

        for name, source in self.ties.items():
            duals[name] = duals[source]

        return duals

    def inner_program(self, duals: Dict[str, float]) -> SimplexProgram:
        raise NotImplementedError

    def statistics(self, program: SimplexProgram, x: np.ndarray) -> pd.Series:
        """Model-side value of every constraint left-hand side."""
        raise NotImplementedError

    def parameters(self, duals: Dict[str, float]) -> Dict:
        raise NotImplementedError

    def constraint_residuals(self, program: SimplexProgram, x: np.ndarray) -> pd.Series:
        """Scaled residuals `(model - observed) / max(1, |observed|)` of every constraint."""

        model = self.statistics(program=program, x=x)
        return ((model - self.targets) / self.targets.abs().clip(lower=1.0)).rename('residual')

    def residuals(self, program: SimplexProgram, x: np.ndarray) -> np.ndarray:
        """Scaled residuals of the constraints paired with free multipliers."""

        return self.constraint_residuals(program=program, x=x).reindex(self.residual_names).to_numpy(dtype=float)

    def describe(self) -> str:

        lines = ["Program: {name} (maximize, calibration)".format(name=self.name), "Constraints:"]

        for name in self.dual_names:

            if name in self.fixed:
                status = 'fixed = {value:.6g}'.format(value=self.fixed[name])
            elif name in self.ties:
                status = 'tied to {source}'.format(source=self.ties[name])
            else:
                status = 'free'

            lines.append(
                "  {constraint:<28} [{label}]  {status}".format(
                    constraint=self.pairs.get(name, '-'),
                    label=self.dual_labels[name],
                    status=status
                )
            )

        for label in self.targets.index:
            if label not in self.pairs.values():
                lines.append("  {constraint:<28} (reported)".format(constraint=label))

        lines.append("Observed targets:")
        for label, value in self.targets.items():
            lines.append("  {label:<28} {value:.12g}".format(label=label, value=value))

        return '\n'.join(lines)


def _entropy(trips: np.ndarray, probability: np.ndarray, floor: float) -> float:
    return float(-np.dot(trips, np.log(np.maximum(probability, floor))))


class FirstStageProgram(CalibrationProgram):

    """
    FirstStage (and, with `sigma > 0`, FirstStageVariant):

        max  -(1/theta_r) sum T_ijmr ln(p_r/ijm / PS) - Beckmann(f) [- sigma Huber(f - f_obs)]

    subject to destination, nest and per-nest mode entropies matching the
    observed ones (multipliers 1/theta_j, 1/theta_m, tau_M/theta_m), the
    aggregate attribute matches (beta_k, beta_q), the four simplex
    families and the flow definition. For fixed multipliers the
    Lagrangian is the SecondStage-shaped `HierarchicalProgram`.
    """

    def __init__(self, network: ModalNetwork, route_set, bundle: ObservationBundle, tree: ModeTree, theta_r: float,
                 sigma: float = 0.0, observed_flows: pd.Series = None, config: SolverConfig = None) -> None:

        super().__init__(name='FirstStageVariant' if sigma > 0 else 'FirstStage', config=config)

        if not theta_r > 0:
            raise DomainError("The route scale theta_r must be positive, got {theta}.".format(theta=theta_r))

        if sigma < 0:
            raise DomainError("The flow penalty weight sigma must be nonnegative, got {sigma}.".format(sigma=sigma))

        bundle = bundle.with_nest_totals(tree=tree)
        bundle.validate(tree=tree)

        self.tree = tree
        self.theta_r = float(theta_r)
        self.sigma = float(sigma)
        self.network = network
        self.index = ChoiceIndex(pairs=bundle.trips_ij.index, tree=tree, route_set=route_set)
        index = self.index

        self.origin_mass = _aligned_series(bundle.origins, pd.Index(index.origins), 'O_i')
        self.dest_x = _aligned_frame(bundle.dest_attributes, index.pairs, 'Destination')
        self.mode_x = _aligned_frame(bundle.mode_attributes, index.modes, 'Mode')
        self.k_names = [str(name) for name in bundle.dest_attributes.columns]
        self.q_names = [str(name) for name in bundle.mode_attributes.columns]
        self.incidence = route_set.incidence[index.route_rows]
        self.log_path_size = np.log(route_set.frame['path_size'].to_numpy(dtype=float)[index.route_rows])
        self.mode_nest_name = np.array([tree.nest_of[mode] for mode in index.modes.get_level_values('mode')])

        self.observed_flows = None
        if sigma > 0:
            counts = observed_flows if observed_flows is not None else bundle.link_counts
            if counts is None:
                raise InputError("FirstStageVariant needs observed link counts.")
            self.observed_flows = counts.reindex(network.frame.index).to_numpy(dtype=float)

        observed_dest = _aligned_series(bundle.trips_ij, index.pairs, 'T_ij')
        observed_nest = _aligned_series(bundle.trips_ijM, index.nests, 'T_ijM')
        observed_mode = _aligned_series(bundle.trips_ijm, index.modes, 'T_ijm')

        self._add_dual('inv_theta_j', '1/theta_j', 'entropy_destination', positive=True)
        self._add_dual('inv_theta_m', '1/theta_m', 'entropy_nest', positive=True)

        for nest in tree.nest_names:
            self._add_dual(
                'tau_over_theta_m[{nest}]'.format(nest=nest),
                'tau_{nest}/theta_m'.format(nest=nest),
                'entropy_mode[{nest}]'.format(nest=nest),
                positive=True
            )

        for name in self.k_names:
            self._add_dual('beta_k[{name}]'.format(name=name), 'beta_k', 'aggregate_k[{name}]'.format(name=name))

        for name in self.q_names:
            self._add_dual('beta_q[{name}]'.format(name=name), 'beta_q', 'aggregate_q[{name}]'.format(name=name))

        self.targets = self._statistics(
            dest_trips=observed_dest,
            nest_trips=observed_nest,
            mode_trips=observed_mode,
            dest_p=observed_dest / self.origin_mass[index.pair_origin],
            nest_p=observed_nest / observed_dest[index.nest_pair],
            mode_p=observed_mode / observed_nest[index.mode_nest]
        )

        self._structural_fixes()

    def _structural_fixes(self) -> None:

        index = self.index
        tree = self.tree

        if np.bincount(index.pair_origin, minlength=len(index.origins)).max() == 1:
            self.fix('inv_theta_j', 1.0, 'every origin has a single destination')
            for name in self.k_names:
                self.fix('beta_k[{name}]'.format(name=name), 0.0, 'every origin has a single destination')
        else:
            for name, constant in zip(self.k_names, _constant_columns(self.dest_x, index.pair_origin)):
                if constant:
                    self.fix('beta_k[{name}]'.format(name=name), 0.0, 'attribute does not vary over destinations')

        origin_of_mode = index.pair_origin[index.mode_pair]
        for name, constant in zip(self.q_names, _constant_columns(self.mode_x, origin_of_mode)):
            if constant:
                self.fix('beta_q[{name}]'.format(name=name), 0.0, 'attribute does not vary over destinations and modes')

        single_nest = len(tree.nest_names) == 1

        for nest in tree.nest_names:

            if len(tree.nests[nest]) > 1:
                continue

            dual = 'tau_over_theta_m[{nest}]'.format(nest=nest)

            if single_nest:
                self.fix(dual, 1.0, 'the only nest holds a single mode')
            else:
                self.tie(dual, 'inv_theta_m', 'single-mode nest, tau = 1')

        if single_nest:
            nest = tree.nest_names[0]
            self.tie('inv_theta_m', 'tau_over_theta_m[{nest}]'.format(nest=nest), 'single nest, tau = 1')

    def _statistics(self, dest_trips: np.ndarray, nest_trips: np.ndarray, mode_trips: np.ndarray,
                    dest_p: np.ndarray, nest_p: np.ndarray, mode_p: np.ndarray) -> pd.Series:

        floor = self.config.probability_floor
        values = {
            'entropy_destination': _entropy(dest_trips, dest_p, floor),
            'entropy_nest': _entropy(nest_trips, nest_p, floor)
        }

        for nest in self.tree.nest_names:
            members = self.mode_nest_name == nest
            values['entropy_mode[{nest}]'.format(nest=nest)] = _entropy(mode_trips[members], mode_p[members], floor)

        for position, name in enumerate(self.k_names):
            values['aggregate_k[{name}]'.format(name=name)] = float(np.dot(dest_trips, self.dest_x[:, position]))

        for position, name in enumerate(self.q_names):
            values['aggregate_q[{name}]'.format(name=name)] = float(np.dot(mode_trips, self.mode_x[:, position]))

        return pd.Series(values, dtype=float)

    def _betas(self, duals: Dict[str, float]) -> Tuple[np.ndarray, np.ndarray]:

        beta_k = np.array([duals['beta_k[{name}]'.format(name=name)] for name in self.k_names])
        beta_q = np.array([duals['beta_q[{name}]'.format(name=name)] for name in self.q_names])

        return beta_k, beta_q

    def inner_program(self, duals: Dict[str, float]) -> HierarchicalProgram:
        """The SecondStage-shaped program induced by fixed multipliers."""

        beta_k, beta_q = self._betas(duals=duals)
        tau_over_theta = {
            nest: duals['tau_over_theta_m[{nest}]'.format(nest=nest)] for nest in self.tree.nest_names
        }

        levels = extended_levels(
            index=self.index,
            dest_utility=self.dest_x @ beta_k,
            mode_utility=self.mode_x @ beta_q,
            inv_theta_j=duals['inv_theta_j'],
            inv_theta_m=duals['inv_theta_m'],
            tau_over_theta_m=tau_over_theta,
            inv_theta_r=1.0 / self.theta_r,
            log_path_size=self.log_path_size
        )

        return HierarchicalProgram(
            name='{name}[inner]'.format(name=self.name),
            levels=levels,
            origin_mass=self.origin_mass,
            origin_keys=pd.Index(self.index.origins, name='origin'),
            network=self.network,
            incidence=self.incidence,
            sigma=self.sigma,
            observed_flows=self.observed_flows,
            parameters=self.parameters(duals=duals),
            config=self.config
        )

    def statistics(self, program: HierarchicalProgram, x: np.ndarray) -> pd.Series:

        parts = program._split(x)
        masses = program._level_masses(parts)
        trips = [mass * p for mass, p in zip(masses, parts)]

        return self._statistics(
            dest_trips=trips[0],
            nest_trips=trips[1],
            mode_trips=trips[2],
            dest_p=parts[0],
            nest_p=parts[1],
            mode_p=parts[2]
        )

    def parameters(self, duals: Dict[str, float]) -> Dict:

        theta_m = 1.0 / duals['inv_theta_m']

        return {
            'theta_j': 1.0 / duals['inv_theta_j'],
            'theta_m': theta_m,
            'theta_r': self.theta_r,
            'tau': {
                nest: duals['tau_over_theta_m[{nest}]'.format(nest=nest)] * theta_m for nest in self.tree.nest_names
            },
            'beta_k': {name: duals['beta_k[{name}]'.format(name=name)] for name in self.k_names},
            'beta_q': {name: duals['beta_q[{name}]'.format(name=name)] for name in self.q_names}
        }


class HierMNLProgram(CalibrationProgram):

    """
    HierMNL: maximize the joint destination-mode entropy subject to the
    destination and mode entropies and the attribute aggregates matching
    their observed values.

    The multipliers are determined only up to a common scale, so the mode
    coefficient 1/theta_m is anchored and the rest are calibrated against
    the destination entropy and the aggregates. The mode entropy match is
    reported alongside.
    """

    def __init__(self, bundle: ObservationBundle, inv_theta_m: float = 1.0, config: SolverConfig = None) -> None:

        super().__init__(name='HierMNL', config=config)

        if not inv_theta_m > 0:
            raise DomainError("The anchored 1/theta_m must be positive, got {value}.".format(value=inv_theta_m))

        bundle.validate()

        modes = list(pd.unique(bundle.trips_ijm.index.get_level_values('mode')))
        self.index = ChoiceIndex(pairs=bundle.trips_ij.index, tree=ModeTree.multinomial(modes))
        index = self.index

        self.origin_mass = _aligned_series(bundle.origins, pd.Index(index.origins), 'O_i')
        self.dest_x = _aligned_frame(bundle.dest_attributes, index.pairs, 'Destination')
        self.mode_x = _aligned_frame(bundle.mode_attributes, index.modes, 'Mode')
        self.k_names = [str(name) for name in bundle.dest_attributes.columns]
        self.q_names = [str(name) for name in bundle.mode_attributes.columns]

        observed_dest = _aligned_series(bundle.trips_ij, index.pairs, 'T_ij')
        observed_mode = _aligned_series(bundle.trips_ijm, index.modes, 'T_ijm')

        self._add_dual('inv_theta_j', '1/theta_j', 'entropy_destination', positive=True)
        self._add_dual('inv_theta_m', '1/theta_m', None, positive=True)

        for name in self.k_names:
            self._add_dual('beta_k[{name}]'.format(name=name), 'beta_k', 'aggregate_k[{name}]'.format(name=name))

        for name in self.q_names:
            self._add_dual('beta_q[{name}]'.format(name=name), 'beta_q', 'aggregate_q[{name}]'.format(name=name))

        # Anchors the common scale of the multipliers.
        self.fixed['inv_theta_m'] = float(inv_theta_m)

        self.targets = self._statistics(
            dest_trips=observed_dest,
            mode_trips=observed_mode,
            dest_p=observed_dest / self.origin_mass[index.pair_origin],
            mode_p=observed_mode / observed_dest[index.mode_pair]
        )

        if np.bincount(index.pair_origin, minlength=len(index.origins)).max() == 1:
            self.fix('inv_theta_j', 1.0, 'every origin has a single destination')
            for name in self.k_names:
                self.fix('beta_k[{name}]'.format(name=name), 0.0, 'every origin has a single destination')
        else:
            for name, constant in zip(self.k_names, _constant_columns(self.dest_x, index.pair_origin)):
                if constant:
                    self.fix('beta_k[{name}]'.format(name=name), 0.0, 'attribute does not vary over destinations')

        origin_of_mode = index.pair_origin[index.mode_pair]
        for name, constant in zip(self.q_names, _constant_columns(self.mode_x, origin_of_mode)):
            if constant:
                self.fix('beta_q[{name}]'.format(name=name), 0.0, 'attribute does not vary over destinations and modes')

    def _statistics(self, dest_trips: np.ndarray, mode_trips: np.ndarray, dest_p: np.ndarray,
                    mode_p: np.ndarray) -> pd.Series:

        floor = self.config.probability_floor
        values = {
            'entropy_destination': _entropy(dest_trips, dest_p, floor),
            'entropy_mode': _entropy(mode_trips, mode_p, floor)
        }

        for position, name in enumerate(self.k_names):
            values['aggregate_k[{name}]'.format(name=name)] = float(np.dot(dest_trips, self.dest_x[:, position]))

        for position, name in enumerate(self.q_names):
            values['aggregate_q[{name}]'.format(name=name)] = float(np.dot(mode_trips, self.mode_x[:, position]))

        return pd.Series(values, dtype=float)

    def inner_program(self, duals: Dict[str, float]) -> HierarchicalProgram:

        beta_k = np.array([duals['beta_k[{name}]'.format(name=name)] for name in self.k_names])
        beta_q = np.array([duals['beta_q[{name}]'.format(name=name)] for name in self.q_names])

        return HierarchicalProgram(
            name='HierMNL[inner]',
            levels=hier_mnl_levels(
                index=self.index,
                dest_utility=self.dest_x @ beta_k,
                mode_utility=self.mode_x @ beta_q,
                inv_theta_j=duals['inv_theta_j'],
                inv_theta_m=duals['inv_theta_m']
            ),
            origin_mass=self.origin_mass,
            origin_keys=pd.Index(self.index.origins, name='origin'),
            parameters=self.parameters(duals=duals),
            config=self.config
        )

    def statistics(self, program: HierarchicalProgram, x: np.ndarray) -> pd.Series:

        parts = program._split(x)
        masses = program._level_masses(parts)

        return self._statistics(
            dest_trips=masses[0] * parts[0],
            mode_trips=masses[1] * parts[1],
            dest_p=parts[0],
            mode_p=parts[1]
        )

    def parameters(self, duals: Dict[str, float]) -> Dict:

        return {
            'theta_j': 1.0 / duals['inv_theta_j'],
            'theta_m': 1.0 / duals['inv_theta_m'],
            'beta_k': {name: duals['beta_k[{name}]'.format(name=name)] for name in self.k_names},
            'beta_q': {name: duals['beta_q[{name}]'.format(name=name)] for name in self.q_names}
        }


class MaxEntropyProgram(CalibrationProgram):

    """
    MaxEntropy for individual MNL choices:

        max  -(1/theta) sum_h sum_m p_hm ln p_hm

    subject to each alternative's predicted count matching its observed
    count (multipliers gamma_m, the alternative-specific constants) and
    each attribute's aggregate matching (multipliers alpha_k, the taste
    parameters). The last constant is normalized to zero.
    """

    def __init__(self, choices: np.ndarray, attributes: np.ndarray, theta: float = 1.0,
                 alternatives: List[str] = None, attribute_names: List[str] = None,
                 config: SolverConfig = None) -> None:

        super().__init__(name='MaxEntropy', config=config)

        choices = np.asarray(choices, dtype=float)
        attributes = np.asarray(attributes, dtype=float)

        if choices.ndim != 2 or attributes.ndim != 3 or attributes.shape[:2] != choices.shape:
            raise InputError("Choices must be (individuals, alternatives) and attributes (individuals, alternatives, k).")

        if not ((choices == 0) | (choices == 1)).all() or not (choices.sum(axis=1) == 1).all():
            raise InputError("Every individual's observed choice must be one-hot.")

        if not theta > 0:
            raise DomainError("The scale theta must be positive, got {theta}.".format(theta=theta))

        n_individuals, n_alternatives = choices.shape
        self.alternatives = [str(name) for name in (alternatives or range(n_alternatives))]
        self.attribute_names = [str(name) for name in (attribute_names or range(attributes.shape[2]))]
        self.choices = choices
        self.attributes = attributes
        self.theta = float(theta)

        counts = choices.sum(axis=0)
        if (counts == 0).any():
            raise InputError(
                "Alternatives {names} are never chosen; their share constraints are unreachable.".format(
                    names=[name for name, count in zip(self.alternatives, counts) if count == 0]
                )
            )

        self.keys = pd.MultiIndex.from_product(
            [range(n_individuals), self.alternatives], names=['individual', 'alternative']
        )
        self.flat_attributes = attributes.reshape(n_individuals * n_alternatives, -1)

        for name in self.alternatives[:-1]:
            self._add_dual('asc[{name}]'.format(name=name), 'gamma_m', 'share[{name}]'.format(name=name))

        for name in self.attribute_names:
            self._add_dual('alpha[{name}]'.format(name=name), 'alpha_k', 'aggregate[{name}]'.format(name=name))

        self.targets = self._statistics(p=choices.reshape(-1))

    def _statistics(self, p: np.ndarray) -> pd.Series:

        shares = p.reshape(self.choices.shape).sum(axis=0)
        values = {'share[{name}]'.format(name=name): float(share) for name, share in zip(self.alternatives, shares)}

        for position, name in enumerate(self.attribute_names):
            values['aggregate[{name}]'.format(name=name)] = float(np.dot(p, self.flat_attributes[:, position]))

        return pd.Series(values, dtype=float)

    def inner_program(self, duals: Dict[str, float]) -> HierarchicalProgram:

        n_individuals, n_alternatives = self.choices.shape
        asc = np.array([duals.get('asc[{name}]'.format(name=name), 0.0) for name in self.alternatives])
        alpha = np.array([duals['alpha[{name}]'.format(name=name)] for name in self.attribute_names])
        utility = np.tile(asc, n_individuals) + self.flat_attributes @ alpha

        level = _single_level(
            label='alternative',
            variable='p_hm',
            dual='1/theta',
            simplex_dual='lambda_h',
            parent=np.repeat(np.arange(n_individuals), n_alternatives),
            n_parents=n_individuals,
            utility=utility,
            coefficient=1.0 / self.theta,
            keys=self.keys
        )

        return HierarchicalProgram(
            name='MaxEntropy[inner]',
            levels=[level],
            origin_mass=np.ones(n_individuals),
            origin_keys=pd.RangeIndex(n_individuals, name='individual'),
            parameters=self.parameters(duals=duals),
            config=self.config
        )

    def statistics(self, program: HierarchicalProgram, x: np.ndarray) -> pd.Series:
        return self._statistics(p=x)

    def parameters(self, duals: Dict[str, float]) -> Dict:

        return {
            'theta': self.theta,
            'asc': {name: duals.get('asc[{name}]'.format(name=name), 0.0) for name in self.alternatives},
            'beta_k': {name: duals['alpha[{name}]'.format(name=name)] for name in self.attribute_names}
        }


def extended_levels(index: ChoiceIndex, dest_utility: np.ndarray, mode_utility: np.ndarray, inv_theta_j: float,
                    inv_theta_m: float, tau_over_theta_m: Dict[str, float], inv_theta_r: float,
                    log_path_size: np.ndarray) -> List[ChoiceLevel]:
    """The destination, nest, mode and route levels of the extended logit hierarchy.

    Arguments:
    ----
    index {ChoiceIndex} -- The choice sets, routes included.

    dest_utility {np.ndarray} -- `V_ij` aligned with `index.pairs`.

    mode_utility {np.ndarray} -- `V_ijm` aligned with `index.modes`.

    inv_theta_j {float} -- Destination entropy weight.

    inv_theta_m {float} -- Nest entropy weight.

    tau_over_theta_m {Dict[str, float]} -- Within-nest entropy weight per nest.

    inv_theta_r {float} -- Route entropy weight.

    log_path_size {np.ndarray} -- `ln PS` aligned with `index.routes`.

    Returns:
    ----
    {List[ChoiceLevel]} -- The four levels, top first.
    """

    mode_names = index.modes.get_level_values('mode')
    within = np.array([tau_over_theta_m[index.tree.nest_of[mode]] for mode in mode_names])

    destination = _single_level(
        label='destination',
        variable='p_j/i',
        dual='1/theta_j',
        simplex_dual='lambda_i',
        parent=index.pair_origin,
        n_parents=len(index.origins),
        utility=dest_utility,
        coefficient=inv_theta_j,
        keys=index.pairs
    )

    nest = _single_level(
        label='nest',
        variable='p_M/ij',
        dual='1/theta_m',
        simplex_dual='mu_ij',
        parent=index.nest_pair,
        n_parents=len(index.pairs),
        utility=np.zeros(len(index.nests)),
        coefficient=inv_theta_m,
        keys=index.nests
    )

    mode = _single_level(
        label='mode',
        variable='p_m/M',
        dual='tau_M/theta_m',
        simplex_dual='kappa_ijM',
        parent=index.mode_nest,
        n_parents=len(index.nests),
        utility=mode_utility,
        coefficient=within,
        keys=index.modes
    )

    route = _single_level(
        label='route',
        variable='p_r/ijm',
        dual='1/theta_r',
        simplex_dual='nu_ijm',
        parent=index.route_mode,
        n_parents=len(index.modes),
        utility=np.zeros(len(index.routes)),
        coefficient=inv_theta_r,
        keys=index.routes
    )
    route.log_path_size = np.asarray(log_path_size, dtype=float)

    return [destination, nest, mode, route]


def hier_mnl_levels(index: ChoiceIndex, dest_utility: np.ndarray, mode_utility: np.ndarray, inv_theta_j: float,
                    inv_theta_m: float) -> List[ChoiceLevel]:
    """The destination and mode levels of the hierarchical MNL."""

    destination = _single_level(
        label='destination',
        variable='p_j/i',
        dual='1/theta_j',
        simplex_dual='lambda_i',
        parent=index.pair_origin,
        n_parents=len(index.origins),
        utility=dest_utility,
        coefficient=inv_theta_j,
        keys=index.pairs
    )

    mode = _single_level(
        label='mode',
        variable='p_m/ij',
        dual='1/theta_m',
        simplex_dual='mu_ij',
        parent=index.mode_pair,
        n_parents=len(index.pairs),
        utility=mode_utility,
        coefficient=inv_theta_m,
        keys=index.modes
    )

    return [destination, mode]


def build_max_entropy_mnl(choices: np.ndarray, attributes: np.ndarray, theta: float = 1.0,
                          alternatives: List[str] = None, attribute_names: List[str] = None,
                          config: SolverConfig = None) -> MaxEntropyProgram:
    """Builds MaxEntropy over individual one-hot choices `y_hm` and attributes `X_hmk`."""

    return MaxEntropyProgram(
        choices=choices,
        attributes=attributes,
        theta=theta,
        alternatives=alternatives,
        attribute_names=attribute_names,
        config=config
    )


def build_hier_mnl(bundle: ObservationBundle, inv_theta_m: float = 1.0, config: SolverConfig = None) -> HierMNLProgram:
    """Builds HierMNL from an observation bundle, anchoring 1/theta_m."""

    return HierMNLProgram(bundle=bundle, inv_theta_m=inv_theta_m, config=config)


def _hier_mnl_index(bundle: ObservationBundle) -> ChoiceIndex:

    bundle.validate()
    modes = list(pd.unique(bundle.trips_ijm.index.get_level_values('mode')))

    return ChoiceIndex(pairs=bundle.trips_ij.index, tree=ModeTree.multinomial(modes))


def build_hier_mnl_variant(bundle: ObservationBundle, theta_j: float, theta_m: float, dest_utility: pd.Series,
                           mode_utility: pd.Series, config: SolverConfig = None) -> HierarchicalProgram:
    """Builds HierMNLVariant: given scales and utilities, a two-level entropy program.

    Arguments:
    ----
    bundle {ObservationBundle} -- Supplies `O_i` and the choice sets.

    theta_j {float} -- Destination scale.

    theta_m {float} -- Mode scale.

    dest_utility {pd.Series} -- `V_ij`.

    mode_utility {pd.Series} -- `V_ijm`.

    Keyword Arguments:
    ----
    config {SolverConfig} -- Solver settings. (default: {None})

    Returns:
    ----
    {HierarchicalProgram} -- Optimum equals the closed-form hierarchical MNL.
    """

    if not (theta_j > 0 and theta_m > 0):
        raise DomainError("Scales must be positive, got theta_j={tj}, theta_m={tm}.".format(tj=theta_j, tm=theta_m))

    index = _hier_mnl_index(bundle=bundle)

    return HierarchicalProgram(
        name='HierMNLVariant',
        levels=hier_mnl_levels(
            index=index,
            dest_utility=_aligned_series(dest_utility, index.pairs, 'V_ij'),
            mode_utility=_aligned_series(mode_utility, index.modes, 'V_ijm'),
            inv_theta_j=1.0 / theta_j,
            inv_theta_m=1.0 / theta_m
        ),
        origin_mass=_aligned_series(bundle.origins, pd.Index(index.origins), 'O_i'),
        origin_keys=pd.Index(index.origins, name='origin'),
        parameters={'theta_j': float(theta_j), 'theta_m': float(theta_m)},
        config=config
    )


def build_hier_mnl_variant2(bundle: ObservationBundle, theta_j: float, theta_m: float, dest_utility: pd.Series,
                            mode_utility: pd.Series, config: SolverConfig = None) -> JointTripProgram:
    """Builds HierMNLVariant2 in trip variables, with `1/theta_j' = 1/theta_j - 1/theta_m` as stated."""

    if not (theta_j > 0 and theta_m > 0):
        raise DomainError("Scales must be positive, got theta_j={tj}, theta_m={tm}.".format(tj=theta_j, tm=theta_m))

    index = _hier_mnl_index(bundle=bundle)

    return JointTripProgram(
        index=index,
        origin_mass=_aligned_series(bundle.origins, pd.Index(index.origins), 'O_i'),
        dest_utility=_aligned_series(dest_utility, index.pairs, 'V_ij'),
        mode_utility=_aligned_series(mode_utility, index.modes, 'V_ijm'),
        theta_j=theta_j,
        theta_m=theta_m,
        config=config
    )


def build_first_stage(network: ModalNetwork, route_set, bundle: ObservationBundle, tree: ModeTree, theta_r: float,
                      config: SolverConfig = None) -> FirstStageProgram:
    """Builds FirstStage. Only the nest membership of `tree` is used."""

    return FirstStageProgram(
        network=network,
        route_set=route_set,
        bundle=bundle,
        tree=tree,
        theta_r=theta_r,
        config=config
    )


def build_first_stage_variant(network: ModalNetwork, route_set, bundle: ObservationBundle, tree: ModeTree,
                              theta_r: float, sigma: float, observed_flows: pd.Series = None,
                              config: SolverConfig = None) -> FirstStageProgram:
    """Builds FirstStageVariant: FirstStage with `sigma * Huber(f - f_obs)` subtracted.

    Overview:
    ----
    `sigma = 0` gives back FirstStage exactly. Observed flows default to the
    bundle's link counts; unobserved links carry no penalty.
    """

    return FirstStageProgram(
        network=network,
        route_set=route_set,
        bundle=bundle,
        tree=tree,
        theta_r=theta_r,
        sigma=sigma,
        observed_flows=observed_flows,
        config=config
    )


def build_second_stage(network: ModalNetwork, route_set, origins: pd.Series, dest_utility: pd.Series,
                       mode_utility: pd.Series, tree: ModeTree, theta_r: float = None,
                       config: SolverConfig = None) -> HierarchicalProgram:
    """Builds SecondStage: the forecast program with every parameter fixed.

    Overview:
    ----
    Entropy weights are 1/theta_j at the destination level, 1/theta_m at the
    nest level, tau_M/theta_m within nests and 1/theta_r at the route level,
    which is exactly the Lagrangian of FirstStage at its optimal multipliers.

    Arguments:
    ----
    network {ModalNetwork} -- The (future) network.

    route_set {RouteSet} -- The frozen route set.

    origins {pd.Series} -- Future productions, strictly positive.

    dest_utility {pd.Series} -- `V_ij` indexed by `(origin, destination)`.

    mode_utility {pd.Series} -- `V_ijm` indexed by `(origin, destination, mode)`.

    tree {ModeTree} -- Calibrated scales and dissimilarities.

    Keyword Arguments:
    ----
    theta_r {float} -- Overrides `tree.theta_r`. (default: {None})

    config {SolverConfig} -- Solver settings. (default: {None})

    Raises:
    ----
    DomainError: If a production is not strictly positive or a scale is invalid.

    Returns:
    ----
    {HierarchicalProgram} -- The four-level program.
    """

    theta_r = tree.theta_r if theta_r is None else theta_r

    if not theta_r > 0:
        raise DomainError("The route scale theta_r must be positive, got {theta}.".format(theta=theta_r))

    index = ChoiceIndex(pairs=dest_utility.index, tree=tree, route_set=route_set)
    origin_mass = _aligned_series(origins, pd.Index(index.origins), 'O_i')

    if (origin_mass <= 0).any():
        raise DomainError("Future productions must be strictly positive.")

    levels = extended_levels(
        index=index,
        dest_utility=_aligned_series(dest_utility, index.pairs, 'V_ij'),
        mode_utility=_aligned_series(mode_utility, index.modes, 'V_ijm'),
        inv_theta_j=1.0 / tree.theta_j,
        inv_theta_m=1.0 / tree.theta_m,
        tau_over_theta_m={nest: value / tree.theta_m for nest, value in tree.tau.items()},
        inv_theta_r=1.0 / theta_r,
        log_path_size=np.log(route_set.frame['path_size'].to_numpy(dtype=float)[index.route_rows])
    )

    return HierarchicalProgram(
        name='SecondStage',
        levels=levels,
        origin_mass=origin_mass,
        origin_keys=pd.Index(index.origins, name='origin'),
        network=network,
        incidence=route_set.incidence[index.route_rows],
        parameters={
            'theta_j': tree.theta_j,
            'theta_m': tree.theta_m,
            'theta_r': float(theta_r),
            'tau': dict(tree.tau)
        },
        config=config
    )


def describe(program: ConvexProgram) -> str:
    """Textual dump of a program's blocks, constraints and multiplier labels."""

    return program.describe()
