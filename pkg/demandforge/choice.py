"""Closed-form logit evaluators.

Covers the multinomial, nested, path-size and hierarchical extended
logit models. These are the references every convex program in
`demandforge.programs` is checked against.
"""

import dataclasses
import logging

import numpy as np
import pandas as pd

from scipy.special import logsumexp
from scipy.special import softmax

from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

from demandforge.errors import DomainError
from demandforge.errors import InputError
from demandforge.errors import NestingError
from demandforge.errors import RouteError

logger = logging.getLogger(__name__)

PAIR_LEVELS = ['origin', 'destination']
NEST_LEVELS = ['origin', 'destination', 'nest']
MODE_LEVELS = ['origin', 'destination', 'mode']
ROUTE_LEVELS = ['origin', 'destination', 'mode', 'route']


def group_logsumexp(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    """Computes a max-shifted log-sum-exp within each group.

    Arguments:
    ----
    values {np.ndarray} -- The values to aggregate.

    groups {np.ndarray} -- The group code of every value, in `[0, n_groups)`.

    n_groups {int} -- The number of groups.

    Returns:
    ----
    {np.ndarray} -- One entry per group, `-inf` for empty groups.
    """

    shift = np.full(n_groups, -np.inf)
    np.maximum.at(shift, groups, values)

    finite_shift = np.where(np.isfinite(shift), shift, 0.0)
    totals = np.bincount(groups, weights=np.exp(values - finite_shift[groups]), minlength=n_groups)

    with np.errstate(divide='ignore'):
        return finite_shift + np.log(totals)


def group_sum(values: np.ndarray, groups: np.ndarray, n_groups: int) -> np.ndarray:
    return np.bincount(groups, weights=values, minlength=n_groups)


def _check_scale(theta: float, name: str = 'theta') -> None:

    if not theta > 0:
        raise DomainError("The scale `{name}` must be positive, got {theta}.".format(name=name, theta=theta))


def mnl_prob(utilities: Sequence[float], theta: float) -> np.ndarray:
    """Multinomial logit probabilities `e^(theta V_m) / sum e^(theta V_m')`.

    Arguments:
    ----
    utilities {Sequence[float]} -- One fixed utility per alternative.

    theta {float} -- The positive scale.

    Raises:
    ----
    InputError: If there are no alternatives.

    Returns:
    ----
    {np.ndarray} -- The choice probabilities.

    Usage:
    ----
        >>> mnl_prob(utilities=[1.0, 0.0], theta=1.0)
        array([0.73105858, 0.26894142])
    """

    utilities = np.asarray(utilities, dtype=float)

    if utilities.size == 0:
        raise InputError("A choice set needs at least one alternative.")

    _check_scale(theta)

    return softmax(theta * utilities)


def mnl_satisfaction(utilities: Sequence[float], theta: float) -> float:
    """Expected maximum utility `(1/theta) ln sum e^(theta V_m)`."""

    utilities = np.asarray(utilities, dtype=float)

    if utilities.size == 0:
        raise InputError("A choice set needs at least one alternative.")

    _check_scale(theta)

    return float(logsumexp(theta * utilities) / theta)


def entropy(probabilities: Sequence[float], floor: float = 1e-300) -> float:
    """Shannon entropy `-sum p ln p`, logarithms floored at `floor`."""

    probabilities = np.asarray(probabilities, dtype=float)

    return float(-(probabilities * np.log(np.maximum(probabilities, floor))).sum())


class ModeTree():

    """
    The nest structure over the modes plus the scale of every
    choice level.
    """

    def __init__(self, nests: Dict[str, List[str]], tau: Dict[str, float] = None, theta_j: float = 1.0,
                 theta_m: float = 1.0, theta_r: float = 1.0) -> None:
        """Initalizes the tree.

        Arguments:
        ----
        nests {Dict[str, List[str]]} -- The members `B(m)` of every nest.

        Keyword Arguments:
        ----
        tau {Dict[str, float]} -- Dissimilarity factor of each nest, 1.0 where absent. (default: {None})

        theta_j {float} -- Destination scale. (default: {1.0})

        theta_m {float} -- Mode scale. (default: {1.0})

        theta_r {float} -- Route scale. (default: {1.0})

        Raises:
        ----
        InputError: If a nest is empty or a mode sits in two nests.

        DomainError: If a dissimilarity factor is outside [0, 1] or a scale is not positive.

        Usage:
        ----
            >>> tree = ModeTree(
                nests={'private': ['car'], 'transit': ['bus', 'rail']},
                tau={'transit': 0.6},
                theta_m=1.2
            )
            >>> tree.nest_of['rail']
            'transit'
        """

        self._nests = {str(name): [str(mode) for mode in members] for name, members in nests.items()}
        self._tau = {name: 1.0 for name in self._nests}

        for name, value in (tau or {}).items():
            if name not in self._nests:
                raise InputError("Dissimilarity given for unknown nest `{nest}`.".format(nest=name))
            self._tau[name] = float(value)

        self._nest_of = {}

        for name, members in self._nests.items():

            if not members:
                raise InputError("The nest `{nest}` has no alternatives.".format(nest=name))

            for mode in members:
                if mode in self._nest_of:
                    raise InputError(
                        "The mode `{mode}` belongs to both `{first}` and `{second}`.".format(
                            mode=mode,
                            first=self._nest_of[mode],
                            second=name
                        )
                    )
                self._nest_of[mode] = name

        for name, value in self._tau.items():
            if not 0.0 <= value <= 1.0:
                raise DomainError(
                    "The dissimilarity of nest `{nest}` must lie in [0, 1], got {tau}.".format(nest=name, tau=value)
                )

        _check_scale(theta_j, 'theta_j')
        _check_scale(theta_m, 'theta_m')
        _check_scale(theta_r, 'theta_r')

        self.theta_j = float(theta_j)
        self.theta_m = float(theta_m)
        self.theta_r = float(theta_r)

    @classmethod
    def multinomial(cls, modes: List[str], **scales) -> 'ModeTree':
        """A tree with one nest per mode, which is plain MNL at the mode level."""

        return cls(nests={mode: [mode] for mode in modes}, **scales)

    @property
    def nests(self) -> Dict[str, List[str]]:
        return self._nests

    @property
    def nest_names(self) -> List[str]:
        return list(self._nests)

    @property
    def modes(self) -> List[str]:
        """Every mode, ordered nest by nest."""
        return [mode for members in self._nests.values() for mode in members]

    @property
    def nest_of(self) -> Dict[str, str]:
        return self._nest_of

    @property
    def tau(self) -> Dict[str, float]:
        return self._tau

    def replace(self, **changes) -> 'ModeTree':
        """Returns a copy with some scales or dissimilarities replaced."""

        arguments = {
            'nests': self._nests,
            'tau': self._tau,
            'theta_j': self.theta_j,
            'theta_m': self.theta_m,
            'theta_r': self.theta_r
        }
        arguments.update(changes)

        return ModeTree(**arguments)

    def __repr__(self) -> str:
        return "ModeTree(nests={nests}, tau={tau}, theta_j={tj}, theta_m={tm}, theta_r={tr})".format(
            nests=self._nests,
            tau=self._tau,
            tj=self.theta_j,
            tm=self.theta_m,
            tr=self.theta_r
        )


def _mode_vector(utilities: Union[pd.Series, Dict[str, float], Sequence[float]], modes: List[str]) -> np.ndarray:

    if isinstance(utilities, dict):
        utilities = pd.Series(utilities)

    if isinstance(utilities, pd.Series):
        missing = set(modes).difference(utilities.index)
        if missing:
            raise InputError("Utilities are missing for the modes: {modes}".format(modes=sorted(missing)))
        return utilities.reindex(modes).to_numpy(dtype=float)

    utilities = np.asarray(utilities, dtype=float)

    if utilities.shape != (len(modes),):
        raise InputError(
            "Expected {n} utilities, got an array of shape {shape}.".format(n=len(modes), shape=utilities.shape)
        )

    return utilities


def nl_prob(utilities: Union[pd.Series, Dict[str, float], Sequence[float]], tree: ModeTree) -> np.ndarray:
    """Nested logit probabilities `p_m = p_B(m) p_m/B(m)`.

    Arguments:
    ----
    utilities {Union[pd.Series, Dict[str, float], Sequence[float]]} -- Fixed
        utilities keyed by mode, or aligned with `tree.modes`.

    tree {ModeTree} -- The nest structure, `tree.theta_m` is the scale.

    Raises:
    ----
    NestingError: If a nest has a zero dissimilarity factor.

    Returns:
    ----
    {np.ndarray} -- The probabilities, aligned with `tree.modes`.
    """

    modes = tree.modes
    utilities = _mode_vector(utilities=utilities, modes=modes)

    zero_nests = [name for name, value in tree.tau.items() if value == 0.0]
    if zero_nests:
        raise NestingError(
            "Nests {nests} have tau = 0, which has no closed form; use the entropy formulation "
            "(build_max_satis_nl) instead.".format(nests=zero_nests)
        )

    nest_codes = np.array([tree.nest_names.index(tree.nest_of[mode]) for mode in modes])
    tau = np.array([tree.tau[name] for name in tree.nest_names])

    scaled = tree.theta_m * utilities / tau[nest_codes]
    within = group_logsumexp(scaled, nest_codes, len(tau))
    inclusive_value = tau * within

    nest_probability = softmax(inclusive_value)
    conditional = np.exp(scaled - within[nest_codes])

    return nest_probability[nest_codes] * conditional


def path_size_factor(route_set, origin: str, destination: str, mode: str, r: int) -> float:
    """Path-size factor of the `r`-th route of an `(i, j, m)` choice set.

    Overview:
    ----
    `PS = sum over links a in r of (l_a / L_r) / (number of routes in the
    choice set using a)`. It equals 1 exactly when the route shares no link.

    Arguments:
    ----
    route_set {demandforge.routes.RouteSet} -- The route set.

    origin {str} -- The origin zone.

    destination {str} -- The destination zone.

    mode {str} -- The mode.

    r {int} -- Position of the route in its choice set.

    Raises:
    ----
    InputError: If the route has zero length.

    Returns:
    ----
    {float} -- The factor, in (0, 1].
    """

    routes = route_set.get_routes(origin=origin, destination=destination, mode=mode)
    route = routes[r]
    lengths = route_set.link_lengths(route=route)
    total_length = float(sum(lengths))

    if total_length <= 0:
        raise InputError("The route {route} has zero length.".format(route=route))

    usage = [sum(1 for other in routes if link in other.link_set) for link in route.links]

    return float(sum(length / total_length / count for length, count in zip(lengths, usage)))


def path_size_logit_prob(utilities: Sequence[float], path_size: Sequence[float], theta_r: float) -> np.ndarray:
    """Path-size logit probabilities `PS_r e^(theta_r V_r) / sum PS e^(theta_r V)`."""

    utilities = np.asarray(utilities, dtype=float)
    path_size = np.asarray(path_size, dtype=float)

    if utilities.size == 0:
        raise InputError("A choice set needs at least one route.")

    if utilities.shape != path_size.shape:
        raise InputError("Route utilities and path-size factors must align.")

    if ((path_size <= 0) | (path_size > 1.0 + 1e-12)).any():
        raise DomainError("Path-size factors must lie in (0, 1].")

    _check_scale(theta_r, 'theta_r')

    return softmax(theta_r * utilities + np.log(path_size))


class UtilitySpec():

    """
    Attribute tables and their parameters. The destination utility is
    `V_ij = sum_k beta_k X^k_ij` and the mode utility is
    `V_ijm = sum_q beta_q X^q_ijm`.
    """

    def __init__(self, dest_attributes: pd.DataFrame, mode_attributes: pd.DataFrame,
                 beta_k: Dict[str, float] = None, beta_q: Dict[str, float] = None) -> None:
        """Initalizes the utility specification.

        Arguments:
        ----
        dest_attributes {pd.DataFrame} -- Indexed by `(origin, destination)`, one column per attribute `k`.

        mode_attributes {pd.DataFrame} -- Indexed by `(origin, destination, mode)`, one column per attribute `q`.

        Keyword Arguments:
        ----
        beta_k {Dict[str, float]} -- One parameter per destination attribute. (default: {None})

        beta_q {Dict[str, float]} -- One parameter per mode attribute. (default: {None})

        Raises:
        ----
        InputError: If a table is not dense over its index set or a parameter
            does not match an attribute.
        """

        self.dest_attributes = dest_attributes.astype(float).rename_axis(index=PAIR_LEVELS)
        self.mode_attributes = mode_attributes.astype(float).rename_axis(index=MODE_LEVELS)
        self.beta_k = {str(key): float(value) for key, value in (beta_k or {}).items()}
        self.beta_q = {str(key): float(value) for key, value in (beta_q or {}).items()}

        self._check_parameters(columns=self.dest_attributes.columns, beta=self.beta_k, level='destination')
        self._check_parameters(columns=self.mode_attributes.columns, beta=self.beta_q, level='mode')

        if self.dest_attributes.isna().any().any() or self.mode_attributes.isna().any().any():
            raise InputError("Attribute tables must not contain missing values.")

        expected = pd.MultiIndex.from_tuples(
            [(origin, destination, mode) for origin, destination in self.pairs for mode in self.modes],
            names=MODE_LEVELS
        )

        if len(self.mode_attributes) != len(expected) or not expected.isin(self.mode_attributes.index).all():
            raise InputError(
                "Mode attributes must cover every (origin, destination, mode) combination of the "
                "destination attribute pairs."
            )

    def _check_parameters(self, columns: pd.Index, beta: Dict[str, float], level: str) -> None:

        missing = set(columns).difference(beta)
        extra = set(beta).difference(columns)

        if missing or extra:
            raise InputError(
                "The {level} attributes {columns} do not match the parameters {names}.".format(
                    level=level,
                    columns=sorted(columns),
                    names=sorted(beta)
                )
            )

    @property
    def pairs(self) -> pd.MultiIndex:
        return self.dest_attributes.index

    @property
    def modes(self) -> List[str]:
        return list(pd.unique(self.mode_attributes.index.get_level_values('mode')))

    def destination_utility(self) -> pd.Series:
        """`V_ij` for every pair."""

        weights = pd.Series(self.beta_k, dtype=float).reindex(self.dest_attributes.columns)
        return (self.dest_attributes * weights).sum(axis=1).rename('utility')

    def mode_utility(self) -> pd.Series:
        """`V_ijm` for every pair and mode."""

        weights = pd.Series(self.beta_q, dtype=float).reindex(self.mode_attributes.columns)
        return (self.mode_attributes * weights).sum(axis=1).rename('utility')

    def replace(self, beta_k: Dict[str, float] = None, beta_q: Dict[str, float] = None) -> 'UtilitySpec':
        """Returns the same attributes with new parameters."""

        return UtilitySpec(
            dest_attributes=self.dest_attributes,
            mode_attributes=self.mode_attributes,
            beta_k=self.beta_k if beta_k is None else beta_k,
            beta_q=self.beta_q if beta_q is None else beta_q
        )


class ChoiceIndex():

    """
    The ordered choice sets of the hierarchy: pairs `(i, j)`, nests
    `(i, j, M)`, modes `(i, j, m)` and routes `(i, j, m, r)`, with the
    parent of every entry. Closed forms and convex programs share it,
    so their outputs line up row for row.
    """

    def __init__(self, pairs: Union[pd.MultiIndex, List[Tuple[str, str]]], tree: ModeTree,
                 route_set=None) -> None:
        """Initalizes the index.

        Arguments:
        ----
        pairs {Union[pd.MultiIndex, List[Tuple[str, str]]]} -- The `(origin, destination)` pairs.

        tree {ModeTree} -- Supplies the nests and modes of every pair.

        Keyword Arguments:
        ----
        route_set {demandforge.routes.RouteSet} -- Adds the route level when given. (default: {None})

        Raises:
        ----
        RouteError: If a pair and mode has no route in the route set.
        """

        pairs = pd.MultiIndex.from_tuples([tuple(pair) for pair in pairs], names=PAIR_LEVELS)

        if pairs.duplicated().any():
            raise InputError("Origin-destination pairs must be unique.")

        self.tree = tree
        self.pairs = pairs
        self.origins = list(pd.unique(pairs.get_level_values('origin')))
        self.pair_origin = pd.Index(self.origins).get_indexer(pairs.get_level_values('origin'))

        nest_names = tree.nest_names
        modes = tree.modes

        self.nests = pd.MultiIndex.from_tuples(
            [(origin, destination, nest) for origin, destination in pairs for nest in nest_names],
            names=NEST_LEVELS
        )
        self.nest_pair = np.repeat(np.arange(len(pairs)), len(nest_names))
        self.nest_tau = np.tile(np.array([tree.tau[nest] for nest in nest_names]), len(pairs))

        self.modes = pd.MultiIndex.from_tuples(
            [(origin, destination, mode) for origin, destination in pairs for mode in modes],
            names=MODE_LEVELS
        )
        nest_position = np.array([nest_names.index(tree.nest_of[mode]) for mode in modes])
        self.mode_pair = np.repeat(np.arange(len(pairs)), len(modes))
        self.mode_nest = self.mode_pair * len(nest_names) + np.tile(nest_position, len(pairs))
        self.mode_tau = self.nest_tau[self.mode_nest]

        self.routes = None
        self.route_mode = None
        self.route_rows = None

        if route_set is not None:
            self._index_routes(route_set=route_set)

    def _index_routes(self, route_set) -> None:

        frame = route_set.frame
        codes = self.modes.get_indexer(frame.index.droplevel('route'))

        counts = np.bincount(codes[codes >= 0], minlength=len(self.modes))
        if (counts == 0).any():
            missing = [self.modes[position] for position in np.flatnonzero(counts == 0)]
            raise RouteError(
                "No route is available for the (origin, destination, mode) combinations: {missing}".format(
                    missing=missing
                )
            )

        rows = np.flatnonzero(codes >= 0)
        order = np.argsort(codes[rows], kind='stable')

        self.route_rows = rows[order]
        self.route_mode = codes[self.route_rows]
        self.routes = frame.index[self.route_rows]

    @property
    def n_levels(self) -> int:
        return 3 if self.routes is None else 4


@dataclasses.dataclass
class HierarchicalProbabilities():

    """
    Conditional probabilities of every level plus the aggregated
    utilities passed upward (`S_ijm`, `IV_M`, `S_ij`).
    """

    index: Optional[ChoiceIndex]
    destination: pd.Series
    mode: pd.Series
    satisfaction: pd.Series
    nest: Optional[pd.Series] = None
    mode_in_nest: Optional[pd.Series] = None
    inclusive_value: Optional[pd.Series] = None
    route: Optional[pd.Series] = None
    route_satisfaction: Optional[pd.Series] = None
    route_costs: Optional[pd.Series] = None


def hier_extended_prob(utility_spec: UtilitySpec, tree: ModeTree, route_set,
                       flows: Union[np.ndarray, 'LinkFlowVector'] = None) -> HierarchicalProbabilities:
    """Evaluates the hierarchical extended logit model bottom-up.

    Overview:
    ----
    Routes follow a path-size logit on the generalized route costs at the
    given flows, modes a nested logit on `V_ijm + S_ijm`, and destinations
    a logit on `V_ij + S_ij`:

        S_ijm = (1/theta_r) ln sum_r PS e^(-theta_r g)
        IV_M  = tau_M ln sum_{m in M} e^(theta_m (V_ijm + S_ijm) / tau_M)
        S_ij  = (1/theta_m) ln sum_M e^(IV_M)

    Arguments:
    ----
    utility_spec {UtilitySpec} -- Attributes and parameters.

    tree {ModeTree} -- Nest structure and scales.

    route_set {demandforge.routes.RouteSet} -- Routes of every demanded pair and mode.

    Keyword Arguments:
    ----
    flows {Union[np.ndarray, LinkFlowVector]} -- Link flows used to price the
        routes, free flow when omitted. (default: {None})

    Raises:
    ----
    NestingError: If a nest has `tau = 0`.

    RouteError: If a pair and mode has no route.

    Returns:
    ----
    {HierarchicalProbabilities} -- Every conditional distribution, each summing to one.
    """

    zero_nests = [name for name, value in tree.tau.items() if value == 0.0]
    if zero_nests:
        raise NestingError(
            "Nests {nests} have tau = 0, which has no closed form; use the entropy formulation.".format(
                nests=zero_nests
            )
        )

    index = ChoiceIndex(pairs=utility_spec.pairs, tree=tree, route_set=route_set)

    # Route level.
    costs = route_set.route_costs(flows=flows)[index.route_rows]
    path_size = route_set.frame['path_size'].to_numpy(dtype=float)[index.route_rows]
    route_values = -tree.theta_r * costs + np.log(path_size)
    route_lse = group_logsumexp(route_values, index.route_mode, len(index.modes))
    route_probability = np.exp(route_values - route_lse[index.route_mode])
    route_satisfaction = route_lse / tree.theta_r

    # Mode level, nested.
    mode_utility = _aligned(utility_spec.mode_utility(), index.modes)
    mode_values = tree.theta_m * (mode_utility + route_satisfaction) / index.mode_tau
    mode_lse = group_logsumexp(mode_values, index.mode_nest, len(index.nests))
    mode_in_nest = np.exp(mode_values - mode_lse[index.mode_nest])
    inclusive_value = index.nest_tau * mode_lse

    # Nest level.
    nest_lse = group_logsumexp(inclusive_value, index.nest_pair, len(index.pairs))
    nest_probability = np.exp(inclusive_value - nest_lse[index.nest_pair])
    satisfaction = nest_lse / tree.theta_m

    # Destination level.
    dest_utility = _aligned(utility_spec.destination_utility(), index.pairs)
    dest_values = tree.theta_j * (dest_utility + satisfaction)
    dest_lse = group_logsumexp(dest_values, index.pair_origin, len(index.origins))
    dest_probability = np.exp(dest_values - dest_lse[index.pair_origin])

    return HierarchicalProbabilities(
        index=index,
        destination=pd.Series(dest_probability, index=index.pairs, name='p_j/i'),
        nest=pd.Series(nest_probability, index=index.nests, name='p_M/ij'),
        mode_in_nest=pd.Series(mode_in_nest, index=index.modes, name='p_m/M'),
        mode=pd.Series(nest_probability[index.mode_nest] * mode_in_nest, index=index.modes, name='p_m/ij'),
        route=pd.Series(route_probability, index=index.routes, name='p_r/ijm'),
        route_satisfaction=pd.Series(route_satisfaction, index=index.modes, name='S_ijm'),
        inclusive_value=pd.Series(inclusive_value, index=index.nests, name='IV_M'),
        satisfaction=pd.Series(satisfaction, index=index.pairs, name='S_ij'),
        route_costs=pd.Series(costs, index=index.routes, name='g_ijmr')
    )


def hier_mnl_prob(dest_utility: pd.Series, mode_utility: pd.Series, theta_j: float,
                  theta_m: float) -> HierarchicalProbabilities:
    """Two-level hierarchical MNL: destinations on `V_ij + S_ij`, modes on `V_ijm`.

    Arguments:
    ----
    dest_utility {pd.Series} -- `V_ij` indexed by `(origin, destination)`.

    mode_utility {pd.Series} -- `V_ijm` indexed by `(origin, destination, mode)`.

    theta_j {float} -- Destination scale.

    theta_m {float} -- Mode scale.

    Returns:
    ----
    {HierarchicalProbabilities} -- `destination`, `mode` and `satisfaction` filled in.
    """

    _check_scale(theta_j, 'theta_j')
    _check_scale(theta_m, 'theta_m')

    pairs = dest_utility.index
    origins = pd.Index(pd.unique(pairs.get_level_values(0)))
    pair_origin = origins.get_indexer(pairs.get_level_values(0))
    mode_pair = pairs.get_indexer(mode_utility.index.droplevel(-1))

    if (mode_pair < 0).any() or np.bincount(mode_pair, minlength=len(pairs)).min() == 0:
        raise InputError("Mode utilities must cover exactly the destination utility pairs.")

    mode_values = theta_m * mode_utility.to_numpy(dtype=float)
    mode_lse = group_logsumexp(mode_values, mode_pair, len(pairs))
    mode_probability = np.exp(mode_values - mode_lse[mode_pair])
    satisfaction = mode_lse / theta_m

    dest_values = theta_j * (dest_utility.to_numpy(dtype=float) + satisfaction)
    dest_lse = group_logsumexp(dest_values, pair_origin, len(origins))
    dest_probability = np.exp(dest_values - dest_lse[pair_origin])

    return HierarchicalProbabilities(
        index=None,
        destination=pd.Series(dest_probability, index=pairs, name='p_j/i'),
        mode=pd.Series(mode_probability, index=mode_utility.index, name='p_m/ij'),
        satisfaction=pd.Series(satisfaction, index=pairs, name='S_ij')
    )


def _aligned(series: pd.Series, index: pd.MultiIndex) -> np.ndarray:

    values = series.reindex(index)

    if values.isna().any():
        raise InputError(
            "Utilities are missing for {missing}".format(missing=list(values.index[values.isna()])[:5])
        )

    return values.to_numpy(dtype=float)


@dataclasses.dataclass
class TripTables():

    """
    Trips of every level of the hierarchy plus the link flows they load.
    """

    destination: pd.Series
    mode: pd.Series
    nest: Optional[pd.Series] = None
    route: Optional[pd.Series] = None
    link_flows: Optional[object] = None


def assemble_trips(origins: pd.Series, probabilities: HierarchicalProbabilities, route_set=None) -> TripTables:
    """Multiplies the conditional probabilities down the hierarchy.

    Overview:
    ----
    `T_ij = O_i p_j/i`, `T_ijM = T_ij p_M/ij`, `T_ijm = T_ijM p_m/M`,
    `T_ijmr = T_ijm p_r/ijm` and `f_a = sum T_ijmr delta`.

    Arguments:
    ----
    origins {pd.Series} -- Trips produced by each origin.

    probabilities {HierarchicalProbabilities} -- Output of `hier_extended_prob`.

    Keyword Arguments:
    ----
    route_set {demandforge.routes.RouteSet} -- Needed to load link flows. (default: {None})

    Raises:
    ----
    InputError: If an origin of the probabilities has no production.

    Returns:
    ----
    {TripTables} -- The trip tables, with `link_flows` when a route set is given.
    """

    index = probabilities.index

    if index is None:
        raise InputError("assemble_trips needs probabilities from hier_extended_prob.")

    produced = origins.reindex(index.origins)
    if produced.isna().any():
        raise InputError(
            "No production given for the origins: {missing}".format(missing=list(produced.index[produced.isna()]))
        )

    dest_trips = produced.to_numpy(dtype=float)[index.pair_origin] * probabilities.destination.to_numpy()
    nest_trips = dest_trips[index.nest_pair] * probabilities.nest.to_numpy()
    mode_trips = nest_trips[index.mode_nest] * probabilities.mode_in_nest.to_numpy()

    tables = TripTables(
        destination=pd.Series(dest_trips, index=index.pairs, name='T'),
        nest=pd.Series(nest_trips, index=index.nests, name='T'),
        mode=pd.Series(mode_trips, index=index.modes, name='T')
    )

    if probabilities.route is not None:
        route_trips = mode_trips[index.route_mode] * probabilities.route.to_numpy()
        tables.route = pd.Series(route_trips, index=index.routes, name='T')

        if route_set is not None:
            incidence = route_set.incidence[index.route_rows]
            tables.link_flows = route_set.network.flow_vector(values=incidence.T @ route_trips)

    return tables
