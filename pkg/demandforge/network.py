import logging

import networkx as nx
import numpy as np
import pandas as pd

from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Tuple
from typing import Union

from demandforge.errors import DomainError
from demandforge.errors import InputError
from demandforge.errors import MarginError
from demandforge.errors import UnknownLinkError

logger = logging.getLogger(__name__)

LINK_COLUMNS = ['mode', 'tail', 'head', 'length', 't0', 'capacity', 'alpha', 'beta', 'cost']


class Link(NamedTuple):
    mode: str
    tail: str
    head: str


class ZonalSystem():

    """
    Holds the zones of the study area together with their
    productions `O` and attractions `D`.
    """

    def __init__(self, data: Union[List[Dict], pd.DataFrame]) -> None:
        """Initalizes the zonal system.

        Arguments:
        ----
        data {Union[List[Dict], pd.DataFrame]} -- Rows with a `zone`, `O` and `D` entry.

        Raises:
        ----
        InputError: If a column is missing, a zone repeats or a margin is negative.

        Usage:
        ----
            >>> zones = ZonalSystem(
                data=[
                    {'zone': 'a', 'O': 100.0, 'D': 0.0},
                    {'zone': 'b', 'O': 0.0, 'D': 100.0}
                ]
            )
            >>> zones.origins
            ['a']
        """

        frame = pd.DataFrame(data=data)

        missing = set(['zone', 'O', 'D']).difference(frame.columns)
        if missing:
            raise InputError("Zone data is missing the columns: {missing}".format(missing=sorted(missing)))

        frame['zone'] = frame['zone'].astype(str)
        frame = frame.set_index('zone')[['O', 'D']].astype(float)

        if frame.index.duplicated().any():
            raise InputError(
                "Zones appear more than once: {zones}".format(
                    zones=list(frame.index[frame.index.duplicated()])
                )
            )

        if (frame.to_numpy() < 0).any() or not np.isfinite(frame.to_numpy()).all():
            raise InputError("Zone productions and attractions must be finite and nonnegative.")

        self._frame = frame

    @property
    def frame(self) -> pd.DataFrame:
        """The zone frame, indexed by zone with the columns `O` and `D`."""
        return self._frame

    @property
    def zones(self) -> List[str]:
        return list(self._frame.index)

    @property
    def productions(self) -> pd.Series:
        return self._frame['O']

    @property
    def attractions(self) -> pd.Series:
        return self._frame['D']

    @property
    def origins(self) -> List[str]:
        """Zones producing trips."""
        return list(self._frame.index[self._frame['O'] > 0])

    @property
    def destinations(self) -> List[str]:
        """Zones attracting trips."""
        return list(self._frame.index[self._frame['D'] > 0])

    def od_pairs(self) -> List[Tuple[str, str]]:
        """Returns every origin-destination pair, intrazonal pairs excluded.

        Returns:
        ----
        {List[Tuple[str, str]]} -- The pairs in origin-major order.
        """

        return [
            (origin, destination)
            for origin in self.origins
            for destination in self.destinations
            if origin != destination
        ]

    def check_balance(self, rel_tol: float = 1e-9) -> None:
        """Checks that total productions equal total attractions.

        Keyword Arguments:
        ----
        rel_tol {float} -- The relative tolerance. (default: {1e-9})

        Raises:
        ----
        MarginError: If the totals differ by more than the tolerance.
        """

        total_o = self.productions.sum()
        total_d = self.attractions.sum()

        if abs(total_o - total_d) > rel_tol * max(1.0, abs(total_o), abs(total_d)):
            raise MarginError(
                "Productions ({total_o}) and attractions ({total_d}) do not balance.".format(
                    total_o=total_o,
                    total_d=total_d
                )
            )


class ModalNetwork():

    """
    Per-mode directed link networks. Every link carries a BPR
    volume-delay function and a monetary cost, and the generalized
    cost of a link is `vot * t(f) + c`.
    """

    def __init__(self, links: Union[List[Dict], pd.DataFrame], value_of_time: float = 1.0,
                 mode_value_of_time: Dict[str, float] = None) -> None:
        """Initalizes the network.

        Arguments:
        ----
        links {Union[List[Dict], pd.DataFrame]} -- Rows with the columns
            `mode tail head length t0 capacity alpha beta cost`.

        Keyword Arguments:
        ----
        value_of_time {float} -- Currency per minute, shared by every mode. (default: {1.0})

        mode_value_of_time {Dict[str, float]} -- Per-mode overrides of the
            value of time. (default: {None})

        Raises:
        ----
        InputError: If a column is missing, a link repeats or a link parameter
            is outside its domain.
        """

        frame = pd.DataFrame(data=links)

        missing = set(LINK_COLUMNS).difference(frame.columns)
        if missing:
            raise InputError("Link data is missing the columns: {missing}".format(missing=sorted(missing)))

        for column in ['mode', 'tail', 'head']:
            frame[column] = frame[column].astype(str)

        self._frame = self._set_multi_index(link_df=frame[LINK_COLUMNS])
        self._check_links()

        if value_of_time <= 0:
            raise InputError("The value of time must be positive, got {vot}.".format(vot=value_of_time))

        self.value_of_time = float(value_of_time)
        self.mode_value_of_time = dict(mode_value_of_time or {})

        unknown_modes = set(self.mode_value_of_time).difference(self.modes)
        if unknown_modes:
            raise UnknownLinkError(
                "Value of time given for unknown modes: {modes}".format(modes=sorted(unknown_modes))
            )

        # Cache the columns as arrays, cost evaluation runs inside every solver iteration.
        self._t0 = self._frame['t0'].to_numpy(dtype=float)
        self._capacity = self._frame['capacity'].to_numpy(dtype=float)
        self._alpha = self._frame['alpha'].to_numpy(dtype=float)
        self._beta = self._frame['beta'].to_numpy(dtype=float)
        self._cost = self._frame['cost'].to_numpy(dtype=float)
        self._flat = self._beta == 0.0
        self._vot = np.array([
            self.mode_value_of_time.get(mode, self.value_of_time)
            for mode in self._frame.index.get_level_values('mode')
        ])
        self._positions = {link: position for position, link in enumerate(self._frame.index)}

    def _set_multi_index(self, link_df: pd.DataFrame) -> pd.DataFrame:
        """Indexes the link frame by `(mode, tail, head)`.

        Arguments:
        ----
        link_df {pd.DataFrame} -- The raw link frame.

        Returns:
        ----
        {pd.DataFrame} -- The link frame with a MultiIndex.
        """

        link_df = link_df.set_index(keys=['mode', 'tail', 'head'])

        if link_df.index.duplicated().any():
            raise InputError(
                "Links appear more than once: {links}. Use an intermediate node for parallel links.".format(
                    links=list(link_df.index[link_df.index.duplicated()])
                )
            )

        return link_df.astype(float)

    def _check_links(self) -> None:

        for column in ['length', 't0', 'capacity']:
            if (self._frame[column] <= 0).any():
                raise InputError(
                    "Every link `{column}` must be strictly positive.".format(column=column)
                )

        if (self._frame['alpha'] < 0).any() or (self._frame['cost'] < 0).any():
            raise InputError("Link `alpha` and `cost` must be nonnegative.")

        beta = self._frame['beta']
        if ((beta != 0) & (beta < 1)).any():
            raise InputError("Link `beta` must be 0 (flat) or at least 1.")

    @property
    def frame(self) -> pd.DataFrame:
        """The link frame indexed by `(mode, tail, head)`."""
        return self._frame

    @property
    def links(self) -> List[Link]:
        return [Link(*key) for key in self._frame.index]

    @property
    def modes(self) -> List[str]:
        return list(pd.unique(self._frame.index.get_level_values('mode')))

    @property
    def n_links(self) -> int:
        return len(self._frame)

    @property
    def lengths(self) -> np.ndarray:
        return self._frame['length'].to_numpy(dtype=float)

    def link_position(self, link: Union[Link, Tuple[str, str, str]]) -> int:
        """Returns the position of a link in the link index.

        Arguments:
        ----
        link {Union[Link, Tuple[str, str, str]]} -- The `(mode, tail, head)` key.

        Raises:
        ----
        UnknownLinkError: If the link is not in the network.

        Returns:
        ----
        {int} -- The row position.
        """

        key = tuple(str(part) for part in link)

        if key not in self._positions:
            raise UnknownLinkError("The link {link} is not part of the network.".format(link=key))

        return self._positions[key]

    def _as_array(self, flows: Union['LinkFlowVector', np.ndarray, None]) -> np.ndarray:

        if flows is None:
            return np.zeros(self.n_links)

        if isinstance(flows, LinkFlowVector):
            return flows.values

        flows = np.asarray(flows, dtype=float)

        if flows.shape != (self.n_links,):
            raise InputError(
                "Expected {n} link flows, got an array of shape {shape}.".format(
                    n=self.n_links,
                    shape=flows.shape
                )
            )

        if (flows < 0).any():
            raise DomainError("Link flows must be nonnegative.")

        return flows

    def link_times(self, flows: Union['LinkFlowVector', np.ndarray] = None) -> np.ndarray:
        """Evaluates the volume-delay function on every link.

        Keyword Arguments:
        ----
        flows {Union[LinkFlowVector, np.ndarray]} -- Link flows, zero if omitted. (default: {None})

        Returns:
        ----
        {np.ndarray} -- Travel times in minutes, `t0 (1 + alpha (f/cap)^beta)`,
            or `t0` on flat links.
        """

        flows = self._as_array(flows)
        ratio = flows / self._capacity
        congested = self._t0 * (1.0 + self._alpha * np.power(ratio, np.where(self._flat, 1.0, self._beta)))

        return np.where(self._flat, self._t0, congested)

    def link_costs(self, flows: Union['LinkFlowVector', np.ndarray] = None) -> np.ndarray:
        """Generalized cost `vot * t(f) + c` of every link."""

        return self._vot * self.link_times(flows=flows) + self._cost

    def link_cost_derivatives(self, flows: Union['LinkFlowVector', np.ndarray] = None) -> np.ndarray:
        """Derivative of every link's generalized cost with respect to its own flow."""

        flows = self._as_array(flows)
        ratio = flows / self._capacity
        exponent = np.where(self._flat, 1.0, self._beta)
        slope = self._vot * self._t0 * self._alpha * exponent / self._capacity * np.power(ratio, exponent - 1.0)

        return np.where(self._flat, 0.0, slope)

    def link_cost(self, mode: str, link: Tuple[str, str], flow: float) -> float:
        """Returns the generalized cost of a single link.

        Arguments:
        ----
        mode {str} -- The mode owning the link.

        link {Tuple[str, str]} -- The `(tail, head)` pair.

        flow {float} -- The link flow in trips per period.

        Raises:
        ----
        UnknownLinkError: If the link is not in the mode's network.

        DomainError: If the flow is negative.

        Returns:
        ----
        {float} -- The generalized cost in currency.

        Usage:
        ----
            >>> network = ModalNetwork(
                links=[{
                    'mode': 'car', 'tail': 'a', 'head': 'b', 'length': 1.0, 't0': 10.0,
                    'capacity': 1000.0, 'alpha': 0.15, 'beta': 4.0, 'cost': 1.0
                }],
                value_of_time=0.5
            )
            >>> network.link_cost(mode='car', link=('a', 'b'), flow=1000.0)
            6.75
        """

        position = self.link_position(link=(mode, link[0], link[1]))

        if flow < 0:
            raise DomainError("Link flows must be nonnegative, got {flow}.".format(flow=flow))

        flows = np.zeros(self.n_links)
        flows[position] = flow

        return float(self.link_costs(flows=flows)[position])

    def beckmann_value(self, flows: Union['LinkFlowVector', np.ndarray]) -> float:
        """Sums the integral of every link cost function from zero to its flow.

        Overview:
        ----
        The BPR antiderivative is closed form, so no quadrature is involved:
        `vot t0 (f + alpha cap / (beta + 1) (f/cap)^(beta + 1)) + c f`.

        Arguments:
        ----
        flows {Union[LinkFlowVector, np.ndarray]} -- Nonnegative link flows.

        Returns:
        ----
        {float} -- The Beckmann function value.
        """

        return float(self.beckmann_terms(flows=flows).sum())

    def beckmann_terms(self, flows: Union['LinkFlowVector', np.ndarray]) -> np.ndarray:
        """Per-link Beckmann integrals."""

        flows = self._as_array(flows)
        exponent = np.where(self._flat, 0.0, self._beta) + 1.0
        congestion = self._alpha * self._capacity / exponent * np.power(flows / self._capacity, exponent)
        congestion = np.where(self._flat, 0.0, congestion)

        return self._vot * self._t0 * (flows + congestion) + self._cost * flows

    def route_cost(self, flows: Union['LinkFlowVector', np.ndarray], route) -> float:
        """Sums the generalized link costs along a route.

        Arguments:
        ----
        flows {Union[LinkFlowVector, np.ndarray]} -- Current link flows.

        route {demandforge.routes.Route} -- The route to price.

        Raises:
        ----
        UnknownLinkError: If the route uses a link missing from its mode's network.

        Returns:
        ----
        {float} -- The route's generalized cost.
        """

        costs = self.link_costs(flows=flows)
        positions = [self.link_position(link=link) for link in route.links]

        return float(costs[positions].sum())

    def graph(self, mode: str) -> nx.DiGraph:
        """Builds the directed graph of one mode.

        Arguments:
        ----
        mode {str} -- The mode.

        Raises:
        ----
        UnknownLinkError: If the mode has no links.

        Returns:
        ----
        {nx.DiGraph} -- Edges carry `cost` (free-flow generalized cost) and `length`.
        """

        if mode not in self.modes:
            raise UnknownLinkError("The mode `{mode}` has no links.".format(mode=mode))

        free_flow = self.link_costs()
        graph = nx.DiGraph()

        for position, (link_mode, tail, head) in enumerate(self._frame.index):
            if link_mode == mode:
                graph.add_edge(
                    tail,
                    head,
                    cost=float(free_flow[position]),
                    length=float(self._frame['length'].iat[position])
                )

        return graph

    def flow_vector(self, values: np.ndarray = None) -> 'LinkFlowVector':
        """Wraps an array of link flows, zeros when omitted."""

        return LinkFlowVector(network=self, values=np.zeros(self.n_links) if values is None else values)


class LinkFlowVector():

    """
    Nonnegative flows on every link of a `ModalNetwork`.
    """

    def __init__(self, network: ModalNetwork, values: np.ndarray) -> None:

        values = np.asarray(values, dtype=float)

        if values.shape != (network.n_links,):
            raise InputError(
                "Expected {n} link flows, got an array of shape {shape}.".format(
                    n=network.n_links,
                    shape=values.shape
                )
            )

        if (values < 0).any():
            raise DomainError("Link flows must be nonnegative.")

        self._network = network
        self._values = values

    @classmethod
    def from_series(cls, network: ModalNetwork, series: pd.Series) -> 'LinkFlowVector':
        """Builds a flow vector from a series indexed by `(mode, tail, head)`.

        Overview:
        ----
        Links absent from the series carry zero flow.

        Raises:
        ----
        UnknownLinkError: If the series names a link outside the network.
        """

        for key in series.index:
            network.link_position(link=key)

        values = series.reindex(network.frame.index, fill_value=0.0).to_numpy(dtype=float)

        return cls(network=network, values=values)

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def series(self) -> pd.Series:
        """The flows as a series indexed by `(mode, tail, head)`."""
        return pd.Series(self._values, index=self._network.frame.index, name='flow')

    def get(self, mode: str, tail: str, head: str) -> float:
        return float(self._values[self._network.link_position(link=(mode, tail, head))])

    def total(self, mode: str = None) -> float:
        """Total flow, optionally restricted to one mode."""

        if mode is None:
            return float(self._values.sum())

        return float(self.series.xs(mode, level='mode').sum())
