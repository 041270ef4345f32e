import dataclasses
import logging

import networkx as nx
import numpy as np
import pandas as pd

from scipy.sparse import csr_matrix

from typing import Dict
from typing import FrozenSet
from typing import Iterable
from typing import List
from typing import Tuple
from typing import Union

from demandforge.choice import ROUTE_LEVELS
from demandforge.choice import path_size_factor
from demandforge.errors import InputError
from demandforge.errors import RouteError
from demandforge.network import Link
from demandforge.network import ModalNetwork

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class Route():

    """
    A loopless node sequence from an origin to a destination on the
    network of one mode.
    """

    origin: str
    destination: str
    mode: str
    nodes: Tuple[str, ...]

    @property
    def links(self) -> List[Link]:
        return [Link(self.mode, tail, head) for tail, head in zip(self.nodes[:-1], self.nodes[1:])]

    @property
    def link_set(self) -> FrozenSet[Link]:
        return frozenset(self.links)

    @property
    def label(self) -> str:
        """Nodes joined by `>`, the route file notation."""
        return '>'.join(self.nodes)

    def is_simple(self) -> bool:
        return len(set(self.nodes)) == len(self.nodes)


class RouteSet():

    """
    The fixed route choice sets of every `(origin, destination, mode)`,
    with their link-route incidence and path-size factors.
    """

    def __init__(self, network: ModalNetwork) -> None:
        """Initalizes an empty route set on a network.

        Arguments:
        ----
        network {ModalNetwork} -- The network every route runs on.
        """

        self._network = network
        self.routes: Dict[Tuple[str, str, str], List[Route]] = {}
        self._frame = None
        self._incidence = None

    @property
    def network(self) -> ModalNetwork:
        return self._network

    @property
    def keys(self) -> List[Tuple[str, str, str]]:
        return list(self.routes)

    @property
    def n_routes(self) -> int:
        return sum(len(routes) for routes in self.routes.values())

    def add_route(self, origin: str, destination: str, mode: str, nodes: Iterable[str]) -> Route:
        """Adds a single route.

        Arguments:
        ----
        origin {str} -- The origin zone, also the first node.

        destination {str} -- The destination zone, also the last node.

        mode {str} -- The mode whose network the route uses.

        nodes {Iterable[str]} -- The node sequence.

        Raises:
        ----
        RouteError: If the route is not a simple path from origin to destination
            or is already in the set.

        UnknownLinkError: If a link is missing from the mode's network.

        Returns:
        ----
        {Route} -- The route that was added.

        Usage:
        ----
            >>> route_set = RouteSet(network=network)
            >>> route_set.add_route(origin='a', destination='b', mode='car', nodes=['a', 'x', 'b'])
            Route(origin='a', destination='b', mode='car', nodes=('a', 'x', 'b'))
        """

        route = Route(
            origin=str(origin),
            destination=str(destination),
            mode=str(mode),
            nodes=tuple(str(node) for node in nodes)
        )

        if len(route.nodes) < 2 or route.nodes[0] != route.origin or route.nodes[-1] != route.destination:
            raise RouteError(
                "The route {label} does not run from {origin} to {destination}.".format(
                    label=route.label,
                    origin=route.origin,
                    destination=route.destination
                )
            )

        if not route.is_simple():
            raise RouteError("The route {label} visits a node twice.".format(label=route.label))

        # Validate every link against the network.
        for link in route.links:
            self._network.link_position(link=link)

        key = (route.origin, route.destination, route.mode)

        if route in self.routes.get(key, []):
            raise RouteError("The route {label} is already in the set for {key}.".format(label=route.label, key=key))

        self.routes.setdefault(key, []).append(route)
        self._frame = None
        self._incidence = None

        return route

    def add_routes(self, routes: List[Union[Route, Dict]]) -> List[Route]:
        """Adds several routes at once.

        Arguments:
        ----
        routes {List[Union[Route, Dict]]} -- Routes, or dictionaries with the
            `origin`, `destination`, `mode` and `nodes` keys.

        Raises:
        ----
        TypeError: If an element is neither a `Route` nor a dictionary.

        Returns:
        ----
        {List[Route]} -- The routes that were added.
        """

        added = []

        for route in routes:

            if isinstance(route, Route):
                route = dataclasses.asdict(route)

            if not isinstance(route, dict):
                raise TypeError("Routes must be `Route` objects or dictionaries.")

            added.append(self.add_route(**route))

        return added

    def in_route_set(self, origin: str, destination: str, mode: str) -> bool:
        return (origin, destination, mode) in self.routes

    def get_routes(self, origin: str, destination: str, mode: str) -> List[Route]:
        """Returns the choice set of one `(origin, destination, mode)`.

        Raises:
        ----
        RouteError: If the combination has no routes.
        """

        key = (origin, destination, mode)

        if key not in self.routes:
            raise RouteError("No routes for origin {0}, destination {1}, mode {2}.".format(*key))

        return self.routes[key]

    def link_lengths(self, route: Route) -> List[float]:
        lengths = self._network.lengths
        return [float(lengths[self._network.link_position(link=link)]) for link in route.links]

    def route_length(self, route: Route) -> float:
        return float(sum(self.link_lengths(route=route)))

    @property
    def frame(self) -> pd.DataFrame:
        """One row per route, indexed by `(origin, destination, mode, route)`.

        Overview:
        ----
        Columns are `nodes`, `length`, `free_flow_cost` and `path_size`. The
        `route` level counts from zero within each choice set.

        Returns:
        ----
        {pd.DataFrame} -- The route frame.
        """

        if self._frame is None:

            incidence, path_size = build_incidence(route_set=self)
            free_flow = incidence @ self._network.link_costs()
            lengths = incidence @ self._network.lengths

            keys = [
                (origin, destination, mode, position)
                for (origin, destination, mode), routes in self.routes.items()
                for position in range(len(routes))
            ]

            self._incidence = incidence
            self._frame = pd.DataFrame(
                data={
                    'nodes': [route.label for routes in self.routes.values() for route in routes],
                    'length': lengths,
                    'free_flow_cost': free_flow,
                    'path_size': path_size
                },
                index=pd.MultiIndex.from_tuples(keys, names=ROUTE_LEVELS)
            )

        return self._frame

    @property
    def incidence(self) -> csr_matrix:
        """Route-link incidence `delta`, rows in `frame` order."""

        if self._incidence is None:
            self.frame

        return self._incidence

    def route_costs(self, flows=None) -> np.ndarray:
        """Generalized cost of every route at the given link flows, in `frame` order."""

        return self.incidence @ self._network.link_costs(flows=flows)


def enumerate_routes(network: ModalNetwork, origin: str, destination: str, mode: str, k: int = 5,
                     graph: nx.DiGraph = None) -> List[Route]:
    """Finds the `k` shortest simple paths by free-flow generalized cost.

    Overview:
    ----
    Paths come from networkx's Yen-style `shortest_simple_paths`. Every path
    tied with the `k`-th cost is collected before sorting by cost and then by
    node sequence, so ties break the same way on every run.

    Arguments:
    ----
    network {ModalNetwork} -- The network.

    origin {str} -- The origin node.

    destination {str} -- The destination node.

    mode {str} -- The mode whose graph is searched.

    Keyword Arguments:
    ----
    k {int} -- The maximum number of routes. (default: {5})

    graph {nx.DiGraph} -- A prebuilt graph of the mode. (default: {None})

    Raises:
    ----
    RouteError: If the destination cannot be reached.

    Returns:
    ----
    {List[Route]} -- Up to `k` routes ordered by free-flow cost.
    """

    if k < 1:
        raise InputError("At least one route must be requested, got k={k}.".format(k=k))

    if origin == destination:
        raise RouteError("Origin and destination are both {zone}.".format(zone=origin))

    if graph is None:
        graph = network.graph(mode=mode)

    candidates = []

    try:

        for path in nx.shortest_simple_paths(graph, origin, destination, weight='cost'):

            cost = nx.path_weight(graph, path, weight='cost')

            # Keep going only while the path ties the k-th cost.
            if len(candidates) >= k and cost > candidates[k - 1][0] * (1.0 + 1e-12) + 1e-12:
                break

            candidates.append((cost, tuple(path)))

    except (nx.NetworkXNoPath, nx.NodeNotFound):
        raise RouteError(
            "Destination {destination} cannot be reached from {origin} by {mode}.".format(
                origin=origin,
                destination=destination,
                mode=mode
            )
        )

    candidates.sort(key=lambda candidate: (round(candidate[0], 9), candidate[1]))

    return [
        Route(origin=origin, destination=destination, mode=mode, nodes=nodes)
        for _, nodes in candidates[:k]
    ]


def build_route_set(network: ModalNetwork, pairs: Iterable[Tuple[str, str]], modes: List[str],
                    k: int = 5) -> RouteSet:
    """Enumerates the routes of every pair and mode into one route set.

    Arguments:
    ----
    network {ModalNetwork} -- The network.

    pairs {Iterable[Tuple[str, str]]} -- The demanded `(origin, destination)` pairs.

    modes {List[str]} -- The modes.

    Keyword Arguments:
    ----
    k {int} -- Routes per choice set. (default: {5})

    Returns:
    ----
    {RouteSet} -- Choice sets in pair-major, mode-minor order.
    """

    graphs = {mode: network.graph(mode=mode) for mode in modes}
    route_set = RouteSet(network=network)

    for origin, destination in pairs:
        for mode in modes:
            route_set.add_routes(
                routes=enumerate_routes(
                    network=network,
                    origin=origin,
                    destination=destination,
                    mode=mode,
                    k=k,
                    graph=graphs[mode]
                )
            )

    logger.info(
        "Enumerated {n} routes over {sets} choice sets.".format(n=route_set.n_routes, sets=len(route_set.keys))
    )

    return route_set


def build_incidence(route_set: RouteSet) -> Tuple[csr_matrix, np.ndarray]:
    """Builds the link-route incidence matrix and the path-size factors.

    Arguments:
    ----
    route_set {RouteSet} -- The route set.

    Returns:
    ----
    {Tuple[csr_matrix, np.ndarray]} -- `delta` with one row per route and one
        column per network link, and one path-size factor per route.
    """

    network = route_set.network
    rows = []
    columns = []
    path_size = []
    row = 0

    for (origin, destination, mode), routes in route_set.routes.items():
        for position, route in enumerate(routes):

            for link in route.links:
                rows.append(row)
                columns.append(network.link_position(link=link))

            path_size.append(
                path_size_factor(
                    route_set=route_set,
                    origin=origin,
                    destination=destination,
                    mode=mode,
                    r=position
                )
            )
            row += 1

    incidence = csr_matrix(
        (np.ones(len(rows)), (np.array(rows, dtype=int), np.array(columns, dtype=int))),
        shape=(row, network.n_links)
    )

    return incidence, np.array(path_size, dtype=float)
