"""Trip distribution: doubly-constrained gravity balancing, the most
probable (entropy maximizing) trip matrix and the multi-mode split.
"""

import dataclasses
import logging

import numpy as np
import pandas as pd

from scipy.optimize import brentq
from scipy.optimize import minimize
from scipy.special import logsumexp

from typing import List
from typing import Optional
from typing import Tuple

from demandforge.choice import group_logsumexp
from demandforge.errors import ConvergenceError
from demandforge.errors import DomainError
from demandforge.errors import InputError
from demandforge.errors import MarginError

logger = logging.getLogger(__name__)

BETA_MAX = 1e3


class TripMatrix():

    """
    A dense origin by destination trip table.
    """

    def __init__(self, trips: pd.DataFrame) -> None:
        """Initalizes the trip matrix.

        Arguments:
        ----
        trips {pd.DataFrame} -- Trips with origins as rows and destinations as columns.

        Raises:
        ----
        DomainError: If a cell is negative or missing.
        """

        trips = trips.astype(float)

        if trips.isna().any().any() or (trips.to_numpy() < 0).any():
            raise DomainError("Trip matrices must be nonnegative and complete.")

        self._frame = trips.rename_axis(index='origin', columns='destination')

    @property
    def frame(self) -> pd.DataFrame:
        return self._frame

    @property
    def values(self) -> np.ndarray:
        return self._frame.to_numpy()

    @property
    def origins(self) -> List[str]:
        return list(self._frame.index)

    @property
    def destinations(self) -> List[str]:
        return list(self._frame.columns)

    @property
    def row_sums(self) -> pd.Series:
        return self._frame.sum(axis=1)

    @property
    def column_sums(self) -> pd.Series:
        return self._frame.sum(axis=0)

    @property
    def total(self) -> float:
        return float(self.values.sum())

    def to_series(self) -> pd.Series:
        """The matrix in long form, indexed by `(origin, destination)`."""
        return self._frame.stack().rename('T')

    def total_cost(self, costs: pd.DataFrame) -> float:
        """`sum T_ij c_ij`, unavailable pairs contributing nothing."""

        aligned = costs.reindex(index=self._frame.index, columns=self._frame.columns).to_numpy(dtype=float)
        return float(np.nansum(self.values * np.where(np.isfinite(aligned), aligned, 0.0)))

    def entropy(self) -> float:
        """The Stirling objective `-sum T ln T + sum T`."""

        values = self.values
        positive = values > 0
        return float(-(values[positive] * np.log(values[positive])).sum() + values.sum())


@dataclasses.dataclass
class GravityResults():

    trips: TripMatrix
    balancing_origin: pd.Series
    balancing_destination: pd.Series
    beta: float
    iterations: int
    max_margin_error: float


@dataclasses.dataclass
class MostProbableResults():

    trips: TripMatrix
    beta: float
    total_cost: float
    entropy: float
    budget: Optional[float] = None


def od_cost_matrix(od_costs: pd.DataFrame, mode: str = None, zones: List[str] = None) -> pd.DataFrame:
    """Pivots a long `origin destination mode cost` table into a cost matrix.

    Arguments:
    ----
    od_costs {pd.DataFrame} -- The long cost table.

    Keyword Arguments:
    ----
    mode {str} -- The mode to keep, the first mode of the table if omitted. (default: {None})

    zones {List[str]} -- Rows and columns of the result. (default: {None})

    Raises:
    ----
    InputError: If the mode does not appear in the table.

    Returns:
    ----
    {pd.DataFrame} -- Costs with origins as rows, `NaN` for unavailable pairs.
    """

    if mode is None:
        mode = od_costs['mode'].iloc[0]

    selected = od_costs[od_costs['mode'] == mode]

    if selected.empty:
        raise InputError("The cost table has no rows for mode `{mode}`.".format(mode=mode))

    matrix = selected.pivot(index='origin', columns='destination', values='cost')

    if zones is not None:
        matrix = matrix.reindex(index=zones, columns=zones)

    return matrix.astype(float)


def _margins(productions: pd.Series, attractions: pd.Series, costs: pd.DataFrame) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:

    origins = list(productions.index)
    destinations = list(attractions.index)
    aligned = costs.reindex(index=origins, columns=destinations).to_numpy(dtype=float)

    o = productions.to_numpy(dtype=float)
    d = attractions.to_numpy(dtype=float)

    if (o < 0).any() or (d < 0).any():
        raise MarginError("Productions and attractions must be nonnegative.")

    if abs(o.sum() - d.sum()) > 1e-9 * max(1.0, o.sum(), d.sum()):
        raise MarginError(
            "Productions ({total_o}) and attractions ({total_d}) do not balance.".format(
                total_o=o.sum(),
                total_d=d.sum()
            )
        )

    return o, d, aligned


def _friction(costs: np.ndarray, beta: float) -> np.ndarray:
    """`exp(-beta c)` shifted by each row's cheapest cost, zero where unavailable."""

    available = np.isfinite(costs)
    filled = np.where(available, costs, np.inf)
    row_min = np.min(filled, axis=1, keepdims=True)
    row_min = np.where(np.isfinite(row_min), row_min, 0.0)

    with np.errstate(invalid='ignore', over='ignore'):
        friction = np.exp(-beta * (np.where(available, costs, 0.0) - row_min))

    return np.where(available, friction, 0.0)


def gravity_balance(productions: pd.Series, attractions: pd.Series, costs: pd.DataFrame, beta: float,
                    tol: float = 1e-10, max_iter: int = 10000) -> GravityResults:
    """Balances a doubly-constrained gravity model by iterative proportional fitting.

    Overview:
    ----
    `T_ij = A_i B_j O_i D_j exp(-beta c_ij)` with `A_i = 1 / sum_j B_j D_j f_ij`
    and `B_j = 1 / sum_i A_i O_i f_ij`, starting from `A = B = 1` and stopping
    once both margins are reproduced to `tol` relative.

    Arguments:
    ----
    productions {pd.Series} -- `O_i` indexed by origin.

    attractions {pd.Series} -- `D_j` indexed by destination.

    costs {pd.DataFrame} -- `c_ij`, origins as rows, `NaN` for unavailable pairs.

    beta {float} -- The nonnegative cost sensitivity.

    Keyword Arguments:
    ----
    tol {float} -- Relative margin tolerance. (default: {1e-10})

    max_iter {int} -- Iteration cap. (default: {10000})

    Raises:
    ----
    MarginError: If the margins do not balance or a zone cannot reach any partner.

    DomainError: If `beta` is negative.

    ConvergenceError: If the margins are not reproduced within `max_iter`.

    Returns:
    ----
    {GravityResults} -- The trips and the balancing factors.

    Usage:
    ----
        >>> results = gravity_balance(
                productions=pd.Series({'a': 1.0, 'b': 1.0}),
                attractions=pd.Series({'a': 1.0, 'b': 1.0}),
                costs=pd.DataFrame([[1.0, 2.0], [2.0, 1.0]], index=['a', 'b'], columns=['a', 'b']),
                beta=1.0
            )
            >>> results.trips.frame.loc['a', 'a']
            0.7310585786300049
    """

    if beta < 0:
        raise DomainError("The cost sensitivity beta must be nonnegative, got {beta}.".format(beta=beta))

    o, d, aligned = _margins(productions=productions, attractions=attractions, costs=costs)
    friction = _friction(costs=aligned, beta=beta)

    row_reach = friction @ d
    column_reach = friction.T @ o

    if ((row_reach == 0) & (o > 0)).any() or ((column_reach == 0) & (d > 0)).any():
        raise MarginError("A zone with trips cannot reach any partner zone; balancing is infeasible.")

    a = np.ones(len(o))
    b = np.ones(len(d))
    error = np.inf

    for iteration in range(1, max_iter + 1):

        with np.errstate(divide='ignore'):
            a = np.where(o > 0, 1.0 / (friction @ (b * d)), 0.0)
            b = np.where(d > 0, 1.0 / (friction.T @ (a * o)), 0.0)

        trips = (a * o)[:, None] * (b * d)[None, :] * friction

        row_error = np.abs(trips.sum(axis=1) - o) / np.maximum(o, 1e-300)
        column_error = np.abs(trips.sum(axis=0) - d) / np.maximum(d, 1e-300)
        error = max(row_error[o > 0].max(initial=0.0), column_error[d > 0].max(initial=0.0))

        if error < tol:
            break

    else:
        raise ConvergenceError(
            "Gravity balancing stopped after {n} iterations with margin error {error}.".format(
                n=max_iter,
                error=error
            )
        )

    logger.debug("Gravity balancing converged in {n} iterations.".format(n=iteration))

    # Undo the row shift of the friction so that T = A B O D exp(-beta c).
    row_min = np.min(np.where(np.isfinite(aligned), aligned, np.inf), axis=1)
    with np.errstate(over='ignore', invalid='ignore'):
        a = np.where(np.isfinite(row_min), a * np.exp(beta * np.where(np.isfinite(row_min), row_min, 0.0)), a)

    return GravityResults(
        trips=TripMatrix(trips=pd.DataFrame(trips, index=productions.index, columns=attractions.index)),
        balancing_origin=pd.Series(a, index=productions.index, name='A'),
        balancing_destination=pd.Series(b, index=attractions.index, name='B'),
        beta=float(beta),
        iterations=iteration,
        max_margin_error=float(error)
    )


def _dual_most_probable(o: np.ndarray, d: np.ndarray, costs: np.ndarray, beta: float, tol: float) -> np.ndarray:
    """Solves the dual of the entropy program for a given beta.

    Overview:
    ----
    Minimizes `sum exp(a_i + b_j - beta c_ij) - sum O a - sum D b` over the
    zones with trips, the last destination multiplier pinned to zero.
    """

    rows = np.flatnonzero(o > 0)
    columns = np.flatnonzero(d > 0)

    sub_costs = costs[np.ix_(rows, columns)]
    available = np.isfinite(sub_costs)
    exponent_base = np.where(available, -beta * np.where(available, sub_costs, 0.0), -np.inf)

    o_active = o[rows]
    d_active = d[columns]
    n_rows = len(rows)
    n_free = n_rows + len(columns) - 1
    total = o_active.sum()

    def cells(z: np.ndarray) -> np.ndarray:
        b = np.append(z[n_rows:], 0.0)
        return np.exp(z[:n_rows, None] + b[None, :] + exponent_base)

    def objective(z: np.ndarray) -> float:
        b = np.append(z[n_rows:], 0.0)
        return cells(z).sum() - o_active @ z[:n_rows] - d_active @ b

    def gradient(z: np.ndarray) -> np.ndarray:
        t = cells(z)
        return np.concatenate([t.sum(axis=1) - o_active, (t.sum(axis=0) - d_active)[:-1]])

    def hessian(z: np.ndarray) -> np.ndarray:
        t = cells(z)
        h = np.zeros((n_free, n_free))
        h[:n_rows, :n_rows] = np.diag(t.sum(axis=1))
        h[n_rows:, n_rows:] = np.diag(t.sum(axis=0)[:-1])
        h[:n_rows, n_rows:] = t[:, :-1]
        h[n_rows:, :n_rows] = t[:, :-1].T
        return h

    # Independence start, exact when beta is zero.
    start = np.concatenate([
        np.log(o_active) + np.log(d_active[-1]) - np.log(total),
        np.log(d_active[:-1]) - np.log(d_active[-1])
    ])

    solution = minimize(
        fun=objective,
        x0=start,
        jac=gradient,
        hess=hessian,
        method='trust-exact',
        options={'gtol': tol * max(1.0, total), 'maxiter': 1000}
    )

    if np.abs(gradient(solution.x)).max() > 1e-6 * max(1.0, total):
        raise ConvergenceError(
            "The most probable distribution did not converge: {message}".format(message=solution.message)
        )

    trips = np.zeros_like(costs, dtype=float)
    trips[np.ix_(rows, columns)] = cells(solution.x)

    return trips


def solve_most_probable(productions: pd.Series, attractions: pd.Series, costs: pd.DataFrame = None,
                        beta: float = None, budget: float = None, tol: float = 1e-10) -> MostProbableResults:
    """Finds the most probable trip matrix.

    Overview:
    ----
    Maximizes `-sum T ln T + sum T` subject to the row and column margins and,
    optionally, a total cost. With `beta` given the program is solved through
    its convex dual. With a cost `budget` given, `beta` is the multiplier of the
    cost constraint and is found by root bracketing on the monotone curve
    `sum T(beta) c`, each point of which is a gravity balance. With neither,
    the independence table `O_i D_j / T` results.

    Arguments:
    ----
    productions {pd.Series} -- `O_i`.

    attractions {pd.Series} -- `D_j`.

    Keyword Arguments:
    ----
    costs {pd.DataFrame} -- `c_ij`, needed unless both `beta` and `budget` are omitted. (default: {None})

    beta {float} -- The cost sensitivity. (default: {None})

    budget {float} -- The total cost `C`. (default: {None})

    tol {float} -- Tolerance on the dual gradient. (default: {1e-10})

    Raises:
    ----
    InputError: If both `beta` and `budget` are given, or costs are missing.

    DomainError: If the budget is below the cheapest or above the costliest
        entropy-consistent total cost.

    Returns:
    ----
    {MostProbableResults} -- The trips and the cost multiplier `beta`.
    """

    if beta is not None and budget is not None:
        raise InputError("Give either a cost sensitivity `beta` or a cost `budget`, not both.")

    if costs is None:
        if beta or budget is not None:
            raise InputError("A cost matrix is needed when `beta` or `budget` is given.")
        costs = pd.DataFrame(0.0, index=productions.index, columns=attractions.index)

    if beta is None and budget is None:
        beta = 0.0

    o, d, aligned = _margins(productions=productions, attractions=attractions, costs=costs)

    if budget is None:

        if beta < 0:
            raise DomainError("The cost sensitivity beta must be nonnegative, got {beta}.".format(beta=beta))

        trips = TripMatrix(
            trips=pd.DataFrame(
                _dual_most_probable(o=o, d=d, costs=aligned, beta=beta, tol=tol),
                index=productions.index,
                columns=attractions.index
            )
        )

        return MostProbableResults(
            trips=trips,
            beta=float(beta),
            total_cost=trips.total_cost(costs=costs),
            entropy=trips.entropy()
        )

    def cost_gap(value: float) -> float:
        balanced = gravity_balance(productions=productions, attractions=attractions, costs=costs, beta=value, tol=tol)
        return balanced.trips.total_cost(costs=costs) - budget

    upper = BETA_MAX

    # Very steep friction can underflow whole columns, back off until balancing works.
    for _ in range(60):
        try:
            upper_gap = cost_gap(value=upper)
            break
        except (MarginError, ConvergenceError):
            upper /= 2.0
    else:
        raise DomainError("No cost sensitivity above zero can be balanced for this cost matrix.")

    lower_gap = cost_gap(value=0.0)

    if lower_gap < 0 or upper_gap > 0:
        raise DomainError(
            "The budget {budget} is outside the achievable range [{low}, {high}].".format(
                budget=budget,
                low=upper_gap + budget,
                high=lower_gap + budget
            )
        )

    if lower_gap == 0:
        found = 0.0
    elif upper_gap == 0:
        found = upper
    else:
        found = brentq(cost_gap, 0.0, upper, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)

    balanced = gravity_balance(productions=productions, attractions=attractions, costs=costs, beta=found, tol=tol)

    return MostProbableResults(
        trips=balanced.trips,
        beta=float(found),
        total_cost=balanced.trips.total_cost(costs=costs),
        entropy=balanced.trips.entropy(),
        budget=float(budget)
    )


def multi_mode_split(trips: pd.Series, costs: pd.Series, beta: float) -> pd.DataFrame:
    """Splits pair trips over modes with `e^(-beta c^m) / sum e^(-beta c^m')`.

    Arguments:
    ----
    trips {pd.Series} -- `T_ij` indexed by `(origin, destination)`.

    costs {pd.Series} -- `c^m_ij` indexed by `(origin, destination, mode)`.

    beta {float} -- The nonnegative cost sensitivity.

    Raises:
    ----
    DomainError: If `beta` is negative.

    InputError: If a pair has trips but no mode cost.

    Returns:
    ----
    {pd.DataFrame} -- Indexed by `(origin, destination, mode)` with the columns `share` and `T`.
    """

    if beta < 0:
        raise DomainError("The cost sensitivity beta must be nonnegative, got {beta}.".format(beta=beta))

    pairs = trips.index
    groups = pairs.get_indexer(costs.index.droplevel(-1))

    if (groups < 0).any():
        raise InputError("Mode costs name pairs that have no trips entry.")

    if np.bincount(groups, minlength=len(pairs)).min() == 0:
        raise InputError("Every pair needs at least one mode cost.")

    values = -beta * costs.to_numpy(dtype=float)
    shares = np.exp(values - group_logsumexp(values, groups, len(pairs))[groups])

    return pd.DataFrame(
        data={'share': shares, 'T': shares * trips.to_numpy(dtype=float)[groups]},
        index=costs.index
    )


def multi_mode_distribution(productions: pd.Series, attractions: pd.Series, costs: pd.Series,
                            beta: float) -> Tuple[GravityResults, pd.DataFrame]:
    """Distributes and splits trips jointly over destinations and modes.

    Overview:
    ----
    `T^m_ij = A_i B_j O_i D_j exp(-beta c^m_ij)`. Balancing runs on the
    composite cost `-(1/beta) ln sum_m exp(-beta c^m_ij)` and the modal split
    follows `multi_mode_split`.

    Arguments:
    ----
    productions {pd.Series} -- `O_i`.

    attractions {pd.Series} -- `D_j`.

    costs {pd.Series} -- `c^m_ij` indexed by `(origin, destination, mode)`.

    beta {float} -- The nonnegative cost sensitivity.

    Returns:
    ----
    {Tuple[GravityResults, pd.DataFrame]} -- The pair-level balance and the split.
    """

    grouped = costs.groupby(level=[0, 1], sort=False)

    if beta > 0:
        composite = grouped.agg(lambda values: -logsumexp(-beta * values.to_numpy(dtype=float)) / beta)
    else:
        composite = grouped.agg(lambda values: 0.0)

    matrix = composite.unstack()

    balanced = gravity_balance(productions=productions, attractions=attractions, costs=matrix, beta=beta)
    pair_trips = balanced.trips.to_series()
    pair_trips = pair_trips.reindex(composite.index)

    return balanced, multi_mode_split(trips=pair_trips, costs=costs, beta=beta)
