"""Solvers for the programs of `demandforge.programs`.

`solve_simplex_program` runs an entropic mirror ascent: every variable
moves multiplicatively, `ln x += s eta (u - u_bar)`, followed by an exact
renormalization within its simplex, with Armijo backtracking on `s`.
`solve_calibration` searches the multipliers of a calibration program
with a scipy root finder, solving one simplex program per evaluation.
"""

import dataclasses
import logging
import pathlib

import numpy as np
import pandas as pd

from scipy import optimize

from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple
from typing import Union

from demandforge.choice import group_logsumexp
from demandforge.choice import group_sum
from demandforge.config import SolverConfig
from demandforge.errors import DivergenceError
from demandforge.errors import InputError
from demandforge.network import LinkFlowVector
from demandforge.programs import CalibrationProgram
from demandforge.programs import HierarchicalProgram
from demandforge.programs import SimplexProgram

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ['iter', 'objective', 'kkt_residual', 'step_size']
TAU_DRIFT = 1e-3
DIVERGENCE_STREAK = 10
JACOBIAN_STEP = 1e-6
RANK_STEP = 1e-4
RANK_TOL = 1e-10
RANK_RTOL = 1e-6
DUAL_BOUND = 20.0
TOLL_SLACK = 1e3


@dataclasses.dataclass
class SolutionState():

    """
    The primal side of a solve: the variable vector, its per-level
    probabilities and trips, link flows and convergence diagnostics.
    """

    program: SimplexProgram
    x: np.ndarray
    objective: float
    converged: bool
    iterations: int
    kkt_residual: float
    history: pd.DataFrame
    probabilities: Dict[str, pd.Series]
    trips: Dict[str, pd.Series] = dataclasses.field(default_factory=dict)
    link_flows: Optional[LinkFlowVector] = None
    constraint_residuals: pd.Series = dataclasses.field(default_factory=lambda: pd.Series(dtype=float))
    outer_history: Optional[pd.DataFrame] = None
    warnings: List[str] = dataclasses.field(default_factory=list)
    tolls: Optional[np.ndarray] = None


@dataclasses.dataclass
class DualSolution():

    """
    The dual side of a solve: behavioral parameters read off the
    multipliers plus the simplex multipliers of every level.
    """

    theta_j: Optional[float] = None
    theta_m: Optional[float] = None
    theta_r: Optional[float] = None
    theta: Optional[float] = None
    tau: Dict[str, float] = dataclasses.field(default_factory=dict)
    beta_k: Dict[str, float] = dataclasses.field(default_factory=dict)
    beta_q: Dict[str, float] = dataclasses.field(default_factory=dict)
    asc: Dict[str, float] = dataclasses.field(default_factory=dict)
    multipliers: Dict[str, pd.Series] = dataclasses.field(default_factory=dict)
    raw: Dict[str, float] = dataclasses.field(default_factory=dict)
    warnings: List[str] = dataclasses.field(default_factory=list)

    @classmethod
    def from_parameters(cls, parameters: Dict, multipliers: Dict[str, pd.Series] = None,
                        raw: Dict[str, float] = None) -> 'DualSolution':
        """Builds a dual solution from a program's parameter dictionary.

        Overview:
        ----
        Dissimilarities above `1 + 1e-3` are kept but reported, since the
        recovered `tau_M` is only meaningful inside [0, 1].

        Arguments:
        ----
        parameters {Dict} -- Scales, dissimilarities and utility parameters.

        Keyword Arguments:
        ----
        multipliers {Dict[str, pd.Series]} -- Simplex multipliers per level. (default: {None})

        raw {Dict[str, float]} -- The raw calibration multipliers. (default: {None})

        Returns:
        ----
        {DualSolution} -- The dual solution.
        """

        solution = cls(
            theta_j=parameters.get('theta_j'),
            theta_m=parameters.get('theta_m'),
            theta_r=parameters.get('theta_r'),
            theta=parameters.get('theta'),
            tau=dict(parameters.get('tau', {})),
            beta_k=dict(parameters.get('beta_k', {})),
            beta_q=dict(parameters.get('beta_q', {})),
            asc=dict(parameters.get('asc', {})),
            multipliers=dict(multipliers or {}),
            raw=dict(raw or {})
        )

        for nest, value in solution.tau.items():
            if value > 1.0 + TAU_DRIFT:
                message = "Recovered tau for nest `{nest}` is {tau:.6g}, above 1 + {drift}.".format(
                    nest=nest,
                    tau=value,
                    drift=TAU_DRIFT
                )
                logger.warning(message)
                solution.warnings.append(message)

        return solution

    def parameters(self) -> pd.Series:
        """Every recovered parameter as one labeled series.

        Returns:
        ----
        {pd.Series} -- Labels `theta_j`, `theta_m`, `theta_r`, `theta`,
            `tau[M]`, `beta_k[name]`, `beta_q[name]` and `asc[name]`, where set.
        """

        values = {}

        for name in ['theta_j', 'theta_m', 'theta_r', 'theta']:
            if getattr(self, name) is not None:
                values[name] = float(getattr(self, name))

        for prefix, table in [('tau', self.tau), ('beta_k', self.beta_k), ('beta_q', self.beta_q), ('asc', self.asc)]:
            for key, value in table.items():
                values['{prefix}[{key}]'.format(prefix=prefix, key=key)] = float(value)

        return pd.Series(values, dtype=float, name='value')


@dataclasses.dataclass
class KKTReport():

    """
    First-order optimality residuals at a solution.
    """

    kkt_residual: float
    gradient_norm: float
    simplex_residuals: pd.Series
    constraint_residuals: pd.Series

    @property
    def max_simplex_residual(self) -> float:
        return float(self.simplex_residuals.abs().max()) if len(self.simplex_residuals) else 0.0

    @property
    def max_constraint_residual(self) -> float:
        return float(self.constraint_residuals.abs().max()) if len(self.constraint_residuals) else 0.0

    def passed(self, gradient_tol: float = 1e-6, constraint_tol: float = 1e-8, outer_tol: float = None) -> bool:
        """Checks the gradient norm, the simplex sums and, when `outer_tol` is given, the calibration constraints."""

        passed = self.gradient_norm < gradient_tol and self.max_simplex_residual < constraint_tol

        if outer_tol is not None:
            passed = passed and self.max_constraint_residual < outer_tol

        return passed

    def to_frame(self) -> pd.DataFrame:
        """One row per residual, the layout of the report files."""

        rows = [
            {'check': 'kkt_residual', 'value': self.kkt_residual},
            {'check': 'lagrangian_gradient_norm', 'value': self.gradient_norm}
        ]
        rows += [{'check': 'simplex[{0}]'.format(label), 'value': value} for label, value in self.simplex_residuals.items()]
        rows += [{'check': str(label), 'value': value} for label, value in self.constraint_residuals.items()]

        return pd.DataFrame(rows, columns=['check', 'value'])


def _normalize(log_x: np.ndarray, groups: np.ndarray, n_groups: int, clip: float) -> np.ndarray:
    """Maps log-weights onto the product of simplices, keeping every entry above `clip`."""

    totals = group_logsumexp(log_x, groups, n_groups)
    x = np.maximum(np.exp(log_x - totals[groups]), clip)

    return x / group_sum(x, groups, n_groups)[groups]


def _stationarity(program: SimplexProgram, x: np.ndarray, unit: np.ndarray,
                  clip: float) -> Tuple[float, np.ndarray, np.ndarray]:
    """Scaled KKT residual, group mean unit gradients and the mask of free variables.

    Overview:
    ----
    At an optimum every variable of a group shares the group's mean unit
    gradient, except variables pinned at the clip whose unit gradient is
    below the mean.
    """

    groups = program.groups
    weight = group_sum(x, groups, program.n_groups)
    mean = group_sum(x * unit, groups, program.n_groups) / weight

    gap = unit - mean[groups]
    free = ~((x <= 2.0 * clip) & (gap < 0))
    scaled = np.abs(gap) / np.maximum(1.0, np.abs(mean[groups]))

    residual = float(scaled[free].max()) if free.any() else 0.0

    return residual, mean, free


def _multipliers(program: SimplexProgram, x: np.ndarray, mean: np.ndarray) -> Dict[str, pd.Series]:
    """Simplex multipliers `mass * u_bar`, one series per constraint family."""

    masses = program.masses(x)
    group_mass = group_sum(masses * x, program.groups, program.n_groups) / group_sum(x, program.groups, program.n_groups)
    values = group_mass * mean

    return {
        label: pd.Series(values[codes], index=keys, name=label)
        for label, codes, keys in program.simplex_families()
    }


def _state(program: SimplexProgram, x: np.ndarray, objective: float, converged: bool, iterations: int,
           residual: float, history: List[Dict]) -> SolutionState:

    trips = program.level_trips(x) if hasattr(program, 'level_trips') else {}

    return SolutionState(
        program=program,
        x=x,
        objective=objective,
        converged=converged,
        iterations=iterations,
        kkt_residual=residual,
        history=pd.DataFrame(history, columns=HISTORY_COLUMNS),
        probabilities=program.level_values(x),
        trips=trips,
        link_flows=program.link_flows(x),
        warnings=list(program.warnings)
    )


def solve_simplex_program(program: SimplexProgram, config: SolverConfig = None, x0: np.ndarray = None,
                          log_path: Union[str, pathlib.Path] = None) -> Tuple[SolutionState, DualSolution]:
    """Maximizes a program over its product of simplices.

    Overview:
    ----
    Each iteration computes the unit gradient `u` and the per-variable
    step scale `eta` (the inverse curvature of the objective in log space),
    proposes `ln x + s eta (u - u_bar)` where `u_bar` is the `x eta`-weighted
    group mean, renormalizes and accepts the first `s` in `1, 1/2, ...`
    (starting from twice the last accepted step) that passes the Armijo test.
    The solve stops when the scaled KKT residual drops below `tol_inner`.
    Reaching the iteration cap, or a step below `min_step`, returns the
    current iterate flagged non-converged.
    Programs with a link count penalty go through the penalty dual instead.

    Arguments:
    ----
    program {SimplexProgram} -- The program.

    Keyword Arguments:
    ----
    config {SolverConfig} -- Tolerances and step rule, the program's own when omitted. (default: {None})

    x0 {np.ndarray} -- A positive start, renormalized into the interior. (default: {None})

    log_path {Union[str, pathlib.Path]} -- Writes the iteration log CSV here. (default: {None})

    Returns:
    ----
    {Tuple[SolutionState, DualSolution]} -- The primal state and the multipliers.

    Usage:
    ----
        >>> program = build_max_satis_mnl(utilities=[1.0, 0.0], theta=1.0)
        >>> state, duals = solve_simplex_program(program=program)
        >>> state.probabilities['alternative'].to_numpy()
        array([0.73105858, 0.26894142])
    """

    config = config or program.config

    if getattr(program, 'sigma', 0.0) > 0:
        return _solve_flow_penalty(program=program, config=config, x0=x0, log_path=log_path)

    groups = program.groups
    n_groups = program.n_groups
    clip = config.interior_clip

    if x0 is None:
        x0 = program.initial_point()

    x0 = np.asarray(x0, dtype=float)

    if x0.shape != (program.n_variables,) or not np.isfinite(x0).all() or (x0 <= 0).any():
        raise InputError("A start point needs one positive entry per variable.")

    x = _normalize(np.log(x0), groups, n_groups, clip)
    objective = program.objective(x)
    step = 0.5
    history = []
    converged = False
    residual = np.inf
    iteration = 0

    for iteration in range(1, config.max_inner_iter + 1):

        unit = program.unit_gradient(x)
        residual, mean, _ = _stationarity(program=program, x=x, unit=unit, clip=clip)

        if residual < config.tol_inner:
            converged = True
            history.append({'iter': iteration, 'objective': objective, 'kkt_residual': residual, 'step_size': 0.0})
            break

        eta = program.step_scale(x)
        weight = x * eta
        center = group_sum(weight * unit, groups, n_groups) / group_sum(weight, groups, n_groups)
        direction = eta * (unit - center[groups])
        slope = program.masses(x) * unit
        log_x = np.log(x)

        step = min(1.0, 2.0 * step)
        accepted = False

        # Armijo backtracking on the mirror step.
        while step >= config.min_step:

            candidate = _normalize(log_x + step * direction, groups, n_groups, clip)
            candidate_objective = program.objective(candidate)
            predicted = float(np.dot(slope, candidate - x))
            slack = 1e-12 * max(1.0, abs(objective))

            if candidate_objective - objective >= config.armijo_c1 * predicted - slack:
                accepted = True
                break

            step *= config.armijo_shrink

        history.append({'iter': iteration, 'objective': objective, 'kkt_residual': residual, 'step_size': step})

        logger.debug(
            "{name} iteration {iteration}: objective {objective:.12g}, kkt {residual:.3e}, step {step:.3e}".format(
                name=program.name,
                iteration=iteration,
                objective=objective,
                residual=residual,
                step=step
            )
        )

        if not accepted:
            logger.warning(
                "{name}: no ascent step above {min_step} at iteration {iteration}, kkt residual {residual:.3e}.".format(
                    name=program.name,
                    min_step=config.min_step,
                    iteration=iteration,
                    residual=residual
                )
            )
            break

        x = candidate
        objective = candidate_objective

    if not converged:
        unit = program.unit_gradient(x)
        residual, mean, _ = _stationarity(program=program, x=x, unit=unit, clip=clip)
        logger.warning(
            "{name} stopped after {iterations} iterations, kkt residual {residual:.3e}.".format(
                name=program.name,
                iterations=iteration,
                residual=residual
            )
        )
    else:
        logger.info(
            "{name} converged in {iterations} iterations, objective {objective:.12g}.".format(
                name=program.name,
                iterations=iteration,
                objective=objective
            )
        )

    state = _state(
        program=program,
        x=x,
        objective=objective,
        converged=converged,
        iterations=iteration,
        residual=residual,
        history=history
    )

    if log_path is not None:
        write_iteration_log(history=state.history, path=log_path)

    duals = DualSolution.from_parameters(
        parameters=program.parameters(),
        multipliers=_multipliers(program=program, x=x, mean=mean)
    )

    return state, duals


def _solve_flow_penalty(program: HierarchicalProgram, config: SolverConfig, x0: np.ndarray = None,
                        log_path: Union[str, pathlib.Path] = None) -> Tuple[SolutionState, DualSolution]:
    """Solves a program carrying the link count penalty through its dual.

    Overview:
    ----
    `sigma Huber(g) = max over |lambda| <= sigma of lambda g - w lambda^2 / (2 sigma)`,
    so the penalized program is a saddle point of the unpenalized one with
    a toll `lambda` on every counted link. The dual function

        phi(lambda) = max_x [F(x) - lambda (f - f_obs)] + w |lambda|^2 / (2 sigma)

    is convex with gradient `f_obs - f + w lambda / sigma`. It is minimized
    over the box `[-sigma, sigma]` with L-BFGS-B, every evaluation being one
    warm started simplex solve at fixed tolls.
    """

    observed = ~np.isnan(program.observed_flows)
    target = program.observed_flows[observed]
    sigma = program.sigma
    ratio = config.huber_width / sigma
    scale = max(1.0, float(np.abs(target).max())) if observed.any() else 1.0
    gtol = config.tol_inner * scale
    cache = {'x': x0, 'state': None, 'duals': None, 'lam': None}

    def evaluate(lam: np.ndarray) -> Tuple[float, np.ndarray]:

        tolls = np.zeros(program.network.n_links)
        tolls[observed] = lam

        inner = program.with_tolls(tolls=tolls)
        state, duals = solve_simplex_program(program=inner, config=config, x0=cache['x'])
        gap = inner.flow_gap(state.x)[observed]

        cache.update({'x': state.x, 'state': state, 'duals': duals, 'lam': np.array(lam, dtype=float)})

        value = state.objective + float(np.dot(lam, target)) + 0.5 * ratio * float(np.dot(lam, lam))
        return value, ratio * lam - gap

    start = np.zeros(int(observed.sum()))
    if program.toll_start is not None and np.shape(program.toll_start) == program.observed_flows.shape:
        start = np.clip(np.asarray(program.toll_start, dtype=float)[observed], -sigma, sigma)

    if start.size:
        result = optimize.minimize(
            evaluate,
            start,
            jac=True,
            method='L-BFGS-B',
            bounds=[(-sigma, sigma)] * start.size,
            options={'maxiter': config.max_outer_iter, 'ftol': np.finfo(float).eps, 'gtol': gtol}
        )
        lam = np.clip(result.x, -sigma, sigma)
        message = result.message
    else:
        lam = start
        message = 'no counted links'

    if cache['lam'] is None or not np.array_equal(cache['lam'], lam):
        evaluate(lam)

    relaxed = cache['state']
    gradient = ratio * lam - relaxed.program.flow_gap(relaxed.x)[observed]
    projected = np.where((lam >= sigma) & (gradient < 0), 0.0, gradient)
    projected = np.where((lam <= -sigma) & (projected > 0), 0.0, projected)
    dual_error = float(np.abs(projected).max()) if projected.size else 0.0
    converged = bool(relaxed.converged and dual_error <= TOLL_SLACK * gtol)

    if converged:
        logger.info(
            "{name}: flow penalty dual solved, {n} tolls at the bound, projected gradient {error:.3e}.".format(
                name=program.name,
                n=int((np.abs(lam) >= sigma).sum()),
                error=dual_error
            )
        )
    else:
        logger.warning(
            "{name}: flow penalty dual stopped at projected gradient {error:.3e} ({message}).".format(
                name=program.name,
                error=dual_error,
                message=message
            )
        )

    tolls = np.zeros(program.network.n_links)
    tolls[observed] = lam

    state = dataclasses.replace(
        relaxed,
        program=program,
        objective=program.objective(relaxed.x),
        converged=converged,
        tolls=tolls,
        warnings=list(program.warnings) + list(relaxed.warnings)
    )

    if log_path is not None:
        write_iteration_log(history=state.history, path=log_path)

    return state, cache['duals']


def write_iteration_log(history: pd.DataFrame, path: Union[str, pathlib.Path]) -> None:
    """Writes the `iter,objective,kkt_residual,step_size` log."""

    history[HISTORY_COLUMNS].to_csv(path, index=False, float_format='%.12g')


def _forward_jacobian(function: Callable[[np.ndarray], np.ndarray], z: np.ndarray,
                      base: np.ndarray = None, step: float = JACOBIAN_STEP) -> np.ndarray:
    """Forward-difference Jacobian, one column per coordinate of `z`."""

    z = np.asarray(z, dtype=float)
    base = function(z) if base is None else base
    columns = []

    for position in range(z.size):
        shifted = z.copy()
        shifted[position] += step * max(1.0, abs(z[position]))
        columns.append((function(shifted) - base) / (shifted[position] - z[position]))

    return np.column_stack(columns)


class _ResidualTrace():

    """
    Wraps the outer residual function: records the residual norm of every
    iterate the root finder proposes and raises `DivergenceError` after ten
    consecutive increases that also stay above the best norm seen.
    Points evaluated inside `jacobian` are not recorded.
    """

    def __init__(self, function: Callable[[np.ndarray], np.ndarray]) -> None:

        self.function = function
        self.norms: List[float] = []
        self.best = np.inf
        self.best_z = None
        self.streak = 0
        self.last_z = None
        self.last_residual = None

    def __call__(self, z: np.ndarray) -> np.ndarray:

        residual = self.function(z)
        norm = float(np.linalg.norm(residual))

        if self.norms and norm > self.norms[-1] and norm > self.best:
            self.streak += 1
        else:
            self.streak = 0

        self.norms.append(norm)
        self.last_z = np.array(z, dtype=float)
        self.last_residual = residual

        if norm < self.best:
            self.best = norm
            self.best_z = np.array(z, dtype=float)

        if self.streak >= DIVERGENCE_STREAK:
            raise DivergenceError(
                "The calibration residual grew for {n} consecutive evaluations, last norm {norm:.6g}.".format(
                    n=self.streak,
                    norm=norm
                ),
                trace=self.norms
            )

        return residual

    def jacobian(self, z: np.ndarray) -> np.ndarray:

        z = np.asarray(z, dtype=float)
        known = self.last_z is not None and np.array_equal(z, self.last_z)

        return _forward_jacobian(self.function, z, base=self.last_residual if known else None)


class _MultiplierCodec():

    """
    Maps free multipliers to unconstrained coordinates: logarithms for
    the positive ones, clipped to [-20, 20] on the way back.
    """

    def __init__(self, names: List[str], positive: set) -> None:
        self.names = list(names)
        self.positive = np.array([name in positive for name in self.names], dtype=bool)

    def encode(self, duals: Dict[str, float]) -> np.ndarray:

        values = np.array([duals[name] for name in self.names], dtype=float)
        return np.where(self.positive, np.log(np.where(self.positive, values, 1.0)), values)

    def decode(self, z: np.ndarray) -> Dict[str, float]:

        z = np.asarray(z, dtype=float)
        values = np.where(self.positive, np.exp(np.clip(z, -DUAL_BOUND, DUAL_BOUND)), z)
        return dict(zip(self.names, values.tolist()))


def _rank_check(program: CalibrationProgram, evaluate: Callable, codec: _MultiplierCodec, z0: np.ndarray,
                start: Dict[str, float]) -> None:
    """Fixes the multipliers the constraints cannot identify at the start.

    Overview:
    ----
    Builds a central-difference Jacobian of the scaled residuals, whose
    row `i` is the constraint paired with multiplier `i`. Multipliers with
    a vanishing column are fixed first. Then, while the smallest singular
    value of the row and column normalized Jacobian is below `RANK_RTOL`,
    the multiplier paired with the constraint carrying most weight in the
    left null direction is fixed, which drops that constraint as well.
    """

    names = list(codec.names)
    columns = []

    for position in range(len(names)):

        forward = z0.copy()
        backward = z0.copy()
        forward[position] += RANK_STEP
        backward[position] -= RANK_STEP
        columns.append((evaluate(codec, forward) - evaluate(codec, backward)) / (2.0 * RANK_STEP))

    jacobian = np.column_stack(columns)
    keep = []

    for position, name in enumerate(names):
        if np.max(np.abs(jacobian[:, position])) < RANK_TOL:
            program.fix(name, start[name], 'rank-deficient: the constraints do not respond to this multiplier')
        else:
            keep.append(position)

    while len(keep) > 1:

        block = jacobian[np.ix_(keep, keep)]
        block = block / np.maximum(np.linalg.norm(block, axis=1, keepdims=True), RANK_TOL)
        block = block / np.maximum(np.linalg.norm(block, axis=0, keepdims=True), RANK_TOL)

        left, singular, _ = np.linalg.svd(block)

        if singular[-1] > RANK_RTOL * singular[0]:
            break

        weights = np.abs(left[:, -1])
        dropped = keep[int(np.argmax(weights))]
        partners = [names[keep[i]] for i in np.flatnonzero(weights > 1e-3) if keep[i] != dropped]

        program.fix(
            names[dropped],
            start[names[dropped]],
            'collinear with {partners}: the constraints cannot tell these multipliers apart'.format(
                partners=', '.join(partners) or 'the other multipliers'
            )
        )
        keep.remove(dropped)


def solve_calibration(program: CalibrationProgram, config: SolverConfig = None,
                      log_path: Union[str, pathlib.Path] = None) -> Tuple[SolutionState, DualSolution]:
    """Finds the multipliers that satisfy a calibration program's constraints.

    Overview:
    ----
    Positive multipliers (the inverse scales) are searched in log space.
    Each residual evaluation solves the induced simplex program to
    `min(tol_inner, 1e-11)`, warm started from the previous solution, and
    returns the scaled residuals `(model - observed) / max(1, |observed|)`
    of the constraints paired with free multipliers. After a numerical
    rank check the system is solved with `scipy.optimize.root` (hybrid
    Powell); if that misses `tol_outer` a Levenberg-Marquardt least-squares
    pass continues from its end point. Both use a forward-difference
    Jacobian whose columns stay out of the divergence count.

    Arguments:
    ----
    program {CalibrationProgram} -- HierMNL, FirstStage, FirstStageVariant or MaxEntropy.

    Keyword Arguments:
    ----
    config {SolverConfig} -- Tolerances, the program's own when omitted. (default: {None})

    log_path {Union[str, pathlib.Path]} -- Writes the final inner iteration log here. (default: {None})

    Raises:
    ----
    DivergenceError: If the residual norm grows over ten consecutive iterates.

    Returns:
    ----
    {Tuple[SolutionState, DualSolution]} -- The inner solution at the calibrated
        multipliers, flagged non-converged if `tol_outer` was missed, and the
        recovered parameters.
    """

    config = config or program.config
    inner_config = config.replace(tol_inner=min(config.tol_inner, 1e-11))
    start = program.initial_duals()
    cache = {'x': None, 'program': None, 'state': None}

    def solve_inner(duals: Dict[str, float]):

        inner = program.inner_program(duals=duals)

        if cache['state'] is not None and cache['state'].tolls is not None:
            inner.toll_start = cache['state'].tolls

        state, simplex_duals = solve_simplex_program(program=inner, config=inner_config, x0=cache['x'])

        if not state.converged:
            logger.warning("{name}: inner solve did not converge.".format(name=program.name))

        cache.update({'x': state.x, 'program': inner, 'state': state})

        return inner, state, simplex_duals

    def evaluate(codec: _MultiplierCodec, z: np.ndarray) -> np.ndarray:

        inner, state, _ = solve_inner(duals=program.resolve(codec.decode(z)))
        return program.residuals(program=inner, x=state.x)

    codec = _MultiplierCodec(names=program.free_duals, positive=program.positive)

    if codec.names:
        _rank_check(program=program, evaluate=evaluate, codec=codec, z0=codec.encode(start), start=start)
        codec = _MultiplierCodec(names=program.free_duals, positive=program.positive)

    trace = _ResidualTrace(function=lambda z: evaluate(codec, z))
    z = codec.encode(start)

    if codec.names:
        result = optimize.root(
            trace,
            z,
            jac=trace.jacobian,
            method='hybr',
            options={'xtol': 1e-12, 'maxfev': config.max_outer_iter}
        )
        z = result.x if trace.best_z is None or np.linalg.norm(result.fun) <= trace.best else trace.best_z

        if np.max(np.abs(trace(z))) > config.tol_outer:

            logger.info(
                "{name}: hybrid Powell ended at {norm:.3e} ({message}); refining by least squares.".format(
                    name=program.name,
                    norm=trace.best,
                    message=result.message
                )
            )

            refined = optimize.least_squares(
                trace,
                z,
                jac=trace.jacobian,
                method='lm',
                xtol=1e-15,
                ftol=1e-15,
                gtol=1e-15,
                max_nfev=config.max_outer_iter
            )
            z = refined.x if np.linalg.norm(refined.fun) <= trace.best else trace.best_z

    duals = program.resolve(codec.decode(z))
    inner, state, simplex_duals = solve_inner(duals=duals)
    residuals = program.constraint_residuals(program=inner, x=state.x)
    driven = residuals.reindex(program.residual_names)
    outer_error = float(driven.abs().max()) if len(driven) else 0.0
    converged = bool(state.converged and outer_error <= config.tol_outer)

    if converged:
        logger.info(
            "{name} calibrated after {n} residual evaluations, max residual {error:.3e}.".format(
                name=program.name,
                n=len(trace.norms),
                error=outer_error
            )
        )
    else:
        logger.warning(
            "{name} did not reach the outer tolerance {tol}: max residual {error:.3e}.".format(
                name=program.name,
                tol=config.tol_outer,
                error=outer_error
            )
        )

    state.converged = converged
    state.constraint_residuals = residuals
    state.outer_history = pd.DataFrame({'evaluation': np.arange(1, len(trace.norms) + 1), 'residual_norm': trace.norms})
    state.warnings = list(program.warnings) + list(inner.warnings)

    if log_path is not None:
        write_iteration_log(history=state.history, path=log_path)

    solution = DualSolution.from_parameters(
        parameters=program.parameters(duals=duals),
        multipliers=simplex_duals.multipliers,
        raw=duals
    )
    state.warnings += solution.warnings

    return state, solution


def check_kkt(program: Union[SimplexProgram, CalibrationProgram],
              solution: Union[SolutionState, np.ndarray]) -> KKTReport:
    """Evaluates the first-order conditions at a solution.

    Overview:
    ----
    Reports the scaled KKT residual, the Lagrangian gradient norm
    `max |mass (u - u_bar)|` over free variables, the deviation of every
    simplex sum from one and, for calibration programs, the scaled
    residual of every entropy and aggregate constraint.

    Arguments:
    ----
    program {Union[SimplexProgram, CalibrationProgram]} -- The program.

    solution {Union[SolutionState, np.ndarray]} -- A solved state, or a raw
        variable vector of a simplex program.

    Returns:
    ----
    {KKTReport} -- The residual report.
    """

    constraint_residuals = pd.Series(dtype=float)

    if isinstance(program, CalibrationProgram):

        if not isinstance(solution, SolutionState):
            raise InputError("Checking a calibration program needs the solved state.")

        inner = solution.program
        x = np.asarray(solution.x, dtype=float)
        constraint_residuals = program.constraint_residuals(program=inner, x=x)

    else:

        inner = program
        x = np.asarray(solution.x if isinstance(solution, SolutionState) else solution, dtype=float)

    if x.shape != (inner.n_variables,):
        raise InputError(
            "Expected {n} variables, got an array of shape {shape}.".format(n=inner.n_variables, shape=x.shape)
        )

    clip = inner.config.interior_clip
    unit = inner.unit_gradient(x)
    residual, mean, free = _stationarity(program=inner, x=x, unit=unit, clip=clip)
    gap = inner.masses(x) * (unit - mean[inner.groups])
    gradient_norm = float(np.abs(gap[free]).max()) if free.any() else 0.0

    sums = group_sum(x, inner.groups, inner.n_groups)
    simplex_residuals = pd.Series(
        {label: float(np.abs(sums[codes] - 1.0).max()) for label, codes, _ in inner.simplex_families()},
        dtype=float
    )

    return KKTReport(
        kkt_residual=residual,
        gradient_norm=gradient_norm,
        simplex_residuals=simplex_residuals,
        constraint_residuals=constraint_residuals
    )
