"""Oracles and the synthetic-data harness.

`fixed_point_oracle` computes the equilibrium of the hierarchical
extended logit model by averaging link flows, independently of the
convex programs. `generate_observations` turns a scenario into an
observation bundle, `recover_and_compare` calibrates on it and reports
parameter errors, and the MNL likelihood functions cross-check the
MaxEntropy multipliers.
"""

import dataclasses
import logging

import numpy as np
import pandas as pd

from scipy import optimize
from scipy.special import logsumexp
from scipy.special import softmax

from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple

from demandforge.choice import HierarchicalProbabilities
from demandforge.choice import ModeTree
from demandforge.choice import TripTables
from demandforge.choice import UtilitySpec
from demandforge.choice import assemble_trips
from demandforge.choice import hier_extended_prob
from demandforge.choice import hier_mnl_prob
from demandforge.config import SolverConfig
from demandforge.errors import ConvergenceError
from demandforge.errors import InputError
from demandforge.network import LinkFlowVector
from demandforge.network import ModalNetwork
from demandforge.network import ZonalSystem
from demandforge.programs import ObservationBundle
from demandforge.programs import build_first_stage
from demandforge.programs import build_first_stage_variant
from demandforge.programs import build_second_stage
from demandforge.routes import RouteSet
from demandforge.routes import build_route_set
from demandforge.solver import DualSolution
from demandforge.solver import SolutionState
from demandforge.solver import solve_calibration
from demandforge.solver import solve_simplex_program

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class SyntheticScenario():

    """
    Generating parameters plus everything needed to produce
    observations from them: zones, network, nest tree and attributes.
    """

    zones: ZonalSystem
    network: ModalNetwork
    tree: ModeTree
    dest_attributes: pd.DataFrame
    mode_attributes: pd.DataFrame
    beta_k: Dict[str, float]
    beta_q: Dict[str, float]
    k_routes: int = 5
    origins: Optional[pd.Series] = None
    route_set: Optional[RouteSet] = None

    def __post_init__(self) -> None:

        if self.origins is None:
            pair_origins = pd.unique(self.dest_attributes.index.get_level_values(0))
            self.origins = self.zones.productions.reindex(pair_origins).rename('O')

        if self.origins.isna().any():
            raise InputError("Every origin of the attribute tables needs a production.")

        self.origins = self.origins.rename_axis('origin')

    @property
    def utility_spec(self) -> UtilitySpec:
        return UtilitySpec(
            dest_attributes=self.dest_attributes,
            mode_attributes=self.mode_attributes,
            beta_k=self.beta_k,
            beta_q=self.beta_q
        )

    @property
    def pairs(self) -> List[Tuple[str, str]]:
        return list(self.dest_attributes.index)

    def routes(self) -> RouteSet:
        """The route set, enumerated once with `k_routes` paths per choice set."""

        if self.route_set is None:
            self.route_set = build_route_set(
                network=self.network,
                pairs=self.pairs,
                modes=self.tree.modes,
                k=self.k_routes
            )

        return self.route_set

    def parameters(self) -> pd.Series:
        """The generating parameters, labeled like `DualSolution.parameters`."""

        return DualSolution.from_parameters(
            parameters={
                'theta_j': self.tree.theta_j,
                'theta_m': self.tree.theta_m,
                'theta_r': self.tree.theta_r,
                'tau': self.tree.tau,
                'beta_k': self.beta_k,
                'beta_q': self.beta_q
            }
        ).parameters()


@dataclasses.dataclass
class EquilibriumState():

    """
    The fixed point of the hierarchical extended logit model: the
    probabilities at the equilibrium costs, the trips they assemble to and
    the link flows those trips load.
    """

    probabilities: HierarchicalProbabilities
    trips: TripTables
    link_flows: LinkFlowVector
    iterations: int
    residual: float
    converged: bool
    history: pd.DataFrame


def _flow_residual(loaded: np.ndarray, flows: np.ndarray) -> float:
    return float(np.max(np.abs(loaded - flows), initial=0.0) / max(1.0, np.max(np.abs(loaded), initial=0.0)))


def fixed_point_oracle(network: ModalNetwork, route_set: RouteSet, utility_spec: UtilitySpec, tree: ModeTree,
                       origins: pd.Series, config: SolverConfig = None) -> EquilibriumState:
    """Computes the equilibrium by the method of successive averages.

    Overview:
    ----
    Starting from empty links, every iteration prices the routes at the
    current flows, evaluates the closed-form probabilities, assembles the
    trips and loads them back onto the links (`y`), then averages
    `f += (damping / k) (y - f)`. The residual is
    `max |y - f| / max(1, max |y|)`. Once it falls below `msa_switch` the
    fixed point `y(f) = f` is polished with `scipy.optimize.root`, so the
    returned point meets `fixed_point_tol`. A flat network converges after
    a single averaging step.

    Arguments:
    ----
    network {ModalNetwork} -- The network the route set was built on.

    route_set {RouteSet} -- Routes covering every demanded pair and mode.

    utility_spec {UtilitySpec} -- Attributes and utility parameters.

    tree {ModeTree} -- Nests, dissimilarities and scales.

    origins {pd.Series} -- Trips produced by each origin.

    Keyword Arguments:
    ----
    config {SolverConfig} -- Iteration cap, tolerances and damping. (default: {None})

    Raises:
    ----
    InputError: If the route set runs on a different network.

    Returns:
    ----
    {EquilibriumState} -- The equilibrium, flagged non-converged at the iteration cap.
    """

    config = config or SolverConfig()

    if route_set.network is not network:
        raise InputError("The route set must be built on the network being equilibrated.")

    def load(flows: np.ndarray) -> Tuple[HierarchicalProbabilities, TripTables]:

        probabilities = hier_extended_prob(
            utility_spec=utility_spec,
            tree=tree,
            route_set=route_set,
            flows=np.maximum(flows, 0.0)
        )
        trips = assemble_trips(origins=origins, probabilities=probabilities, route_set=route_set)

        return probabilities, trips

    flows = np.zeros(network.n_links)
    history = []
    converged = False
    polished = False
    iterations = 0

    for k in range(1, config.max_fixed_point_iter + 1):

        _, trips = load(flows)
        loaded = trips.link_flows.values
        residual = _flow_residual(loaded=loaded, flows=flows)
        history.append({'iter': k, 'residual': residual})

        logger.debug("MSA iteration {k}: residual {residual:.3e}".format(k=k, residual=residual))

        if residual < config.fixed_point_tol:
            converged = True
            iterations = k - 1
            break

        if residual < config.msa_switch and not polished:

            polished = True
            result = optimize.root(
                lambda values: load(values)[1].link_flows.values - np.maximum(values, 0.0),
                flows,
                method='hybr',
                options={'xtol': 1e-14}
            )
            candidate = np.maximum(result.x, 0.0)
            candidate_residual = _flow_residual(loaded=load(candidate)[1].link_flows.values, flows=candidate)

            logger.debug(
                "Fixed point polish after {k} MSA iterations: residual {residual:.3e}.".format(
                    k=k,
                    residual=candidate_residual
                )
            )

            if candidate_residual < residual:
                flows = candidate
                iterations = k

                if candidate_residual < config.fixed_point_tol:
                    history.append({'iter': k + 1, 'residual': candidate_residual})
                    converged = True
                    break

                continue

        flows = flows + config.flow_damping / k * (loaded - flows)
        iterations = k

    probabilities, trips = load(flows)
    residual = _flow_residual(loaded=trips.link_flows.values, flows=flows)

    if converged:
        logger.info("Fixed point reached after {n} iterations, residual {r:.3e}.".format(n=iterations, r=residual))
    else:
        logger.warning(
            "Fixed point iteration cap {cap} reached, residual {r:.3e}.".format(
                cap=config.max_fixed_point_iter,
                r=residual
            )
        )

    return EquilibriumState(
        probabilities=probabilities,
        trips=trips,
        link_flows=trips.link_flows,
        iterations=iterations,
        residual=residual,
        converged=converged,
        history=pd.DataFrame(history, columns=['iter', 'residual'])
    )


def generate_observations(scenario: SyntheticScenario, config: SolverConfig = None) -> ObservationBundle:
    """Produces observations from a scenario's equilibrium.

    Arguments:
    ----
    scenario {SyntheticScenario} -- The generating scenario.

    Keyword Arguments:
    ----
    config {SolverConfig} -- Passed to the oracle. (default: {None})

    Raises:
    ----
    ConvergenceError: If the oracle does not converge.

    HierarchyError: If a produced cell is not strictly positive.

    Returns:
    ----
    {ObservationBundle} -- Trips of every level and the equilibrium link flows
        as link counts, hierarchy-consistent by construction.
    """

    route_set = scenario.routes()

    equilibrium = fixed_point_oracle(
        network=scenario.network,
        route_set=route_set,
        utility_spec=scenario.utility_spec,
        tree=scenario.tree,
        origins=scenario.origins,
        config=config
    )

    if not equilibrium.converged:
        raise ConvergenceError(
            "The scenario equilibrium did not converge, residual {r:.3e}.".format(r=equilibrium.residual)
        )

    bundle = ObservationBundle(
        origins=scenario.origins.copy(),
        trips_ij=equilibrium.trips.destination.copy(),
        trips_ijM=equilibrium.trips.nest.copy(),
        trips_ijm=equilibrium.trips.mode.copy(),
        dest_attributes=scenario.utility_spec.dest_attributes,
        mode_attributes=scenario.utility_spec.mode_attributes,
        link_counts=equilibrium.link_flows.series
    )
    bundle.validate(tree=scenario.tree)

    return bundle


def perturb_observations(bundle: ObservationBundle, noise: float = 0.05, seed: int = 0,
                         tree: ModeTree = None) -> ObservationBundle:
    """Multiplies every mode cell by `1 + U(-noise, noise)` and resums upward.

    Overview:
    ----
    Noise enters at the leaves only, so the nest, pair and origin totals
    are rebuilt from the perturbed cells and the hierarchy sums still hold.
    The generator is seeded, so the same seed gives the same bundle.
    """

    if not 0.0 <= noise < 1.0:
        raise InputError("Noise must lie in [0, 1), got {noise}.".format(noise=noise))

    generator = np.random.default_rng(seed)
    factors = 1.0 + noise * generator.uniform(-1.0, 1.0, size=len(bundle.trips_ijm))
    trips_ijm = bundle.trips_ijm * factors

    trips_ij = trips_ijm.groupby(level=['origin', 'destination'], sort=False).sum()
    origins = trips_ij.groupby(level='origin', sort=False).sum().rename(bundle.origins.name)

    trips_ijM = None
    if tree is not None or bundle.trips_ijM is not None:

        if tree is None:
            raise InputError("Resumming nest totals needs the nest tree.")

        nest = trips_ijm.index.get_level_values('mode').map(tree.nest_of)
        keys = [
            trips_ijm.index.get_level_values('origin'),
            trips_ijm.index.get_level_values('destination'),
            nest
        ]
        trips_ijM = trips_ijm.groupby(keys, sort=False).sum()
        trips_ijM.index.names = ['origin', 'destination', 'nest']

    return dataclasses.replace(
        bundle,
        origins=origins.reindex(bundle.origins.index),
        trips_ij=trips_ij.reindex(bundle.trips_ij.index),
        trips_ijM=None if trips_ijM is None else trips_ijM.reindex(bundle.trips_ijM.index),
        trips_ijm=trips_ijm
    )


def generate_hier_mnl_observations(origins: pd.Series, dest_attributes: pd.DataFrame, mode_attributes: pd.DataFrame,
                                   beta_k: Dict[str, float], beta_q: Dict[str, float], theta_j: float,
                                   theta_m: float) -> ObservationBundle:
    """Builds a HierMNL observation bundle from the closed-form probabilities."""

    spec = UtilitySpec(dest_attributes=dest_attributes, mode_attributes=mode_attributes, beta_k=beta_k, beta_q=beta_q)

    probabilities = hier_mnl_prob(
        dest_utility=spec.destination_utility(),
        mode_utility=spec.mode_utility(),
        theta_j=theta_j,
        theta_m=theta_m
    )

    produced = origins.reindex(probabilities.destination.index.get_level_values('origin')).to_numpy(dtype=float)
    trips_ij = (probabilities.destination * produced).rename('T')
    pair_trips = trips_ij.reindex(probabilities.mode.index.droplevel('mode')).to_numpy()
    trips_ijm = (probabilities.mode * pair_trips).rename('T')

    return ObservationBundle(
        origins=origins.rename_axis('origin'),
        trips_ij=trips_ij,
        trips_ijm=trips_ijm,
        dest_attributes=spec.dest_attributes,
        mode_attributes=spec.mode_attributes
    )


def log_likelihood_mnl(choices: np.ndarray, attributes: np.ndarray, beta: np.ndarray, asc: np.ndarray = None,
                       theta: float = 1.0) -> float:
    """Log-likelihood `sum_h sum_m y_hm ln p_hm` of MNL choices.

    Arguments:
    ----
    choices {np.ndarray} -- One-hot choices, individuals by alternatives.

    attributes {np.ndarray} -- Attributes, individuals by alternatives by `k`.

    beta {np.ndarray} -- Taste parameters.

    Keyword Arguments:
    ----
    asc {np.ndarray} -- Alternative-specific constants, zero when omitted. (default: {None})

    theta {float} -- The scale. (default: {1.0})

    Returns:
    ----
    {float} -- The log-likelihood.
    """

    utilities = _mnl_utilities(attributes=attributes, beta=beta, asc=asc)
    log_p = theta * utilities - logsumexp(theta * utilities, axis=1, keepdims=True)

    return float(np.sum(np.asarray(choices, dtype=float) * log_p))


def log_likelihood_gradient(choices: np.ndarray, attributes: np.ndarray, beta: np.ndarray, asc: np.ndarray = None,
                            theta: float = 1.0) -> np.ndarray:
    """Gradient of `log_likelihood_mnl` in `(asc[:-1], beta)`; the last constant is the reference."""

    choices = np.asarray(choices, dtype=float)
    utilities = _mnl_utilities(attributes=attributes, beta=beta, asc=asc)
    gap = choices - softmax(theta * utilities, axis=1)

    d_asc = theta * gap.sum(axis=0)[:-1]
    d_beta = theta * np.einsum('hm,hmk->k', gap, np.asarray(attributes, dtype=float))

    return np.concatenate([d_asc, d_beta])


def _mnl_utilities(attributes: np.ndarray, beta: np.ndarray, asc: np.ndarray = None) -> np.ndarray:

    attributes = np.asarray(attributes, dtype=float)
    utilities = attributes @ np.asarray(beta, dtype=float)

    if asc is not None:
        utilities = utilities + np.asarray(asc, dtype=float)

    return utilities


@dataclasses.dataclass
class MLEResults():

    beta: np.ndarray
    asc: np.ndarray
    log_likelihood: float
    gradient_norm: float
    converged: bool


def estimate_mnl_mle(choices: np.ndarray, attributes: np.ndarray, theta: float = 1.0) -> MLEResults:
    """Maximum-likelihood MNL estimates with BFGS and the analytic gradient.

    Overview:
    ----
    The last alternative-specific constant is held at zero, as in the
    MaxEntropy program, so the two estimates are directly comparable.
    """

    choices = np.asarray(choices, dtype=float)
    n_alternatives = choices.shape[1]

    def split(z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return np.append(z[:n_alternatives - 1], 0.0), z[n_alternatives - 1:]

    def negative(z: np.ndarray) -> float:
        asc, beta = split(z)
        return -log_likelihood_mnl(choices=choices, attributes=attributes, beta=beta, asc=asc, theta=theta)

    def negative_gradient(z: np.ndarray) -> np.ndarray:
        asc, beta = split(z)
        return -log_likelihood_gradient(choices=choices, attributes=attributes, beta=beta, asc=asc, theta=theta)

    start = np.zeros(n_alternatives - 1 + np.asarray(attributes).shape[2])
    result = optimize.minimize(negative, start, jac=negative_gradient, method='BFGS', options={'gtol': 1e-10})

    asc, beta = split(result.x)

    return MLEResults(
        beta=beta,
        asc=asc,
        log_likelihood=-float(result.fun),
        gradient_norm=float(np.linalg.norm(negative_gradient(result.x))),
        converged=bool(result.success)
    )


def simulate_mnl_sample(n: int, beta: np.ndarray, asc: np.ndarray, theta: float = 1.0,
                        seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Draws a seeded pseudo-individual MNL sample.

    Arguments:
    ----
    n {int} -- The number of individuals.

    beta {np.ndarray} -- Taste parameters, one per attribute.

    asc {np.ndarray} -- Alternative-specific constants, one per alternative.

    Keyword Arguments:
    ----
    theta {float} -- The scale. (default: {1.0})

    seed {int} -- The generator seed. (default: {0})

    Returns:
    ----
    {Tuple[np.ndarray, np.ndarray]} -- One-hot choices and standard normal attributes.
    """

    generator = np.random.default_rng(seed)
    beta = np.asarray(beta, dtype=float)
    asc = np.asarray(asc, dtype=float)

    attributes = generator.standard_normal(size=(n, len(asc), len(beta)))
    probabilities = softmax(theta * _mnl_utilities(attributes=attributes, beta=beta, asc=asc), axis=1)

    draws = generator.uniform(size=(n, 1))
    picked = np.minimum((np.cumsum(probabilities, axis=1) < draws).sum(axis=1), len(asc) - 1)

    choices = np.zeros_like(probabilities)
    choices[np.arange(n), picked] = 1.0

    return choices, attributes


@dataclasses.dataclass
class RecoveryReport():

    """
    Generating against recovered parameters.
    """

    truth: pd.Series
    estimate: pd.Series
    relative_error: pd.Series
    state: SolutionState
    duals: DualSolution
    bundle: ObservationBundle

    @property
    def max_error(self) -> float:
        return float(self.relative_error.max()) if len(self.relative_error) else 0.0

    @property
    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({'truth': self.truth, 'estimate': self.estimate, 'relative_error': self.relative_error})


def compare_parameters(truth: pd.Series, estimate: pd.Series) -> pd.Series:
    """Relative errors `|estimate - truth| / |truth|` on the shared labels, absolute where the truth is zero."""

    labels = [label for label in truth.index if label in estimate.index]
    truth = truth.reindex(labels)
    scale = truth.abs().where(truth.abs() > 0, 1.0)

    return ((estimate.reindex(labels) - truth).abs() / scale).rename('relative_error')


def recover_and_compare(scenario: SyntheticScenario, config: SolverConfig = None, sigma: float = 0.0,
                        noise: float = None, seed: int = 0) -> RecoveryReport:
    """Generates observations, calibrates FirstStage on them and compares parameters.

    Keyword Arguments:
    ----
    config {SolverConfig} -- Solver settings. (default: {None})

    sigma {float} -- Engages FirstStageVariant with the equilibrium flows as counts. (default: {0.0})

    noise {float} -- Perturbs the observed mode trips before calibrating. (default: {None})

    seed {int} -- Seed of the perturbation. (default: {0})

    Returns:
    ----
    {RecoveryReport} -- Truth, estimates and relative errors per parameter.
    """

    bundle = generate_observations(scenario=scenario, config=config)

    if noise:
        bundle = perturb_observations(bundle=bundle, noise=noise, seed=seed, tree=scenario.tree)

    if sigma > 0:
        program = build_first_stage_variant(
            network=scenario.network,
            route_set=scenario.routes(),
            bundle=bundle,
            tree=scenario.tree,
            theta_r=scenario.tree.theta_r,
            sigma=sigma,
            config=config
        )
    else:
        program = build_first_stage(
            network=scenario.network,
            route_set=scenario.routes(),
            bundle=bundle,
            tree=scenario.tree,
            theta_r=scenario.tree.theta_r,
            config=config
        )

    state, duals = solve_calibration(program=program, config=config)

    truth = scenario.parameters()
    estimate = duals.parameters()

    return RecoveryReport(
        truth=truth,
        estimate=estimate,
        relative_error=compare_parameters(truth=truth, estimate=estimate),
        state=state,
        duals=duals,
        bundle=bundle
    )


def calibrated_model(duals: DualSolution, utility_spec: UtilitySpec, tree: ModeTree) -> Tuple[UtilitySpec, ModeTree]:
    """Plugs recovered parameters into a utility spec and tree.

    Overview:
    ----
    Dissimilarities are clipped into [0, 1]; values within the drift
    allowance above 1 come back as exactly 1.
    """

    scales = {
        name: value for name, value in
        [('theta_j', duals.theta_j), ('theta_m', duals.theta_m), ('theta_r', duals.theta_r)]
        if value is not None
    }
    tau = {nest: float(np.clip(value, 0.0, 1.0)) for nest, value in duals.tau.items()}

    spec = utility_spec.replace(
        beta_k={**utility_spec.beta_k, **duals.beta_k},
        beta_q={**utility_spec.beta_q, **duals.beta_q}
    )

    return spec, tree.replace(tau={**tree.tau, **tau}, **scales)


def forecast(network: ModalNetwork, route_set: RouteSet, origins: pd.Series, utility_spec: UtilitySpec,
             tree: ModeTree, config: SolverConfig = None) -> Tuple[SolutionState, DualSolution]:
    """Builds and solves SecondStage with fixed parameters.

    Arguments:
    ----
    network {ModalNetwork} -- The future network.

    route_set {RouteSet} -- Routes on the future network.

    origins {pd.Series} -- Future productions.

    utility_spec {UtilitySpec} -- Future attributes with calibrated parameters.

    tree {ModeTree} -- Calibrated scales and dissimilarities.

    Keyword Arguments:
    ----
    config {SolverConfig} -- Solver settings. (default: {None})

    Returns:
    ----
    {Tuple[SolutionState, DualSolution]} -- Trips per level, link flows and multipliers.
    """

    program = build_second_stage(
        network=network,
        route_set=route_set,
        origins=origins,
        dest_utility=utility_spec.destination_utility(),
        mode_utility=utility_spec.mode_utility(),
        tree=tree,
        config=config
    )

    return solve_simplex_program(program=program, config=config)


def mode_totals(state: SolutionState) -> pd.Series:
    """Total trips per mode of a solved hierarchical program."""

    trips = state.trips.get('mode')

    if trips is None:
        raise InputError("The solution carries no mode trips.")

    return trips.groupby(level='mode', sort=False).sum().rename('trips')
