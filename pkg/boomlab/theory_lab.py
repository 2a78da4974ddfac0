"""
Numerical verification of the divergence bounds behind policy/planner alignment.

Every check returns a `BoundReport`. Asserted checks fail when their violations exceed the allowed
count, while report-only checks (`asserted=False`) just record what was observed, as the bound
they measure isn't guaranteed by its derivation.
"""

import dataclasses
import enum
import json
import logging
import math
import typing
from pathlib import Path

import numpy as np
from scipy import integrate, special

from .approximator import DivergenceError, ParamSet, TensorLayout, adam_step, init_optimizer
from .np_utils import LOG_2PI, SeedLike, make_rng

_logger = logging.getLogger(__package__)

BOUND_TOLERANCE = 1e-12
# slack allowed below `1 - delta` for Q-gap coverage frequencies
COVERAGE_SLACK = 0.02
# number of bisection rounds used to place a policy on the KL ball boundary
_BISECTION_ROUNDS = 50


class SupportMismatchError(ValueError):
    """Custom exception raised when two discrete distributions cannot be compared"""


@dataclasses.dataclass
class BoundReport:  # pylint: disable=too-many-instance-attributes
    check: str
    trials: int
    violations: int
    empirical: float
    bound: float
    epsilon: float = math.nan
    delta: float = math.nan
    required_coverage: float = math.nan
    asserted: bool = True
    allowed_violations: int = 0

    def __post_init__(self):
        if not 0 <= self.violations <= self.trials:
            raise ValueError(f"{self.check} : {self.violations} violations over {self.trials}")

    @property
    def failed(self) -> bool:
        return self.asserted and self.violations > self.allowed_violations

    def as_dict(self) -> dict:
        return {**dataclasses.asdict(self), "failed": self.failed}


REPORT_FIELDS = (*(field.name for field in dataclasses.fields(BoundReport)), "failed")


def _merge_reports(
    check: str,
    reports: typing.Sequence[BoundReport],
    asserted: bool = True,
    allowed_violations: int = 0,
) -> BoundReport:
    """Aggregate per-instance reports, keeping the instance with the least slack"""
    worst = max(reports, key=lambda report: report.empirical - report.bound)
    return dataclasses.replace(
        worst,
        check=check,
        trials=sum(report.trials for report in reports),
        violations=sum(report.violations for report in reports),
        asserted=asserted,
        allowed_violations=allowed_violations,
    )


# ----------------------------------------------------------------------------------------------
# discrete distributions


def _as_distribution(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    normalized = math.isclose(values.sum(), 1.0, abs_tol=1e-9)
    if values.ndim != 1 or np.any(values < 0.0) or not normalized:
        raise ValueError(f"not a discrete probability distribution : {values}")
    return values


def discrete_kl(p, q) -> float:
    """
    :raises SupportMismatchError: when supports differ in size, or `q` misses a point of `p`
    """
    p, q = _as_distribution(p), _as_distribution(q)
    if p.shape != q.shape:
        raise SupportMismatchError(f"supports differ : {p.shape} and {q.shape}")

    support = p > 0.0
    if np.any(q[support] <= 0.0):
        raise SupportMismatchError("q must be positive wherever p is")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def total_variation(p, q) -> float:
    p, q = _as_distribution(p), _as_distribution(q)
    if p.shape != q.shape:
        raise SupportMismatchError(f"supports differ : {p.shape} and {q.shape}")
    return float(0.5 * np.sum(np.abs(p - q)))


def pinsker_check(p, q, bound_scale: float = 1.0) -> BoundReport:
    """`TV(p, q) <= sqrt(KL(p || q) / 2)`"""
    kl = discrete_kl(p, q)
    tv = total_variation(p, q)
    bound = bound_scale * math.sqrt(kl / 2.0)
    return BoundReport("pinsker", 1, int(tv > bound + BOUND_TOLERANCE), tv, bound, epsilon=kl)


def tv_expectation_check(p, q, f, bound_scale: float = 1.0) -> BoundReport:
    """`|E_p f - E_q f| <= 2 max|f| TV(p, q)`"""
    f = np.asarray(f, dtype=np.float64)
    tv = total_variation(p, q)
    gap = abs(float(np.dot(p, f) - np.dot(q, f)))
    bound = bound_scale * 2.0 * float(np.max(np.abs(f))) * tv
    return BoundReport("tv_expectation", 1, int(gap > bound + BOUND_TOLERANCE), gap, bound)


def _random_pair(rng: np.random.Generator) -> typing.Tuple[np.ndarray, np.ndarray]:
    size = int(rng.integers(2, 11))
    return rng.dirichlet(np.ones(size)), rng.dirichlet(np.ones(size))


def pinsker_sweep(trials: int, seed: SeedLike, bound_scale: float = 1.0) -> BoundReport:
    rng = make_rng(seed)
    return _merge_reports(
        "pinsker", [pinsker_check(*_random_pair(rng), bound_scale) for _ in range(trials)]
    )


def tv_expectation_sweep(trials: int, seed: SeedLike, bound_scale: float = 1.0) -> BoundReport:
    rng = make_rng(seed)
    reports = []
    for _ in range(trials):
        p, q = _random_pair(rng)
        reports.append(tv_expectation_check(p, q, rng.uniform(-1.0, 1.0, p.shape), bound_scale))
    return _merge_reports("tv_expectation", reports)


# ----------------------------------------------------------------------------------------------
# Gaussians


@dataclasses.dataclass
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if self.cov.shape != (self.dim, self.dim):
            raise ValueError(f"covariance shape {self.cov.shape} doesn't match mean {self.dim}")

    @classmethod
    def diagonal(cls, mean, variances) -> "Gaussian":
        return cls(mean, np.diag(np.atleast_1d(np.asarray(variances, dtype=np.float64))))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def max_eigenvalue(self) -> float:
        return float(np.max(np.linalg.eigvalsh(self.cov)))

    def log_density(self, points: np.ndarray) -> np.ndarray:
        offsets = np.atleast_2d(points) - self.mean
        _, log_det = np.linalg.slogdet(self.cov)
        mahalanobis = np.sum(offsets * np.linalg.solve(self.cov, offsets.T).T, axis=1)
        return -0.5 * (mahalanobis + log_det + self.dim * LOG_2PI)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        # eigen decomposition also handles degenerate (zero) covariances
        eigenvalues, eigenvectors = np.linalg.eigh(self.cov)
        scale = eigenvectors * np.sqrt(np.maximum(eigenvalues, 0.0))
        return self.mean + rng.standard_normal((count, self.dim)) @ scale.T


def gaussian_kl(p: Gaussian, q: Gaussian) -> float:
    """Closed-form `KL(p || q)` between (full covariance) Gaussians"""
    offset = q.mean - p.mean
    _, log_det_p = np.linalg.slogdet(p.cov)
    _, log_det_q = np.linalg.slogdet(q.cov)
    return float(
        0.5
        * (
            np.trace(np.linalg.solve(q.cov, p.cov))
            + offset @ np.linalg.solve(q.cov, offset)
            - p.dim
            + log_det_q
            - log_det_p
        )
    )


def gaussian_concentration_check(  # pylint: disable=too-many-arguments
    std,
    delta: float,
    num_samples: int,
    seed: SeedLike,
    bound_scale: float = 1.0,
) -> BoundReport:
    """
    Empirical frequency of `||a - mu|| <= sqrt(2 Lambda log(1/delta))` for `a ~ N(mu, diag(std^2))`.
    The bound leaves the covariance trace out, so it's only asserted in dimension 1.
    """
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1) : {delta}")

    rng = make_rng(seed)
    std = np.atleast_1d(np.asarray(std, dtype=np.float64))
    radius = bound_scale * math.sqrt(2.0 * float(np.max(std**2)) * math.log(1.0 / delta))
    distances = np.linalg.norm(std * rng.standard_normal((num_samples, std.shape[0])), axis=1)
    coverage = float(np.mean(distances <= radius + BOUND_TOLERANCE))

    # Monte-Carlo slack of three binomial standard errors
    required = 1.0 - delta - 3.0 * math.sqrt(delta * (1.0 - delta) / num_samples)
    return BoundReport(
        f"gaussian_concentration_d{std.shape[0]}",
        1,
        int(coverage < required),
        coverage,
        radius,
        delta=delta,
        required_coverage=required,
        asserted=std.shape[0] == 1,
    )


def gaussian_kl_mean_bound_check(p: Gaussian, q: Gaussian, bound_scale: float = 1.0) -> BoundReport:
    """`||mu_p - mu_q|| <= sqrt(2 KL(p || q) Lambda(Sigma_q))`"""
    kl = gaussian_kl(p, q)
    gap = float(np.linalg.norm(p.mean - q.mean))
    bound = bound_scale * math.sqrt(2.0 * max(kl, 0.0) * q.max_eigenvalue)
    return BoundReport(
        "gaussian_kl_mean", 1, int(gap > bound + BOUND_TOLERANCE), gap, bound, epsilon=kl
    )


def _random_gaussian(rng: np.random.Generator, dim: int) -> Gaussian:
    factor = rng.normal(size=(dim, dim))
    return Gaussian(rng.normal(size=dim), factor @ factor.T / dim + 0.1 * np.eye(dim))


def gaussian_kl_mean_sweep(trials: int, seed: SeedLike, bound_scale: float = 1.0) -> BoundReport:
    rng = make_rng(seed)
    reports = []
    for _ in range(trials):
        dim = int(rng.integers(1, 5))
        reports.append(
            gaussian_kl_mean_bound_check(
                _random_gaussian(rng, dim), _random_gaussian(rng, dim), bound_scale
            )
        )
    return _merge_reports("gaussian_kl_mean", reports)


# ----------------------------------------------------------------------------------------------
# finite MDPs and the return gap


@dataclasses.dataclass
class FiniteMdp:
    transitions: np.ndarray
    rewards: np.ndarray
    gamma: float
    r_max: float = 1.0
    initial: typing.Optional[np.ndarray] = None

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        num_states, num_actions = self.rewards.shape
        if self.initial is None:
            self.initial = np.full(num_states, 1.0 / num_states)

        if self.transitions.shape != (num_states, num_actions, num_states):
            raise ValueError(f"transition tensor shape mismatch : {self.transitions.shape}")
        if not np.allclose(self.transitions.sum(axis=2), 1.0, atol=1e-9):
            raise ValueError("transition rows must sum to 1")
        if np.any(np.abs(self.rewards) > self.r_max):
            raise ValueError(f"rewards must be bounded by {self.r_max}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"discount factor must lie in [0, 1) : {self.gamma}")

    @property
    def num_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def num_actions(self) -> int:
        return self.rewards.shape[1]

    def as_dict(self) -> dict:
        assert self.initial is not None
        return {
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "gamma": self.gamma,
            "r_max": self.r_max,
            "initial": self.initial.tolist(),
        }


def random_mdp(
    rng: np.random.Generator,
    num_states: int,
    num_actions: int,
    gamma: float = 0.9,
    r_max: float = 1.0,
) -> FiniteMdp:
    """Dirichlet(1) transition rows, rewards uniform in [-r_max, r_max]"""
    return FiniteMdp(
        transitions=rng.dirichlet(np.ones(num_states), size=(num_states, num_actions)),
        rewards=rng.uniform(-r_max, r_max, size=(num_states, num_actions)),
        gamma=gamma,
        r_max=r_max,
    )


def policy_return(mdp: FiniteMdp, policy: np.ndarray) -> float:
    """Exact discounted return from the initial distribution (linear policy evaluation)"""
    assert mdp.initial is not None
    state_transitions = np.einsum("sa,sat->st", policy, mdp.transitions)
    state_rewards = np.sum(policy * mdp.rewards, axis=1)
    values = np.linalg.solve(np.eye(mdp.num_states) - mdp.gamma * state_transitions, state_rewards)
    return float(mdp.initial @ values)


def return_gap(mdp: FiniteMdp, beta: np.ndarray, pi: np.ndarray) -> float:
    return abs(policy_return(mdp, beta) - policy_return(mdp, pi))


def max_state_kl(beta: np.ndarray, pi: np.ndarray) -> float:
    return max(discrete_kl(beta_row, pi_row) for beta_row, pi_row in zip(beta, pi))


def policy_within_kl(
    beta_row: np.ndarray, epsilon: float, rng: np.random.Generator
) -> np.ndarray:
    """
    Perturb `beta_row` along a random logit direction, as far as possible while keeping
    `KL(beta_row || pi_row) <= epsilon` (bisection over the step length).
    """
    direction = rng.standard_normal(beta_row.shape)
    log_beta = np.log(beta_row)

    def _candidate(length: float) -> np.ndarray:
        return special.softmax(log_beta + length * direction)

    low, high = 0.0, 1.0
    while discrete_kl(beta_row, _candidate(high)) <= epsilon and high < 1e3:
        low, high = high, 2.0 * high

    for _ in range(_BISECTION_ROUNDS):
        middle = 0.5 * (low + high)
        if discrete_kl(beta_row, _candidate(middle)) <= epsilon:
            low = middle
        else:
            high = middle

    return _candidate(low)


def return_gap_bound_check(  # pylint: disable=too-many-arguments
    mdp: FiniteMdp,
    epsilon: float,
    trials: int,
    seed: SeedLike,
    bound_scale: float = 1.0,
    dump_dir: typing.Optional[Path] = None,
) -> BoundReport:
    """
    `|J(beta) - J(pi)| <= R_max sqrt(2 epsilon) / (1 - gamma)` over random policy pairs with
    per-state `KL(beta(s) || pi(s)) <= epsilon`.
    Per-state KL doesn't bound the occupancy-level divergence this bound stems from, so the check
    only reports : counterexamples get logged (and dumped to `dump_dir` when given).
    """
    rng = make_rng(seed)
    bound = bound_scale * mdp.r_max * math.sqrt(2.0 * epsilon) / (1.0 - mdp.gamma)

    violations = 0
    worst_gap = 0.0
    for trial in range(trials):
        beta = rng.dirichlet(np.ones(mdp.num_actions), size=mdp.num_states)
        pi = np.asarray([policy_within_kl(row, epsilon, rng) for row in beta])
        gap = return_gap(mdp, beta, pi)
        worst_gap = max(worst_gap, gap)

        if gap > bound + BOUND_TOLERANCE:
            violations += 1
            counterexample = {
                "epsilon": epsilon,
                "gap": gap,
                "bound": bound,
                "mdp": mdp.as_dict(),
                "beta": beta.tolist(),
                "pi": pi.tolist(),
            }
            _logger.warning("return gap bound counterexample : %s", json.dumps(counterexample))
            if dump_dir is not None:
                dump_dir.mkdir(parents=True, exist_ok=True)
                (dump_dir / f"return_gap_eps{epsilon:g}_{trial}.json").write_text(
                    json.dumps(counterexample, indent=2), encoding="utf-8"
                )

    return BoundReport(
        "return_gap",
        trials,
        violations,
        worst_gap,
        bound,
        epsilon=epsilon,
        asserted=False,
    )


def return_gap_sweep(  # pylint: disable=too-many-arguments
    num_mdps: int,
    epsilons: typing.Sequence[float],
    seed: SeedLike,
    gamma: float = 0.9,
    bound_scale: float = 1.0,
    dump_dir: typing.Optional[Path] = None,
) -> typing.List[BoundReport]:
    """One (report-only) aggregated report per `epsilon`, each over `num_mdps` random MDPs"""
    rng = make_rng(seed)
    reports = []
    for epsilon in epsilons:
        per_mdp = [
            return_gap_bound_check(
                random_mdp(rng, int(rng.integers(2, 21)), int(rng.integers(2, 6)), gamma),
                epsilon,
                1,
                rng,
                bound_scale,
                dump_dir,
            )
            for _ in range(num_mdps)
        ]
        reports.append(_merge_reports(f"return_gap_eps{epsilon:g}", per_mdp, asserted=False))
    return reports


# ----------------------------------------------------------------------------------------------
# Gaussian mixtures and the Q-value gap


@dataclasses.dataclass
class GmmSpec:
    """Mixture of diagonal Gaussians : weights (K,), means and variances (K, d)"""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))

        if self.means.shape != self.variances.shape or self.means.shape[0] != len(self.weights):
            raise ValueError("mixture weights, means and variances shapes mismatch")
        if np.any(self.weights < 0.0) or not math.isclose(self.weights.sum(), 1.0, abs_tol=1e-9):
            raise ValueError(f"mixture weights must be normalized : {self.weights}")
        if np.any(self.variances < 0.0):
            raise ValueError("mixture variances must be non-negative")

    @property
    def num_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def max_eigenvalues(self) -> np.ndarray:
        return np.max(self.variances, axis=1)

    def component_log_densities(self, points: np.ndarray) -> np.ndarray:
        """Log densities of every (unweighted) component : shape (N, K)"""
        offsets = np.atleast_2d(points)[:, None, :] - self.means[None]
        return -0.5 * np.sum(
            offsets**2 / self.variances + np.log(self.variances) + LOG_2PI, axis=2
        )

    def _log_weights(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.weights)

    def log_density(self, points: np.ndarray) -> np.ndarray:
        return special.logsumexp(
            self.component_log_densities(points) + self._log_weights(), axis=1
        )

    def score(self, points: np.ndarray) -> np.ndarray:
        """Gradient of the log density at `points`"""
        points = np.atleast_2d(points)
        responsibilities = special.softmax(
            self.component_log_densities(points) + self._log_weights(), axis=1
        )
        offsets = points[:, None, :] - self.means[None]
        return -np.sum(responsibilities[:, :, None] * offsets / self.variances, axis=1)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        components = rng.choice(self.num_components, size=count, p=self.weights)
        return self.means[components] + np.sqrt(self.variances[components]) * rng.standard_normal(
            (count, self.dim)
        )


def gmm_gaussian_kl(
    beta: GmmSpec, pi: Gaussian, seed: SeedLike = None, num_samples: int = 1_000_000
) -> typing.Tuple[float, float]:
    """
    `KL(beta || pi)`, by adaptive quadrature in dimension 1 and 2, by Monte-Carlo otherwise.
    Quadrature runs component by component, each over a 10 standard deviations box around its
    mean.

    :returns tuple: estimate, and its error (quadrature error estimate or Monte-Carlo standard
                    error)
    :raises ValueError: on dimension mismatch, or a degenerate mixture component
    """
    if beta.dim != pi.dim:
        raise ValueError(f"dimensions differ : {beta.dim} and {pi.dim}")
    if np.any(beta.variances[beta.weights > 0.0] <= 0.0):
        raise ValueError("KL(beta || pi) requires positive mixture variances")

    if beta.dim > 2:
        samples = beta.sample(num_samples, make_rng(seed))
        log_ratios = beta.log_density(samples) - pi.log_density(samples)
        return float(np.mean(log_ratios)), float(np.std(log_ratios) / math.sqrt(num_samples))

    value = 0.0
    error = 0.0
    for index in np.flatnonzero(beta.weights > 0.0):

        def _integrand(*coordinates: float, component: int = int(index)) -> float:
            point = np.asarray(coordinates)
            log_component = float(beta.component_log_densities(point)[0, component])
            log_ratio = float(beta.log_density(point)[0] - pi.log_density(point)[0])
            return math.exp(log_component) * log_ratio

        spread = 10.0 * np.sqrt(beta.variances[index])
        ranges = list(zip(beta.means[index] - spread, beta.means[index] + spread))
        component_value, component_error = integrate.nquad(
            _integrand, ranges, opts={"limit": 100, "epsabs": 1e-10, "epsrel": 1e-8}
        )
        value += beta.weights[index] * component_value
        error += beta.weights[index] * component_error

    return float(value), float(error)


def q_gap_radius(
    beta: GmmSpec, pi: Gaussian, epsilon: float, delta: float, capped: bool = True
) -> float:
    """
    High probability bound on the distance between planner and policy actions :

        max_i (sqrt(2 Lambda_i log(K / delta)) + sqrt(2 epsilon Lambda_pi / w_i))
            + sqrt(2 Lambda_pi log(1 / delta))

    capped at the diameter `2 sqrt(d)` of the normalized action box. Zero-weight components are
    ignored.
    """
    active = beta.weights > 0.0
    num_components = int(np.count_nonzero(active))
    pi_eigenvalue = pi.max_eigenvalue

    component_terms = np.sqrt(
        2.0 * beta.max_eigenvalues[active] * math.log(num_components / delta)
    ) + np.sqrt(2.0 * epsilon * pi_eigenvalue / beta.weights[active])
    radius = float(np.max(component_terms)) + math.sqrt(
        2.0 * pi_eigenvalue * math.log(1.0 / delta)
    )
    return min(2.0 * math.sqrt(beta.dim), radius) if capped else radius


def paired_q_gaps(
    beta: GmmSpec,
    pi: Gaussian,
    lipschitz: float,
    num_samples: int,
    seed: SeedLike,
) -> np.ndarray:
    """
    `|Q(a_beta) - Q(a_pi)|` over independent pairs, with `Q(a) = L ||a||` and both actions clipped
    to the normalized box [-1, 1]^d.
    """
    rng = make_rng(seed)
    planner_actions = np.clip(beta.sample(num_samples, rng), -1.0, 1.0)
    policy_actions = np.clip(pi.sample(num_samples, rng), -1.0, 1.0)
    return np.abs(
        lipschitz * np.linalg.norm(planner_actions, axis=1)
        - lipschitz * np.linalg.norm(policy_actions, axis=1)
    )


def q_gap_bound_check(  # pylint: disable=too-many-arguments
    beta: GmmSpec,
    pi: Gaussian,
    lipschitz: float,
    delta: float,
    epsilon: typing.Optional[float] = None,
    num_samples: int = 10_000,
    seed: SeedLike = None,
    bound_scale: float = 1.0,
) -> BoundReport:
    """
    Coverage of `|Q(a_beta) - Q(a_pi)| <= L D(epsilon)` against `1 - delta - COVERAGE_SLACK`.
    When `epsilon` is left out it's set to the numerical `KL(beta || pi)` plus three times its
    error estimate.

    :raises ValueError: when given `epsilon` is below the numerical `KL(beta || pi)`
    """
    rng = make_rng(seed)
    kl, kl_error = gmm_gaussian_kl(beta, pi, rng)
    if epsilon is None:
        epsilon = max(kl + 3.0 * kl_error, 0.0)
    elif kl - 3.0 * kl_error > epsilon:
        raise ValueError(f"KL(beta || pi) = {kl:.6g} exceeds epsilon = {epsilon:.6g}")

    bound = lipschitz * bound_scale * q_gap_radius(beta, pi, epsilon, delta)
    gaps = paired_q_gaps(beta, pi, lipschitz, num_samples, rng)
    coverage = float(np.mean(gaps <= bound + BOUND_TOLERANCE))
    required = 1.0 - delta - COVERAGE_SLACK
    return BoundReport(
        "q_gap",
        1,
        int(coverage < required),
        coverage,
        bound,
        epsilon=epsilon,
        delta=delta,
        required_coverage=required,
    )


def random_q_gap_instance(rng: np.random.Generator) -> typing.Tuple[GmmSpec, Gaussian]:
    """
    Random planner mixture inside the action box, and a policy Gaussian matching its moments with
    some extra spread and a small mean offset.
    """
    dim = int(rng.integers(1, 3))
    num_components = int(rng.integers(1, 4))
    beta = GmmSpec(
        weights=rng.dirichlet(2.0 * np.ones(num_components)),
        means=rng.uniform(-0.6, 0.6, size=(num_components, dim)),
        variances=rng.uniform(0.05, 0.3, size=(num_components, dim)) ** 2,
    )

    mean = beta.weights @ beta.means
    variance = beta.weights @ (beta.variances + beta.means**2) - mean**2
    pi = Gaussian.diagonal(
        mean + rng.normal(0.0, 0.05, size=dim), variance * rng.uniform(1.2, 2.0, size=dim)
    )
    return beta, pi


def q_gap_sweep(  # pylint: disable=too-many-arguments
    instances: int,
    num_samples: int,
    delta: float,
    seed: SeedLike,
    lipschitz: float = 1.0,
    bound_scale: float = 1.0,
) -> BoundReport:
    """Aggregated `q_gap_bound_check` over random instances, 5% of them being allowed to fail"""
    rng = make_rng(seed)
    reports = []
    for _ in range(instances):
        beta, pi = random_q_gap_instance(rng)
        reports.append(
            q_gap_bound_check(
                beta, pi, lipschitz, delta, None, num_samples, rng, bound_scale=bound_scale
            )
        )

    merged = _merge_reports("q_gap", reports, allowed_violations=instances // 20)
    # least covered instance
    worst = min(reports, key=lambda report: report.empirical)
    return dataclasses.replace(merged, empirical=worst.empirical, bound=worst.bound)


# ----------------------------------------------------------------------------------------------
# forward vs reverse KL fitting


class FitMetric(enum.Enum):
    FORWARD_KL = "forward_kl"
    REVERSE_KL = "reverse_kl"


@dataclasses.dataclass
class KlFitResult:
    metric: FitMetric
    mean: float
    std: float
    # (step, mean, std, objective) records
    trace: typing.List[typing.Tuple[int, float, float, float]]

    @property
    def variance(self) -> float:
        return self.std**2


def bimodal_target(mode: float = 2.0) -> GmmSpec:
    return GmmSpec(weights=[0.5, 0.5], means=[[-mode], [mode]], variances=[[1.0], [1.0]])


def _fit_objective_and_grad(
    target: GmmSpec,
    metric: FitMetric,
    mean: float,
    log_std: float,
    rng: np.random.Generator,
    batch_size: int,
) -> typing.Tuple[float, np.ndarray]:
    std = math.exp(log_std)
    if metric is FitMetric.FORWARD_KL:
        # NLL of target samples under the fit (forward KL up to the target entropy)
        normalized = (target.sample(batch_size, rng)[:, 0] - mean) / std
        objective = float(np.mean(0.5 * normalized**2) + log_std + 0.5 * LOG_2PI)
        return objective, np.array(
            [-float(np.mean(normalized)) / std, float(np.mean(1.0 - normalized**2))]
        )

    # reparameterized samples of the fit, target log density evaluated exactly
    noise = rng.standard_normal(batch_size)
    points = (mean + std * noise)[:, None]
    log_fit = -0.5 * noise**2 - log_std - 0.5 * LOG_2PI
    objective = float(np.mean(log_fit - target.log_density(points)))
    score = target.score(points)[:, 0]
    return objective, np.array([-float(np.mean(score)), -float(np.mean(score * std * noise)) - 1.0])


def kl_fit_demo(  # pylint: disable=too-many-arguments
    target: GmmSpec,
    metric: FitMetric,
    steps: int = 2000,
    seed: SeedLike = 0,
    learning_rate: float = 0.02,
    batch_size: int = 512,
    trace_interval: int = 50,
) -> KlFitResult:
    """
    Fit a 1-d Gaussian `(mean, log std)` to `target` with Adam, minimizing either the forward or
    the reverse KL. Fit starts at unit variance with a random mean offset away from 0, and
    reported parameters are averaged over the last tenth of the iterates.

    :raises DivergenceError: when objective isn't finite
    """
    if target.dim != 1:
        raise ValueError(f"KL fitting demo works on 1-d targets, got dimension {target.dim}")

    rng = make_rng(seed)
    start = float(rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0]))
    params = ParamSet(np.array([start, 0.0]), (TensorLayout("mean_log_std", 0, (2,)),))
    state = init_optimizer(params, learning_rate, clip_norm=1e3)

    trace = []
    averaged = []
    for step in range(steps):
        mean, log_std = params.values
        objective, grad = _fit_objective_and_grad(target, metric, mean, log_std, rng, batch_size)
        if not math.isfinite(objective):
            raise DivergenceError(f"non-finite {metric.value} objective at step {step}")

        params, state = adam_step(state, params, grad)
        if step % trace_interval == 0:
            trace.append((step, float(mean), math.exp(log_std), objective))
        if step >= steps - max(steps // 10, 1):
            averaged.append(params.values.copy())

    mean, log_std = np.mean(averaged, axis=0)
    return KlFitResult(metric, float(mean), math.exp(log_std), trace)


def kl_fit_checks(
    seeds: int, steps: int, seed: SeedLike, mode: float = 2.0
) -> typing.Tuple[typing.List[BoundReport], typing.List[KlFitResult]]:
    """
    Mode-covering forward fits (variance around `1 + mode^2`) against mode-seeking reverse fits
    (one mode, unit-ish variance), over several seeds.
    """
    rng = make_rng(seed)
    target = bimodal_target(mode)
    forward_fits = []
    reverse_fits = []
    for _ in range(seeds):
        fit_seed = int(rng.integers(2**31))
        forward_fits.append(kl_fit_demo(target, FitMetric.FORWARD_KL, steps, fit_seed))
        reverse_fits.append(kl_fit_demo(target, FitMetric.REVERSE_KL, steps, fit_seed))

    moment_variance = 1.0 + mode**2
    forward_violations = sum(
        not 0.8 * moment_variance <= fit.variance <= 1.2 * moment_variance for fit in forward_fits
    )
    reverse_violations = sum(
        not (0.85 * mode <= abs(fit.mean) <= 1.15 * mode and fit.variance <= 1.5)
        for fit in reverse_fits
    )
    contrast_violations = sum(
        forward.variance < 4.0 * reverse.variance
        for forward, reverse in zip(forward_fits, reverse_fits)
    )

    reports = [
        BoundReport(
            "kl_fit_forward_variance",
            seeds,
            forward_violations,
            float(np.mean([fit.variance for fit in forward_fits])),
            moment_variance,
        ),
        BoundReport(
            "kl_fit_reverse_mode",
            seeds,
            reverse_violations,
            float(np.mean([abs(fit.mean) for fit in reverse_fits])),
            mode,
        ),
        BoundReport(
            "kl_fit_variance_contrast",
            seeds,
            contrast_violations,
            float(
                np.mean(
                    [
                        forward.variance / reverse.variance
                        for forward, reverse in zip(forward_fits, reverse_fits)
                    ]
                )
            ),
            4.0,
        ),
    ]
    return reports, forward_fits + reverse_fits


# ----------------------------------------------------------------------------------------------


@dataclasses.dataclass
class VerificationResult:
    reports: typing.List[BoundReport]
    kl_fits: typing.List[KlFitResult]

    @property
    def failed(self) -> typing.List[BoundReport]:
        return [report for report in self.reports if report.failed]


def run_all_checks(
    seed: int = 0,
    quick: bool = False,
    bound_scale: float = 1.0,
    dump_dir: typing.Optional[Path] = None,
) -> VerificationResult:
    """
    Run every check with its default sizes (`quick` shrinks them for smoke runs).
    `bound_scale` multiplies every bound, values below 1 forcing violations.
    """
    rng = make_rng(seed)
    bound_trials = 100 if quick else 1000

    reports = [
        pinsker_sweep(bound_trials, rng, bound_scale),
        tv_expectation_sweep(bound_trials, rng, bound_scale),
        gaussian_kl_mean_sweep(bound_trials, rng, bound_scale),
        gaussian_concentration_check([1.0], 0.05, 100_000, rng, bound_scale),
        gaussian_concentration_check([1.0, 0.5, 0.25], 0.05, 100_000, rng, bound_scale),
    ]
    _logger.info("divergence bound checks done")

    reports += return_gap_sweep(
        20 if quick else 200, (0.0, 0.005, 0.02, 0.08), rng, 0.9, bound_scale, dump_dir
    )
    _logger.info("return gap sweep done")

    reports.append(
        q_gap_sweep(10 if quick else 100, 2000 if quick else 10_000, 0.1, rng, 1.0, bound_scale)
    )
    _logger.info("Q-value gap sweep done")

    fit_reports, fits = kl_fit_checks(2 if quick else 5, 1000 if quick else 2000, rng)
    reports += fit_reports
    _logger.info("KL fitting demo done")

    return VerificationResult(reports, fits)
