"""
Bounds Lab Module

Computes and checks the magnitude and variance inequalities behind weight averaging:
the max-norm bound of averaged matrices, variance of averaged Gaussian matrices,
the random-matrix singular value bound, output-norm growth through Lipschitz
layers and the depth-wise output variance bound.

Deterministic inequalities are asserted exactly and any failure is counted in
BoundReport.exact_violations. Probabilistic statements are checked by Monte Carlo
with a one-sided tolerance measured in standard errors of the estimate.
"""

import math
import operator
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from merge_lab.errors import DimensionError, DomainError
from merge_lab.models.zoo import Activation, ActivationKind
from merge_lab.tensor.core import (
    RngStream,
    StreamTag,
    Tensor,
    max_abs,
    sample_gaussian,
    scale,
    spectral_norm,
    stats,
    top_singular_value,
)
from merge_lab.utils.config import get_config_value
from merge_lab.utils.logger import get_logger

logger = get_logger(__name__)

Comparison = Callable[[float, float], bool]

# Binomial standard errors allowed below a guaranteed probability
PROBABILITY_SE_TOLERANCE = 3.0

# Standard errors allowed between a Monte Carlo variance and its closed form
VARIANCE_SE_TOLERANCE = 5.0

# Standard errors allowed above the output variance bound
THEOREM_SE_TOLERANCE = 4.0

# Relative slack on the per-layer chain for rounding in the norm and SVD
CHAIN_REL_SLACK = 1e-12

SCALING_REL_TOL = 1e-9


class BoundConfig(BaseModel):
    """Parameters of the random-network checks."""

    model_config = ConfigDict(frozen=True)

    tau: float = Field(2.0, gt=0.0)
    c_s: float = Field(1.0, ge=0.0)
    depth: int = Field(3, ge=1)
    width: int = Field(16, ge=1)
    lipschitz: float = Field(1.0, gt=0.0)
    sigma_w: float = Field(1.0, ge=0.0)
    sigma_b: float = Field(0.0, ge=0.0)
    sigma_w_layers: Optional[List[float]] = None
    sigma_b_layers: Optional[List[float]] = None
    activation: ActivationKind = "relu"
    trials: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0, le=2**64 - 1)

    @model_validator(mode="after")
    def _check_layers(self) -> "BoundConfig":
        for name in ("sigma_w_layers", "sigma_b_layers"):
            values = getattr(self, name)
            if values is None:
                continue
            if len(values) != self.depth:
                raise ValueError(f"{name} needs {self.depth} entries, got {len(values)}")
            if any(v < 0 for v in values):
                raise ValueError(f"{name} entries must be non-negative")
        return self

    def sigma_w_at(self, layer: int) -> float:
        """Weight standard deviation of a 1-based layer."""
        return self.sigma_w_layers[layer - 1] if self.sigma_w_layers else self.sigma_w

    def sigma_b_at(self, layer: int) -> float:
        return self.sigma_b_layers[layer - 1] if self.sigma_b_layers else self.sigma_b

    def params(self) -> Dict[str, float]:
        return {
            "tau": self.tau,
            "c_s": self.c_s,
            "depth": float(self.depth),
            "width": float(self.width),
            "lipschitz": self.lipschitz,
            "sigma_w": self.sigma_w,
            "sigma_b": self.sigma_b,
            "trials": float(self.trials),
        }


class BoundReport(BaseModel):
    """A computed bound next to what was measured."""

    check: str
    bound_value: float
    empirical: float
    violation_rate: float = Field(0.0, ge=0.0, le=1.0)
    guaranteed_prob: float = Field(1.0, ge=0.0, le=1.0)
    holds: bool
    exact_violations: int = Field(0, ge=0)
    params: Dict[str, float] = Field(default_factory=dict)
    extra: Dict[str, float] = Field(default_factory=dict)

    @property
    def holds_rate(self) -> float:
        return 1.0 - self.violation_rate

    def to_text(self) -> str:
        status = "HOLDS" if self.holds else "FAILS"
        line = (
            f"{self.check}: {status} bound={self.bound_value:.6g} "
            f"empirical={self.empirical:.6g} violation_rate={self.violation_rate:.6g} "
            f"guaranteed_prob={self.guaranteed_prob:.6g}"
        )
        if self.exact_violations:
            line += f" exact_violations={self.exact_violations}"
        details = ", ".join(f"{k}={v:.6g}" for k, v in {**self.params, **self.extra}.items())
        return f"{line}\n    {details}" if details else line


def guaranteed_probability(tau: float, layers: int = 1) -> float:
    """max(0, 1 - 2 exp(-tau^2)) ** layers."""
    if tau <= 0:
        raise DomainError(f"tau must be positive, got {tau}")
    return max(0.0, 1.0 - 2.0 * math.exp(-tau * tau)) ** layers


def _binomial_se(p: float, trials: int) -> float:
    return math.sqrt(p * (1.0 - p) / trials)


def check_avg_max_norm(w1: Tensor, w2: Tensor, compare: Comparison = operator.le) -> BoundReport:
    """
    Check max|(w1 + w2) / 2| <= (max|w1| + max|w2|) / 2 <= max(max|w1|, max|w2|).

    Args:
        w1 (Tensor): First matrix.
        w2 (Tensor): Second matrix of the same shape.
        compare (Comparison): Comparison used for both steps of the chain.

    Raises:
        DimensionError: If the shapes differ.
    """
    if w1.shape != w2.shape:
        raise DimensionError(f"cannot average shapes {w1.shape} and {w2.shape}")
    a1, a2 = max_abs(w1), max_abs(w2)
    averaged = max_abs(0.5 * (np.asarray(w1) + np.asarray(w2)))
    mean_bound = 0.5 * (a1 + a2)
    max_bound = max(a1, a2)
    holds = bool(compare(averaged, mean_bound) and compare(mean_bound, max_bound))
    return BoundReport(
        check="avg_max_norm",
        bound_value=mean_bound,
        empirical=averaged,
        violation_rate=0.0 if holds else 1.0,
        holds=holds,
        exact_violations=0 if holds else 1,
        extra={"max_constituent": max_bound},
    )


def avg_variance_formula(sigma1_sq: float, sigma2_sq: float) -> float:
    """Variance of (A + B) / 2 for independent entries with variances sigma1_sq, sigma2_sq."""
    if sigma1_sq < 0 or sigma2_sq < 0:
        raise DomainError(f"variances must be non-negative, got {sigma1_sq}, {sigma2_sq}")
    return 0.25 * (sigma1_sq + sigma2_sq)


def check_avg_variance(
    sigma1_sq: float, sigma2_sq: float, trials: int = 100_000, seed: int = 0
) -> BoundReport:
    """
    Compare the averaged-variance formula with a Monte Carlo estimate.

    Draws `trials` entries of two independent zero-mean Gaussian matrices and
    measures the population variance of their average. The estimate must lie within
    VARIANCE_SE_TOLERANCE standard errors of the formula, and the formula must not
    exceed max(sigma1_sq, sigma2_sq).
    """
    formula = avg_variance_formula(sigma1_sq, sigma2_sq)
    if trials < 2:
        raise DomainError(f"need at least 2 trials, got {trials}")
    rng = RngStream(seed).derive(StreamTag.TRIALS)
    a = sample_gaussian(rng, trials, 0.0, math.sqrt(sigma1_sq))
    b = sample_gaussian(rng, trials, 0.0, math.sqrt(sigma2_sq))
    empirical = stats(0.5 * (a + b)).variance
    tolerance = VARIANCE_SE_TOLERANCE * formula * math.sqrt(2.0 / (trials - 1)) + 1e-12
    within = abs(empirical - formula) <= tolerance
    below_max = formula <= max(sigma1_sq, sigma2_sq)
    return BoundReport(
        check="avg_variance",
        bound_value=formula,
        empirical=empirical,
        holds=within and below_max,
        exact_violations=0 if below_max else 1,
        params={"sigma1_sq": sigma1_sq, "sigma2_sq": sigma2_sq, "trials": float(trials)},
        extra={"max_variance": max(sigma1_sq, sigma2_sq), "tolerance": tolerance},
    )


def _lemma1_value(w: np.ndarray, tau: float, c_s: float) -> float:
    n = max(w.shape)
    k_s = float(np.max(np.linalg.norm(w, axis=1))) if w.size else 0.0
    return math.sqrt(n) + c_s * k_s * k_s * (math.sqrt(n) + tau)


def lemma1_bound(w: Tensor, tau: float, c_s: float = 1.0) -> Tuple[float, float]:
    """
    Singular value bound sqrt(N) + C_s K_s^2 (sqrt(N) + tau) of a random matrix.

    N is the larger dimension of w and K_s its largest row L2 norm.

    Returns:
        Tuple[float, float]: The bound and the power-iteration spectral norm of w.
    """
    if tau <= 0:
        raise DomainError(f"tau must be positive, got {tau}")
    if c_s < 0:
        raise DomainError(f"c_s must be non-negative, got {c_s}")
    if w.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {w.shape}")
    measured = spectral_norm(
        w,
        iters=int(get_config_value("spectral_iters", 500)),
        tol=float(get_config_value("spectral_tol", 1e-12)),
    )
    return _lemma1_value(w, tau, c_s), measured


def lemma1_sweep(
    width: int, tau: float, c_s: float = 1.0, sigma: float = 1.0, trials: int = 1000, seed: int = 0
) -> BoundReport:
    """Fraction of Gaussian width x width matrices whose top singular value meets the bound."""
    if width < 1 or trials < 1:
        raise DomainError("width and trials must be positive")
    guaranteed = guaranteed_probability(tau)
    rng = RngStream(seed).derive(StreamTag.TRIALS)
    bounds = np.empty(trials)
    singular = np.empty(trials)
    for t in range(trials):
        w = sample_gaussian(rng, (width, width), 0.0, sigma)
        bounds[t] = _lemma1_value(w, tau, c_s)
        singular[t] = top_singular_value(w)
    violations = int(np.sum(singular > bounds))
    rate = violations / trials
    holds = 1.0 - rate >= guaranteed - PROBABILITY_SE_TOLERANCE * _binomial_se(guaranteed, trials)
    return BoundReport(
        check="lemma1",
        bound_value=float(np.mean(bounds)),
        empirical=float(np.mean(singular)),
        violation_rate=rate,
        guaranteed_prob=guaranteed,
        holds=holds,
        params={"tau": tau, "c_s": c_s, "width": float(width), "sigma": sigma, "trials": float(trials)},
        extra={"max_singular": float(np.max(singular))},
    )


def check_property1(
    cfg: BoundConfig, fixed_weights: Optional[Sequence[Tensor]] = None
) -> BoundReport:
    """
    Output-norm growth through bias-free Lipschitz layers.

    Each trial draws depth square width x width Gaussian layers and a unit input,
    computes y^(m) = phi(W^(m) y^(m-1)) and compares ||y^(depth)|| with
    (L lambda)^depth ||x||, where lambda is the singular value bound built from the
    largest row norm over all layers. The per-layer chain
    ||y^(m)|| <= L s_1(W^(m)) ||y^(m-1)|| is a theorem and must never fail.

    Args:
        cfg (BoundConfig): Network shape, tau, C_s, L and trial count.
        fixed_weights (Optional[Sequence[Tensor]]): Use these layers in every trial
            instead of sampling.
    """
    act = Activation(kind=cfg.activation)
    n = cfg.width
    guaranteed = guaranteed_probability(cfg.tau, cfg.depth)
    rng = RngStream(cfg.seed).derive(StreamTag.TRIALS)
    inputs = RngStream(cfg.seed).derive(StreamTag.INPUTS)
    if fixed_weights is not None:
        if len(fixed_weights) != cfg.depth or any(w.shape != (n, n) for w in fixed_weights):
            raise DimensionError(f"expected {cfg.depth} matrices of shape ({n}, {n})")

    violations = 0
    chain_violations = 0
    max_ratio = 0.0
    bound_sum = 0.0
    for _ in range(cfg.trials):
        layers = (
            [np.asarray(w) for w in fixed_weights]
            if fixed_weights is not None
            else [
                sample_gaussian(rng, (n, n), 0.0, cfg.sigma_w_at(m))
                for m in range(1, cfg.depth + 1)
            ]
        )
        x = sample_gaussian(inputs, n)
        x = x / np.linalg.norm(x)
        k_s = max(float(np.max(np.linalg.norm(w, axis=1))) for w in layers)
        lam = math.sqrt(n) + cfg.c_s * k_s * k_s * (math.sqrt(n) + cfg.tau)
        y = x
        for w in layers:
            prev_norm = float(np.linalg.norm(y))
            y = act.apply(w @ y)
            chain = cfg.lipschitz * top_singular_value(w) * prev_norm
            if float(np.linalg.norm(y)) > chain * (1.0 + CHAIN_REL_SLACK):
                chain_violations += 1
        bound = (cfg.lipschitz * lam) ** cfg.depth
        out_norm = float(np.linalg.norm(y))
        bound_sum += bound
        max_ratio = max(max_ratio, out_norm / bound if bound > 0 else 0.0)
        if out_norm > bound:
            violations += 1

    rate = violations / cfg.trials
    prob_ok = 1.0 - rate >= guaranteed - PROBABILITY_SE_TOLERANCE * _binomial_se(
        guaranteed, cfg.trials
    )
    if chain_violations:
        logger.error(f"Per-layer Lipschitz chain failed {chain_violations} times")
    return BoundReport(
        check="property1",
        bound_value=bound_sum / cfg.trials,
        empirical=max_ratio,
        violation_rate=rate,
        guaranteed_prob=guaranteed,
        holds=prob_ok and chain_violations == 0,
        exact_violations=chain_violations,
        params=cfg.params(),
        extra={"chain_violations": float(chain_violations), "max_output_to_bound": max_ratio},
    )


def theorem1_bound(cfg: BoundConfig, x_norm_sq: float) -> float:
    """
    Upper bound on the summed output variance of a depth-M, width-N random network.

    ||x||^2 (L^2 N)^M prod_m sigma_w^(m)^2 + L^2 N sigma_b^(M)^2
    + L^2 sum_{m<M} N sigma_b^(m)^2 prod_{l>m} L^2 N sigma_w^(l)^2
    """
    l2, n, depth = cfg.lipschitz**2, float(cfg.width), cfg.depth
    weight_term = x_norm_sq * (l2 * n) ** depth
    for m in range(1, depth + 1):
        weight_term *= cfg.sigma_w_at(m) ** 2
    bias_term = l2 * n * cfg.sigma_b_at(depth) ** 2
    for m in range(1, depth):
        product = 1.0
        for layer in range(m + 1, depth + 1):
            product *= l2 * n * cfg.sigma_w_at(layer) ** 2
        bias_term += l2 * n * cfg.sigma_b_at(m) ** 2 * product
    return weight_term + bias_term


def check_theorem1(cfg: BoundConfig, x: Optional[Tensor] = None) -> BoundReport:
    """
    Monte Carlo output variance of random networks against theorem1_bound.

    The input is fixed (a unit vector from the config seed unless given); weights
    and biases are resampled every trial. Hidden layers apply the activation, the
    last layer is affine. The summed per-coordinate variance (unbiased) is compared
    with the bound allowing THEOREM_SE_TOLERANCE standard errors.
    """
    n, trials = cfg.width, cfg.trials
    if trials < 2:
        raise DomainError("variance estimation needs at least 2 trials")
    if x is None:
        x = sample_gaussian(RngStream(cfg.seed).derive(StreamTag.INPUTS), n)
        x = x / np.linalg.norm(x)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (n,):
        raise DimensionError(f"input must have {n} entries, got shape {x.shape}")

    act = Activation(kind=cfg.activation)
    rng = RngStream(cfg.seed).derive(StreamTag.TRIALS)
    y = np.broadcast_to(x, (trials, n))
    for m in range(1, cfg.depth + 1):
        w = sample_gaussian(rng, (trials, n, n), 0.0, cfg.sigma_w_at(m))
        b = sample_gaussian(rng, (trials, n), 0.0, cfg.sigma_b_at(m))
        z = np.einsum("tij,tj->ti", w, y) + b
        y = z if m == cfg.depth else act.apply(z)

    centered = y - y.mean(axis=0)
    per_trial = np.sum(centered * centered, axis=1) * trials / (trials - 1)
    per_coordinate = np.sum(centered * centered, axis=0) / (trials - 1)
    empirical = float(np.sum(per_coordinate))
    se = float(np.std(per_trial, ddof=1)) / math.sqrt(trials)
    bound = theorem1_bound(cfg, float(x @ x))
    holds = empirical <= bound + THEOREM_SE_TOLERANCE * se
    return BoundReport(
        check="theorem1",
        bound_value=bound,
        empirical=empirical,
        violation_rate=0.0 if holds else 1.0,
        holds=holds,
        params=cfg.params(),
        extra={
            "standard_error": se,
            "max_coordinate_variance": float(np.max(per_coordinate)),
        },
    )


def check_scaling_variance(t: Tensor, c: float) -> BoundReport:
    """Variance of c * t equals c^2 times the variance of t (relative tolerance 1e-9)."""
    expected = c * c * stats(t).variance
    measured = stats(scale(t, c)).variance
    holds = abs(measured - expected) <= SCALING_REL_TOL * max(abs(expected), 1e-300)
    return BoundReport(
        check="scaling_variance",
        bound_value=expected,
        empirical=measured,
        violation_rate=0.0 if holds else 1.0,
        holds=holds,
        exact_violations=0 if holds else 1,
        params={"factor": c},
    )


def _fuzz_max_norm(pairs: int, seed: int, compare: Comparison) -> BoundReport:
    gen = RngStream(seed).derive(StreamTag.TRIALS).generator
    failures = 0
    worst_slack = math.inf
    for _ in range(pairs):
        rows, cols = (int(d) for d in gen.integers(1, 9, size=2))
        s1, s2 = 10.0 ** gen.uniform(-3, 3, size=2)
        w1 = gen.standard_normal((rows, cols)) * s1
        w2 = gen.standard_normal((rows, cols)) * s2
        report = check_avg_max_norm(w1, w2, compare)
        worst_slack = min(worst_slack, report.bound_value - report.empirical)
        failures += report.exact_violations
    return BoundReport(
        check="avg_max_norm_fuzz",
        bound_value=0.0,
        empirical=worst_slack,
        violation_rate=failures / pairs,
        holds=failures == 0,
        exact_violations=failures,
        params={"pairs": float(pairs)},
    )


def _fuzz_variance_inequality(pairs: int, seed: int) -> BoundReport:
    gen = RngStream(seed).derive(StreamTag.TRIALS).derive(1).generator
    failures = 0
    for _ in range(pairs):
        s1, s2 = 10.0 ** gen.uniform(-6, 6, size=2)
        if avg_variance_formula(s1, s2) > max(s1, s2):
            failures += 1
    return BoundReport(
        check="avg_variance_inequality_fuzz",
        bound_value=0.0,
        empirical=0.0,
        violation_rate=failures / pairs,
        holds=failures == 0,
        exact_violations=failures,
        params={"pairs": float(pairs)},
    )


def run_bound_suite(
    cfg: BoundConfig,
    taus: Sequence[float] = (1.0, 2.0, 3.0),
    fuzz_pairs: int = 1000,
    variance_trials: int = 100_000,
    theorem_trials: Optional[int] = None,
    inject_violation: bool = False,
) -> List[BoundReport]:
    """
    Run every check in a fixed order.

    Args:
        cfg (BoundConfig): Base network config; tau is replaced by each entry of taus.
        taus (Sequence[float]): Values for the lemma and output-norm sweeps.
        fuzz_pairs (int): Random pairs for the deterministic inequalities.
        variance_trials (int): Entries per Monte Carlo variance check.
        theorem_trials (Optional[int]): Trials for the output variance check; cfg.trials if
            omitted.
        inject_violation (bool): Flip the max-norm comparison so the exact gate must fail.

    Returns:
        List[BoundReport]: Reports in a stable order.
    """
    compare: Comparison = operator.ge if inject_violation else operator.le
    if inject_violation:
        logger.warning("Injected violation: max-norm comparison flipped")

    example_1 = np.array([[1.0, 2.0], [3.0, 4.0]])
    example_2 = np.array([[5.0, 6.0], [7.0, 8.0]])
    reports = [
        check_avg_max_norm(example_1, example_2, compare),
        _fuzz_max_norm(fuzz_pairs, cfg.seed, compare),
        _fuzz_variance_inequality(fuzz_pairs, cfg.seed),
        check_avg_variance(4.0, 4.0, variance_trials, cfg.seed),
        check_avg_variance(1.0, 9.0, variance_trials, cfg.seed),
    ]
    scaling_input = sample_gaussian(RngStream(cfg.seed).derive(StreamTag.INPUTS), (32, 32))
    reports.append(check_scaling_variance(scaling_input, 100.0))

    for tau in taus:
        reports.append(
            lemma1_sweep(cfg.width, tau, cfg.c_s, cfg.sigma_w, cfg.trials, cfg.seed)
        )
        reports.append(check_property1(cfg.model_copy(update={"tau": float(tau)})))
    theorem_cfg = (
        cfg if theorem_trials is None else cfg.model_copy(update={"trials": theorem_trials})
    )
    reports.append(check_theorem1(theorem_cfg))

    for report in reports:
        if report.holds:
            logger.info(report.to_text())
        else:
            logger.warning(report.to_text())
    return reports


def exact_violation_count(reports: Sequence[BoundReport]) -> int:
    return sum(r.exact_violations for r in reports)
