"""
qsd.py

Binomial thinning as a pure-death chain killed at 0, the Poisson-mixture
quasi-stationary vectors built from a scale-invariant jump measure, their
eigen-residual check eta P = q eta, and the sampler for the subtree above a
spine vertex of a discretized Poisson forest.

Public API:
    - death_kernel(p, K) -> DeathKernel
    - mixture_eta(spec, K_eff, ...) -> MixtureQSD
    - qsd_residual(eta, kernel, window=None) -> QSDResidual
    - thinned_mixture(eta, p) -> np.ndarray
    - corollary_sampler(spec, kernel, rng, p=None) -> DiscreteTree
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import integrate, stats
from scipy.special import gammaln, logsumexp

from .discrete_tree import DiscreteTree, concatenate
from .errors import ParameterError, TruncationError
from .generators import COMB, DecorationKernel, LambdaSpec
from .rtree import discretize_nonempty

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DeathKernel:
    """Sub-stochastic matrix, matrix[k-1, j-1] = P(Bin(k, p) = j) for 1 <= j, k <= K."""
    p: float
    K: int
    matrix: np.ndarray

    def row_sums(self) -> np.ndarray:
        return self.matrix.sum(axis=1)


def death_kernel(p: float, K: int) -> DeathKernel:
    if not 0.0 < p < 1.0:
        raise ParameterError(f"p must lie in (0, 1), got {p}")
    if K < 1:
        raise ParameterError(f"K must be at least 1, got {K}")
    k = np.arange(1, K + 1, dtype=float)[:, None]
    j = np.arange(1, K + 1, dtype=float)[None, :]
    lower = j <= k
    rest = np.where(lower, k - j, 0.0)
    log_entries = (gammaln(k + 1) - gammaln(j + 1) - gammaln(rest + 1)
                   + j * math.log(p) + rest * math.log1p(-p))
    matrix = np.where(lower, np.exp(np.where(lower, log_entries, 0.0)), 0.0)
    # the mass of row k sits near j = pk; a row with nothing left there has underflowed
    band = np.clip(np.rint(p * k[:, 0]).astype(int), 1, K) - 1
    dead = np.flatnonzero(matrix[np.arange(K), band] == 0.0)
    if dead.size:
        raise TruncationError(f"Death kernel entries underflow for rows from k={dead[0] + 1} (p={p}, K={K})")
    return DeathKernel(float(p), int(K), matrix)


@dataclass(frozen=True, eq=False)
class MixtureQSD:
    """
    eta_k = d^-1 Int P(Poi(x) = k) Lambda(dx) for k = 1..K_eff.
    `tail_mass` is the part of the normalized law beyond K_eff, so eta.sum() + tail_mass = 1.
    """
    eta: np.ndarray
    q: Optional[float]
    d: float
    tail_mass: float
    spec: Optional[LambdaSpec] = None
    p: Optional[float] = None

    @property
    def K_eff(self) -> int:
        return self.eta.size

    @classmethod
    def from_vector(cls, vector, q: Optional[float] = None, p: Optional[float] = None) -> 'MixtureQSD':
        """A hand-made probability vector on {1..len(vector)} with no tail."""
        eta = np.asarray(vector, dtype=float)
        if np.any(eta < 0):
            raise ParameterError("A QSD candidate must be nonnegative")
        return cls(eta, q, float('nan'), 0.0, None, p)

    def rows(self) -> List[Dict[str, str]]:
        """One CSV row per k."""
        return [{'k': str(k), 'eta': repr(float(v))} for k, v in enumerate(self.eta, start=1)]


def _power_eta(spec: LambdaSpec, K_eff: int) -> Tuple[np.ndarray, float]:
    def integrand(x, k):
        return math.exp(stats.poisson.logpmf(k, x)) * spec.alpha * x ** (-1.0 - spec.alpha)

    def over_support(f):
        split = max(spec.eps_cutoff, min(float(K_eff), spec.x_max))
        head, _ = integrate.quad(f, spec.eps_cutoff, split, limit=400)
        tail = integrate.quad(f, split, spec.x_max, limit=400)[0] if split < spec.x_max else 0.0
        return head + tail

    raw = np.array([over_support(lambda x, k=k: integrand(x, k)) for k in range(1, K_eff + 1)])
    beyond = over_support(lambda x: stats.poisson.sf(K_eff, x) * spec.alpha * x ** (-1.0 - spec.alpha))
    return raw / spec.d, beyond / spec.d


def mixture_eta(spec: LambdaSpec, K_eff: int, q: Optional[float] = None, p: Optional[float] = None,
                max_tail: Optional[float] = None) -> MixtureQSD:
    """
    Poisson mixture against Lambda, truncated at K_eff. Discrete Lambda is
    summed in the log domain; the power kind is integrated numerically.
    TruncationError when `max_tail` is given and the tail beyond K_eff exceeds it.
    """
    if K_eff < 1:
        raise ParameterError(f"K_eff must be at least 1, got {K_eff}")
    d = spec.d
    if not (math.isfinite(d) and d > 0):
        raise ParameterError(f"The mixture needs a finite positive d, got {d}")
    if spec.kind == COMB:
        p = spec.p if p is None else p
        q = spec.q if q is None else q
    elif q is None and p is not None and spec.kind != 'atoms':
        q = spec.scaling_q(p)

    if spec.is_discrete:
        sizes, weights = spec.support()
        k = np.arange(1, K_eff + 1)
        log_terms = np.log(weights)[:, None] + stats.poisson.logpmf(k[None, :], sizes[:, None])
        eta = np.exp(logsumexp(log_terms, axis=0) - math.log(d))
        tail = float(np.sum(weights * stats.poisson.sf(K_eff, sizes)) / d)
    else:
        eta, tail = _power_eta(spec, K_eff)
    if max_tail is not None and tail > max_tail:
        raise TruncationError(f"Tail mass {tail:.3g} beyond K_eff={K_eff} exceeds {max_tail:.3g}")
    logger.debug("mixture_eta: K_eff=%d d=%.12g tail=%.3g", K_eff, d, tail)
    return MixtureQSD(eta, q, d, tail, spec, p)


@dataclass(frozen=True)
class QSDResidual:
    residual: float
    leak: float
    window: int
    K: int
    q: float
    p: float


def qsd_residual(eta: MixtureQSD, kernel: DeathKernel, window: Optional[int] = None) -> QSDResidual:
    """
    || eta P - q eta ||_1 over j <= window, using the K rows of the kernel.

    Mass of eta beyond K can still thin into 1..window; that leak is bounded by
    tail_mass * P(Bin(K + 1, p) <= window) and reported beside the residual.
    """
    if eta.K_eff != kernel.K:
        raise ParameterError(f"Dimension mismatch: eta has {eta.K_eff} entries, kernel has {kernel.K} rows")
    if eta.q is None:
        raise ParameterError("The QSD candidate carries no claimed eigenvalue q")
    if eta.p is not None and not math.isclose(eta.p, kernel.p, rel_tol=0, abs_tol=1e-15):
        raise ParameterError(f"Kernel p={kernel.p} does not match the p={eta.p} of the jump measure")
    window = kernel.K if window is None else int(window)
    if not 1 <= window <= kernel.K:
        raise ParameterError(f"Window must lie in [1, {kernel.K}], got {window}")
    image = eta.eta @ kernel.matrix[:, :window]
    residual = float(np.abs(image - eta.q * eta.eta[:window]).sum())
    leak = float(eta.tail_mass * stats.binom.cdf(window, kernel.K + 1, kernel.p))
    return QSDResidual(residual, leak, window, kernel.K, float(eta.q), kernel.p)


def thinned_mixture(eta: MixtureQSD, p: float) -> np.ndarray:
    """
    eta P without truncation for a discrete mixture: thinning Poi(x) by p gives Poi(p x).
    """
    if eta.spec is None or not eta.spec.is_discrete:
        raise ParameterError("Analytic thinning needs a discrete jump measure")
    sizes, weights = eta.spec.support()
    k = np.arange(1, eta.K_eff + 1)
    log_terms = np.log(weights)[:, None] + stats.poisson.logpmf(k[None, :], p * sizes[:, None])
    return np.exp(logsumexp(log_terms, axis=0) - math.log(eta.d))


def geometric_constant(spec: LambdaSpec) -> float:
    """c = 1 / (1 + d), the parameter of the copy count."""
    return 1.0 / (1.0 + spec.d)


def sample_copy(spec: LambdaSpec, kernel: DecorationKernel, rng: np.random.Generator) -> DiscreteTree:
    """One subtree: size x from the tilted measure, then the nonempty discretization of a scaled kernel tree."""
    x = float(spec.sample_tilted(rng, 1)[0])
    return discretize_nonempty(kernel.attach(x, rng), rng)


def corollary_sampler(spec: LambdaSpec, kernel: DecorationKernel, rng: np.random.Generator,
                      p: Optional[float] = None) -> DiscreteTree:
    """
    Root joined to G ~ Geo(c) iid subtrees on {0, 1, ...}, c = 1 / (1 + d).
    Equal in law to the decoration at a spine vertex of the discretized forest.
    """
    if p is not None and spec.kind == COMB and not math.isclose(p, spec.p):
        raise ParameterError(f"p={p} does not match the comb p={spec.p}")
    c = geometric_constant(spec)
    copies = int(rng.geometric(c)) - 1
    if copies == 0:
        return DiscreteTree.single()
    return concatenate([sample_copy(spec, kernel, rng) for _ in range(copies)])
