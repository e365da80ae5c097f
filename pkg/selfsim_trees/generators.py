"""
generators.py

Constructors for self-similar random trees: the geometric bouquet ray, rays
with uniform spine density, translation-invariant Poisson forests driven by a
scale-invariant jump measure Lambda (Lambda(A) = q Lambda(pA)), cutoff stable
subordinators and the time/size reparametrizations of one-ended R-trees.
"""
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import integrate

from . import settings
from .discrete_tree import DiscreteTree, OneEndedTree
from .errors import ConditioningError, InadmissibleError, ParameterError
from .rtree import (MASS_TOLERANCE, FiniteRTree, MassPath, OneEndedRTree, Segment, _TreeBuilder,
                    scale)
from .seeding import spawn

logger = logging.getLogger(__name__)

POWER = 'power'
COMB = 'comb'
ATOMS = 'atoms'


@dataclass(frozen=True)
class LambdaSpec:
    """
    Jump measure on subtree sizes.

    power: alpha x^(-1-alpha) dx on [eps_cutoff, x_max]
    comb:  weight q^n at x0 p^(-n) for n_min <= n <= n_max
    atoms: explicit (size, weight) pairs
    """
    kind: str
    alpha: Optional[float] = None
    eps_cutoff: Optional[float] = None
    x_max: float = math.inf
    x0: Optional[float] = None
    p: Optional[float] = None
    q: Optional[float] = None
    n_min: Optional[int] = None
    n_max: Optional[int] = None
    pairs: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.kind == POWER:
            if not 0.0 < (self.alpha or 0.0) < 1.0:
                raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
            if not (self.eps_cutoff and 0.0 < self.eps_cutoff < self.x_max):
                raise ParameterError(f"Need 0 < eps_cutoff < x_max, got {self.eps_cutoff}, {self.x_max}")
        elif self.kind == COMB:
            if self.x0 is None or not self.x0 > 0:
                raise ParameterError(f"x0 must be positive, got {self.x0}")
            if not (self.p and self.q and 0.0 < self.p < self.q < 1.0):
                raise ParameterError(f"A comb needs 0 < p < q < 1, got p={self.p}, q={self.q}")
            if self.n_min is None or self.n_max is None or self.n_min > self.n_max:
                raise ParameterError(f"Need n_min <= n_max, got {self.n_min}, {self.n_max}")
        elif self.kind == ATOMS:
            pairs = tuple((float(x), float(w)) for x, w in self.pairs)
            if any(not (x > 0 and w > 0) for x, w in pairs):
                raise ParameterError("Atom sizes and weights must be positive")
            object.__setattr__(self, 'pairs', pairs)
        else:
            raise ParameterError(f"Unknown Lambda kind {self.kind!r}")

    @classmethod
    def power(cls, alpha: float, eps_cutoff: float, x_max: float = math.inf) -> 'LambdaSpec':
        return cls(POWER, alpha=alpha, eps_cutoff=eps_cutoff, x_max=x_max)

    @classmethod
    def comb(cls, x0: float, p: float, q: float, n_min: int, n_max: int) -> 'LambdaSpec':
        return cls(COMB, x0=x0, p=p, q=q, n_min=int(n_min), n_max=int(n_max))

    @classmethod
    def atoms(cls, pairs: Iterable[Tuple[float, float]]) -> 'LambdaSpec':
        return cls(ATOMS, pairs=tuple(pairs))

    @property
    def is_discrete(self) -> bool:
        return self.kind != POWER

    @cached_property
    def _support(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.kind == COMB:
            n = np.arange(self.n_min, self.n_max + 1)
            return self.x0 * self.p ** (-n.astype(float)), self.q ** n.astype(float)
        if self.kind == ATOMS:
            if not self.pairs:
                return np.zeros(0), np.zeros(0)
            sizes, weights = zip(*self.pairs)
            return np.asarray(sizes), np.asarray(weights)
        raise ParameterError("A power-law Lambda has no atoms")

    def support(self) -> Tuple[np.ndarray, np.ndarray]:
        """(sizes, weights) of a discrete Lambda."""
        sizes, weights = self._support
        return sizes.copy(), weights.copy()

    @cached_property
    def total_rate(self) -> float:
        """Lambda(0, inf)."""
        if self.kind == POWER:
            return self.eps_cutoff ** -self.alpha - self.x_max ** -self.alpha
        return float(self._support[1].sum())

    @cached_property
    def d(self) -> float:
        """Integral of (1 - e^-x) against Lambda."""
        if self.kind == POWER:
            density = lambda x: -math.expm1(-x) * self.alpha * x ** (-1.0 - self.alpha)
            split = max(self.eps_cutoff, min(1.0, self.x_max))
            head, _ = integrate.quad(density, self.eps_cutoff, split, limit=200)
            tail, _ = integrate.quad(density, split, self.x_max, limit=200) if split < self.x_max else (0.0, 0.0)
            return head + tail
        sizes, weights = self._support
        return float(np.sum(weights * -np.expm1(-sizes)))

    def measure(self, lo: float, hi: float) -> float:
        """Lambda([lo, hi])."""
        if self.kind == POWER:
            lo, hi = max(lo, self.eps_cutoff), min(hi, self.x_max)
            return max(lo ** -self.alpha - hi ** -self.alpha, 0.0) if lo <= hi else 0.0
        sizes, weights = self._support
        return float(weights[(sizes >= lo) & (sizes <= hi)].sum())

    def scaling_q(self, p: Optional[float] = None) -> float:
        """The q with Lambda(A) = q Lambda(pA)."""
        if self.kind == COMB:
            return self.q
        if self.kind == POWER:
            if p is None:
                raise ParameterError("A power-law Lambda needs p to determine q = p^alpha")
            return p ** self.alpha
        raise ParameterError("An explicit atom list has no scaling relation")

    def rescaled_atoms(self) -> List[Tuple[float, float]]:
        """
        Comb atoms seen after rescaling a forest by (p, q): sizes times p and
        rates per unit spine length divided by q.
        """
        if self.kind != COMB:
            raise ParameterError("Exact rescaling bookkeeping is defined for combs")
        sizes, weights = self._support
        return list(zip(sizes * self.p, weights / self.q))

    def sample_sizes(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """`count` iid sizes from Lambda / Lambda(0, inf)."""
        if self.kind == POWER:
            v = 1.0 - rng.random(count)
            return (self.x_max ** -self.alpha + v * self.total_rate) ** (-1.0 / self.alpha)
        sizes, weights = self._support
        if not count:
            return np.zeros(0)
        return sizes[rng.choice(sizes.size, size=count, p=weights / weights.sum())]

    def sample_tilted(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """`count` iid sizes from (1 - e^-x) Lambda(dx) / d."""
        if count <= 0:
            return np.zeros(0)
        if self.kind != POWER:
            sizes, weights = self._support
            tilted = weights * -np.expm1(-sizes)
            return sizes[rng.choice(sizes.size, size=count, p=tilted / tilted.sum())]
        accepted: List[float] = []
        attempts = 0
        while len(accepted) < count:
            if attempts >= settings.ATTEMPT_CAP:
                raise ConditioningError(f"Tilted size sampling exceeded {settings.ATTEMPT_CAP} attempts")
            batch = max(64, 2 * (count - len(accepted)))
            proposals = self.sample_sizes(rng, batch)
            keep = rng.random(batch) < -np.expm1(-proposals)
            accepted.extend(proposals[keep].tolist())
            attempts += batch
        return np.asarray(accepted[:count])

    def echo(self) -> Dict[str, str]:
        """Parameters as exact decimal strings, for report metadata."""
        if self.kind == POWER:
            values = {'alpha': self.alpha, 'eps_cutoff': self.eps_cutoff, 'x_max': self.x_max}
        elif self.kind == COMB:
            values = {'x0': self.x0, 'p': self.p, 'q': self.q, 'n_min': self.n_min, 'n_max': self.n_max}
        else:
            values = {'atoms': ';'.join(f"{x!r}:{w!r}" for x, w in self.pairs)}
        return {'kind': self.kind, **{k: repr(v) if isinstance(v, float) else str(v) for k, v in values.items()}}


@dataclass(frozen=True)
class DecorationKernel:
    """
    Family sigma_x of unit-mass decoration laws.

    constant: sigma_x is a fixed tree for every x.
    log_periodic: sigma_x depends on x only through frac(log_p x), split into
    len(table) bins; each bin is a uniform choice among its trees.
    """
    kind: str
    table: Tuple[Tuple[FiniteRTree, ...], ...]
    p: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ('constant', 'log_periodic'):
            raise ParameterError(f"Unknown kernel kind {self.kind!r}")
        if not self.table or any(not entry for entry in self.table):
            raise ParameterError("Every kernel entry needs at least one tree")
        for entry in self.table:
            for tree in entry:
                if abs(tree.total_mass - 1.0) > MASS_TOLERANCE:
                    raise ParameterError(f"Kernel trees must have total mass 1, got {tree.total_mass!r}")
        if self.kind == 'log_periodic' and not (self.p and 0.0 < self.p < 1.0):
            raise ParameterError(f"A log-periodic kernel needs p in (0, 1), got {self.p}")

    @classmethod
    def constant(cls, tree: FiniteRTree) -> 'DecorationKernel':
        return cls('constant', ((tree,),))

    @classmethod
    def log_periodic(cls, p: float, table: Sequence[Union[FiniteRTree, Sequence[FiniteRTree]]]) -> 'DecorationKernel':
        entries = tuple((e,) if isinstance(e, FiniteRTree) else tuple(e) for e in table)
        return cls('log_periodic', entries, p)

    def bin_of(self, x: float) -> int:
        if self.kind == 'constant':
            return 0
        phase = (math.log(x) / math.log(self.p)) % 1.0
        return int(phase * len(self.table)) % len(self.table)

    def sample(self, x: float, rng: np.random.Generator) -> FiniteRTree:
        """A unit-mass tree from sigma_x."""
        entry = self.table[self.bin_of(x)]
        if len(entry) == 1:
            return entry[0]
        return entry[int(rng.integers(len(entry)))]

    def attach(self, x: float, rng: np.random.Generator) -> FiniteRTree:
        """A tree from sigma_x scaled by x in metric and mass."""
        return scale(self.sample(x, rng), x)


UNIT_SEGMENT = FiniteRTree.segment(1.0)


# -- discrete and q = p families ------------------------------------------

def geometric_bouquet_ray(gamma: float, rng: np.random.Generator) -> OneEndedTree:
    """Ray whose decorations are iid stars with Geo(gamma) leaves on {0, 1, ...}."""
    if not 0.0 < gamma <= 1.0:
        raise ParameterError(f"gamma must lie in (0, 1], got {gamma}")
    return OneEndedTree.from_sampler(lambda r: DiscreteTree.star(int(r.geometric(gamma)) - 1), rng)


def uniform_density_ray(lam: float) -> OneEndedRTree:
    """Bare ray with mu = lam times the length measure."""
    if not lam >= 1.0:
        raise ParameterError(f"lambda must be at least 1 so that mu >= length, got {lam}")
    return OneEndedRTree.bare_ray(density=lam - 1.0)


# -- Poisson forests and subordinators -------------------------------------

def ti_poisson_forest(spec: LambdaSpec, kernel: DecorationKernel, rng: np.random.Generator) -> OneEndedRTree:
    """
    Bare unit-length spine segments; attachments arrive at rate Lambda(0, inf)
    per unit length, each a sigma_x tree scaled by its size x ~ Lambda / Lambda(0, inf).
    """
    rate = spec.total_rate
    if not math.isfinite(rate):
        raise ParameterError("The forest needs a finite total jump rate; set a cutoff")
    if kernel.kind == 'log_periodic' and spec.kind == COMB and not math.isclose(kernel.p, spec.p):
        raise ParameterError(f"Kernel period p={kernel.p} does not match the comb p={spec.p}")
    own = spawn(rng)

    def segments():
        while True:
            count = int(own.poisson(rate))
            offsets = np.sort(own.random(count))
            sizes = spec.sample_sizes(own, count)
            yield Segment(1.0, 0.0, (), tuple((float(o), kernel.attach(float(x), own))
                                              for o, x in zip(offsets, sizes)))

    return OneEndedRTree(segments)


def subordinator_jumps(alpha: float, eps_cutoff: float, horizon: float, rng: np.random.Generator,
                       x_max: float = math.inf) -> MassPath:
    """
    Jumps of an alpha-stable subordinator on [0, horizon] restricted to sizes
    in [eps_cutoff, x_max]; intensity alpha x^(-1-alpha) dx dt. H = 1/alpha.
    """
    spec = LambdaSpec.power(alpha, eps_cutoff, x_max)
    if horizon < 0:
        raise ParameterError(f"Horizon must be nonnegative, got {horizon}")
    count = int(rng.poisson(horizon * spec.total_rate))
    times = horizon * (1.0 - rng.random(count))
    sizes = spec.sample_sizes(rng, count)
    return MassPath(float(horizon), (), times, sizes, 0.0, 1.0 / alpha)


def matched_cutoff(eps_cutoff: float, q: float, alpha: float) -> float:
    """Cutoff for the left side of q^-H X(q t) = X(t): eps q^H with H = 1/alpha."""
    return eps_cutoff * q ** (1.0 / alpha)


def subordinated_tree(alpha: float, eps_cutoff: float, kernel: DecorationKernel,
                      rng: np.random.Generator, x_max: float = math.inf) -> OneEndedRTree:
    """Spine with a scaled kernel tree at every jump of a cutoff stable subordinator."""
    return ti_poisson_forest(LambdaSpec.power(alpha, eps_cutoff, x_max), kernel, rng)


def tree_from_mass_path(path: MassPath, kernel: DecorationKernel, rng: np.random.Generator) -> FiniteRTree:
    """Finite spine [0, horizon]: slopes become spine densities, jumps become scaled kernel trees."""
    builder = _TreeBuilder()
    if path.origin_mass > 0:
        builder.attach(kernel.attach(path.origin_mass, rng))
    breakpoints = sorted({0.0, path.horizon, *path.jump_times.tolist(),
                          *(t for piece in path.slope_pieces for t in piece[:2])})

    def slope_at(t: float) -> float:
        return sum(s for t0, t1, s in path.slope_pieces if t0 <= t < t1)

    jumps = dict(zip(path.jump_times.tolist(), path.jump_sizes.tolist()))
    for left, right in zip(breakpoints, breakpoints[1:]):
        builder.extend_to(right, slope_at(left))
        if right in jumps:
            builder.attach(kernel.attach(jumps[right], rng))
    return builder.build()


# -- reparametrizations -----------------------------------------------------

@dataclass(frozen=True)
class Beta:
    """Move spine point t to t^beta."""
    beta: float


@dataclass(frozen=True)
class Gamma:
    """Weight the mass attached at spine point s by s^gamma."""
    gamma: float


@dataclass(frozen=True)
class Delta:
    """Replace each jump size x by x^delta."""
    delta: float


@dataclass(frozen=True)
class GammaDelta:
    """
    Weight the continuous spine mass at s by s^gamma and replace each jump
    size x by x^delta. Self-similarity carries over when p q^gamma = p^delta.
    """
    gamma: float
    delta: float


@dataclass(frozen=True)
class Record:
    """Share one fresh unit-mass decoration among the jumps between consecutive record jumps."""
    rng: np.random.Generator = field(compare=False)
    sampler: Callable[[np.random.Generator], FiniteRTree] = field(compare=False)


Reparametrization = Union[Beta, Gamma, Delta, GammaDelta, Record]


def claimed_scaling(p: float, q: float, mode: Reparametrization) -> Tuple[float, float]:
    """The (p, q) pair a (p, q)-self-similar input is expected to have after `mode`."""
    if isinstance(mode, Beta):
        return p, q ** mode.beta
    if isinstance(mode, Gamma):
        return p * q ** mode.gamma, q
    if isinstance(mode, Delta):
        return p ** mode.delta, q
    if isinstance(mode, GammaDelta):
        if not math.isclose(p * q ** mode.gamma, p ** mode.delta, rel_tol=1e-9):
            raise InadmissibleError(f"gamma={mode.gamma}, delta={mode.delta} need p q^gamma = p^delta "
                                    f"(got {p * q ** mode.gamma:.6g} and {p ** mode.delta:.6g})")
        return p ** mode.delta, q
    return p, q


def _clamp_offset(offset: float, length: float) -> float:
    return min(max(offset, 0.0), float(np.nextafter(length, 0.0)))


def _beta_segments(tree: OneEndedRTree, beta: float):
    for start, seg in tree.walk():
        lo, hi = start ** beta, (start + seg.length) ** beta
        length = hi - lo
        yield Segment(
            length,
            seg.density * seg.length / length,
            tuple((_clamp_offset((start + o) ** beta - lo, length), m) for o, m in seg.atoms),
            tuple((_clamp_offset((start + o) ** beta - lo, length), a) for o, a in seg.attachments),
        )


def _mean_power(a: float, b: float, gamma: float) -> float:
    """Average of s^gamma over [a, b]."""
    if gamma == -1.0:
        if a == 0.0:
            return math.inf
        return math.log(b / a) / (b - a)
    if a == 0.0 and gamma < -1.0:
        return math.inf
    return (b ** (gamma + 1.0) - a ** (gamma + 1.0)) / ((gamma + 1.0) * (b - a))


def _point_weight(s: float, gamma: float) -> float:
    if s > 0:
        return s ** gamma
    if gamma < 0:
        raise InadmissibleError(f"gamma={gamma} gives infinite mass to the root")
    return 0.0


def _gamma_segments(tree: OneEndedRTree, gamma: float):
    for start, seg in tree.walk():
        density = seg.density
        if density > 0:
            density *= _mean_power(start, start + seg.length, gamma)
            if not math.isfinite(density):
                raise InadmissibleError(f"gamma={gamma} gives infinite spine mass near the root")
        weighted = ((o, m * _point_weight(start + o, gamma)) for o, m in seg.atoms)
        scaled = ((o, a, _point_weight(start + o, gamma)) for o, a in seg.attachments)
        yield Segment(
            seg.length,
            density,
            tuple((o, m) for o, m in weighted if m > 0),
            tuple((o, scale(a, w)) for o, a, w in scaled if w > 0),
        )


def _delta_segments(tree: OneEndedRTree, delta: float, gamma: float = 0.0):
    """Jumps x become x^delta; with gamma != 0 the spine density is also weighted by s^gamma."""
    for start, seg in tree.walk():
        density = seg.density
        if density > 0 and gamma != 0.0:
            density *= _mean_power(start, start + seg.length, gamma)
            if not math.isfinite(density):
                raise InadmissibleError(f"gamma={gamma} gives infinite spine mass near the root")
        yield Segment(
            seg.length,
            density,
            tuple((o, m ** delta) for o, m in seg.atoms),
            tuple((o, scale(a, a.total_mass ** (delta - 1.0))) for o, a in seg.attachments
                  if a.total_mass > 0),
        )


def _record_segments(tree: OneEndedRTree, mode: Record, rng: np.random.Generator):
    record = 0.0
    current: Optional[FiniteRTree] = None
    for seg in tree:
        if seg.density > 0:
            raise ParameterError("Record decorations need a pure-jump input (spine density 0)")
        attachments = []
        for o, a in seg.attachments:
            x = a.total_mass
            if x <= 0:
                continue
            if x > record or current is None:
                record = x
                current = mode.sampler(rng)
                if abs(current.total_mass - 1.0) > MASS_TOLERANCE:
                    raise ParameterError(f"Record sampler must return unit-mass trees, got {current.total_mass!r}")
                logger.debug("New record jump %.6g", x)
            attachments.append((o, scale(current, x)))
        yield Segment(seg.length, 0.0, seg.atoms, tuple(attachments))


def reparam(tree: OneEndedRTree, mode: Reparametrization) -> OneEndedRTree:
    """
    Time and size changes of a one-ended R-tree.

    Beta(b): spine point t moves to t^b; the excess of each segment is spread
    evenly over its image. Gamma(g): masses at s are multiplied by s^g (spine
    densities by the segment average of s^g, attached trees are scaled by s^g).
    Delta(d): each attached tree of mass x is scaled to mass x^d, spine atoms
    m become m^d. GammaDelta(g, d): spine densities as in Gamma(g), atoms and
    attached trees as in Delta(d). Record: attachments between consecutive
    record jumps share one decoration drawn from the sampler. Identity
    parameters return `tree`.
    """
    if isinstance(mode, Beta):
        if not mode.beta > 0:
            raise ParameterError(f"beta must be positive, got {mode.beta}")
        if mode.beta == 1.0:
            return tree
        return OneEndedRTree(lambda: _beta_segments(tree, mode.beta))
    if isinstance(mode, Gamma):
        if mode.gamma == 0.0:
            return tree
        first = tree.segment(0)
        if first.density > 0 and mode.gamma <= -1.0:
            raise InadmissibleError(f"gamma={mode.gamma} gives infinite spine mass near the root")
        if mode.gamma < 0 and any(o == 0.0 for o, _ in first.atoms + first.attachments):
            raise InadmissibleError(f"gamma={mode.gamma} gives infinite mass to the root")
        return OneEndedRTree(lambda: _gamma_segments(tree, mode.gamma))
    if isinstance(mode, Delta):
        if not mode.delta > 0:
            raise ParameterError(f"delta must be positive, got {mode.delta}")
        if mode.delta == 1.0:
            return tree
        return OneEndedRTree(lambda: _delta_segments(tree, mode.delta))
    if isinstance(mode, GammaDelta):
        if not mode.delta > 0:
            raise ParameterError(f"delta must be positive, got {mode.delta}")
        if tree.segment(0).density > 0 and mode.gamma <= -1.0:
            raise InadmissibleError(f"gamma={mode.gamma} gives infinite spine mass near the root")
        if mode.gamma == 0.0 and mode.delta == 1.0:
            return tree
        return OneEndedRTree(lambda: _delta_segments(tree, mode.delta, mode.gamma))
    if isinstance(mode, Record):
        if tree.segment(0).density > 0:
            raise ParameterError("Record decorations need a pure-jump input (spine density 0)")
        own = spawn(mode.rng)
        return OneEndedRTree(lambda: _record_segments(tree, mode, own))
    raise ParameterError(f"Unknown reparametrization {mode!r}")
