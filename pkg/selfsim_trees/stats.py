"""
stats.py

Distribution-equality harness. Laws of random trees are compared through
histograms of canonical codes of their depth-k truncations; two histograms are
compared with a pooled chi-square test (or Kolmogorov-Smirnov for scalar
samples) and the outcome is a TestReport.

Sampling is split into fixed-size chunks, each with its own derived random
stream, and run on a joblib thread pool. Counts are merged in sorted key order,
so the thread count never changes a result.
"""
import csv
import io
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy import stats as sps

from . import settings
from .discrete_tree import DiscreteTree, OneEndedTree, canonical_code, cop_uniform, sop, truncate
from .errors import ParameterError
from .rtree import ConditionedSampler, FiniteRTree, discretize, iota, rescale
from .seeding import Streams

logger = logging.getLogger(__name__)

PASS = 'pass'
FAIL = 'fail'
INCONCLUSIVE = 'inconclusive'
INFO = 'info'

AnyTree = Union[DiscreteTree, OneEndedTree]
TreeLaw = Callable[[np.random.Generator], AnyTree]

REPORT_FIELDS = ('name', 'method', 'statistic', 'p_value', 'residual', 'n1', 'n2', 'seed',
                 'level', 'verdict', 'params', 'note')


@dataclass(frozen=True)
class CodeHistogram:
    """Counts of canonical codes, sorted by code."""
    counts: Tuple[Tuple[bytes, int], ...]
    depth: Optional[int]

    @classmethod
    def from_counter(cls, counter: Counter, depth: Optional[int]) -> 'CodeHistogram':
        return cls(tuple(sorted((bytes(k), int(v)) for k, v in counter.items() if v > 0)), depth)

    @property
    def size(self) -> int:
        return sum(c for _, c in self.counts)

    def as_dict(self) -> Dict[bytes, int]:
        return dict(self.counts)

    def merge(self, other: 'CodeHistogram') -> 'CodeHistogram':
        if self.depth != other.depth:
            raise ParameterError(f"Cannot merge histograms of depths {self.depth} and {other.depth}")
        return CodeHistogram.from_counter(Counter(self.as_dict()) + Counter(other.as_dict()), self.depth)


def _as_streams(rng: Union[Streams, int]) -> Streams:
    return rng if isinstance(rng, Streams) else Streams(int(rng))


def _code(tree: AnyTree, depth: Optional[int]) -> bytes:
    if depth is None:
        if not isinstance(tree, DiscreteTree):
            raise ParameterError("Infinite trees need a truncation depth")
        return canonical_code(tree)
    return canonical_code(truncate(tree, depth))


def _count_chunk(sampler: TreeLaw, depth: Optional[int], count: int,
                 rng: np.random.Generator) -> Counter:
    return Counter(_code(sampler(rng), depth) for _ in range(count))


def _chunks(N: int, chunk_size: int) -> List[int]:
    full, rest = divmod(N, chunk_size)
    return [chunk_size] * full + ([rest] if rest else [])


def code_histogram(sampler: TreeLaw, depth: Optional[int], N: int, rng: Union[Streams, int],
                   label: str = 'histogram', n_jobs: Optional[int] = None,
                   chunk_size: Optional[int] = None) -> CodeHistogram:
    """
    Histogram of truncation codes of N iid draws of `sampler`.

    Args:
        sampler: draws one tree from a Generator.
        depth: truncation depth; None codes whole finite trees.
        N: number of draws.
        rng: Streams (or a root seed); chunk i uses stream (label, i).
    """
    if N < 0:
        raise ParameterError(f"Sample count must be nonnegative, got {N}")
    streams = _as_streams(rng)
    sizes = _chunks(N, chunk_size or settings.CHUNK_SIZE)
    jobs = n_jobs or settings.N_JOBS
    if jobs == 1 or len(sizes) <= 1:
        parts = [_count_chunk(sampler, depth, n, streams.generator(label, i)) for i, n in enumerate(sizes)]
    else:
        parts = Parallel(n_jobs=jobs, prefer="threads")(
            delayed(_count_chunk)(sampler, depth, n, streams.generator(label, i)) for i, n in enumerate(sizes))
    total = Counter()
    for part in parts:
        total.update(part)
    return CodeHistogram.from_counter(total, depth)


# -- reports ----------------------------------------------------------------

@dataclass(frozen=True)
class TestReport:
    __test__ = False

    name: str
    method: str
    statistic: float
    p_value: Optional[float]
    sizes: Tuple[int, int]
    verdict: str
    level: float
    seed: Optional[int] = None
    residual: Optional[float] = None
    params: Tuple[Tuple[str, str], ...] = ()
    note: str = ''

    @property
    def passed(self) -> bool:
        return self.verdict in (PASS, INFO)

    def with_context(self, name: Optional[str] = None, seed: Optional[int] = None,
                     params: Optional[Dict[str, object]] = None, note: Optional[str] = None) -> 'TestReport':
        merged = dict(self.params)
        merged.update({k: _echo(v) for k, v in (params or {}).items()})
        return TestReport(name or self.name, self.method, self.statistic, self.p_value, self.sizes,
                          self.verdict, self.level, self.seed if seed is None else seed, self.residual,
                          tuple(sorted(merged.items())), self.note if note is None else note)

    def to_row(self) -> Dict[str, str]:
        return {
            'name': self.name,
            'method': self.method,
            'statistic': _echo(self.statistic),
            'p_value': '' if self.p_value is None else _echo(self.p_value),
            'residual': '' if self.residual is None else _echo(self.residual),
            'n1': str(self.sizes[0]),
            'n2': str(self.sizes[1]),
            'seed': '' if self.seed is None else str(self.seed),
            'level': _echo(self.level),
            'verdict': self.verdict,
            'params': ';'.join(f"{k}={v}" for k, v in self.params),
            'note': self.note,
        }

    def text_block(self) -> str:
        lines = [f"[{self.verdict.upper()}] {self.name} ({self.method})",
                 f"  statistic = {self.statistic:.6g}"]
        if self.p_value is not None:
            lines.append(f"  p-value   = {self.p_value:.6g} (level {self.level:g})")
        if self.residual is not None:
            lines.append(f"  residual  = {self.residual:.6g}")
        lines.append(f"  samples   = {self.sizes[0]} / {self.sizes[1]}")
        if self.seed is not None:
            lines.append(f"  seed      = {self.seed}")
        lines.extend(f"  {k} = {v}" for k, v in self.params)
        if self.note:
            lines.append(f"  note: {self.note}")
        return '\n'.join(lines)


def _echo(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_reports(reports: Iterable[TestReport], out: Union[str, TextIO]) -> None:
    """CSV with a header row and LF line endings."""
    if isinstance(out, str):
        with open(out, 'w', newline='') as f:
            write_reports(reports, f)
        return
    writer = csv.DictWriter(out, fieldnames=REPORT_FIELDS, lineterminator='\n')
    writer.writeheader()
    for report in reports:
        writer.writerow(report.to_row())


def reports_to_csv(reports: Iterable[TestReport]) -> str:
    buffer = io.StringIO()
    write_reports(reports, buffer)
    return buffer.getvalue()


# -- two-sample tests ---------------------------------------------------------

def pooled_table(h1: CodeHistogram, h2: CodeHistogram, min_expected: Optional[float] = None) -> np.ndarray:
    """
    2 x B contingency table in which every column has expected count at least
    `min_expected` in both rows. Rare codes are merged into one pooled column,
    and the pooled column absorbs the smallest regular columns until it is
    large enough. Column totals always add up to the raw totals.
    """
    min_expected = settings.MIN_EXPECTED if min_expected is None else min_expected
    left, right = h1.as_dict(), h2.as_dict()
    codes = sorted(set(left) | set(right))
    table = np.array([[left.get(c, 0) for c in codes], [right.get(c, 0) for c in codes]], dtype=float)
    n1, n2 = table.sum(axis=1)
    if not (n1 and n2):
        return table
    share = min(n1, n2) / (n1 + n2)

    def expected(column: np.ndarray) -> float:
        return share * column.sum(axis=0)

    rare = expected(table) < min_expected
    pooled = table[:, rare].sum(axis=1)
    kept = table[:, ~rare]
    if rare.any():
        while kept.shape[1] and expected(pooled) < min_expected:
            smallest = int(np.argmin(kept.sum(axis=0)))
            pooled = pooled + kept[:, smallest]
            kept = np.delete(kept, smallest, axis=1)
        return np.column_stack((kept, pooled)) if kept.size else pooled[:, None]
    return kept


def _chi2_report(h1: CodeHistogram, h2: CodeHistogram, level: float, name: str) -> TestReport:
    if h1.depth != h2.depth:
        raise ParameterError(f"Histograms truncated at different depths: {h1.depth} vs {h2.depth}")
    sizes = (h1.size, h2.size)
    table = pooled_table(h1, h2)
    if table.shape[1] < 2 or not all(sizes):
        return TestReport(name, 'chi2', 0.0, None, sizes, INCONCLUSIVE, level,
                          note=f"{table.shape[1]} bucket(s) after pooling")
    if np.array_equal(table[0], table[1]):
        return TestReport(name, 'chi2', 0.0, 1.0, sizes, PASS, level, note=f"{table.shape[1]} buckets")
    statistic, p_value, dof, _ = sps.chi2_contingency(table, correction=False)
    verdict = PASS if p_value >= level else FAIL
    return TestReport(name, 'chi2', float(statistic), float(p_value), sizes, verdict, level,
                      note=f"{table.shape[1]} buckets, dof {dof}")


def _ks_report(x1: Sequence[float], x2: Sequence[float], level: float, name: str) -> TestReport:
    x1, x2 = np.asarray(x1, dtype=float), np.asarray(x2, dtype=float)
    sizes = (x1.size, x2.size)
    if not all(sizes):
        return TestReport(name, 'ks', 0.0, None, sizes, INCONCLUSIVE, level, note="empty sample")
    result = sps.ks_2samp(x1, x2)
    verdict = PASS if result.pvalue >= level else FAIL
    return TestReport(name, 'ks', float(result.statistic), float(result.pvalue), sizes, verdict, level)


def two_sample_test(h1, h2, method: str = 'chi2', level: Optional[float] = None,
                    name: str = 'two-sample') -> TestReport:
    """
    chi2: pooled contingency test on two CodeHistograms (a single bucket after
    pooling is inconclusive, never a pass). ks: Kolmogorov-Smirnov on scalar samples.
    """
    level = settings.SIGNIFICANCE_LEVEL if level is None else level
    if method == 'chi2':
        return _chi2_report(h1, h2, level, name)
    if method == 'ks':
        return _ks_report(h1, h2, level, name)
    raise ParameterError(f"Unknown test method {method!r}")


def poisson_gof_test(counts: Sequence[int], mean: float, level: Optional[float] = None,
                     name: str = 'poisson-gof') -> TestReport:
    """Chi-square goodness of fit of integer samples against Poi(mean), tail cells pooled."""
    level = settings.SIGNIFICANCE_LEVEL if level is None else level
    counts = np.asarray(counts, dtype=int)
    n = counts.size
    top = int(max(counts.max(initial=0), sps.poisson.isf(1e-12, mean) if mean > 0 else 0)) + 1
    observed = np.bincount(counts, minlength=top + 1)[:top + 1].astype(float)
    probs = sps.poisson.pmf(np.arange(top + 1), mean)
    probs[-1] += sps.poisson.sf(top, mean)
    expected = probs * n
    cells_obs, cells_exp = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed, expected):
        acc_o, acc_e = acc_o + o, acc_e + e
        if acc_e >= settings.MIN_EXPECTED:
            cells_obs.append(acc_o)
            cells_exp.append(acc_e)
            acc_o = acc_e = 0.0
    if cells_obs:
        cells_obs[-1] += acc_o
        cells_exp[-1] += acc_e
    if len(cells_obs) < 2:
        return TestReport(name, 'chi2-gof', 0.0, None, (n, n), INCONCLUSIVE, level, note="one cell")
    statistic, p_value = sps.chisquare(cells_obs, cells_exp)
    verdict = PASS if p_value >= level else FAIL
    return TestReport(name, 'chi2-gof', float(statistic), float(p_value), (n, n), verdict, level,
                      params=(('mean', _echo(float(mean))),), note=f"{len(cells_obs)} cells")


def tv_distance(h1: CodeHistogram, h2: CodeHistogram, min_expected: Optional[float] = None) -> float:
    """Half the L1 distance of the empirical laws after pooling rare codes; biased upward."""
    table = pooled_table(h1, h2, min_expected)
    n1, n2 = table.sum(axis=1)
    if not (n1 and n2):
        return float('nan')
    return 0.5 * float(np.abs(table[0] / n1 - table[1] / n2).sum())


# -- the flagship identities ----------------------------------------------------

def _seed_of(rng: Union[Streams, int]) -> int:
    return _as_streams(rng).seed


def invariance_test(law: TreeLaw, transform: Callable[[AnyTree, np.random.Generator], AnyTree],
                    depth: Optional[int], N: int, rng: Union[Streams, int], level: Optional[float] = None,
                    name: str = 'invariance') -> TestReport:
    """Compare the law of T with the law of transform(T) through depth-`depth` codes."""
    streams = _as_streams(rng)
    left = code_histogram(law, depth, N, streams.child('left'))
    right = code_histogram(lambda r: transform(law(r), r), depth, N, streams.child('right'))
    return two_sample_test(left, right, level=level, name=name).with_context(
        seed=streams.seed, params={'depth': depth, 'N': N})


def commutation_test(tree: FiniteRTree, p: float, q: float, N: int, rng: Union[Streams, int],
                     level: Optional[float] = None, name: str = 'commutation') -> TestReport:
    """discretize(rescale(T, p, q)) against sop(discretize(T), p, q), full codes."""
    streams = _as_streams(rng)
    scaled = rescale(tree, p, q)
    left = code_histogram(lambda r: discretize(scaled, r), None, N, streams.child('left'))
    right = code_histogram(lambda r: sop(discretize(tree, r), p, q, r), None, N, streams.child('right'))
    return two_sample_test(left, right, level=level, name=name).with_context(
        seed=streams.seed, params={'p': p, 'q': q, 'N': N, 'mass': tree.total_mass})


def compatibility_test(tree: FiniteRTree, n: int, m: int, N: int, rng: Union[Streams, int],
                       level: Optional[float] = None, name: str = 'compatibility') -> TestReport:
    """
    cop_uniform of the discretization conditioned on n non-root vertices, reduced
    to m, against the discretization conditioned on m non-root vertices.
    """
    if not 0 <= m <= n:
        raise ParameterError(f"Need 0 <= m <= n, got m={m}, n={n}")
    streams = _as_streams(rng)
    big = ConditionedSampler(tree, n)
    small = ConditionedSampler(tree, m)
    left = code_histogram(lambda r: cop_uniform(big(r), m, r), None, N, streams.child('left'))
    right = code_histogram(small, None, N, streams.child('right'))
    report = two_sample_test(left, right, level=level, name=name)
    return report.with_context(seed=streams.seed, params={
        'n': n, 'm': m, 'N': N,
        'acceptance_n': big.acceptance_rate, 'acceptance_m': small.acceptance_rate})


def coupling_gap_test(tree: Union[AnyTree, TreeLaw], p: float, q: float, n_powers: int, depth: int,
                      N: int, rng: Union[Streams, int], threshold: Optional[float] = None,
                      name: str = 'coupling') -> List[TestReport]:
    """
    Total-variation series between sop(T, p^k, q^k) and
    discretize(rescale(iota(T), p^k, q^k)) for k = 1..n_powers.

    Intermediate powers are reported as info; the last one passes when its TV
    estimate is below the threshold. N = 0 makes every report inconclusive.
    """
    threshold = settings.TV_THRESHOLD if threshold is None else threshold
    streams = _as_streams(rng)
    law = tree if callable(tree) else (lambda _: tree)
    reports = []
    for k in range(1, n_powers + 1):
        pk, qk = p ** k, q ** k
        power = streams.child(f"power-{k}")
        left = code_histogram(lambda r: sop(law(r), pk, qk, r), depth, N, power.child('left'))
        right = code_histogram(lambda r: discretize(rescale(iota(law(r)), pk, qk), r), depth, N,
                               power.child('right'))
        tv = tv_distance(left, right)
        if not N or math.isnan(tv):
            verdict = INCONCLUSIVE
        elif k < n_powers:
            verdict = INFO
        else:
            verdict = PASS if tv < threshold else FAIL
        logger.info("coupling k=%d p^k=%.4g TV=%.4g", k, pk, tv)
        reports.append(TestReport(f"{name}-k{k}", 'tv', tv, None, (left.size, right.size), verdict,
                                  threshold, streams.seed,
                                  params=tuple(sorted({'k': str(k), 'p': _echo(pk), 'q': _echo(qk),
                                                       'depth': str(depth)}.items())),
                                  note="plug-in estimate, biased upward"))
    return reports


@dataclass(frozen=True)
class NullCalibration:
    rejection_rate: float
    p_values: Tuple[float, ...] = field(repr=False)
    runs: int
    inconclusive: int
    alpha: float


def null_calibration(law: TreeLaw, depth: Optional[int], N: int, runs: int, rng: Union[Streams, int],
                     alpha: Optional[float] = None) -> NullCalibration:
    """Rejection rate of the chi-square test over runs with the same law on both sides."""
    alpha = settings.NULL_ALPHA if alpha is None else alpha
    streams = _as_streams(rng)
    p_values = []
    inconclusive = 0
    for run in range(runs):
        report = invariance_test(law, lambda t, _: t, depth, N, streams.child(f"null-{run}"), level=alpha)
        if report.p_value is None:
            inconclusive += 1
        else:
            p_values.append(report.p_value)
    conclusive = len(p_values)
    rate = sum(p < alpha for p in p_values) / conclusive if conclusive else float('nan')
    return NullCalibration(rate, tuple(p_values), runs, inconclusive, alpha)
