"""
cli.py

Command-line entry point.

    python -m selfsim_trees gen <generator> --seed S [--depth K] ...
    python -m selfsim_trees verify <suite> --seed S [--replicates N] ...
    python -m selfsim_trees massproc <generator> --seed S --horizon T ...

Every command needs --seed. Exit codes: 0 pass, 1 fail, 2 usage error.
A spec file holds one key=value per line describing the jump measure, e.g.

    kind=comb
    x0=1
    p=0.4
    q=0.7
    n_min=-6
    n_max=6
"""
import argparse
import contextlib
import csv
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from . import settings
from .discrete_tree import DiscreteTree, OneEndedTree, canonical_code, sop, to_text as tree_text, truncate
from .errors import ConditioningError, SelfSimError
from .generators import (Beta, DecorationKernel, Delta, LambdaSpec, UNIT_SEGMENT, geometric_bouquet_ray, reparam,
                         subordinator_jumps, subordinated_tree, ti_poisson_forest, uniform_density_ray)
from .qsd import corollary_sampler, death_kernel, geometric_constant, mixture_eta, qsd_residual
from .rtree import (FiniteRTree, OneEndedRTree, discretize, mass_process, parse_rtree, to_text as rtree_text,
                    truncate_r)
from .seeding import Streams
from .stats import (FAIL, INCONCLUSIVE, INFO, PASS, TestReport, code_histogram, commutation_test,
                    compatibility_test, coupling_gap_test, invariance_test, two_sample_test, write_reports)

logger = logging.getLogger("selfsim")

GENERATORS = ('ray', 'bouquet', 'uniform', 'forest', 'subordinator', 'corollary')
SUITES = ('selfsim', 'commute', 'compat', 'corollary', 'coupling', 'qsd')
MASS_GENERATORS = ('uniform', 'forest', 'subordinator')
COMB_TARGETS = ('forest', 'corollary', 'qsd')

EXIT_PASS, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    target: str
    seed: int
    replicates: int = 10_000
    depth: Optional[int] = None
    p: Optional[float] = None
    q: Optional[float] = None
    level: float = settings.SIGNIFICANCE_LEVEL
    spec: Optional[str] = None
    out: Optional[str] = None
    tree: Optional[str] = None
    lam: Optional[float] = None
    gamma: float = 0.5
    alpha: float = 0.5
    beta: Optional[float] = None
    delta: Optional[float] = None
    eps: float = 1e-3
    n: int = 6
    m: int = 3
    powers: int = 6
    K: int = 400
    rows: int = 1500
    tol: float = 1e-8
    horizon: float = 1.0
    steps: int = 100
    point_mass: Optional[float] = None
    allow_inconclusive: bool = False

    def echo(self) -> List[str]:
        return [f"# {k}={v}" for k, v in sorted(asdict(self).items()) if v is not None]


# -- inputs -----------------------------------------------------------------

def parse_spec_file(path: str) -> Dict[str, str]:
    """key=value lines; blank lines and lines starting with # are skipped."""
    values = {}
    with open(path, 'r') as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise UsageError(f"{path}:{number}: expected key=value, got {line!r}")
            key, value = line.split('=', 1)
            values[key.strip()] = value.strip()
    return values


def lambda_spec_from(values: Dict[str, str]) -> LambdaSpec:
    kind = values.get('kind', 'comb')
    try:
        if kind == 'comb':
            return LambdaSpec.comb(float(values['x0']), float(values['p']), float(values['q']),
                                   int(values['n_min']), int(values['n_max']))
        if kind == 'power':
            return LambdaSpec.power(float(values['alpha']), float(values['eps_cutoff']),
                                    float(values.get('x_max', 'inf')))
        if kind == 'atoms':
            pairs = [item.split(':') for item in values['atoms'].split(';') if item]
            return LambdaSpec.atoms((float(x), float(w)) for x, w in pairs)
    except KeyError as exc:
        raise UsageError(f"Spec file is missing {exc.args[0]!r}") from exc
    raise UsageError(f"Unknown spec kind {kind!r}")


def default_comb(config: RunConfig, n_range: int = 6) -> LambdaSpec:
    return LambdaSpec.comb(1.0, config.p, config.q, -n_range, n_range)


def load_lambda(config: RunConfig, n_range: int = 6) -> LambdaSpec:
    if config.spec:
        return lambda_spec_from(parse_spec_file(config.spec))
    return default_comb(config, n_range)


def fixture_tree() -> FiniteRTree:
    """Path of two unit edges with a unit branch at the middle vertex and an atom of mass 0.5."""
    return FiniteRTree.from_edges([-1, 0, 1, 1], [0.0, 1.0, 1.0, 1.0], atoms=[(2, 0.5, 0.5)])


def load_tree(config: RunConfig) -> FiniteRTree:
    if config.point_mass is not None:
        return FiniteRTree.point(config.point_mass)
    if config.tree:
        with open(config.tree, 'r') as f:
            return parse_rtree(f.read())
    return fixture_tree()


def _open_out(path: Optional[str]):
    if path is None:
        return contextlib.nullcontext(sys.stdout)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return open(path, 'w', newline='')


# -- gen ----------------------------------------------------------------------

def _generate(config: RunConfig, rng: np.random.Generator):
    tree = _base_tree(config, rng)
    if isinstance(tree, OneEndedRTree):
        if config.beta is not None:
            tree = reparam(tree, Beta(config.beta))
        if config.delta is not None:
            tree = reparam(tree, Delta(config.delta))
    elif config.beta is not None or config.delta is not None:
        raise UsageError(f"--beta and --delta apply to R-tree generators, not {config.target!r}")
    return tree


def _base_tree(config: RunConfig, rng: np.random.Generator):
    name = config.target
    if name == 'ray':
        return OneEndedTree.bare_ray()
    if name == 'bouquet':
        return geometric_bouquet_ray(config.gamma, rng)
    if name == 'uniform':
        return uniform_density_ray(2.0 if config.lam is None else config.lam)
    kernel = DecorationKernel.constant(UNIT_SEGMENT)
    if name == 'forest':
        return ti_poisson_forest(load_lambda(config), kernel, rng)
    if name == 'subordinator':
        return subordinated_tree(config.alpha, config.eps, kernel, rng)
    if name == 'corollary':
        return corollary_sampler(load_lambda(config), kernel, rng)
    raise UsageError(f"Unknown generator {name!r}; choose from {', '.join(GENERATORS)}")


def cmd_gen(config: RunConfig) -> int:
    streams = Streams(config.seed)
    depth = 3 if config.depth is None else config.depth
    with _open_out(config.out) as out:
        out.write('\n'.join(config.echo()) + '\n')
        for i in range(config.replicates):
            tree = _generate(config, streams.generator(f"gen/{config.target}", i))
            if isinstance(tree, (DiscreteTree, OneEndedTree)):
                out.write(tree_text(truncate(tree, depth)) + '\n')
            else:
                out.write(rtree_text(truncate_r(tree, depth)) + '\n')
        out.flush()
    return EXIT_PASS


# -- verify -------------------------------------------------------------------

def _suite_selfsim(config: RunConfig, streams: Streams) -> List[TestReport]:
    if config.lam is not None:
        law = lambda r: discretize(uniform_density_ray(config.lam), r)
    else:
        law = lambda r: geometric_bouquet_ray(config.gamma, r)
    depth = 2 if config.depth is None else config.depth
    return [invariance_test(law, lambda t, r: sop(t, config.p, config.q, r), depth, config.replicates,
                            streams, config.level, name='selfsim')]


def _suite_commute(config: RunConfig, streams: Streams) -> List[TestReport]:
    return [commutation_test(load_tree(config), config.p, config.q, config.replicates, streams, config.level)]


def _suite_compat(config: RunConfig, streams: Streams) -> List[TestReport]:
    tree = FiniteRTree.segment(0.5, end_atom=0.5) if config.tree is None else load_tree(config)
    return [compatibility_test(tree, config.n, config.m, config.replicates, streams, config.level)]


def forest_decoration_law(spec: LambdaSpec, kernel: DecorationKernel):
    """Decoration at the root spine vertex of the discretized forest."""
    return lambda r: discretize(ti_poisson_forest(spec, kernel, r), r).decoration(0)


def _suite_corollary(config: RunConfig, streams: Streams) -> List[TestReport]:
    spec = load_lambda(config)
    kernel = DecorationKernel.constant(UNIT_SEGMENT)
    depth = 3 if config.depth is None else config.depth
    forest = code_histogram(forest_decoration_law(spec, kernel), depth, config.replicates, streams.child('forest'))
    direct = code_histogram(lambda r: corollary_sampler(spec, kernel, r), depth, config.replicates,
                            streams.child('corollary'))
    report = two_sample_test(forest, direct, level=config.level, name='corollary').with_context(
        seed=config.seed, params={**spec.echo(), 'depth': depth})
    c = geometric_constant(spec)
    single = forest.as_dict().get(canonical_code(DiscreteTree.single()), 0) / max(forest.size, 1)
    gap = abs(single - c)
    singles = TestReport('corollary-single-root', 'abs-diff', gap, None, (forest.size, 0),
                         PASS if gap < 0.01 else FAIL, 0.01, config.seed,
                         params=(('c', repr(c)), ('empirical', repr(single))))
    return [report, singles]


def _suite_coupling(config: RunConfig, streams: Streams) -> List[TestReport]:
    depth = 2 if config.depth is None else config.depth
    return coupling_gap_test(lambda r: geometric_bouquet_ray(config.gamma, r), config.p, config.q,
                             config.powers, depth, config.replicates, streams)


def _suite_qsd(config: RunConfig, streams: Streams) -> List[TestReport]:
    spec = load_lambda(config, n_range=40)
    mixture = mixture_eta(spec, config.rows, q=None if spec.kind == "comb" else config.q,
                          p=None if spec.kind == "comb" else config.p)
    result = qsd_residual(mixture, death_kernel(mixture.p or config.p, config.rows), window=config.K)
    ok = result.residual < config.tol and result.leak < settings.TAIL_TOLERANCE
    params = {**spec.echo(), 'K': config.K, 'rows': config.rows, 'd': repr(mixture.d),
              'c': repr(1.0 / (1.0 + mixture.d)), 'tail_mass': repr(mixture.tail_mass), 'leak': repr(result.leak)}
    eta_path = os.path.splitext(_report_path(config))[0] + '-eta.csv'
    params['eta_csv'] = eta_path
    report = TestReport('qsd', 'residual', result.residual, None, (config.rows, config.K),
                        PASS if ok else FAIL, config.tol, config.seed, result.residual,
                        tuple(sorted(params.items())))
    with _open_out(eta_path) as f:
        writer = csv.DictWriter(f, fieldnames=('k', 'eta'), lineterminator='\n')
        writer.writeheader()
        writer.writerows(mixture.rows())
    logger.info("Wrote %d eta entries (tail mass %.3g) to %s", mixture.K_eff, mixture.tail_mass, eta_path)
    return [report]


SUITE_RUNNERS = {
    'selfsim': _suite_selfsim,
    'commute': _suite_commute,
    'compat': _suite_compat,
    'corollary': _suite_corollary,
    'coupling': _suite_coupling,
    'qsd': _suite_qsd,
}


def exit_status(reports: List[TestReport], allow_inconclusive: bool = False) -> int:
    accepted = {PASS, INFO} | ({INCONCLUSIVE} if allow_inconclusive else set())
    return EXIT_PASS if all(r.verdict in accepted for r in reports) else EXIT_FAIL


def _report_path(config: RunConfig) -> str:
    return config.out or os.path.join('reports', f"verify-{config.target}.csv")


def cmd_verify(config: RunConfig) -> int:
    runner = SUITE_RUNNERS.get(config.target)
    if runner is None:
        raise UsageError(f"Unknown suite {config.target!r}; choose from {', '.join(SUITES)}")
    streams = Streams(config.seed).child(config.target)
    reports = runner(config, streams)
    out = _report_path(config)
    with _open_out(out) as f:
        write_reports(reports, f)
    for report in reports:
        print(report.text_block())
        logger.info("%s %s: %s=%.6g p=%s n=%s", report.verdict, report.name, report.method, report.statistic,
                    '-' if report.p_value is None else f"{report.p_value:.4g}", report.sizes)
    status = exit_status(reports, config.allow_inconclusive)
    if status != EXIT_PASS:
        verdicts = ', '.join(r.verdict for r in reports if r.verdict in (FAIL, INCONCLUSIVE))
        logger.error("Suite %s did not pass (%s); report written to %s", config.target, verdicts, out)
    else:
        logger.info("Suite %s passed; report written to %s", config.target, out)
    return status


# -- massproc -----------------------------------------------------------------

def cmd_massproc(config: RunConfig) -> int:
    if not (math.isfinite(config.horizon) and config.horizon >= 0):
        raise UsageError(f"Invalid horizon {config.horizon}")
    rng = Streams(config.seed).generator(f"massproc/{config.target}")
    if config.target == 'subordinator':
        if config.beta is not None or config.delta is not None:
            raise UsageError("--beta and --delta are not supported by massproc subordinator")
        path = subordinator_jumps(config.alpha, config.eps, config.horizon, rng)
    elif config.target in MASS_GENERATORS:
        path = mass_process(_generate(config, rng), config.horizon)
    else:
        raise UsageError(f"massproc supports {', '.join(MASS_GENERATORS)}, not {config.target!r}")
    with _open_out(config.out) as out:
        out.write('t,X,X_c,X_j\n')
        if config.horizon > 0:
            grid = np.linspace(0.0, config.horizon, config.steps + 1)
            total, cont, jumps = path.evaluate(grid)
            for row in zip(grid, total, cont, jumps):
                out.write(','.join(repr(float(v)) for v in row) + '\n')
        out.flush()
    return EXIT_PASS


COMMANDS = {'gen': cmd_gen, 'verify': cmd_verify, 'massproc': cmd_massproc}


# -- argument parsing ---------------------------------------------------------

def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='selfsim_trees', description="Self-similar random tree toolkit")
    parser.add_argument('-v', '--verbose', action='store_true', help="Debug logging")
    commands = parser.add_subparsers(dest='command', required=True)
    for name, targets in (('gen', GENERATORS), ('verify', SUITES), ('massproc', MASS_GENERATORS)):
        sub = commands.add_parser(name)
        sub.add_argument('target', choices=targets)
        sub.add_argument('--seed', type=_seed, required=True, help="Root 64-bit seed")
        sub.add_argument('--replicates', type=int, default=None)
        sub.add_argument('--depth', type=int, default=None)
        sub.add_argument('--p', type=float, default=None)
        sub.add_argument('--q', type=float, default=None)
        sub.add_argument('--level', type=float, default=None, help="Significance level")
        sub.add_argument('--spec', default=None, help="key=value file describing Lambda")
        sub.add_argument('--out', default=None)
        sub.add_argument("--tree", default=None, help="R-tree text file")
        sub.add_argument('--lambda', dest='lam', type=float, default=None)
        sub.add_argument('--gamma', type=float, default=None)
        sub.add_argument('--alpha', type=float, default=None)
        sub.add_argument('--beta', type=float, default=None, help="Spine time change t -> t^beta")
        sub.add_argument('--delta', type=float, default=None, help="Jump size change x -> x^delta")
        sub.add_argument('--eps', type=float, default=None, help="Jump size cutoff")
        sub.add_argument('--n', type=int, default=None)
        sub.add_argument('--m', type=int, default=None)
        sub.add_argument('--powers', type=int, default=None)
        sub.add_argument('--K', type=int, default=None, help="Residual window")
        sub.add_argument('--rows', type=int, default=None, help="Kernel and eta size")
        sub.add_argument('--tol', type=float, default=None)
        sub.add_argument('--horizon', type=float, default=None)
        sub.add_argument('--steps', type=int, default=None)
        sub.add_argument('--point-mass', dest='point_mass', type=float, default=None)
        sub.add_argument('--allow-inconclusive', dest='allow_inconclusive', action='store_true', default=None)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    """Flags given on the command line override the RunConfig defaults."""
    given = {k: v for k, v in vars(args).items() if v is not None and k not in ('command', 'target', 'verbose')}
    if args.command == 'gen' and 'replicates' not in given:
        given['replicates'] = 1
    config = RunConfig(args.command, args.target, **given)
    comb_default = config.target in COMB_TARGETS
    if config.p is None:
        config.p = 0.4 if comb_default else 0.5
    if config.q is None:
        config.q = 0.7 if comb_default else 0.5
    for name in ('p', 'q'):
        value = getattr(config, name)
        if not 0.0 < value < 1.0:
            raise UsageError(f"--{name} must lie in (0, 1), got {value}")
    if config.replicates < 0:
        raise UsageError(f"--replicates must be nonnegative, got {config.replicates}")
    return config


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_PASS
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = config_from_args(args)
        return COMMANDS[config.command](config)
    except ConditioningError as exc:
        logger.error("%s", exc)
        return EXIT_FAIL
    except (UsageError, SelfSimError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
