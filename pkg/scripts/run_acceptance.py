"""
Run every verify suite at full size and write the reports under reports/.
Usage:
    python scripts/run_acceptance.py [seed]
Exits non-zero when any suite does not pass.
"""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from selfsim_trees.cli import EXIT_PASS, main  # noqa: E402

REPORTS = Path(__file__).resolve().parents[1] / 'reports'

SUITES = [
    ('commute', ['--p', '0.5', '--q', '0.7', '--replicates', '100000']),
    ('selfsim', ['--gamma', '0.5', '--depth', '2', '--replicates', '100000']),
    ('selfsim', ['--lambda', '2', '--depth', '2', '--replicates', '100000']),
    ('compat', ['--n', '6', '--m', '3', '--replicates', '100000']),
    ('qsd', ['--p', '0.4', '--q', '0.7', '--K', '400']),
    ('corollary', ['--depth', '3', '--replicates', '100000']),
    ('coupling', ['--powers', '6', '--depth', '2', '--replicates', '10000']),
]


def main_all():
    seed = sys.argv[1] if len(sys.argv) > 1 else '20240611'
    failed = []
    for number, (suite, extra) in enumerate(SUITES, start=1):
        out = REPORTS / f"acceptance-{number}-{suite}.csv"
        status = main(['verify', suite, '--seed', seed, '--out', str(out), *extra])
        print(f"{suite:10s} {' '.join(extra):50s} -> {'ok' if status == EXIT_PASS else 'FAILED'}")
        if status != EXIT_PASS:
            failed.append(suite)
    if failed:
        print('Suites not passing:', ', '.join(failed))
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main_all())
