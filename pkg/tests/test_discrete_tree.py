import itertools

import numpy as np
import pytest

from selfsim_trees.discrete_tree import (EXACT_SPINE, DiscreteTree, Horizon, OneEndedTree, _keep_probabilities,
                                         ancestry, assemble_spine, canonical_code, concatenate, contract,
                                         cop_uniform, graft, n_r_R, parse_tree, prune_spine, sop, spine_prefix,
                                         theta_shift, to_text, truncate)
from selfsim_trees.errors import ParameterError, TreeError
from selfsim_trees.generators import geometric_bouquet_ray
from selfsim_trees.stats import PASS, code_histogram, two_sample_test


def test_codes_of_small_trees():
    assert canonical_code(DiscreteTree.single()) == b'()'
    assert to_text(DiscreteTree.path(3)) == '(((())))'
    assert to_text(DiscreteTree.star(2)) == '(()())'


def test_equality_ignores_child_order_and_labels():
    a = parse_tree('(()(()))')
    b = parse_tree('((())())')
    assert a == b
    assert hash(a) == hash(b)
    assert a.relabel([3, 2, 1, 0]) == a


def test_parse_round_trip_of_text():
    tree = DiscreteTree((-1, 0, 0, 1, 1, 2))
    assert parse_tree(to_text(tree)) == tree


@pytest.mark.parametrize('text', ['', '(()', '()()', '(a)', ')('])
def test_parse_rejects_malformed_text(text):
    with pytest.raises(TreeError):
        parse_tree(text)


@pytest.mark.parametrize('parents', [(), (0, 0), (-1, -1), (-1, 2, 1), (-1, 5)])
def test_invalid_parent_arrays(parents):
    with pytest.raises(TreeError):
        DiscreteTree(parents)


def test_depths_heights_and_size():
    tree = parse_tree('((())())')
    assert tree.size == 4
    assert tree.height == 2
    assert sorted(tree.depths) == [0, 1, 1, 2]


def test_graft_and_concatenate():
    assert concatenate([DiscreteTree.path(1), DiscreteTree.path(1)]) == DiscreteTree.star(2)
    assert concatenate([]) == DiscreteTree.single()
    assert concatenate([DiscreteTree.single(), DiscreteTree.path(2)]) == DiscreteTree.path(2)
    grafted = graft(DiscreteTree.path(1), 1, DiscreteTree.star(2))
    assert grafted == parse_tree('((()()))')


def test_assemble_spine_and_prefix():
    assert spine_prefix(OneEndedTree.bare_ray(), 2) == DiscreteTree.path(2)
    tree = assemble_spine([DiscreteTree.star(1), DiscreteTree.single()])
    assert tree == DiscreteTree.star(2)
    with pytest.raises(TreeError):
        assemble_spine([])


def test_ancestry_is_strict():
    matrix = ancestry(DiscreteTree.path(2))
    assert matrix[0, 2] and matrix[1, 2] and matrix[0, 1]
    assert not matrix[2, 0]
    assert not matrix.diagonal().any()


def test_contract_keeps_restricted_order():
    path = DiscreteTree.path(3)
    assert contract(path, [True, False, False, True]) == DiscreteTree.path(1)
    assert contract(path, [True, True, False, True]) == DiscreteTree.path(2)
    star_like = contract(parse_tree('((()())())'), [True, False, True, True, True])
    assert star_like == DiscreteTree.star(3)
    with pytest.raises(TreeError):
        contract(path, [False, True, True, True])


def test_sop_on_single_vertex_and_bare_ray(rng):
    assert sop(DiscreteTree.single(), 0.3, 0.6, rng) == DiscreteTree.single()
    assert truncate(sop(OneEndedTree.bare_ray(), 0.3, 0.6, rng), 4) == DiscreteTree.path(4)


def test_sop_on_star_gives_binomial_star(rng):
    sizes = [sop(DiscreteTree.star(10), 0.3, 0.6, rng).size - 1 for _ in range(4000)]
    assert abs(np.mean(sizes) - 3.0) < 0.15


@pytest.mark.parametrize('p, q', [(0.0, 0.5), (0.5, 1.0), (-0.1, 0.5)])
def test_sop_rejects_bad_probabilities(rng, p, q):
    with pytest.raises(ParameterError):
        sop(DiscreteTree.path(2), p, q, rng)


def test_horizon_mode_uses_q_near_long_branches():
    probs = _keep_probabilities(DiscreteTree.path(3), 0.2, 0.7, Horizon(1))
    assert probs.tolist() == [0.7, 0.7, 0.7, 0.2]
    assert _keep_probabilities(DiscreteTree.path(3), 0.2, 0.7, EXACT_SPINE).tolist() == [0.2] * 4
    with pytest.raises(ParameterError):
        Horizon(-1)


def test_sop_on_one_ended_tree_is_lazy_and_memoized(rng):
    ray = OneEndedTree.from_sampler(lambda r: DiscreteTree.star(int(r.integers(3))), rng)
    contracted = sop(ray, 0.5, 0.5, rng)
    assert contracted.pulled == 0
    first = contracted.decoration(2)
    assert contracted.decoration(2) is first
    assert contracted.pulled == 3


def test_cop_uniform_on_path_is_a_path(rng):
    for _ in range(20):
        assert cop_uniform(DiscreteTree.path(6), 3, rng) == DiscreteTree.path(3)
    assert cop_uniform(DiscreteTree.star(4), 0, rng) == DiscreteTree.single()
    with pytest.raises(ParameterError):
        cop_uniform(DiscreteTree.path(2), 3, rng)


def test_truncate_finite_and_one_ended():
    assert truncate(DiscreteTree.path(5), 2) == DiscreteTree.path(2)
    assert truncate(DiscreteTree.star(3), 0) == DiscreteTree.single()
    assert truncate(OneEndedTree.bare_ray(), 3) == DiscreteTree.path(3)
    with pytest.raises(ParameterError):
        truncate(DiscreteTree.path(2), -1)


def test_n_r_R_counts_vertices_with_deep_descendants():
    assert n_r_R(DiscreteTree.path(5), 1, 3) == 1
    assert n_r_R(DiscreteTree.star(3), 1, 1) == 3
    assert n_r_R(DiscreteTree.star(3), 1, 2) == 0
    assert n_r_R(OneEndedTree.bare_ray(), 4, 10) == 1


def test_theta_shift_drops_the_first_decoration():
    decorations = [DiscreteTree.star(k) for k in range(5)]
    ray = OneEndedTree(lambda: iter(decorations * 1000))
    shifted = theta_shift(ray)
    assert shifted.decorations(3) == decorations[1:4]


def test_prune_spine_returns_a_spine_prefix(rng):
    for _ in range(20):
        pruned = prune_spine(OneEndedTree.bare_ray(), 1.0, rng)
        assert pruned == DiscreteTree.path(pruned.size - 1)
    with pytest.raises(ParameterError):
        prune_spine(OneEndedTree.bare_ray(), 0.0, rng)


def test_finite_stream_end_is_reported():
    short = OneEndedTree(lambda: iter([DiscreteTree.single()]))
    with pytest.raises(RuntimeError):
        short.decoration(3)


def _all_trees(max_size):
    """Every rooted tree up to max_size vertices (with repeats), labelled so parents precede children."""
    for n in range(1, max_size + 1):
        for parents in itertools.product(*(range(v) for v in range(1, n))):
            yield DiscreteTree((-1,) + parents)


def _masks(tree):
    """Every keep mask with the root kept."""
    for bits in itertools.product((False, True), repeat=tree.size - 1):
        yield np.array((True,) + bits)


def _kept_index(tree, mask):
    return {v: i for i, v in enumerate(u for u in tree.order if mask[u])}


def test_contract_restricts_the_ancestral_order_on_small_trees():
    for tree in _all_trees(6):
        full = ancestry(tree)
        for mask in _masks(tree):
            index = _kept_index(tree, mask)
            restricted = ancestry(contract(tree, mask))
            for u, i in index.items():
                for w, j in index.items():
                    assert restricted[i, j] == full[u, w]


def test_contract_composes_on_small_trees():
    for tree in _all_trees(6):
        for outer in _masks(tree):
            once = contract(tree, outer)
            index = _kept_index(tree, outer)
            kept = sorted(index, key=index.get)
            for inner in _masks(once):
                mask = np.zeros(tree.size, dtype=bool)
                mask[[v for v, keep in zip(kept, inner) if keep]] = True
                assert contract(once, inner) == contract(tree, mask)


def test_code_is_stable_under_relabelling(rng):
    for _ in range(20):
        size = int(rng.integers(2, 15))
        tree = DiscreteTree((-1,) + tuple(int(rng.integers(v)) for v in range(1, size)))
        for _ in range(25):
            relabelled = tree.relabel(rng.permutation(size))
            assert relabelled.code == tree.code
            assert parse_tree(to_text(relabelled)) == tree


@pytest.mark.statistical
def test_sop_on_star_keeps_a_binomial_number_of_leaves(streams):
    contracted = code_histogram(lambda r: sop(DiscreteTree.star(10), 0.3, 0.6, r), None, 5000,
                                streams.child('sop'))
    binomial = code_histogram(lambda r: DiscreteTree.star(int(r.binomial(10, 0.3))), None, 5000,
                              streams.child('binomial'))
    assert two_sample_test(contracted, binomial).verdict == PASS


@pytest.mark.statistical
def test_sop_of_stream_matches_sop_of_deep_prefix(streams):
    def lazy(r):
        return sop(geometric_bouquet_ray(0.5, r), 0.5, 0.7, r)

    def prefix(r):
        return sop(spine_prefix(geometric_bouquet_ray(0.5, r), 25), 0.5, 0.7, r, Horizon(2))

    left = code_histogram(lazy, 2, 3000, streams.child('lazy'))
    right = code_histogram(prefix, 2, 3000, streams.child('prefix'))
    assert two_sample_test(left, right).verdict == PASS


def test_lazy_values_do_not_depend_on_pull_order():
    def build():
        rng = np.random.default_rng(11)
        ray = geometric_bouquet_ray(0.5, rng)
        return ray, sop(ray, 0.5, 0.5, rng)

    ray_a, contracted_a = build()
    ray_a.decorations(30)
    contracted_a.decorations(5)
    ray_b, contracted_b = build()
    contracted_b.decorations(5)
    ray_b.decorations(30)
    assert ray_a.decorations(30) == ray_b.decorations(30)
    assert truncate(contracted_a, 4) == truncate(contracted_b, 4)


def test_n_r_R_is_monotone_on_sampled_trees(rng):
    for _ in range(30):
        tree = spine_prefix(geometric_bouquet_ray(0.4, rng), int(rng.integers(1, 8)))
        tree = sop(tree, 0.6, 0.8, rng)
        for R in range(6):
            counts = [n_r_R(tree, r, R) for r in range(R + 1)]
            assert counts == sorted(counts)
            if R:
                assert all(n_r_R(tree, r, R) <= n_r_R(tree, r, R - 1) for r in range(R))


@pytest.mark.statistical
@pytest.mark.parametrize('lam', [1.0, 3.0])
def test_prune_spine_keeps_a_geometric_number_of_spine_edges(streams, lam):
    pruned = code_histogram(lambda r: prune_spine(OneEndedTree.bare_ray(), lam, r), None, 5000,
                            streams.child('pruned'))
    paths = code_histogram(lambda r: DiscreteTree.path(int(r.geometric(lam / (1 + lam))) - 1), None, 5000,
                           streams.child('paths'))
    assert two_sample_test(pruned, paths).verdict == PASS
