import itertools

import numpy as np
import pytest
from scipy import stats as sps

from selfsim_trees.discrete_tree import EXACT_SPINE, DiscreteTree, Horizon, OneEndedTree, parse_tree, truncate
from selfsim_trees.errors import ConditioningError, ParameterError, TreeError
from selfsim_trees.rtree import (ConditionedSampler, FiniteRTree, MassPath, OneEndedRTree, PointRef, Segment,
                                 discretize, discretize_given, discretize_nonempty, distance, dm_estimate_from_epo,
                                 dm_sample, epo_sample, epo_tree, iota, mass_process, parse_rtree, prune_lambda,
                                 rescale, sample_points, scale, theta_t, to_text, truncate_r)
from selfsim_trees.stats import PASS, code_histogram, two_sample_test


def test_fixture_measures(fixture_tree):
    assert fixture_tree.total_length == pytest.approx(3.0)
    assert fixture_tree.excess_mass == pytest.approx(0.5)
    assert fixture_tree.total_mass == pytest.approx(3.5)
    assert fixture_tree.height == pytest.approx(2.0)


@pytest.mark.parametrize('kwargs', [
    dict(parents=[-1, 0], lengths=[0.0, -1.0]),
    dict(parents=[-1, 0], lengths=[1.0, 1.0]),
    dict(parents=[-1, 0], lengths=[0.0, 1.0], atoms=[(1, 2.0, 1.0)]),
    dict(parents=[-1, 0], lengths=[0.0, 1.0], atoms=[(0, 0.0, 1.0)]),
    dict(parents=[-1, 0], lengths=[0.0, 1.0], atoms=[(1, 0.5, 0.0)]),
])
def test_invalid_trees(kwargs):
    with pytest.raises(TreeError):
        FiniteRTree.from_edges(**kwargs)


def test_canonical_locations_move_offset_zero_up(fixture_tree):
    edges, offsets = fixture_tree.canonical_locations([2, 1, 0], [0.0, 0.0, 0.0])
    assert edges.tolist() == [1, 0, 0]
    assert offsets.tolist() == [1.0, 0.0, 0.0]
    with pytest.raises(TreeError):
        fixture_tree.canonical_locations([2], [1.5])


def test_distances(fixture_tree):
    leaf_a = PointRef(2, 1.0)
    leaf_b = PointRef(3, 1.0)
    assert distance(fixture_tree, leaf_a, leaf_b) == pytest.approx(2.0)
    assert distance(fixture_tree, PointRef(1, 0.5), leaf_a) == pytest.approx(1.5)
    assert distance(fixture_tree, PointRef(0, 0.0), leaf_b) == pytest.approx(2.0)
    assert distance(fixture_tree, PointRef(2, 0.25), PointRef(2, 0.75)) == pytest.approx(0.5)


def test_discretize_given_parent_rule(fixture_tree):
    v0 = [PointRef(1, 0.5)]
    v1 = [PointRef(2, 1.0), PointRef(3, 0.5), PointRef(1, 0.25, 1)]
    tree = discretize_given(fixture_tree, v0, v1)
    assert tree == parse_tree('((()())())')


def test_coincident_points_are_siblings(unit_segment):
    tree = discretize_given(unit_segment, [PointRef(1, 0.5), PointRef(1, 0.5)], [])
    assert tree == DiscreteTree.star(2)


def test_leaves_from_excess_never_have_children():
    tree = FiniteRTree.segment(1.0, end_atom=1.0)
    result = discretize_given(tree, [PointRef(1, 1.0)], [PointRef(1, 1.0, 1)])
    assert result == DiscreteTree.star(2)


def test_unit_segment_discretizes_to_paths(unit_segment, rng):
    for _ in range(50):
        tree = discretize(unit_segment, rng)
        assert tree == DiscreteTree.path(tree.size - 1)


def test_point_tree_discretizes_to_stars(rng):
    for _ in range(50):
        tree = discretize(FiniteRTree.point(2.0), rng)
        assert tree == DiscreteTree.star(tree.size - 1)
    assert discretize(FiniteRTree.point(0.0), rng) == DiscreteTree.single()


def test_vertex_count_mean(fixture_tree, rng):
    counts = [discretize(fixture_tree, rng).size - 1 for _ in range(4000)]
    assert abs(np.mean(counts) - 3.5) < 0.2


def test_sample_points_origin_share(fixture_tree, rng):
    _, _, origins = sample_points(fixture_tree, 20000, rng)
    assert abs(origins.mean() - 0.5 / 3.5) < 0.015


def test_discretize_nonempty_never_single(rng):
    tiny = FiniteRTree.segment(0.01)
    for _ in range(100):
        assert discretize_nonempty(tiny, rng).size >= 2
    with pytest.raises(ParameterError):
        discretize_nonempty(FiniteRTree.point(), rng)


def test_conditioned_sampler_on_unit_segment(unit_segment, rng):
    sampler = ConditionedSampler(unit_segment, 3)
    for _ in range(20):
        assert sampler(rng) == DiscreteTree.path(3)
    assert 0 < sampler.acceptance_rate <= 1
    assert discretize(unit_segment, rng, conditioned_n=2) == DiscreteTree.path(2)


def test_conditioning_cap_raises(unit_segment, rng):
    with pytest.raises(ConditioningError):
        ConditionedSampler(unit_segment, 60, attempt_cap=1000)(rng)
    with pytest.raises(ParameterError):
        ConditionedSampler(FiniteRTree.point(), 1)


def test_scale_multiplies_metric_and_mass(fixture_tree):
    scaled = scale(fixture_tree, 0.5)
    assert scaled.total_mass == pytest.approx(1.75)
    assert scaled.height == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        scale(fixture_tree, 0.0)


def test_rescale_finite_exact_spine_is_scaling(fixture_tree):
    assert rescale(fixture_tree, 0.5, 0.7) == scale(fixture_tree, 0.5)
    with pytest.raises(ParameterError):
        rescale(fixture_tree, 0.0, 0.5)


def test_rescale_horizon_splits_edges():
    tree = FiniteRTree.segment(1.0)
    result = rescale(tree, 0.5, 0.8, Horizon(0.5))
    assert result.total_length == pytest.approx(0.8 * 0.5 + 0.5 * 0.5)
    assert result.total_mass == pytest.approx(0.5 * 0.8 + 0.5 * 0.5)
    # nothing has a descendant at distance 2, so everything is off the spine
    assert rescale(tree, 0.5, 0.8, Horizon(2)).total_mass == pytest.approx(0.5)


def test_rescale_one_ended_mass_per_segment():
    ray = OneEndedRTree.bare_ray(density=1.0)
    seg = rescale(ray, 0.5, 0.8).segment(0)
    assert seg.length == pytest.approx(0.8)
    assert seg.length * (1 + seg.density) == pytest.approx(0.5 * 2.0 + 0.3 * 1.0)
    with pytest.raises(ParameterError):
        rescale(ray, 0.5, 0.8, Horizon(1))


def test_iota():
    embedded = iota(DiscreteTree.path(2))
    assert embedded.total_mass == pytest.approx(2.0)
    ray = iota(OneEndedTree(lambda: itertools.repeat(DiscreteTree.star(1))))
    first = ray.segment(0)
    assert first.length == 1.0
    assert first.attachments[0][1].total_mass == pytest.approx(1.0)
    assert not iota(OneEndedTree.bare_ray()).segment(3).attachments


def test_discretize_bare_ray_is_the_ray(rng):
    tree = discretize(OneEndedRTree.bare_ray(), rng)
    assert truncate(tree, 5) == DiscreteTree.path(5)
    with pytest.raises(ParameterError):
        discretize(OneEndedRTree.bare_ray(), rng, conditioned_n=3)


def test_segment_validation():
    with pytest.raises(TreeError):
        Segment(0.0)
    with pytest.raises(TreeError):
        Segment(1.0, atoms=((1.0, 0.5),))
    seg = Segment(1.0, atoms=((0.5, 1.0),), attachments=((0.5, FiniteRTree.segment(1.0)),))
    assert [kind for _, kind, _ in seg.events()] == [0, 1]


def test_truncate_r_finite(fixture_tree):
    ball = truncate_r(fixture_tree, 1.5)
    assert ball.total_length == pytest.approx(2.0)
    assert ball.total_mass == pytest.approx(2.5)
    assert truncate_r(fixture_tree, 5.0) is fixture_tree
    assert truncate_r(FiniteRTree.segment(2.0, end_atom=1.0), 1.0).total_mass == pytest.approx(1.0)


def test_truncate_r_one_ended():
    ball = truncate_r(OneEndedRTree.bare_ray(density=1.0), 2.5)
    assert ball.total_mass == pytest.approx(5.0)
    assert ball.height == pytest.approx(2.5)


def test_prune_lambda_is_finite(rng):
    pruned = prune_lambda(OneEndedRTree.bare_ray(), 2.0, rng)
    assert pruned.total_mass == pytest.approx(pruned.height)
    with pytest.raises(ParameterError):
        prune_lambda(OneEndedRTree.bare_ray(), 0.0, rng)


def test_theta_t_keeps_events_at_the_cut():
    tree = OneEndedRTree(lambda: itertools.chain([Segment(1.0, 0.0, ((0.5, 2.0),))],
                                                 itertools.repeat(Segment(1.0))))
    shifted = theta_t(tree, 0.5)
    first = shifted.segment(0)
    assert first.length == pytest.approx(0.5)
    assert first.atoms == ((0.0, 2.0),)


def test_mass_process_origin_and_jumps():
    tree = OneEndedRTree(lambda: itertools.chain(
        [Segment(1.0, 0.0, ((0.0, 2.0),), ((0.5, FiniteRTree.segment(1.0)),))],
        itertools.repeat(Segment(1.0, 1.0))))
    path = mass_process(tree, 3.0)
    assert path.origin_mass == pytest.approx(2.0)
    assert path(0.0)[0] == pytest.approx(2.0)
    assert path(0.75)[0] == pytest.approx(3.0)
    assert path(3.0)[0] == pytest.approx(5.0)
    total, cont, jumps = path.evaluate([3.0])
    assert cont[0] == pytest.approx(2.0) and jumps[0] == pytest.approx(3.0)
    assert mass_process(tree, 0.0).jump_times.size == 0


def test_mass_path_validation():
    with pytest.raises(ParameterError):
        MassPath(1.0, (), np.array([0.0]), np.array([1.0]))
    with pytest.raises(ParameterError):
        MassPath(-1.0)
    with pytest.raises(ParameterError):
        MassPath(1.0)(2.0)


def test_dm_sample_on_unit_segment(unit_segment, rng):
    matrix = dm_sample(unit_segment, 3, rng)
    assert matrix.shape == (4, 4)
    assert np.allclose(matrix, matrix.T)
    assert np.all(np.diag(matrix) == 0)
    assert np.all((matrix >= 0) & (matrix <= 1))
    with pytest.raises(ParameterError):
        dm_sample(FiniteRTree.segment(2.0), 3, rng)


def test_epo_relation_only_from_length_points(rng):
    tree = FiniteRTree.segment(0.5, end_atom=0.5)
    sample = epo_sample(tree, 200, rng)
    relation = sample.relation
    assert not relation[sample.origins == 1].any()
    assert not relation.diagonal().any()
    assert sample.precedes(0, 1) == bool(relation[0, 1])
    assert epo_tree(sample, 0) == DiscreteTree.single()
    assert epo_tree(sample, 5).size == 6


def test_dm_estimate_matches_distance(unit_segment, rng):
    sample = epo_sample(unit_segment, 3000, rng)
    estimate = dm_estimate_from_epo(sample, 1, 2, 3000)
    assert estimate == pytest.approx(sample.distances[1, 2], abs=0.06)
    assert dm_estimate_from_epo(sample.relation, 1, 2, 3000) == estimate
    assert dm_estimate_from_epo(sample, 1, 2, 0) == 0.0


def test_text_round_trip(fixture_tree):
    text = to_text(fixture_tree)
    parsed = parse_rtree(text)
    assert to_text(parsed) == text
    assert parsed.total_mass == pytest.approx(3.5)
    assert to_text(parse_rtree('tree{ rootatom=1.5 }')) == 'tree{ rootatom=1.5 }'


@pytest.mark.parametrize('text', ['tree{ }', 'tree{ rootatom=0 (len=1 dens=0 atoms=[] }',
                                  'tree{ rootatom=0 (len=1 atoms=[]) }', 'forest{ rootatom=0 }'])
def test_parse_rtree_rejects_malformed_text(text):
    with pytest.raises(TreeError):
        parse_rtree(text)


@pytest.fixture
def dense_tree():
    """Fixture shape with edge densities, an edge atom and a root atom."""
    return FiniteRTree.from_edges([-1, 0, 1, 1], [0.0, 1.0, 1.0, 1.0], [0.0, 0.5, 2.0, 0.25],
                                  atoms=[(2, 0.5, 0.5)], root_atom=0.3)


def _nearest_below(tree, edges, offsets, origins):
    """Parent rule evaluated pairwise: the highest origin-0 point strictly below, else the root."""
    parents = []
    heights = tree.point_heights(edges, offsets)
    for j in range(edges.size):
        best, best_height = 0, -np.inf
        for i in range(edges.size):
            if origins[i] == 0 and tree.strictly_precedes(edges[i], offsets[i], edges[j], offsets[j]):
                if heights[i] > best_height:
                    best, best_height = i + 1, heights[i]
        parents.append(best)
    return (-1,) + tuple(parents)


def test_discretize_parents_follow_the_pairwise_rule(dense_tree, rng):
    for _ in range(30):
        edges, offsets, origins = sample_points(dense_tree, int(rng.integers(1, 40)), rng)
        order = np.argsort(origins, kind='stable')
        edges, offsets, origins = edges[order], offsets[order], origins[order]
        v0 = [PointRef(int(e), float(o)) for e, o, s in zip(edges, offsets, origins) if s == 0]
        v1 = [PointRef(int(e), float(o), 1) for e, o, s in zip(edges, offsets, origins) if s == 1]
        tree = discretize_given(dense_tree, v0, v1)
        assert tree.parents == _nearest_below(dense_tree, edges, offsets, origins)


def test_discretize_of_a_long_segment():
    rng = np.random.default_rng(5)
    tree = discretize(scale(FiniteRTree.segment(1.0), 5e4), rng)
    assert tree.size > 45_000
    assert tree.height == tree.size - 1


def test_excess_points_are_leaves_on_sampled_trees(dense_tree, rng):
    for _ in range(50):
        edges, offsets, origins = sample_points(dense_tree, 30, rng)
        v0 = [PointRef(int(e), float(o)) for e, o, s in zip(edges, offsets, origins) if s == 0]
        v1 = [PointRef(int(e), float(o), 1) for e, o, s in zip(edges, offsets, origins) if s == 1]
        tree = discretize_given(dense_tree, v0, v1)
        assert all(not tree.children[v] for v in range(len(v0) + 1, tree.size))


def test_rescale_by_one_is_the_identity(dense_tree):
    assert rescale(dense_tree, 1.0, 1.0) == dense_tree
    ray = OneEndedRTree(lambda: itertools.repeat(
        Segment(1.0, 0.5, ((0.25, 1.0),), ((0.5, FiniteRTree.segment(2.0)),))))
    assert rescale(ray, 1.0, 1.0).head(5) == ray.head(5)


@pytest.mark.parametrize('mode', [EXACT_SPINE, Horizon(0.5), Horizon(1.5), Horizon(3.0)])
def test_rescale_multiplies_excess_by_p(dense_tree, mode):
    rescaled = rescale(dense_tree, 0.4, 0.7, mode)
    assert rescaled.excess_mass == pytest.approx(0.4 * dense_tree.excess_mass, rel=1e-12)


def test_epo_relation_is_a_strict_order(fixture_tree, rng):
    probability_tree = scale(fixture_tree, 1 / 3.5)
    for _ in range(20):
        relation = epo_sample(probability_tree, 40, rng).relation
        assert not relation.diagonal().any()
        chained = (relation.astype(int) @ relation.astype(int)) > 0
        assert not (chained & ~relation).any()


def test_dm_sample_triangle_inequality(fixture_tree, rng):
    probability_tree = scale(fixture_tree, 1 / 3.5)
    for _ in range(20):
        d = dm_sample(probability_tree, 25, rng)
        assert np.all(d[:, None, :] <= d[:, :, None] + d[None, :, :] + 1e-12)


@pytest.mark.statistical
def test_epo_tree_has_the_discretization_law(streams):
    tree = FiniteRTree.from_edges([-1, 0, 1, 1], [0.0, 0.25, 0.25, 0.25], atoms=[(2, 0.125, 0.25)])

    def from_order(r):
        count = int(r.poisson(1.0))
        return epo_tree(epo_sample(tree, count, r), count)

    ordered = code_histogram(from_order, None, 5000, streams.child('epo'))
    direct = code_histogram(lambda r: discretize(tree, r), None, 5000, streams.child('direct'))
    assert two_sample_test(ordered, direct).verdict == PASS


@pytest.mark.statistical
def test_prune_lambda_cuts_at_an_exponential_height(rng):
    heights = [prune_lambda(OneEndedRTree.bare_ray(), 2.0, rng).height for _ in range(3000)]
    assert abs(np.mean(heights) - 0.5) < 0.04
    assert sps.kstest(heights, 'expon', args=(0.0, 0.5)).pvalue > 1e-3
