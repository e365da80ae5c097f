"""selfsim_trees package

Simulation and verification toolkit for self-similar random trees: discrete
trees and their random contractions, measured R-trees and their Poisson
discretization, self-similar generators, quasi-stationary numerics and a
distribution-equality test harness.

Public API:
- DiscreteTree, OneEndedTree, sop, cop_uniform, truncate, ... from .discrete_tree
- FiniteRTree, OneEndedRTree, iota, rescale, discretize, ... from .rtree
- LambdaSpec, DecorationKernel, ti_poisson_forest, reparam, ... from .generators
- death_kernel, mixture_eta, qsd_residual, corollary_sampler from .qsd
- code_histogram, two_sample_test, invariance_test, ... from .stats
- Streams, derive, spawn from .seeding
"""

from .discrete_tree import (EXACT_SPINE, DiscreteTree, Horizon, OneEndedTree, ancestry, assemble_spine,
                            canonical_code, concatenate, contract, cop_uniform, graft, n_r_R, parse_tree,
                            prune_spine, sop, spine_prefix, theta_shift, truncate)
from .errors import (ConditioningError, InadmissibleError, ParameterError, SelfSimError, TreeError,
                     TruncationError)
from .generators import (Beta, DecorationKernel, Delta, Gamma, GammaDelta, LambdaSpec, Record, claimed_scaling,
                         geometric_bouquet_ray, matched_cutoff, reparam, subordinated_tree, subordinator_jumps,
                         ti_poisson_forest, tree_from_mass_path, uniform_density_ray)
from .qsd import (DeathKernel, MixtureQSD, corollary_sampler, death_kernel, mixture_eta, qsd_residual,
                  thinned_mixture)
from .rtree import (ConditionedSampler, EPOSample, FiniteRTree, MassPath, OneEndedRTree, PointRef, Segment,
                    discretize, discretize_given, discretize_nonempty, distance, dm_estimate_from_epo, dm_sample,
                    epo_sample, epo_tree, iota, mass_process, parse_rtree, prune_lambda, rescale, sample_mu,
                    scale, theta_t, truncate_r)
from .seeding import Streams, derive, spawn
from .stats import (CodeHistogram, TestReport, code_histogram, commutation_test, compatibility_test,
                    coupling_gap_test, invariance_test, null_calibration, tv_distance, two_sample_test)

__all__ = [
    # From discrete_tree
    'EXACT_SPINE', 'DiscreteTree', 'Horizon', 'OneEndedTree', 'ancestry', 'assemble_spine',
    'canonical_code', 'concatenate', 'contract', 'cop_uniform', 'graft', 'n_r_R', 'parse_tree',
    'prune_spine', 'sop', 'spine_prefix', 'theta_shift', 'truncate',

    # From errors
    'ConditioningError', 'InadmissibleError', 'ParameterError', 'SelfSimError', 'TreeError',
    'TruncationError',

    # From generators
    'Beta', 'DecorationKernel', 'Delta', 'Gamma', 'GammaDelta', 'LambdaSpec', 'Record', 'claimed_scaling',
    'geometric_bouquet_ray', 'matched_cutoff', 'reparam', 'subordinated_tree', 'subordinator_jumps',
    'ti_poisson_forest', 'tree_from_mass_path', 'uniform_density_ray',

    # From qsd
    'DeathKernel', 'MixtureQSD', 'corollary_sampler', 'death_kernel', 'mixture_eta', 'qsd_residual',
    'thinned_mixture',

    # From rtree
    'ConditionedSampler', 'EPOSample', 'FiniteRTree', 'MassPath', 'OneEndedRTree', 'PointRef', 'Segment',
    'discretize', 'discretize_given', 'discretize_nonempty', 'distance', 'dm_estimate_from_epo', 'dm_sample',
    'epo_sample', 'epo_tree', 'iota', 'mass_process', 'parse_rtree', 'prune_lambda', 'rescale', 'sample_mu',
    'scale', 'theta_t', 'truncate_r',

    # From seeding
    'Streams', 'derive', 'spawn',

    # From stats
    'CodeHistogram', 'TestReport', 'code_histogram', 'commutation_test', 'compatibility_test',
    'coupling_gap_test', 'invariance_test', 'null_calibration', 'tv_distance', 'two_sample_test',
]
