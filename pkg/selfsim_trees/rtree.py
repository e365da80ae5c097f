"""
rtree.py

This module provides measured R-trees whose measure is the length measure plus
an explicitly stored excess (per-edge constant densities and atoms), and the
continuous-side operators: the unit-edge embedding, rescaling, Poisson
discretization, lambda-pruning, mu-sampling, distance matrices, the exchangeable
partial order, mass processes, metric truncation and spine shifts.

A FiniteRTree reuses DiscreteTree as its skeleton. Skeleton vertex v != root
owns the edge from its parent to v; positions on that edge are offsets
measured from the parent end. A OneEndedRTree is a lazy stream of spine
segments, each carrying its spine measure and the finite trees attached to it.
"""
import itertools
import logging
import re
import threading
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import settings
from .discrete_tree import (EXACT_SPINE, DiscreteTree, OneEndedTree, concatenate,
                            ContractionMode, Horizon)
from .errors import ConditioningError, ParameterError, TreeError
from .seeding import spawn
from .streams import MemoizedStream

logger = logging.getLogger(__name__)

MASS_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Atom:
    """Point mass on the edge into skeleton vertex `edge`, `offset` from its parent end."""
    edge: int
    offset: float
    mass: float


@dataclass(frozen=True)
class PointRef:
    """
    A location in a FiniteRTree plus its origin flag.

    `origin` is 0 for points drawn from the length measure and 1 for points
    drawn from the excess measure. The root is (skeleton root, 0.0).
    """
    edge: int
    offset: float
    origin: int = 0


@dataclass(frozen=True)
class FiniteRTree:
    skeleton: DiscreteTree
    lengths: Tuple[float, ...]
    densities: Tuple[float, ...]
    atoms: Tuple[Atom, ...] = ()
    root_atom: float = 0.0

    def __post_init__(self):
        n = self.skeleton.size
        lengths = tuple(float(x) for x in self.lengths)
        densities = tuple(float(x) for x in self.densities)
        object.__setattr__(self, 'lengths', lengths)
        object.__setattr__(self, 'densities', densities)
        object.__setattr__(self, 'atoms', tuple(self.atoms))
        object.__setattr__(self, 'root_atom', float(self.root_atom))
        if len(lengths) != n or len(densities) != n:
            raise TreeError(f"Need one length and one density per skeleton vertex ({n})")
        root = self.skeleton.root
        if lengths[root] != 0.0 or densities[root] != 0.0:
            raise TreeError("The root has no incoming edge; its length and density must be 0")
        if any(not np.isfinite(x) or x < 0 for x in lengths + densities):
            raise TreeError("Edge lengths and densities must be finite and nonnegative")
        if not np.isfinite(self.root_atom) or self.root_atom < 0:
            raise TreeError(f"Root atom must be a finite nonnegative mass, got {self.root_atom}")
        for atom in self.atoms:
            if not 0 <= atom.edge < n or atom.edge == root:
                raise TreeError(f"Atom {atom} does not sit on an edge; use root_atom for the root")
            if not 0.0 <= atom.offset <= lengths[atom.edge]:
                raise TreeError(f"Atom {atom} lies outside its edge of length {lengths[atom.edge]}")
            if not (np.isfinite(atom.mass) and atom.mass > 0):
                raise TreeError(f"Atom masses must be positive, got {atom.mass}")

    # -- constructors --------------------------------------------------

    @classmethod
    def point(cls, root_atom: float = 0.0) -> 'FiniteRTree':
        return cls(DiscreteTree.single(), (0.0,), (0.0,), (), root_atom)

    @classmethod
    def segment(cls, length: float, density: float = 0.0, end_atom: float = 0.0) -> 'FiniteRTree':
        """Single edge of the given length, optionally with an atom at its far end."""
        atoms = (Atom(1, float(length), end_atom),) if end_atom > 0 else ()
        return cls(DiscreteTree((-1, 0)), (0.0, length), (0.0, density), atoms)

    @classmethod
    def from_edges(cls, parents: Sequence[int], lengths: Sequence[float],
                   densities: Optional[Sequence[float]] = None,
                   atoms: Iterable[Tuple[int, float, float]] = (),
                   root_atom: float = 0.0) -> 'FiniteRTree':
        """
        Build a tree from a parent array.

        Args:
            parents: parent index per vertex, -1 for the root.
            lengths: length of the edge into each vertex (0 for the root).
            densities: excess density per edge, zero when omitted.
            atoms: (edge, offset, mass) triples.
            root_atom: mass sitting at the root.
        """
        densities = densities if densities is not None else [0.0] * len(parents)
        return cls(DiscreteTree(tuple(parents)), tuple(lengths), tuple(densities),
                   tuple(Atom(int(e), float(o), float(m)) for e, o, m in atoms), root_atom)

    # -- measures ------------------------------------------------------

    @cached_property
    def length_array(self) -> np.ndarray:
        return np.asarray(self.lengths)

    @cached_property
    def density_array(self) -> np.ndarray:
        return np.asarray(self.densities)

    @property
    def total_length(self) -> float:
        return float(self.length_array.sum())

    @property
    def excess_mass(self) -> float:
        atom_mass = sum(a.mass for a in self.atoms)
        return float(np.dot(self.length_array, self.density_array)) + atom_mass + self.root_atom

    @property
    def total_mass(self) -> float:
        return self.total_length + self.excess_mass

    # -- geometry ------------------------------------------------------

    @cached_property
    def root_distances(self) -> np.ndarray:
        """Distance from the root to every skeleton vertex."""
        dist = np.zeros(self.skeleton.size)
        for v in self.skeleton.order[1:]:
            dist[v] = dist[self.skeleton.parents[v]] + self.lengths[v]
        return dist

    @property
    def height(self) -> float:
        return float(self.root_distances.max())

    @cached_property
    def subtree_heights(self) -> np.ndarray:
        """Distance from each skeleton vertex to its furthest descendant."""
        below = np.zeros(self.skeleton.size)
        for v in reversed(self.skeleton.order[1:]):
            par = self.skeleton.parents[v]
            below[par] = max(below[par], below[v] + self.lengths[v])
        return below

    @cached_property
    def _inclusive_ancestry(self) -> np.ndarray:
        n = self.skeleton.size
        matrix = np.eye(n, dtype=bool)
        for w in self.skeleton.order[1:]:
            matrix[:, w] |= matrix[:, self.skeleton.parents[w]]
        return matrix

    @cached_property
    def _meet_heights(self) -> np.ndarray:
        """Root distance of the deepest common skeleton ancestor of every vertex pair."""
        ancestry = self._inclusive_ancestry
        dist = self.root_distances
        n = self.skeleton.size
        meet = np.zeros((n, n))
        for u in range(n):
            common = ancestry[:, u][:, None] & ancestry
            meet[u] = np.where(common, dist[:, None], 0.0).max(axis=0)
        return meet

    @cached_property
    def _parent_array(self) -> np.ndarray:
        parents = np.asarray(self.skeleton.parents)
        parents[self.skeleton.root] = self.skeleton.root
        return parents

    def canonical_locations(self, edges, offsets) -> Tuple[np.ndarray, np.ndarray]:
        """
        Normalize locations so each point of the tree has one representation:
        a point at offset 0 is moved to the far end of the parent edge, and the
        root is (root, 0.0).
        """
        edges = np.array(edges, dtype=int, copy=True).reshape(-1)
        offsets = np.array(offsets, dtype=float, copy=True).reshape(-1)
        root = self.skeleton.root
        if edges.size and (edges.min() < 0 or edges.max() >= self.skeleton.size):
            raise TreeError("Point references an edge that is not in the tree")
        if np.any(offsets < 0) or np.any(offsets > self.length_array[edges]):
            raise TreeError("Point offset lies outside its edge")
        offsets[edges == root] = 0.0
        moving = (offsets <= 0.0) & (edges != root)
        while moving.any():
            edges[moving] = self._parent_array[edges[moving]]
            offsets[moving] = self.length_array[edges[moving]]
            moving = (offsets <= 0.0) & (edges != root)
        return edges, offsets

    def point_heights(self, edges: np.ndarray, offsets: np.ndarray) -> np.ndarray:
        return self.root_distances[self._parent_array[edges]] + offsets

    def strictly_precedes(self, ea, oa, eb, ob) -> np.ndarray:
        """a strictly below b on the geodesic from the root to b (canonical locations, broadcast)."""
        return self._inclusive_ancestry[ea, eb] & ((ea != eb) | (oa < ob))

    def pairwise_distances(self, edges: np.ndarray, offsets: np.ndarray) -> np.ndarray:
        """Distance matrix of canonical locations."""
        h = self.point_heights(edges, offsets)
        ea, eb = edges[:, None], edges[None, :]
        oa, ob = offsets[:, None], offsets[None, :]
        base = self.root_distances[self._parent_array[edges]]
        ancestry = self._inclusive_ancestry
        meet = np.where(
            ea == eb, base[:, None] + np.minimum(oa, ob),
            np.where(ancestry[ea, eb], h[:, None],
                     np.where(ancestry[eb, ea], h[None, :], self._meet_heights[ea, eb])))
        dist = h[:, None] + h[None, :] - 2.0 * meet
        np.fill_diagonal(dist, 0.0)
        return np.maximum(dist, 0.0)

    def point(self, edge: int, offset: float, origin: int = 0) -> PointRef:
        """Validated PointRef on this tree."""
        self.canonical_locations([edge], [offset])
        return PointRef(int(edge), float(offset), int(origin))

    def __repr__(self) -> str:
        return (f"FiniteRTree(vertices={self.skeleton.size}, length={self.total_length:.6g}, "
                f"mass={self.total_mass:.6g})")


@dataclass(frozen=True)
class Segment:
    """
    One piece of spine. Atoms are (offset, mass) pairs and attachments are
    (offset, FiniteRTree) pairs, offsets in [0, length).
    """
    length: float
    density: float = 0.0
    atoms: Tuple[Tuple[float, float], ...] = ()
    attachments: Tuple[Tuple[float, FiniteRTree], ...] = ()

    def __post_init__(self):
        if not (np.isfinite(self.length) and self.length > 0):
            raise TreeError(f"Spine segments need a positive length, got {self.length}")
        if not (np.isfinite(self.density) and self.density >= 0):
            raise TreeError(f"Spine density must be nonnegative, got {self.density}")
        object.__setattr__(self, 'atoms', tuple(sorted((float(o), float(m)) for o, m in self.atoms)))
        object.__setattr__(self, 'attachments',
                           tuple(sorted(((float(o), t) for o, t in self.attachments), key=lambda a: a[0])))
        for offset, mass in self.atoms:
            if not 0.0 <= offset < self.length or not mass > 0:
                raise TreeError(f"Spine atom ({offset}, {mass}) invalid for segment of length {self.length}")
        for offset, tree in self.attachments:
            if not 0.0 <= offset < self.length:
                raise TreeError(f"Attachment offset {offset} outside [0, {self.length})")
            if not isinstance(tree, FiniteRTree):
                raise TreeError("Attachments must be FiniteRTree values")

    def events(self) -> List[Tuple[float, int, Union[float, FiniteRTree]]]:
        """Atoms and attachments merged in offset order (atoms first on ties)."""
        merged = [(o, 0, m) for o, m in self.atoms] + [(o, 1, t) for o, t in self.attachments]
        return sorted(merged, key=lambda e: (e[0], e[1]))


class OneEndedRTree(MemoizedStream[Segment]):
    """Measured R-tree with a single end, as a lazy memoized stream of spine segments."""

    @classmethod
    def bare_ray(cls, density: float = 0.0) -> 'OneEndedRTree':
        return cls(lambda: itertools.repeat(Segment(1.0, density)))

    def _check_item(self, item):
        if not isinstance(item, Segment):
            raise TreeError(f"Segment stream produced {type(item).__name__}, not Segment")
        return item

    def segment(self, k: int) -> Segment:
        return self.item(k)

    def walk(self) -> Iterator[Tuple[float, Segment]]:
        """(start position, segment) pairs along the spine."""
        start = 0.0
        for seg in self:
            yield start, seg
            start += seg.length

    def __repr__(self) -> str:
        return f"OneEndedRTree(pulled={self.pulled})"


@dataclass(frozen=True, eq=False)
class MassPath:
    """
    Nondecreasing cadlag path X = X_c + X_j on [0, horizon].

    X_c is piecewise linear with slopes from `slope_pieces` (t0, t1, slope);
    X_j jumps by `jump_sizes` at `jump_times`. Mass sitting exactly at the
    root is kept in `origin_mass` and counted in X_j from time 0, so X(0)
    is `origin_mass` rather than 0 when the root carries mass.
    """
    horizon: float
    slope_pieces: Tuple[Tuple[float, float, float], ...] = ()
    jump_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jump_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    origin_mass: float = 0.0
    hurst: Optional[float] = None

    def __post_init__(self):
        times = np.asarray(self.jump_times, dtype=float)
        sizes = np.asarray(self.jump_sizes, dtype=float)
        if times.shape != sizes.shape:
            raise ParameterError("Jump times and sizes must have the same length")
        if self.horizon < 0:
            raise ParameterError(f"Horizon must be nonnegative, got {self.horizon}")
        if np.any(times <= 0) or np.any(times > self.horizon) or np.any(sizes <= 0):
            raise ParameterError("Jumps need times in (0, horizon] and positive sizes")
        if any(slope < 0 or t1 < t0 for t0, t1, slope in self.slope_pieces):
            raise ParameterError("Slopes must be nonnegative on well-ordered intervals")
        order = np.argsort(times, kind='stable')
        object.__setattr__(self, 'jump_times', times[order])
        object.__setattr__(self, 'jump_sizes', sizes[order])

    def _grid(self, t) -> np.ndarray:
        grid = np.atleast_1d(np.asarray(t, dtype=float))
        if np.any(grid < 0) or np.any(grid > self.horizon * (1 + 1e-12)):
            raise ParameterError(f"Evaluation times must lie in [0, {self.horizon}]")
        return grid

    def continuous(self, t) -> np.ndarray:
        grid = self._grid(t)
        if not self.slope_pieces:
            return np.zeros_like(grid)
        pieces = np.asarray(self.slope_pieces)
        t0, t1, slope = pieces[:, 0:1], pieces[:, 1:2], pieces[:, 2:3]
        covered = np.clip(grid[None, :] - t0, 0.0, t1 - t0)
        return (covered * slope).sum(axis=0)

    def jumps(self, t) -> np.ndarray:
        grid = self._grid(t)
        cumulative = np.concatenate(([0.0], np.cumsum(self.jump_sizes)))
        return self.origin_mass + cumulative[np.searchsorted(self.jump_times, grid, side='right')]

    def __call__(self, t) -> np.ndarray:
        return self.continuous(t) + self.jumps(t)

    def evaluate(self, grid) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(X, X_c, X_j) on the grid."""
        xc = self.continuous(grid)
        xj = self.jumps(grid)
        return xc + xj, xc, xj


RTree = Union[FiniteRTree, OneEndedRTree]


# -- assembling finite trees --------------------------------------------

class _TreeBuilder:
    """Grows a FiniteRTree edge by edge from a moving tip."""

    def __init__(self):
        self.parents: List[int] = [-1]
        self.lengths: List[float] = [0.0]
        self.densities: List[float] = [0.0]
        self.atoms: List[Atom] = []
        self.root_atom = 0.0
        self.tip = 0
        self.position = 0.0

    def extend_to(self, position: float, density: float) -> None:
        gap = position - self.position
        if gap > 0:
            self.parents.append(self.tip)
            self.lengths.append(gap)
            self.densities.append(density)
            self.tip = len(self.parents) - 1
            self.position = position

    def add_atom(self, mass: float, vertex: Optional[int] = None) -> None:
        vertex = self.tip if vertex is None else vertex
        if vertex == 0:
            self.root_atom += mass
        else:
            self.atoms.append(Atom(vertex, self.lengths[vertex], mass))

    def attach(self, tree: FiniteRTree, vertex: Optional[int] = None) -> None:
        vertex = self.tip if vertex is None else vertex
        index = {tree.skeleton.root: vertex}
        for v in tree.skeleton.order[1:]:
            index[v] = len(self.parents)
            self.parents.append(index[tree.skeleton.parents[v]])
            self.lengths.append(tree.lengths[v])
            self.densities.append(tree.densities[v])
        self.atoms.extend(Atom(index[a.edge], a.offset, a.mass) for a in tree.atoms)
        if tree.root_atom > 0:
            self.add_atom(tree.root_atom, vertex)

    def build(self) -> FiniteRTree:
        return FiniteRTree(DiscreteTree(tuple(self.parents)), tuple(self.lengths),
                           tuple(self.densities), tuple(self.atoms), self.root_atom)


def _materialize(tree: OneEndedRTree, radius: float, closed: bool,
                 clip_attachments: bool) -> FiniteRTree:
    """Spine [0, radius] with everything attached to it (events at `radius` only when closed)."""
    builder = _TreeBuilder()

    def reached(position: float) -> bool:
        return position > radius or (position == radius and not closed)

    for start, seg in tree.walk():
        if reached(start):
            break
        for offset, kind, payload in seg.events():
            position = start + offset
            if reached(position):
                break
            builder.extend_to(position, seg.density)
            if kind == 0:
                builder.add_atom(payload)
            else:
                builder.attach(truncate_r(payload, radius - position) if clip_attachments else payload)
        builder.extend_to(min(start + seg.length, radius), seg.density)
        if start + seg.length > radius:
            break
    return builder.build()


def materialize(tree: OneEndedRTree, radius: float) -> FiniteRTree:
    """Closed ball of the given radius as a finite tree."""
    return truncate_r(tree, radius)


# -- embedding and rescaling ---------------------------------------------

def iota(tree: Union[DiscreteTree, OneEndedTree]) -> RTree:
    """Put a unit segment on every edge; the measure is the length measure."""
    if isinstance(tree, DiscreteTree):
        lengths = tuple(0.0 if v == tree.root else 1.0 for v in range(tree.size))
        return FiniteRTree(tree, lengths, (0.0,) * tree.size)

    def segments():
        for deco in tree:
            attachments = ((0.0, iota(deco)),) if deco.size > 1 else ()
            yield Segment(1.0, 0.0, (), attachments)

    return OneEndedRTree(segments)


def scale(tree: FiniteRTree, x: float) -> FiniteRTree:
    """Multiply the metric and the measure by x > 0 (densities are unchanged)."""
    if not (np.isfinite(x) and x > 0):
        raise ParameterError(f"Scale factor must be positive, got {x}")
    return FiniteRTree(
        tree.skeleton,
        tuple(length * x for length in tree.lengths),
        tree.densities,
        tuple(Atom(a.edge, a.offset * x, a.mass * x) for a in tree.atoms),
        tree.root_atom * x,
    )


def _check_scale_pair(p: float, q: float) -> None:
    for name, value in (('p', p), ('q', q)):
        if not 0.0 < value <= 1.0:
            raise ParameterError(f"{name} must lie in (0, 1], got {value}")


def _rescale_horizon(tree: FiniteRTree, p: float, q: float, radius: float) -> FiniteRTree:
    """Edges split where points stop having a descendant at distance >= radius."""
    skeleton = tree.skeleton
    below = tree.subtree_heights
    parents: List[int] = []
    lengths: List[float] = []
    densities: List[float] = []
    index = {}
    first_piece = {}
    cut = {}
    for v in skeleton.order:
        if v == skeleton.root:
            index[v] = 0
            parents.append(-1)
            lengths.append(0.0)
            densities.append(0.0)
            continue
        length, density = tree.lengths[v], tree.densities[v]
        spine_part = min(max(length + below[v] - radius, 0.0), length)
        cut[v] = spine_part
        par = index[skeleton.parents[v]]
        if 0.0 < spine_part < length:
            parents.append(par)
            lengths.append(q * spine_part)
            densities.append(density * p / q)
            first_piece[v] = len(parents) - 1
            parents.append(first_piece[v])
            lengths.append(p * (length - spine_part))
            densities.append(density)
        elif spine_part == length:
            parents.append(par)
            lengths.append(q * length)
            densities.append(density * p / q)
        else:
            parents.append(par)
            lengths.append(p * length)
            densities.append(density)
        index[v] = len(parents) - 1
    atoms = []
    for atom in tree.atoms:
        c = cut[atom.edge]
        if atom.offset <= c:
            edge = first_piece.get(atom.edge, index[atom.edge])
            atoms.append(Atom(edge, q * atom.offset, p * atom.mass))
        else:
            atoms.append(Atom(index[atom.edge], p * (atom.offset - c), p * atom.mass))
    return FiniteRTree(DiscreteTree(tuple(parents)), tuple(lengths), tuple(densities),
                       tuple(atoms), p * tree.root_atom)


def rescale(tree: RTree, p: float, q: float, mode: ContractionMode = EXACT_SPINE) -> RTree:
    """
    Deterministic rescaling S^R_{p,q}: spine distances times q, other
    distances times p, and mu' = p mu + (q - p) l on the spine.

    In stored terms: off-spine densities are unchanged, spine densities are
    multiplied by p/q and every atom mass by p. Finite trees have spine
    {root} in exact-spine mode; Horizon(R) uses the points having a
    descendant at distance >= R and is offered for finite trees only.
    """
    _check_scale_pair(p, q)
    if isinstance(tree, FiniteRTree):
        if isinstance(mode, Horizon):
            return _rescale_horizon(tree, p, q, float(mode.depth))
        if mode != EXACT_SPINE:
            raise ParameterError(f"Unknown rescaling mode {mode!r}")
        return scale(tree, p)
    if mode != EXACT_SPINE:
        raise ParameterError("Horizon rescaling needs unbounded lookahead on one-ended trees")

    def segments():
        for seg in tree:
            yield Segment(
                seg.length * q,
                seg.density * (p / q),
                tuple((o * q, m * p) for o, m in seg.atoms),
                tuple((o * q, scale(t, p)) for o, t in seg.attachments),
            )

    return OneEndedRTree(segments)


# -- sampling from mu ----------------------------------------------------

def _component_weights(tree: FiniteRTree) -> np.ndarray:
    lengths = tree.length_array
    return np.concatenate((lengths, lengths * tree.density_array,
                           [a.mass for a in tree.atoms], [tree.root_atom]))


def sample_points(tree: FiniteRTree, count: int, rng: np.random.Generator
                  ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    `count` iid points from mu / mu(tree).

    Returns:
        (edges, offsets, origins) with canonical locations.
    """
    weights = _component_weights(tree)
    total = weights.sum()
    if not total > 0:
        raise ParameterError("Cannot sample from a tree of zero mass")
    n = tree.skeleton.size
    picks = rng.choice(weights.size, size=count, p=weights / total)
    uniforms = rng.random(count)
    edges = np.empty(count, dtype=int)
    offsets = np.empty(count)
    origins = (picks >= n).astype(int)
    on_edge = picks < 2 * n
    edges[on_edge] = picks[on_edge] % n
    offsets[on_edge] = uniforms[on_edge] * tree.length_array[edges[on_edge]]
    atom_edges = np.array([a.edge for a in tree.atoms] + [tree.skeleton.root], dtype=int)
    atom_offsets = np.array([a.offset for a in tree.atoms] + [0.0])
    at_atom = ~on_edge
    edges[at_atom] = atom_edges[picks[at_atom] - 2 * n]
    offsets[at_atom] = atom_offsets[picks[at_atom] - 2 * n]
    edges, offsets = tree.canonical_locations(edges, offsets)
    return edges, offsets, origins


def sample_mu(tree: FiniteRTree, rng: np.random.Generator) -> PointRef:
    """One point from mu / mu(tree); origin 0 iff it came from the length measure."""
    edges, offsets, origins = sample_points(tree, 1, rng)
    return PointRef(int(edges[0]), float(offsets[0]), int(origins[0]))


def distance(tree: FiniteRTree, a: PointRef, b: PointRef) -> float:
    edges, offsets = tree.canonical_locations([a.edge, b.edge], [a.offset, b.offset])
    return float(tree.pairwise_distances(edges, offsets)[0, 1])


# -- discretization ------------------------------------------------------

def _discretize_arrays(tree: FiniteRTree, edges: np.ndarray, offsets: np.ndarray,
                       origins: np.ndarray) -> DiscreteTree:
    """
    Vertices: root, then points with origin 0 (possible ancestors), then origin 1 (leaves).

    Points are sorted along their edges; a point's parent is the last origin-0
    location before it on the same edge, else the deepest origin-0 point on
    the skeleton path above the edge.
    """
    order = np.argsort(origins, kind='stable')
    edges, offsets, origins = edges[order], offsets[order], origins[order]
    n = edges.size
    if n == 0:
        return DiscreteTree.single()
    positions = np.arange(n)
    walk = np.lexsort((positions, offsets, edges))
    e, o = edges[walk], offsets[walk]
    new_location = np.ones(n, dtype=bool)
    new_location[1:] = (e[1:] != e[:-1]) | (o[1:] != o[:-1])
    location_start = np.maximum.accumulate(np.where(new_location, positions, 0))
    # coincident points keep input order, so a location holding an origin-0 point starts with one
    heads = np.where(new_location & (origins[walk] == 0), positions, -1)
    last_head = np.maximum.accumulate(heads)
    before = np.where(location_start > 0, last_head[np.maximum(location_start - 1, 0)], -1)
    same_edge = (before >= 0) & (e[np.maximum(before, 0)] == e)

    size = tree.skeleton.size
    root = tree.skeleton.root
    edge_last = np.flatnonzero(np.append(e[1:] != e[:-1], True))
    top_head = last_head[edge_last]
    has_top = (top_head >= 0) & (e[np.maximum(top_head, 0)] == e[edge_last])
    top = np.full(size, -1)
    top[e[edge_last][has_top]] = walk[top_head[has_top]] + 1
    deepest = np.zeros(size, dtype=int)
    for v in tree.skeleton.order:
        inherited = 0 if v == root else deepest[tree.skeleton.parents[v]]
        deepest[v] = top[v] if top[v] >= 0 else inherited
    fallback = np.where(e == root, 0, deepest[tree._parent_array[e]])

    parents = np.empty(n, dtype=int)
    parents[walk] = np.where(same_edge, walk[np.maximum(before, 0)] + 1, fallback)
    return DiscreteTree((-1,) + tuple(int(v) for v in parents))


def discretize_given(tree: FiniteRTree, v0: Sequence[PointRef], v1: Sequence[PointRef]) -> DiscreteTree:
    """
    Deterministic discretization: the parent of w is the closest point of
    V0 or the root strictly below w on the geodesic to w. Points of V1 are
    always leaves and coincident points are siblings.
    """
    refs = list(v0) + list(v1)
    edges, offsets = tree.canonical_locations([r.edge for r in refs], [r.offset for r in refs])
    origins = np.array([0] * len(v0) + [1] * len(v1), dtype=int)
    return _discretize_arrays(tree, edges, offsets, origins)


def _rejection_attempts(mass: float, n: int, rng: np.random.Generator, cap: int) -> int:
    """
    Draw Poi(mass) totals until one equals n; return the number of attempts.

    Totals are drawn in growing batches. Given an accepted total, the points
    of a Poisson process are iid from the normalized measure.
    """
    attempts = 0
    batch = 256
    while attempts < cap:
        size = min(batch, cap - attempts)
        hits = np.flatnonzero(rng.poisson(mass, size=size) == n)
        if hits.size:
            return attempts + int(hits[0]) + 1
        attempts += size
        batch = min(batch * 2, 1 << 16)
    raise ConditioningError(f"No sample with {n} non-root vertices after {cap} attempts (mass {mass:.6g})")


def _check_conditioning(tree: FiniteRTree, n: int) -> None:
    if n < 0:
        raise ParameterError(f"Conditioned size must be nonnegative, got {n}")
    if not tree.total_mass > 0:
        raise ParameterError("Conditioned discretization needs a tree of positive mass")


def _discretize_finite(tree: FiniteRTree, rng: np.random.Generator,
                       conditioned_n: Optional[int] = None) -> DiscreteTree:
    if conditioned_n is None:
        count = int(rng.poisson(tree.total_mass))
    else:
        _check_conditioning(tree, conditioned_n)
        attempts = _rejection_attempts(tree.total_mass, conditioned_n, rng, settings.ATTEMPT_CAP)
        logger.debug("Conditioned discretization accepted after %d attempts (rate %.3g)",
                     attempts, 1.0 / attempts)
        count = conditioned_n
    if count == 0:
        return DiscreteTree.single()
    return _discretize_arrays(tree, *sample_points(tree, count, rng))


def discretize_nonempty(tree: FiniteRTree, rng: np.random.Generator) -> DiscreteTree:
    """
    Poisson discretization conditioned on at least one non-root vertex.

    The first point of a rate-m process on [0, 1] conditioned to exist sits at
    a truncated exponential time tau, and the rest form a Poi(m (1 - tau))
    count, so no rejection is needed.
    """
    mass = tree.total_mass
    if not mass > 0:
        raise ParameterError("A zero-mass tree never has a non-root vertex")
    tau = -np.log1p(rng.random() * np.expm1(-mass)) / mass
    count = 1 + int(rng.poisson(mass * max(1.0 - tau, 0.0)))
    return _discretize_arrays(tree, *sample_points(tree, count, rng))


def _discretize_one_ended(tree: OneEndedRTree, rng: np.random.Generator) -> OneEndedTree:
    own = spawn(rng)

    def stream():
        pieces: List[DiscreteTree] = []
        leaves = 0
        gap = own.exponential(1.0)
        for _, seg in tree.walk():
            events = seg.events()
            position = 0.0
            while True:
                cut = position + gap
                upper = min(cut, seg.length)
                leaves += int(own.poisson(seg.density * (upper - position)))
                for offset, kind, payload in events:
                    if position <= offset < upper:
                        if kind == 0:
                            leaves += int(own.poisson(payload))
                        else:
                            sub = _discretize_finite(payload, own)
                            if sub.size > 1:
                                pieces.append(sub)
                if cut >= seg.length:
                    gap = cut - seg.length
                    break
                yield concatenate(pieces + [DiscreteTree.star(leaves)])
                pieces, leaves = [], 0
                position = cut
                gap = own.exponential(1.0)

    return OneEndedTree(stream)


def discretize(tree: RTree, rng: np.random.Generator,
               conditioned_n: Optional[int] = None) -> Union[DiscreteTree, OneEndedTree]:
    """
    Poisson discretization D: V0 from the length measure, V1 from the excess.

    On a finite tree the total count is Poi(mu) and, given the count, points are
    iid mu / mu(tree) with their origin flags. `conditioned_n` conditions on
    exactly n non-root vertices by rejection on the count (capped by
    settings.ATTEMPT_CAP). On a one-ended tree the output decorations are
    produced lazily, one per spine interval between consecutive V0 points.
    """
    if isinstance(tree, FiniteRTree):
        return _discretize_finite(tree, rng, conditioned_n)
    if conditioned_n is not None:
        raise ParameterError("Conditioned discretization is only defined for finite trees")
    return _discretize_one_ended(tree, rng)


class ConditionedSampler:
    """
    Repeated conditioned discretization of one tree, counting attempts so the
    acceptance rate can be reported. Safe to call from several threads.
    """

    def __init__(self, tree: FiniteRTree, n: int, attempt_cap: Optional[int] = None):
        _check_conditioning(tree, n)
        self.tree = tree
        self.n = n
        self.attempt_cap = attempt_cap or settings.ATTEMPT_CAP
        self.attempts = 0
        self.accepted = 0
        self._lock = threading.Lock()

    def __call__(self, rng: np.random.Generator) -> DiscreteTree:
        try:
            tried = _rejection_attempts(self.tree.total_mass, self.n, rng, self.attempt_cap)
        except ConditioningError:
            with self._lock:
                self.attempts += self.attempt_cap
            raise
        with self._lock:
            self.attempts += tried
            self.accepted += 1
        if self.n == 0:
            return DiscreteTree.single()
        return _discretize_arrays(self.tree, *sample_points(self.tree, self.n, rng))

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.attempts if self.attempts else float('nan')


# -- pruning, truncation, shifts -----------------------------------------

def prune_lambda(tree: OneEndedRTree, lam: float, rng: np.random.Generator) -> FiniteRTree:
    """Cut the spine at an Exp(lam) height and keep the root component."""
    if not lam > 0:
        raise ParameterError(f"Pruning rate must be positive, got {lam}")
    return _materialize(tree, float(rng.exponential(1.0 / lam)), closed=False, clip_attachments=False)


def truncate_r(tree: RTree, r: float) -> FiniteRTree:
    """Closed metric ball of radius r around the root with the restricted measure."""
    if r < 0:
        raise ParameterError(f"Radius must be nonnegative, got {r}")
    if isinstance(tree, OneEndedRTree):
        return _materialize(tree, float(r), closed=True, clip_attachments=True)
    skeleton = tree.skeleton
    start = tree.root_distances[np.asarray(skeleton.parents).clip(0)]
    keep = [True] * skeleton.size
    for v in skeleton.order[1:]:
        par = skeleton.parents[v]
        keep[v] = keep[par] and (start[v] < r or (tree.lengths[v] == 0 and start[v] <= r))
    if all(keep) and tree.height <= r:
        return tree
    index = {}
    parents, lengths, densities = [], [], []
    for v in skeleton.order:
        if not keep[v]:
            continue
        index[v] = len(parents)
        parents.append(-1 if v == skeleton.root else index[skeleton.parents[v]])
        lengths.append(0.0 if v == skeleton.root else min(tree.lengths[v], r - start[v]))
        densities.append(tree.densities[v])
    atoms = tuple(Atom(index[a.edge], a.offset, a.mass) for a in tree.atoms
                  if keep[a.edge] and a.offset <= lengths[index[a.edge]])
    return FiniteRTree(DiscreteTree(tuple(parents)), tuple(lengths), tuple(densities),
                       atoms, tree.root_atom)


def theta_t(tree: OneEndedRTree, t: float) -> OneEndedRTree:
    """Subtree rooted at spine point t; something attached exactly at t stays at the new root."""
    if t < 0:
        raise ParameterError(f"Shift must be nonnegative, got {t}")

    def segments():
        for start, seg in tree.walk():
            end = start + seg.length
            if end <= t:
                continue
            if start >= t:
                yield seg
                continue
            cut = t - start
            yield Segment(
                seg.length - cut,
                seg.density,
                tuple((o - cut, m) for o, m in seg.atoms if o >= cut),
                tuple((o - cut, a) for o, a in seg.attachments if o >= cut),
            )

    return OneEndedRTree(segments)


# -- mass process --------------------------------------------------------

def mass_process(tree: OneEndedRTree, horizon: float, hurst: Optional[float] = None) -> MassPath:
    """
    Excess mass X(t) of the points projecting to [0, t] on the spine, for t <= horizon.
    Spine density gives the slope; spine atoms and attachments give jumps.
    """
    if horizon < 0:
        raise ParameterError(f"Horizon must be nonnegative, got {horizon}")
    pieces = []
    jumps = {}
    origin = 0.0
    for start, seg in tree.walk():
        if start > horizon:
            break
        end = min(start + seg.length, horizon)
        if seg.density > 0 and end > start:
            pieces.append((start, end, seg.density))
        for offset, kind, payload in seg.events():
            position = start + offset
            if position > horizon:
                break
            size = payload if kind == 0 else payload.total_mass
            if size <= 0:
                continue
            if position == 0.0:
                origin += size
            else:
                jumps[position] = jumps.get(position, 0.0) + size
    times = np.array(sorted(jumps))
    return MassPath(float(horizon), tuple(pieces), times, np.array([jumps[t] for t in times]),
                    origin, hurst)


# -- distance matrices and the exchangeable partial order ----------------

def _check_probability_tree(tree: FiniteRTree) -> None:
    if abs(tree.total_mass - 1.0) > MASS_TOLERANCE:
        raise ParameterError(f"Expected a probability measure, total mass is {tree.total_mass!r}")


def dm_sample(tree: FiniteRTree, n: int, rng: np.random.Generator) -> np.ndarray:
    """(n+1) x (n+1) distance matrix of the root and n iid mu-points."""
    _check_probability_tree(tree)
    if n < 0:
        raise ParameterError(f"Sample size must be nonnegative, got {n}")
    edges, offsets, _ = sample_points(tree, n, rng)
    edges = np.concatenate(([tree.skeleton.root], edges))
    offsets = np.concatenate(([0.0], offsets))
    return tree.pairwise_distances(edges, offsets)


@dataclass(frozen=True, eq=False)
class EPOSample:
    """
    Root plus n iid mu-points with origin flags, and the relation
    i |> j iff X_i is strictly below X_j and S_i = 0.
    """
    tree: FiniteRTree
    edges: np.ndarray
    offsets: np.ndarray
    origins: np.ndarray

    @property
    def n(self) -> int:
        return self.edges.size - 1

    def column(self, j: int) -> np.ndarray:
        """Boolean vector over k of k |> j."""
        if not 0 <= j <= self.n:
            raise ParameterError(f"Index {j} outside 0..{self.n}")
        below = self.tree.strictly_precedes(self.edges, self.offsets, self.edges[j], self.offsets[j])
        return below & (self.origins == 0)

    def precedes(self, i: int, j: int) -> bool:
        return bool(self.column(j)[i])

    @cached_property
    def relation(self) -> np.ndarray:
        below = self.tree.strictly_precedes(self.edges[:, None], self.offsets[:, None],
                                            self.edges[None, :], self.offsets[None, :])
        return below & (self.origins == 0)[:, None]

    @cached_property
    def distances(self) -> np.ndarray:
        return self.tree.pairwise_distances(self.edges, self.offsets)


def epo_sample(tree: FiniteRTree, n: int, rng: np.random.Generator) -> EPOSample:
    _check_probability_tree(tree)
    if n < 0:
        raise ParameterError(f"Sample size must be nonnegative, got {n}")
    edges, offsets, origins = sample_points(tree, n, rng)
    return EPOSample(tree,
                     np.concatenate(([tree.skeleton.root], edges)),
                     np.concatenate(([0.0], offsets)),
                     np.concatenate(([0], origins)))


def dm_estimate_from_epo(relation: Union[np.ndarray, EPOSample], i: int, j: int, n: int) -> float:
    """
    Distance estimate from the order alone: the fraction of k in 1..n, k not
    in {i, j}, lying below exactly one of X_i and X_j.
    """
    size = relation.n + 1 if isinstance(relation, EPOSample) else np.asarray(relation).shape[0]
    if not (0 <= i < size and 0 <= j < size) or not 0 <= n < size:
        raise ParameterError(f"Indices ({i}, {j}) or n={n} out of range for {size} points")
    if n == 0:
        return 0.0
    if isinstance(relation, EPOSample):
        below_i, below_j = relation.column(i), relation.column(j)
    else:
        matrix = np.asarray(relation, dtype=bool)
        below_i, below_j = matrix[:, i], matrix[:, j]
    differs = (below_i ^ below_j)[:n + 1].copy()
    differs[[0, i, j]] = False
    return float(np.count_nonzero(differs)) / n


def epo_tree(sample: EPOSample, count: int) -> DiscreteTree:
    """
    Tree on {0..count} whose ancestral order is the relation |> restricted to
    those indices. With count ~ Poi(1) on a probability tree this has the law
    of the Poisson discretization.
    """
    if not 0 <= count <= sample.n:
        raise ParameterError(f"Count {count} outside 0..{sample.n}")
    stop = count + 1
    return _discretize_arrays(sample.tree, sample.edges[1:stop], sample.offsets[1:stop],
                              sample.origins[1:stop])


# -- text form -----------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), '.17g')


def to_text(tree: FiniteRTree) -> str:
    """`tree{ rootatom=<m> (len=.. dens=.. atoms=[o:m,...] children...) ... }` with sorted children."""
    skeleton = tree.skeleton
    by_edge = {}
    for atom in tree.atoms:
        by_edge.setdefault(atom.edge, []).append(atom)
    rendered = [''] * skeleton.size
    for v in reversed(skeleton.order[1:]):
        atoms = ','.join(f"{_fmt(a.offset)}:{_fmt(a.mass)}"
                         for a in sorted(by_edge.get(v, []), key=lambda a: (a.offset, a.mass)))
        kids = ''.join(' ' + rendered[c] for c in sorted(skeleton.children[v], key=lambda c: rendered[c]))
        rendered[v] = f"(len={_fmt(tree.lengths[v])} dens={_fmt(tree.densities[v])} atoms=[{atoms}]{kids})"
    kids = ''.join(' ' + rendered[c] for c in sorted(skeleton.children[skeleton.root], key=lambda c: rendered[c]))
    return f"tree{{ rootatom={_fmt(tree.root_atom)}{kids} }}"


_TOKEN = re.compile(r"\s*(tree\{|\}|\(|\)|rootatom=\S+?(?=[\s()}])|len=\S+?(?=\s)|dens=\S+?(?=\s)|atoms=\[[^\]]*\])")


def parse_rtree(text: str) -> FiniteRTree:
    tokens = []
    pos = 0
    stripped = text.strip()
    while pos < len(stripped):
        match = _TOKEN.match(stripped, pos)
        if not match:
            raise TreeError(f"Cannot parse R-tree text at position {pos}: {stripped[pos:pos + 20]!r}")
        tokens.append(match.group(1))
        pos = match.end()
        while pos < len(stripped) and stripped[pos].isspace():
            pos += 1
    if len(tokens) < 3 or tokens[0] != 'tree{' or tokens[-1] != '}' or not tokens[1].startswith('rootatom='):
        raise TreeError("R-tree text must look like 'tree{ rootatom=<mass> ... }'")
    builder = _TreeBuilder()
    builder.root_atom = float(tokens[1].split('=', 1)[1])
    stack = [0]
    i = 2
    try:
        while i < len(tokens) - 1:
            token = tokens[i]
            if token == "(":
                if not (tokens[i + 1].startswith("len=") and tokens[i + 2].startswith("dens=")
                        and tokens[i + 3].startswith("atoms=[")):
                    raise TreeError(f"Malformed edge header near token {i}")
                length = float(tokens[i + 1][len("len="):])
                density = float(tokens[i + 2][len("dens="):])
                builder.parents.append(stack[-1])
                builder.lengths.append(length)
                builder.densities.append(density)
                vertex = len(builder.parents) - 1
                body = tokens[i + 3][len('atoms=['):-1]
                for item in filter(None, body.split(',')):
                    offset, mass = item.split(':')
                    builder.atoms.append(Atom(vertex, float(offset), float(mass)))
                stack.append(vertex)
                i += 4
            elif token == ')':
                if len(stack) == 1:
                    raise TreeError("Unbalanced ')' in R-tree text")
                stack.pop()
                i += 1
            else:
                raise TreeError(f"Unexpected token {token!r}")
    except (IndexError, ValueError) as exc:
        raise TreeError(f"Malformed R-tree text: {exc}") from exc
    if len(stack) != 1:
        raise TreeError("Unbalanced '(' in R-tree text")
    return builder.build()
