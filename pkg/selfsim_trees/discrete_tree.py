"""
discrete_tree.py

This module provides finite and one-ended rooted discrete trees together with
the operators acting on them: contraction onto a kept vertex set, the random
contraction S_{p,q}, uniform contraction, truncation, the N_{r,R} diagnostic,
spine shift and spine pruning.

Trees are unordered. Two trees are equal iff their canonical codes are equal;
the code doubles as the ASCII text form, e.g. `()` for a single vertex and
`(()())` for a cherry.
"""
import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, List, NewType, Sequence, Tuple, Union

import numpy as np

from .errors import ParameterError, TreeError
from .seeding import spawn
from .streams import MemoizedStream

logger = logging.getLogger(__name__)

CanonicalCode = NewType('CanonicalCode', bytes)
KeepMask = Union[Sequence[bool], np.ndarray]

EXACT_SPINE = 'exact-spine'


@dataclass(frozen=True)
class Horizon:
    """Contraction mode using q for every vertex with a descendant `depth` levels below it."""
    depth: int

    def __post_init__(self):
        if self.depth < 0:
            raise ParameterError(f"Horizon depth must be nonnegative, got {self.depth}")


ContractionMode = Union[str, Horizon]


@dataclass(frozen=True, eq=False)
class DiscreteTree:
    """
    Finite rooted tree stored as a parent array.

    `parents[root]` is -1, every other entry is the index of the parent.
    Vertex indices carry no meaning beyond identifying vertices.
    """
    parents: Tuple[int, ...]
    root: int = field(default=-1)

    def __post_init__(self):
        parents = tuple(int(v) for v in self.parents)
        object.__setattr__(self, 'parents', parents)
        n = len(parents)
        if n == 0:
            raise TreeError("A tree needs at least one vertex")
        roots = [v for v, par in enumerate(parents) if par == -1]
        if len(roots) != 1:
            raise TreeError(f"Expected exactly one root, found {len(roots)}")
        if self.root == -1:
            object.__setattr__(self, 'root', roots[0])
        elif self.root != roots[0]:
            raise TreeError(f"Root {self.root} does not have parent -1")
        for v, par in enumerate(parents):
            if par != -1 and not 0 <= par < n:
                raise TreeError(f"Vertex {v} has parent {par} outside 0..{n - 1}")
        if len(self.order) != n:
            raise TreeError("Parent references contain a cycle")

    # -- constructors --------------------------------------------------

    @classmethod
    def single(cls) -> 'DiscreteTree':
        return cls((-1,))

    @classmethod
    def path(cls, edges: int) -> 'DiscreteTree':
        """Path with `edges` edges hanging below the root."""
        if edges < 0:
            raise ParameterError(f"Path length must be nonnegative, got {edges}")
        return cls(tuple(range(-1, edges)))

    @classmethod
    def star(cls, leaves: int) -> 'DiscreteTree':
        """Root with `leaves` pendant edges."""
        if leaves < 0:
            raise ParameterError(f"Star size must be nonnegative, got {leaves}")
        return cls((-1,) + (0,) * leaves)

    # -- structure -----------------------------------------------------

    @property
    def size(self) -> int:
        return len(self.parents)

    @cached_property
    def children(self) -> Tuple[Tuple[int, ...], ...]:
        kids: List[List[int]] = [[] for _ in self.parents]
        for v, par in enumerate(self.parents):
            if par != -1:
                kids[par].append(v)
        return tuple(tuple(k) for k in kids)

    @cached_property
    def order(self) -> Tuple[int, ...]:
        """Breadth-first order from the root; parents precede children."""
        seen = [self.root]
        i = 0
        while i < len(seen):
            seen.extend(self.children[seen[i]])
            i += 1
        return tuple(seen)

    @cached_property
    def depths(self) -> Tuple[int, ...]:
        depth = [0] * self.size
        for v in self.order[1:]:
            depth[v] = depth[self.parents[v]] + 1
        return tuple(depth)

    @cached_property
    def heights(self) -> Tuple[int, ...]:
        """Distance from each vertex to its deepest descendant."""
        height = [0] * self.size
        for v in reversed(self.order[1:]):
            par = self.parents[v]
            height[par] = max(height[par], height[v] + 1)
        return tuple(height)

    @property
    def height(self) -> int:
        return self.heights[self.root]

    @cached_property
    def code(self) -> CanonicalCode:
        return canonical_code(self)

    def relabel(self, permutation: Sequence[int]) -> 'DiscreteTree':
        """Same tree with vertex v renamed permutation[v]."""
        perm = list(permutation)
        if sorted(perm) != list(range(self.size)):
            raise TreeError("Relabelling must be a permutation of the vertex indices")
        parents = [0] * self.size
        for v, par in enumerate(self.parents):
            parents[perm[v]] = -1 if par == -1 else perm[par]
        return DiscreteTree(tuple(parents))

    def __eq__(self, other) -> bool:
        if not isinstance(other, DiscreteTree):
            return NotImplemented
        return self.code == other.code

    def __hash__(self) -> int:
        return hash(self.code)

    def __repr__(self) -> str:
        return f"DiscreteTree({to_text(self)})"


class OneEndedTree(MemoizedStream[DiscreteTree]):
    """
    Infinite tree with a single end, stored as a lazy stream of decorations.

    Decoration k is the finite subtree hanging at spine vertex k (its root is
    that spine vertex; the spine edge to k+1 is not part of it). Pulled
    decorations are memoized, so a value always reads back the same tree.
    """

    @classmethod
    def bare_ray(cls) -> 'OneEndedTree':
        return cls(lambda: itertools.repeat(DiscreteTree.single()))

    @classmethod
    def from_sampler(cls, sample: Callable[[np.random.Generator], DiscreteTree],
                     rng: np.random.Generator) -> 'OneEndedTree':
        """Ray whose decorations are iid draws of `sample` from `rng`."""
        own = spawn(rng)

        def stream():
            while True:
                yield sample(own)
        return cls(stream)

    def _check_item(self, item):
        if not isinstance(item, DiscreteTree):
            raise TreeError(f"Decoration stream produced {type(item).__name__}, not DiscreteTree")
        return item

    def decoration(self, k: int) -> DiscreteTree:
        return self.item(k)

    def decorations(self, count: int) -> List[DiscreteTree]:
        """The first `count` decorations."""
        return self.head(count)

    def __repr__(self) -> str:
        return f"OneEndedTree(pulled={self.pulled})"


AnyTree = Union[DiscreteTree, OneEndedTree]


# -- codes and text ----------------------------------------------------

def canonical_code(tree: DiscreteTree) -> CanonicalCode:
    """
    AHU code: a vertex is `(` + sorted child codes + `)`.

    Computed bottom-up without recursion so long paths are fine.
    """
    codes: List[bytes] = [b''] * tree.size
    for v in reversed(tree.order):
        kids = tree.children[v]
        codes[v] = b'(' + b''.join(sorted(codes[c] for c in kids)) + b')'
        for c in kids:
            codes[c] = b''
    return CanonicalCode(codes[tree.root])


def to_text(tree: DiscreteTree) -> str:
    return tree.code.decode('ascii')


def parse_tree(text: str) -> DiscreteTree:
    """Parse the parenthesis form; child order in the input does not matter."""
    text = ''.join(text.split())
    if not text or text[0] != '(':
        raise TreeError(f"Tree text must start with '(': {text[:20]!r}")
    parents: List[int] = []
    stack: List[int] = []
    for pos, ch in enumerate(text):
        if ch == '(':
            if not stack and parents:
                raise TreeError(f"Trailing content after the root at position {pos}")
            parents.append(stack[-1] if stack else -1)
            stack.append(len(parents) - 1)
        elif ch == ')':
            if not stack:
                raise TreeError(f"Unbalanced ')' at position {pos}")
            stack.pop()
        else:
            raise TreeError(f"Unexpected character {ch!r} at position {pos}")
    if stack:
        raise TreeError("Unbalanced '(' in tree text")
    return DiscreteTree(tuple(parents))


# -- building blocks ---------------------------------------------------

def graft(host: DiscreteTree, at: int, sub: DiscreteTree) -> DiscreteTree:
    """Identify the root of `sub` with vertex `at` of `host`."""
    if not 0 <= at < host.size:
        raise TreeError(f"Graft point {at} is not a vertex of the host")
    parents = list(host.parents)
    offset = len(parents)
    index = {}
    for v in sub.order:
        if v == sub.root:
            index[v] = at
            continue
        index[v] = offset
        offset += 1
    extra = [0] * (sub.size - 1)
    for v in sub.order[1:]:
        extra[index[v] - len(parents)] = index[sub.parents[v]]
    return DiscreteTree(tuple(parents + extra), host.root)


def concatenate(trees: Iterable[DiscreteTree]) -> DiscreteTree:
    """Identify the roots of all given trees; no trees gives the single vertex."""
    result = DiscreteTree.single()
    for tree in trees:
        if tree.size > 1:
            result = graft(result, result.root, tree)
    return result


def assemble_spine(decorations: Sequence[DiscreteTree]) -> DiscreteTree:
    """Finite tree made of a spine path 0..len-1 with decoration i hanging at spine vertex i."""
    if not decorations:
        raise TreeError("Need at least one decoration to build a spine")
    tree = DiscreteTree.path(len(decorations) - 1)
    for i, deco in enumerate(decorations):
        if deco.size > 1:
            tree = graft(tree, i, deco)
    return tree


def spine_prefix(tree: OneEndedTree, k: int) -> DiscreteTree:
    """Spine vertices 0..k with their decorations."""
    if k < 0:
        raise ParameterError(f"Prefix length must be nonnegative, got {k}")
    return assemble_spine(tree.decorations(k + 1))


def ancestry(tree: DiscreteTree) -> np.ndarray:
    """Boolean matrix A with A[v, w] iff v is a strict ancestor of w."""
    n = tree.size
    matrix = np.zeros((n, n), dtype=bool)
    for w in tree.order[1:]:
        par = tree.parents[w]
        matrix[:, w] = matrix[:, par]
        matrix[par, w] = True
    return matrix


# -- operators ---------------------------------------------------------

def contract(tree: DiscreteTree, mask: KeepMask) -> DiscreteTree:
    """
    Contraction C(T, V'): the tree on the kept vertices whose ancestral order
    is the restriction of the order of T.

    Args:
        tree: finite tree (for one-ended trees pass a prefix holding every
            kept vertex and its kept ancestors).
        mask: one boolean per vertex; the root must be kept.
    Returns:
        DiscreteTree whose vertex i is the i-th kept vertex in breadth-first order.
    """
    kept = np.asarray(mask, dtype=bool)
    if kept.shape != (tree.size,):
        raise TreeError(f"Mask has shape {kept.shape}, expected ({tree.size},)")
    if not kept[tree.root]:
        raise TreeError("The root must be kept")
    nearest = [-1] * tree.size
    for v in tree.order[1:]:
        par = tree.parents[v]
        nearest[v] = par if kept[par] else nearest[par]
    index = {}
    parents: List[int] = []
    for v in tree.order:
        if kept[v]:
            index[v] = len(parents)
            parents.append(-1 if v == tree.root else index[nearest[v]])
    return DiscreteTree(tuple(parents))


def _check_probabilities(p: float, q: float) -> None:
    for name, value in (('p', p), ('q', q)):
        if not 0.0 < value < 1.0:
            raise ParameterError(f"{name} must lie in (0, 1), got {value}")


def _keep_probabilities(tree: DiscreteTree, p: float, q: float, mode: ContractionMode) -> np.ndarray:
    probs = np.full(tree.size, p)
    if isinstance(mode, Horizon):
        probs[np.asarray(tree.heights) >= mode.depth] = q
    elif mode != EXACT_SPINE:
        raise ParameterError(f"Unknown contraction mode {mode!r}")
    return probs


def _random_contraction(tree: DiscreteTree, p: float, q: float, mode: ContractionMode,
                        rng: np.random.Generator) -> DiscreteTree:
    kept = rng.random(tree.size) < _keep_probabilities(tree, p, q, mode)
    kept[tree.root] = True
    return contract(tree, kept)


def sop(tree: AnyTree, p: float, q: float, rng: np.random.Generator,
        mode: ContractionMode = EXACT_SPINE) -> AnyTree:
    """
    Random contraction S_{p,q}.

    Finite trees have spine {root}, so in exact-spine mode every non-root vertex
    is kept with probability p. On a one-ended tree spine vertices are kept
    with probability q and the result is produced lazily: output decoration j
    gathers the contracted decorations of every input spine vertex whose
    nearest kept spine ancestor is the j-th kept spine vertex.
    """
    _check_probabilities(p, q)
    if isinstance(tree, DiscreteTree):
        return _random_contraction(tree, p, q, mode, rng)
    if not isinstance(tree, OneEndedTree):
        raise TreeError(f"Cannot contract {type(tree).__name__}")
    _keep_probabilities(DiscreteTree.single(), p, q, mode)
    own = spawn(rng)

    def stream():
        pending = [_random_contraction(tree.decoration(0), p, q, mode, own)]
        for k in itertools.count(1):
            spine_kept = own.random() < q
            contracted = _random_contraction(tree.decoration(k), p, q, mode, own)
            if spine_kept:
                yield concatenate(pending)
                pending = [contracted]
            else:
                pending.append(contracted)

    return OneEndedTree(stream)


def cop_uniform(tree: DiscreteTree, m: int, rng: np.random.Generator) -> DiscreteTree:
    """Contract onto the root plus a uniform m-subset of the non-root vertices."""
    candidates = np.array([v for v in range(tree.size) if v != tree.root], dtype=int)
    if not 0 <= m <= len(candidates):
        raise ParameterError(f"Cannot keep {m} of {len(candidates)} non-root vertices")
    kept = np.zeros(tree.size, dtype=bool)
    kept[tree.root] = True
    if m:
        kept[rng.choice(candidates, size=m, replace=False)] = True
    return contract(tree, kept)


def truncate(tree: AnyTree, k: int) -> DiscreteTree:
    """Induced subtree T^{<=k} on the vertices within graph distance k of the root."""
    if k < 0:
        raise ParameterError(f"Truncation depth must be nonnegative, got {k}")
    if isinstance(tree, DiscreteTree):
        if tree.height <= k:
            return tree
        return contract(tree, np.asarray(tree.depths) <= k)
    decorations = tree.decorations(k + 1)
    return assemble_spine([truncate(deco, k - i) for i, deco in enumerate(decorations)])


def n_r_R(tree: AnyTree, r: int, R: int) -> int:
    """Number of vertices at depth r having a descendant at depth R."""
    if r < 0 or r > R:
        raise ParameterError(f"Need 0 <= r <= R, got r={r}, R={R}")
    if isinstance(tree, OneEndedTree):
        tree = truncate(tree, R)
    depths = np.asarray(tree.depths)
    heights = np.asarray(tree.heights)
    return int(np.count_nonzero((depths == r) & (depths + heights >= R)))


def theta_shift(tree: OneEndedTree) -> OneEndedTree:
    """Subtree rooted at spine vertex 1: the decoration stream without its head."""
    return OneEndedTree(lambda: (tree.decoration(k) for k in itertools.count(1)))


def prune_spine(tree: OneEndedTree, lam: float, rng: np.random.Generator) -> DiscreteTree:
    """
    Root component after deleting spine vertices marked with probability
    lam/(1+lam); the root itself is never marked.
    """
    if not lam > 0:
        raise ParameterError(f"Pruning rate must be positive, got {lam}")
    first_marked = int(rng.geometric(lam / (1.0 + lam)))
    return assemble_spine(tree.decorations(first_marked))
