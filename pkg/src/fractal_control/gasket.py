"""Level-m pre-gaskets: exact vertex geometry, cell addressing and adjacency.

Points are stored on the integer triangular lattice of spacing ``2**-m``:
lattice pair ``(a, b)`` is the point ``(a + b/2, b*sqrt(3)/2) / 2**m``.  The
public coordinate form is a pair of rationals ``(x, y)`` meaning
``(x, y*sqrt(3))``, so p3 is ``(1/2, 1/2)``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator, Sequence, TextIO, Union

import numpy as np

from ._config import ResourceLimitError, max_level, MAX_LEVEL_ENV

Word = str
WordLike = Union[str, Sequence[int]]
ExactPoint = tuple[Fraction, Fraction]

# corners of V_0 in (1, sqrt3) coordinates
CORNERS: tuple[ExactPoint, ...] = (
    (Fraction(0), Fraction(0)),
    (Fraction(1), Fraction(0)),
    (Fraction(1, 2), Fraction(1, 2)),
)
# the same corners on the unit triangular lattice
_LATTICE_CORNERS = np.array([[0, 0], [1, 0], [0, 1]], dtype=np.int64)


def as_word(w: WordLike) -> Word:
    """Normalise a word given as a string ("132") or a sequence of ints."""
    if isinstance(w, str):
        s = w
    else:
        s = "".join(str(int(c)) for c in w)
    bad = set(s) - {"1", "2", "3"}
    if bad:
        raise ValueError(f"word symbols must be in {{1,2,3}}, got {sorted(bad)} in {s!r}")
    return s


def words(m: int) -> Iterator[Word]:
    """All words of length m in lexicographic order."""
    if m == 0:
        yield ""
        return
    for head in "123":
        for tail in words(m - 1):
            yield head + tail


def word_index(w: WordLike) -> int:
    """Position of ``w`` in the lexicographic order of words of its length."""
    idx = 0
    for c in as_word(w):
        idx = 3 * idx + (ord(c) - ord("1"))
    return idx


def index_word(idx: int, m: int) -> Word:
    digits = []
    for _ in range(m):
        idx, r = divmod(idx, 3)
        digits.append("123"[r])
    return "".join(reversed(digits))


def cell_map(w: WordLike, x: ExactPoint) -> ExactPoint:
    """Apply F_{w_1} o ... o F_{w_m} to an exact point, F_i(x) = (x + p_i)/2."""
    px, py = Fraction(x[0]), Fraction(x[1])
    for c in reversed(as_word(w)):
        cx, cy = CORNERS[int(c) - 1]
        px, py = (px + cx) / 2, (py + cy) / 2
    return px, py


def hausdorff_mass(w: WordLike) -> Fraction:
    return Fraction(1, 3 ** len(as_word(w)))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PreGasket:
    """The level-m graph V_m with its cells.

    Attributes
    ----------
    level : int
    lattice : (n, 2) int64 array
        Vertex positions on the triangular lattice scaled by ``2**level``.
    edges : (3**(level+1), 2) int64 array
        Vertex id pairs at distance ``2**-level``, smaller id first.
    cells : (3**level, 3) int64 array
        Corner ids of each cell; row ``i`` is the i-th word in lexicographic
        order and column ``j`` is the image of ``p_{j+1}``.
    degree : (n,) int64 array
    neighbors : (n, 4) int64 array
        Sorted neighbor ids, padded with -1 for the degree-2 corners.
    vertex_cells : (n, 2) int64 array
        Indices of the cells containing each vertex, padded with -1.
    """

    level: int
    lattice: np.ndarray
    edges: np.ndarray
    cells: np.ndarray
    degree: np.ndarray
    neighbors: np.ndarray
    vertex_cells: np.ndarray

    @property
    def n_vertices(self) -> int:
        return int(self.lattice.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def n_cells(self) -> int:
        return int(self.cells.shape[0])

    @property
    def corner_ids(self) -> tuple[int, int, int]:
        """Vertex ids of p1, p2, p3."""
        last = self.n_cells - 1
        mid = (self.n_cells - 1) // 2  # word "22...2"
        return int(self.cells[0, 0]), int(self.cells[mid, 1]), int(self.cells[last, 2])

    def coords(self, v: int) -> ExactPoint:
        self._check_vertex(v)
        a, b = (int(c) for c in self.lattice[v])
        den = 2 ** (self.level + 1)
        return Fraction(2 * a + b, den), Fraction(b, den)

    def float_coords(self) -> np.ndarray:
        scale = 2.0 ** -self.level
        a = self.lattice[:, 0].astype(float)
        b = self.lattice[:, 1].astype(float)
        return np.column_stack([(a + 0.5 * b) * scale, b * (np.sqrt(3) / 2) * scale])

    def cell_vertices(self, w: WordLike) -> tuple[int, int, int]:
        w = as_word(w)
        if len(w) != self.level:
            raise ValueError(f"word {w!r} has level {len(w)}, graph has level {self.level}")
        return tuple(int(v) for v in self.cells[word_index(w)])

    def cells_containing(self, v: int) -> set[Word]:
        self._check_vertex(v)
        return {index_word(int(c), self.level) for c in self.vertex_cells[v] if c >= 0}

    def vertex_nu_mass(self) -> np.ndarray:
        """nu_m(v) = sum of nu(K_w)/3 over cells containing v (sums to 1)."""
        counts = (self.vertex_cells >= 0).sum(axis=1)
        return counts / (3.0 * self.n_cells)

    def _check_vertex(self, v: int) -> None:
        if not (0 <= int(v) < self.n_vertices):
            raise ValueError(f"unknown vertex id {v} (level {self.level} has {self.n_vertices})")


def check_level(m: int) -> None:
    if m < 0:
        raise ValueError(f"level must be >= 0, got {m}")
    bound = max_level()
    if m > bound:
        raise ResourceLimitError(
            f"level {m} exceeds the maximum level {bound} (raise it with {MAX_LEVEL_ENV})"
        )


def build_pregasket(m: int) -> PreGasket:
    """Build V_m with deterministic vertex ids (first appearance in word order)."""
    check_level(m)
    return _build(m)


@functools.lru_cache(maxsize=16)
def _build(m: int) -> PreGasket:
    n_cells = 3 ** m
    idx = np.arange(n_cells, dtype=np.int64)
    offset = np.zeros((n_cells, 2), dtype=np.int64)
    for j in range(1, m + 1):
        digit = (idx // 3 ** (m - j)) % 3
        offset += _LATTICE_CORNERS[digit] << (m - j)
    corners = offset[:, None, :] + _LATTICE_CORNERS[None, :, :]  # (cells, 3, 2)

    flat = corners.reshape(-1, 2)
    key = flat[:, 0] * (2 ** m + 1) + flat[:, 1]
    uniq, first, inverse = np.unique(key, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    cells = rank[inverse.ravel()].reshape(n_cells, 3)
    lattice = flat[first[order]]

    edges = np.concatenate([cells[:, [0, 1]], cells[:, [1, 2]], cells[:, [0, 2]]])
    edges = np.sort(edges, axis=1)
    edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]

    n = lattice.shape[0]
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    o = np.lexsort((dst, src))
    src, dst = src[o], dst[o]
    degree = np.bincount(src, minlength=n).astype(np.int64)
    start = np.concatenate([[0], np.cumsum(degree)[:-1]])
    slot = np.arange(src.size) - start[src]
    neighbors = np.full((n, 4), -1, dtype=np.int64)
    neighbors[src, slot] = dst

    owner = np.repeat(idx, 3)
    vflat = cells.ravel()
    o = np.lexsort((owner, vflat))
    vflat, owner = vflat[o], owner[o]
    counts = np.bincount(vflat, minlength=n)
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    slot = np.arange(vflat.size) - start[vflat]
    vertex_cells = np.full((n, 2), -1, dtype=np.int64)
    vertex_cells[vflat, slot] = owner

    return PreGasket(
        level=m,
        lattice=_frozen(lattice),
        edges=_frozen(edges),
        cells=_frozen(cells),
        degree=_frozen(degree),
        neighbors=_frozen(neighbors),
        vertex_cells=_frozen(vertex_cells),
    )


def write_graph(g: PreGasket, vertices: TextIO, edges: TextIO) -> None:
    """Dump vertices as ``id,xnum/xden,ynum/yden`` (y is the sqrt(3) coefficient)
    and edges as ``id1,id2``."""
    for v in range(g.n_vertices):
        x, y = g.coords(v)
        vertices.write(f"{v},{x.numerator}/{x.denominator},{y.numerator}/{y.denominator}\n")
    for a, b in g.edges:
        edges.write(f"{a},{b}\n")


def iter_edges(g: PreGasket) -> Iterable[tuple[int, int]]:
    return ((int(a), int(b)) for a, b in g.edges)
