"""Graph energies, harmonic extension and the Kusuoka energy measure.

Exact arithmetic is used up to level 8: harmonic values at level k share the
denominator D * 5**k, so they are carried as integer numerators and turned
into ``fractions.Fraction`` only at the interface.  Beyond level 8, or when
asked, tables are float64.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from typing import Mapping, Sequence, TextIO, Union

import numpy as np

from ._config import EXACT_LEVEL_LIMIT
from .gasket import PreGasket, WordLike, as_word, build_pregasket, index_word, word_index

Number = Union[Fraction, float]
BoundaryTriple = tuple[Number, Number, Number]

ENERGY_RENORMALISATION = Fraction(5, 3)


def _is_exact(x) -> bool:
    return isinstance(x, (int, Rational)) and not isinstance(x, bool)


def _resolve_exact(boundary: Sequence, m: int, exact: bool | None) -> bool:
    if exact is None:
        return m <= EXACT_LEVEL_LIMIT and all(_is_exact(b) for b in boundary)
    if exact and not all(_is_exact(b) for b in boundary):
        raise ValueError("exact mode needs rational boundary values")
    return exact


def _as_array(values, exact: bool) -> np.ndarray:
    if exact:
        return np.array([Fraction(v) for v in values], dtype=object)
    return np.asarray(values, dtype=float)


def graph_energy(values: Union[Sequence[Number], Mapping[int, Number], np.ndarray], m: int) -> Number:
    """(5/3)^m times the sum over edges of V_m of squared value differences."""
    g = build_pregasket(m)
    if isinstance(values, Mapping):
        missing = [v for v in range(g.n_vertices) if v not in values]
        if missing:
            raise ValueError(f"no value for vertices {missing[:10]} of V_{m}")
        values = [values[v] for v in range(g.n_vertices)]
    if len(values) != g.n_vertices:
        raise ValueError(f"expected {g.n_vertices} values on V_{m}, got {len(values)}")
    if any(v is None for v in values):
        raise ValueError("value table has missing entries")
    exact = all(_is_exact(v) for v in values)
    u = _as_array(values, exact)
    d = u[g.edges[:, 0]] - u[g.edges[:, 1]]
    total = (d * d).sum()
    if exact:
        return ENERGY_RENORMALISATION ** m * Fraction(total)
    return float((5.0 / 3.0) ** m * total)


def refine_corner_values(corners: np.ndarray) -> np.ndarray:
    """Corner values of the 3 children of every cell from the parents' corners.

    Harmonic midpoint rule: the midpoint opposite corner k gets
    (2*(sum of the two edge ends) + value at k) / 5.
    """
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    m12 = (2 * a + 2 * b + c) / 5
    m13 = (2 * a + 2 * c + b) / 5
    m23 = (2 * b + 2 * c + a) / 5
    out = np.empty((corners.shape[0], 3, 3), dtype=corners.dtype)
    out[:, 0] = np.stack([a, m12, m13], axis=1)
    out[:, 1] = np.stack([m12, b, m23], axis=1)
    out[:, 2] = np.stack([m13, m23, c], axis=1)
    return out.reshape(-1, 3)


def _refine_scaled(num: np.ndarray) -> np.ndarray:
    """Integer form of :func:`refine_corner_values`: child numerators over a
    denominator five times the parent's."""
    a, b, c = num[:, 0], num[:, 1], num[:, 2]
    m12 = 2 * a + 2 * b + c
    m13 = 2 * a + 2 * c + b
    m23 = 2 * b + 2 * c + a
    a5, b5, c5 = 5 * a, 5 * b, 5 * c
    out = np.empty((num.shape[0], 3, 3), dtype=num.dtype)
    out[:, 0] = np.stack([a5, m12, m13], axis=1)
    out[:, 1] = np.stack([m12, b5, m23], axis=1)
    out[:, 2] = np.stack([m13, m23, c5], axis=1)
    return out.reshape(-1, 3)


def _vertex_table(corners: np.ndarray, g: PreGasket) -> np.ndarray:
    out = np.empty(g.n_vertices, dtype=corners.dtype)
    out[g.cells.ravel()] = corners.ravel()
    return out


def _to_fractions(num: np.ndarray, den: int) -> np.ndarray:
    out = np.empty(num.shape, dtype=object)
    flat = out.reshape(-1)
    flat[:] = [Fraction(int(x), den) for x in num.reshape(-1)]
    return out


@dataclass(frozen=True, eq=False)
class HarmonicTable:
    """Harmonic extension of a boundary triple, tabulated on V_0..V_level.

    ``corners[k]`` holds the values at the corners of every level-k cell (rows
    in word order); ``values[k]`` holds the values indexed by V_k vertex id.
    Exact tables store integer ``numerators`` over ``scale[k] = D * 5**k``
    (D the common denominator of the boundary) and build Fractions on first
    access; float tables store the values with ``scale`` all ones.
    """

    boundary: tuple
    level: int
    exact: bool
    numerators: tuple
    scale: tuple

    @functools.cached_property
    def corners(self) -> tuple:
        if not self.exact:
            return self.numerators
        return tuple(_frozen(_to_fractions(n, d)) for n, d in zip(self.numerators, self.scale))

    @functools.cached_property
    def values(self) -> tuple:
        return tuple(_frozen(_vertex_table(c, build_pregasket(k))) for k, c in enumerate(self.corners))

    def energy(self, k: int | None = None) -> Number:
        k = self.level if k is None else k
        if not self.exact:
            return graph_energy(self.values[k], k)
        g = build_pregasket(k)
        u = _vertex_table(self.numerators[k], g)
        d = u[g.edges[:, 0]] - u[g.edges[:, 1]]
        return Fraction(int((d * d).sum()) * 5 ** k, 3 ** k * self.scale[k] ** 2)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def harmonic_extend(b: Sequence[Number], m: int, exact: bool | None = None) -> HarmonicTable:
    """Energy-minimising extension of the values ``b`` at (p1, p2, p3) to V_m."""
    if m < 0:
        raise ValueError(f"level must be >= 0, got {m}")
    if len(b) != 3:
        raise ValueError("boundary triple must have three values")
    exact = _resolve_exact(b, m, exact)
    if exact:
        fr = [Fraction(v) for v in b]
        den = math.lcm(*(f.denominator for f in fr))
        level = [np.array([[int(f * den) for f in fr]], dtype=object)]
        for _ in range(m):
            level.append(_refine_scaled(level[-1]))
        scale = tuple(den * 5 ** k for k in range(m + 1))
        boundary = tuple(fr)
    else:
        level = [np.asarray(b, dtype=float).reshape(1, 3)]
        for _ in range(m):
            level.append(refine_corner_values(level[-1]))
        scale = (1,) * (m + 1)
        boundary = tuple(float(v) for v in b)
    return HarmonicTable(boundary=boundary, level=m, exact=exact,
                         numerators=tuple(_frozen(a) for a in level), scale=scale)


def _energy_sums(h: HarmonicTable, k: int, rows=slice(None)) -> np.ndarray:
    """Per-cell sum of squared corner differences, in numerator units."""
    c = h.numerators[k][rows]
    a, b, cc = c[:, 0], c[:, 1], c[:, 2]
    return (a - b) ** 2 + (b - cc) ** 2 + (a - cc) ** 2


def energy_measure_cell(h: HarmonicTable, w: WordLike) -> Number:
    """Energy measure of the harmonic function ``h`` on the cell K_w."""
    w = as_word(w)
    k = len(w)
    if k > h.level:
        raise ValueError(f"cell {w!r} needs level {k}, table only reaches level {h.level}")
    i = word_index(w)
    s = _energy_sums(h, k, slice(i, i + 1))[0]
    if h.exact:
        return Fraction(int(s) * 5 ** k, 3 ** k * h.scale[k] ** 2)
    return float(s * (5.0 / 3.0) ** k)


def indicator_boundary(i: int) -> tuple[int, int, int]:
    """Boundary triple of 1_{p_i}, i in {1, 2, 3}."""
    return tuple(int(j == i) for j in (1, 2, 3))


def kusuoka_cell(w: WordLike) -> Number:
    """Kusuoka measure mu(K_w) = (mu_1 + mu_2 + mu_3)(K_w) / 3, total mass 2."""
    w = as_word(w)
    tables = [_indicator_extension(i, len(w)) for i in (1, 2, 3)]
    total = sum(energy_measure_cell(h, w) for h in tables)
    return total / 3


@functools.lru_cache(maxsize=32)
def _indicator_extension(i: int, m: int) -> HarmonicTable:
    return harmonic_extend(indicator_boundary(i), m)


@dataclass(frozen=True, eq=False)
class CellMeasureTable:
    """Cell masses of nu, mu_1, mu_2, mu_3 and mu on every level 0..level.

    Each entry of ``nu``/``mu``/``mu_i`` is an array indexed by word position
    at that level.  ``density`` is the level-``level`` vertex table of
    rho(v) = mu-mass / nu-mass of the cells containing v.
    """

    level: int
    exact: bool
    nu: tuple
    mu_i: tuple  # mu_i[i-1][k] for i in 1..3
    mu: tuple
    density: np.ndarray

    def mass(self, w: WordLike, which: str = "mu") -> Number:
        w = as_word(w)
        if len(w) > self.level:
            raise ValueError(f"cell {w!r} is finer than the table level {self.level}")
        if which == "nu":
            arr = self.nu
        elif which == "mu":
            arr = self.mu
        elif which in ("mu1", "mu2", "mu3"):
            arr = self.mu_i[int(which[-1]) - 1]
        else:
            raise ValueError(f"unknown measure {which!r}")
        return arr[len(w)][word_index(w)]

    def density_float(self) -> np.ndarray:
        return np.asarray(self.density, dtype=float)


def build_measure_table(m: int, exact: bool | None = None) -> CellMeasureTable:
    if exact is None:
        exact = m <= EXACT_LEVEL_LIMIT
    return _build_measure_table(m, bool(exact))


@functools.lru_cache(maxsize=16)
def _build_measure_table(m: int, exact: bool) -> CellMeasureTable:
    g = build_pregasket(m)
    tables = [harmonic_extend(indicator_boundary(i), m, exact=exact) for i in (1, 2, 3)]
    # indicator boundaries have D = 1, so level-k sums share the factor 1/15**k
    sums = [[_energy_sums(h, k) for k in range(m + 1)] for h in tables]
    total = [sums[0][k] + sums[1][k] + sums[2][k] for k in range(m + 1)]
    if exact:
        mu_i = tuple(tuple(_to_fractions(s[k], 15 ** k) for k in range(m + 1)) for s in sums)
        mu = tuple(_to_fractions(total[k], 3 * 15 ** k) for k in range(m + 1))
        nu = tuple(np.array([Fraction(1, 3 ** k)] * 3 ** k, dtype=object) for k in range(m + 1))
    else:
        # float tables hold the values themselves: factor (5/3)**k
        mu_i = tuple(tuple(s[k] * (5.0 / 3.0) ** k for k in range(m + 1)) for s in sums)
        mu = tuple(total[k] * (5.0 / 3.0) ** k / 3 for k in range(m + 1))
        nu = tuple(np.full(3 ** k, 3.0 ** -k) for k in range(m + 1))

    # rho(v) = mu(cells at v) / nu(cells at v) = 3**m * sum / (3 * 15**m * count)
    mask = g.vertex_cells >= 0
    safe = np.where(mask, g.vertex_cells, 0)
    top = total[m]
    count = mask.sum(axis=1)
    if exact:
        ssum = np.where(mask, top[safe], 0).sum(axis=1)
        density = np.array([Fraction(int(sv), 3 * 5 ** m * int(c)) for sv, c in zip(ssum, count)], dtype=object)
    else:
        ssum = np.where(mask, top[safe], 0.0).sum(axis=1)
        density = ssum * 5.0 ** m / (3.0 * count)
    for arr in (*nu, *mu, *mu_i[0], *mu_i[1], *mu_i[2], density):
        arr.setflags(write=False)
    return CellMeasureTable(level=m, exact=exact, nu=nu, mu_i=mu_i, mu=mu, density=density)


def kusuoka_vertex_density(v: int, m: int) -> Number:
    g = build_pregasket(m)
    g._check_vertex(v)
    return build_measure_table(m).density[v]


def write_measure_table(table: CellMeasureTable, out: TextIO, level: int | None = None) -> None:
    """CSV rows ``word,nu,mu,mu1,mu2,mu3`` (rationals as num/den)."""
    k = table.level if level is None else level

    def fmt(x) -> str:
        if isinstance(x, Fraction):
            return f"{x.numerator}/{x.denominator}"
        return repr(float(x))

    out.write("word,nu,mu,mu1,mu2,mu3\n")
    for idx in range(3 ** k):
        row = [table.nu[k][idx], table.mu[k][idx]] + [table.mu_i[i][k][idx] for i in range(3)]
        out.write(index_word(idx, k) + "," + ",".join(fmt(x) for x in row) + "\n")
