"""Exact subset-lattice combinatorics for the tagged-tree construction.

Subsets of the ground set {1..n} are bitmasks (bit i-1 set means element i is
present).  Families map every nonempty subset to a value; values may be exact
scalars (Fraction/int), floats, or numpy arrays (nodal fields), since every
transform here is an integer-coefficient linear combination.

The forward transform derives the "joint" family v_A from the "union" family
u^A; its inverse and the two auxiliary identities are checked exactly in the
test suite.  The splitting law over ordered covering pairs drives the child
tags of the tagged backbone.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np


class SubsetError(ValueError):
    """Malformed subset arguments or an inadmissible family."""


class AdmissibilityError(SubsetError):
    """A derived joint value came out negative (inadmissible input family)."""


def mask_of(elements: Iterable[int]) -> int:
    m = 0
    for e in elements:
        if e < 1:
            raise SubsetError(f"ground-set elements are 1-based, got {e}")
        m |= 1 << (e - 1)
    return m


def elements_of(mask: int) -> Tuple[int, ...]:
    out = []
    i = 1
    while mask:
        if mask & 1:
            out.append(i)
        mask >>= 1
        i += 1
    return tuple(out)


def subsets_of(mask: int, *, nonempty: bool = False) -> List[int]:
    """All submasks of mask in increasing order."""
    subs = [0]
    for b in range(mask.bit_length()):
        bit = 1 << b
        if mask & bit:
            subs += [s | bit for s in subs]
    subs.sort()
    return subs[1:] if nonempty else subs


def popcount(mask: int) -> int:
    return bin(mask).count("1")


def alt_subset_sum(a_mask: int, c_mask: int) -> int:
    """Alternating sum of (-1)^|B| over a_mask <= B <= c_mask.

    Telescopes to (-1)^|C| when A = C and to 0 otherwise; computed by direct
    enumeration so it can serve as its own check.
    """
    if a_mask & ~c_mask:
        raise SubsetError("A must be a subset of C")
    free = c_mask & ~a_mask
    total = 0
    for extra in subsets_of(free):
        total += (-1) ** popcount(a_mask | extra)
    return total


def product_expansion(weights: Sequence) -> tuple:
    """Both sides of prod(1 - w_i) = 1 + sum_{nonempty C} (-1)^|C| prod_{C} w_i."""
    lhs = 1
    for w in weights:
        lhs = lhs * (1 - w)
    rhs = 1
    n = len(weights)
    for c_mask in subsets_of((1 << n) - 1, nonempty=True):
        term = 1
        for i in elements_of(c_mask):
            term = term * weights[i - 1]
        rhs = rhs + (-1) ** popcount(c_mask) * term
    return lhs, rhs


def c_sequence(n: int, a) -> list:
    """c_1 = a and c_k = sum_j C(k,j) c_j c_{k-j}; exact for rational a."""
    if n < 1:
        raise SubsetError(f"need n >= 1, got {n}")
    c = [None, a]
    for k in range(2, n + 1):
        c.append(sum(comb(k, j) * c[j] * c[k - j] for j in range(1, k)))
    return c[1:]


def c_closed_form(k: int, a) -> Fraction:
    """Solution of the c-recurrence: c_k = a^k (2k-2)! / (k-1)!."""
    from math import factorial

    return a**k * Fraction(factorial(2 * k - 2), factorial(k - 1))


def recurrence_check(n: int, a) -> bool:
    """Verify c_|A| = sum over proper nonempty B < A of c_|B| c_|A\\B| exactly."""
    if n < 2:
        raise SubsetError(f"need n >= 2, got {n}")
    c = [None] + c_sequence(n, a)
    for size in range(2, n + 1):
        a_mask = (1 << size) - 1
        total = 0
        for b_mask in subsets_of(a_mask, nonempty=True):
            if b_mask == a_mask:
                continue
            total += c[popcount(b_mask)] * c[size - popcount(b_mask)]
        if total != c[size]:
            return False
    return True


def partition_regroup_coefficients(n: int, a) -> list:
    """Group the partition sum by block count.

    Returns [S_1, ..., S_n] with S_m = sum over partitions of {1..n} into m
    blocks of prod c_|block|; the coarsest-partition coefficient S_1 is c_n
    itself, so choosing a with c_n = 1 normalizes the leading term.
    """
    c = [None] + c_sequence(n, a)
    sums = [0] * (n + 1)
    full = (1 << n) - 1

    def rec(remaining: int, blocks: int, prod):
        if remaining == 0:
            sums[blocks] += prod
            return
        low = remaining & (-remaining)
        rest = remaining & ~low
        for extra in subsets_of(rest):
            block = low | extra
            rec(remaining & ~block, blocks + 1, prod * c[popcount(block)])

    rec(full, 0, 1)
    return sums[1:]


# ----------------------------------------------------------------------------
# Families over the subset lattice


@dataclass
class SubsetFamily:
    """Map from every nonempty subset of {1..n} to a value."""

    n: int
    entries: Dict[int, object]

    def __post_init__(self):
        full = (1 << self.n) - 1
        expected = set(subsets_of(full, nonempty=True))
        if set(self.entries.keys()) != expected:
            raise SubsetError(
                f"family must cover exactly the {len(expected)} nonempty subsets"
            )

    @property
    def full_mask(self) -> int:
        return (1 << self.n) - 1

    def __getitem__(self, mask: int):
        return self.entries[mask]

    def masks(self) -> List[int]:
        return subsets_of(self.full_mask, nonempty=True)

    @staticmethod
    def build(n: int, fn) -> "SubsetFamily":
        full = (1 << n) - 1
        return SubsetFamily(n, {m: fn(m) for m in subsets_of(full, nonempty=True)})


def subset_key(mask: int) -> str:
    """JSON key for a subset: its sorted elements, comma-joined."""
    return ",".join(str(e) for e in elements_of(mask))


def family_to_jsonable(fam: "SubsetFamily", value_fn=None) -> dict:
    """{sorted-subset -> value} mapping ready for json.dumps."""
    value_fn = value_fn or (lambda v: v)
    return {subset_key(m): value_fn(fam[m]) for m in fam.masks()}


def _is_negative(value, tol: float) -> bool:
    if isinstance(value, np.ndarray):
        return bool(np.min(value) < tol)
    return value < tol


def v_from_u(u: SubsetFamily, *, check: bool = True, tol: float = -1e-12) -> SubsetFamily:
    """Joint family v_A = sum over N\\A <= B <= N, B nonempty, of signed u^B.

    The sign of the B-term is (-1)^(|A|+|B|+n+1).  When check is set, any
    derived value below tol raises AdmissibilityError naming the subset.
    """
    n = u.n
    full = u.full_mask

    def one(a_mask: int):
        comp = full & ~a_mask
        ka = popcount(a_mask)
        total = None
        for extra in subsets_of(full & ~comp):
            b_mask = comp | extra
            if b_mask == 0:
                continue
            sgn = (-1) ** (ka + popcount(b_mask) + n + 1)
            term = sgn * u[b_mask]
            total = term if total is None else total + term
        return total

    fam = SubsetFamily.build(n, one)
    if check:
        for m in fam.masks():
            if _is_negative(fam[m], tol):
                val = fam[m]
                low = float(np.min(val)) if isinstance(val, np.ndarray) else val
                raise AdmissibilityError(
                    f"derived joint value for subset {elements_of(m)} is negative "
                    f"(min {low})"
                )
    return fam


def u_from_v(v: SubsetFamily) -> SubsetFamily:
    """Inverse transform: u^A = sum over B <= N with A & B nonempty of v_B."""
    full = v.full_mask

    def one(a_mask: int):
        total = None
        for b_mask in subsets_of(full, nonempty=True):
            if b_mask & a_mask:
                total = v[b_mask] if total is None else total + v[b_mask]
        return total

    return SubsetFamily.build(v.n, one)


def upper_family_from_u(u: SubsetFamily) -> SubsetFamily:
    """Inclusion-exclusion aggregate: v^A = sum over nonempty B <= A of (-1)^(|B|+1) u^B."""

    def one(a_mask: int):
        total = None
        for b_mask in subsets_of(a_mask, nonempty=True):
            term = (-1) ** (popcount(b_mask) + 1) * u[b_mask]
            total = term if total is None else total + term
        return total

    return SubsetFamily.build(u.n, one)


def upper_family_from_v(v: SubsetFamily) -> SubsetFamily:
    """Same aggregate from the joint family: v^A = sum over A <= B <= N of v_B."""
    full = v.full_mask

    def one(a_mask: int):
        total = None
        for b_mask in subsets_of(full):
            if (b_mask & a_mask) == a_mask and b_mask != 0:
                total = v[b_mask] if total is None else total + v[b_mask]
        return total

    return SubsetFamily.build(v.n, one)


def upper_relations_report(u: SubsetFamily) -> dict:
    """Cross-check all four aggregate identities; exact for exact inputs.

    Returns the two aggregate families plus booleans for each identity:
      (i)  v^A from u equals v^A from v;
      (ii) v_A = sum over A <= B of (-1)^(|A|+|B|) v^B;
      (iii) u^A = sum over nonempty B <= A of (-1)^(|B|+1) v_B-aggregate.
    """
    v = v_from_u(u, check=False)
    up_u = upper_family_from_u(u)
    up_v = upper_family_from_v(v)
    full = u.full_mask

    def eq(a, b) -> bool:
        if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
            return bool(np.array_equal(np.asarray(a, dtype=float), np.asarray(b, dtype=float)))
        return a == b

    ok_same = all(eq(up_u[m], up_v[m]) for m in u.masks())
    ok_v = True
    for a_mask in u.masks():
        ka = popcount(a_mask)
        total = None
        for b_mask in u.masks():
            if (b_mask & a_mask) == a_mask:
                term = (-1) ** (ka + popcount(b_mask)) * up_u[b_mask]
                total = term if total is None else total + term
        ok_v = ok_v and eq(total, v[a_mask])
    ok_u = True
    for a_mask in u.masks():
        total = None
        for b_mask in subsets_of(a_mask, nonempty=True):
            term = (-1) ** (popcount(b_mask) + 1) * up_u[b_mask]
            total = term if total is None else total + term
        ok_u = ok_u and eq(total, u[a_mask])
    return {
        "upper_from_u": up_u,
        "upper_from_v": up_v,
        "routes_agree": ok_same,
        "joint_from_upper": ok_v,
        "union_from_upper": ok_u,
    }


# ----------------------------------------------------------------------------
# Covers, the splitting law, and the truncated expansion


def covers(a_mask: int, m: int) -> List[Tuple[int, ...]]:
    """Ordered m-tuples of nonempty subsets whose union is a_mask."""
    if a_mask == 0:
        raise SubsetError("cover target must be nonempty")
    if m < 1:
        raise SubsetError(f"need m >= 1, got {m}")
    parts = subsets_of(a_mask, nonempty=True)
    out: List[Tuple[int, ...]] = []

    def rec(i: int, chosen: tuple, union: int):
        if i == m:
            if union == a_mask:
                out.append(chosen)
            return
        # Remaining slots must still be able to cover the deficit.
        for p in parts:
            rec(i + 1, chosen + (p,), union | p)

    rec(0, (), 0)
    return out


def cover_count_formula(a_mask: int, m: int) -> int:
    """Inclusion-exclusion count of covers: sum (-1)^|A\\B| (2^|B|-1)^m."""
    ka = popcount(a_mask)
    total = 0
    for b_mask in subsets_of(a_mask):
        kb = popcount(b_mask)
        total += (-1) ** (ka - kb) * (2**kb - 1) ** m
    return total


def ordered_pair_covers(a_mask: int) -> List[Tuple[int, int]]:
    """Ordered pairs (B, C) of nonempty subsets with B | C == a_mask."""
    return [tuple(t) for t in covers(a_mask, 2)]


def split_law(values: Dict[int, float], a_mask: int) -> Dict[Tuple[int, int], float]:
    """Splitting probabilities over ordered covering pairs of a_mask.

    values maps each nonempty subset mask to its (nonnegative) joint value at
    the split point; the probability of (B, C) is proportional to v_B * v_C.
    A zero normalizer is an error the caller handles by retrying later.
    """
    pairs = ordered_pair_covers(a_mask)
    weights = []
    for b, c in pairs:
        vb, vc = values[b], values[c]
        if vb < 0 or vc < 0:
            raise AdmissibilityError(
                f"negative joint value at split over {elements_of(a_mask)}"
            )
        weights.append(vb * vc)
    total = float(sum(weights))
    if total <= 0.0:
        raise ZeroDivisionError(
            f"splitting law degenerate over {elements_of(a_mask)}: all weights zero"
        )
    return {p: w / total for p, w in zip(pairs, weights)}


def cover_product_sum(values: Dict[int, float], a_mask: int, m: int) -> float:
    """Sum over ordered m-covers of a_mask of the product of entry values.

    Computed by inclusion-exclusion on the union,
      sum_B (-1)^(|A|-|B|) (sum of values over nonempty C <= B)^m,
    which matches direct enumeration (tested) and stays polynomial in m.
    """
    ka = popcount(a_mask)
    total = 0.0
    for b_mask in subsets_of(a_mask):
        s = sum(float(values[c]) for c in subsets_of(b_mask, nonempty=True))
        total += (-1.0) ** (ka - popcount(b_mask)) * s**m
    return total


def expansion_check(
    u: SubsetFamily, atom_masses: Sequence[float], m_max: int
) -> tuple:
    """Alternating-sum martingale vs its cover-sum expansion, truncated at m_max.

    The family holds scalars; the atomic measure enters through its total mass
    T, giving pairings <X, f> = f * T.  Returns (alternating side, truncated
    expansion side); the two converge as m_max grows.
    """
    v = v_from_u(u)
    t = float(sum(atom_masses))
    full = u.full_mask
    import math

    lhs = 1.0  # B = empty set contributes exp(0) with sign +1
    for b_mask in u.masks():
        lhs += (-1) ** popcount(b_mask) * math.exp(-float(u[b_mask]) * t)
    scaled = {m: float(v[m]) * t for m in v.masks()}
    rhs = 0.0
    for m in range(1, m_max + 1):
        rhs += cover_product_sum(scaled, full, m) / math.factorial(m)
    rhs *= math.exp(-float(u[full]) * t)
    return lhs, rhs
