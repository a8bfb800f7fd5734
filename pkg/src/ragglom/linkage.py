"""Linkage criteria as exact, combinable interface statistics.

An interface between two clusters is summarised by an :class:`AffinityStat`.
For MEAN linkage it holds the affinity sum and the number of voxel-pair
contributions; for MAX it holds the maximum affinity (``count`` is carried so
the serialized layout is the same for both kinds).

Affinities are quantized once, at ingestion, to integers in ``[0, 1_000_000]``
(``FixedAffinity``). From then on every operation is exact integer or rational
arithmetic: floating-point addition is not associative, and chunked runs
combine partial interfaces in a different order than a global run does.

The same :func:`combine` serves two purposes:

- parallel edges meeting when two clusters merge, and
- partial interfaces from neighbouring chunks being stitched together.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from enum import IntEnum
from fractions import Fraction

import numpy as np

from ragglom.errors import InputFormatError

SCALE = 1_000_000
MAX_DECIMALS = 6

# Widths of the serialized stat: 16-byte sum, 8-byte count.
SUM_LIMIT = 1 << 128
COUNT_LIMIT = 1 << 64
_MASK64 = (1 << 64) - 1

FixedAffinity = int


class LinkageKind(IntEnum):
    """Linkage criterion tag; the integer value is the header byte."""

    MEAN = 0
    MAX = 1

    @classmethod
    def parse(cls, value: "str | int | LinkageKind") -> "LinkageKind":
        """Accept ``"mean"``/``"max"`` (any case), the header byte, or a member."""
        if isinstance(value, LinkageKind):
            return value
        if isinstance(value, int):
            try:
                return cls(value)
            except ValueError:
                raise InputFormatError(f"unknown linkage byte {value!r}") from None
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise InputFormatError(
                f"unknown linkage {value!r}; expected one of {[k.name.lower() for k in cls]}"
            ) from None


class Ordering(IntEnum):
    LT = -1
    EQ = 0
    GT = 1


@dataclass(frozen=True, slots=True)
class AffinityStat:
    """Exact statistic of one cluster-pair interface.

    Attributes:
        sum: MEAN: sum of FixedAffinity over contributions. MAX: the maximum.
        count: number of voxel-pair contributions, always >= 1.
    """

    sum: int
    count: int


def check_fixed(a: int) -> FixedAffinity:
    if not 0 <= a <= SCALE:
        raise InputFormatError(f"fixed-point affinity {a} outside [0, {SCALE}]")
    return a


def make_stat(kind: LinkageKind, a: FixedAffinity, n: int) -> AffinityStat:
    """Ingest ``n`` contributions of affinity ``a`` into an interface statistic."""
    check_fixed(a)
    if n < 1:
        raise InputFormatError(f"contact count must be >= 1, got {n}")
    if kind is LinkageKind.MEAN:
        return AffinityStat(a * n, n)
    return AffinityStat(a, n)


def combine(kind: LinkageKind, x: AffinityStat, y: AffinityStat) -> AffinityStat:
    if kind is LinkageKind.MEAN:
        return AffinityStat(x.sum + y.sum, x.count + y.count)
    return AffinityStat(max(x.sum, y.sum), x.count + y.count)


def compare(kind: LinkageKind, x: AffinityStat, y: AffinityStat) -> Ordering:
    """Order of the represented affinity values (exact, no division)."""
    if kind is LinkageKind.MEAN:
        left, right = x.sum * y.count, y.sum * x.count
    else:
        left, right = x.sum, y.sum
    if left < right:
        return Ordering.LT
    if left > right:
        return Ordering.GT
    return Ordering.EQ


def exact_value(kind: LinkageKind, x: AffinityStat) -> Fraction | int:
    """The affinity as an exact number, suitable as a sort/heap key."""
    if kind is LinkageKind.MEAN:
        return Fraction(x.sum, x.count)
    return x.sum


def value_rounded(kind: LinkageKind, x: AffinityStat) -> FixedAffinity:
    """Floor of the affinity in fixed point. For display and export only."""
    if kind is LinkageKind.MEAN:
        return x.sum // x.count
    return x.sum


def at_least(kind: LinkageKind, x: AffinityStat, threshold: FixedAffinity) -> bool:
    """``value(x) >= threshold`` without leaving integer arithmetic."""
    if kind is LinkageKind.MEAN:
        return x.sum >= threshold * x.count
    return x.sum >= threshold


def check_reducibility(
    kind: LinkageKind, a_ij: AffinityStat, a_ik: AffinityStat, a_jk: AffinityStat
) -> bool:
    """No-reversal check for one cluster triple.

    If ``A(I,J) >= max(A(I,K), A(J,K))`` then merging I and J must not produce
    an interface to K above that maximum. Vacuously true when the antecedent
    fails.
    """
    upper = a_ik if compare(kind, a_ik, a_jk) >= Ordering.EQ else a_jk
    if compare(kind, a_ij, upper) is Ordering.LT:
        return True
    merged = combine(kind, a_ik, a_jk)
    return compare(kind, merged, upper) <= Ordering.EQ


def parse_affinity(text: str | int | Decimal) -> FixedAffinity:
    """Convert a decimal in [0, 1] to FixedAffinity by exact scaling.

    More than six decimal places is refused rather than rounded, e.g.
    ``"0.3"`` -> ``300000`` but ``"0.1234567"`` raises InputFormatError.
    """
    try:
        d = Decimal(str(text).strip())
    except InvalidOperation:
        raise InputFormatError(f"not a decimal affinity: {text!r}") from None
    if not d.is_finite():
        raise InputFormatError(f"affinity must be finite: {text!r}")
    exponent = d.normalize().as_tuple().exponent
    if isinstance(exponent, int) and exponent < -MAX_DECIMALS:
        raise InputFormatError(
            f"affinity {text!r} has more than {MAX_DECIMALS} decimal places"
        )
    if d < 0 or d > 1:
        raise InputFormatError(f"affinity {text!r} outside [0, 1]")
    return int(d * SCALE)


def parse_threshold(text: str | int | Decimal) -> FixedAffinity:
    try:
        return parse_affinity(text)
    except InputFormatError as e:
        raise InputFormatError(f"threshold: {e}") from None


def format_affinity(a: FixedAffinity) -> str:
    """Inverse of :func:`parse_affinity` (shortest exact decimal)."""
    whole, frac = divmod(a, SCALE)
    if frac == 0:
        return f"{whole}.0"
    return f"{whole}.{frac:06d}".rstrip("0")


def pack_stats(stats: list[AffinityStat]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split stats into little-endian ``(sum_lo, sum_hi, count)`` uint64 columns."""
    sums = [s.sum for s in stats]
    counts = [s.count for s in stats]
    if sums and (max(sums) >= SUM_LIMIT or min(sums) < 0):
        raise InputFormatError("stat sum does not fit in 16 unsigned bytes")
    if counts and (max(counts) >= COUNT_LIMIT or min(counts) < 1):
        raise InputFormatError("stat count outside [1, 2^64)")
    lo = np.fromiter((s & _MASK64 for s in sums), dtype="<u8", count=len(sums))
    hi = np.fromiter((s >> 64 for s in sums), dtype="<u8", count=len(sums))
    return lo, hi, np.asarray(counts, dtype="<u8")


def unpack_stats(sum_lo: np.ndarray, sum_hi: np.ndarray, count: np.ndarray) -> list[AffinityStat]:
    """Inverse of :func:`pack_stats`."""
    return [
        AffinityStat(lo + (hi << 64), c)
        for lo, hi, c in zip(sum_lo.tolist(), sum_hi.tolist(), count.tolist())
    ]
