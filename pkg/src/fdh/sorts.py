"""Order-sorted sort lattice for the message algebra.

Nine fixed sorts.  G and E are the group-element and exponent sorts; PubG,
FrE and VarE are their public/fresh/unknown refinements.  Temporal is the
sort of timepoint variables and is incomparable to everything else.
"""

from __future__ import annotations

import enum


class Sort(enum.Enum):
    MSG = "Msg"
    FRESH = "Fresh"
    PUBLIC = "Public"
    G = "G"
    E = "E"
    PUBG = "PubG"
    FRE = "FrE"
    VARE = "VarE"
    TEMPORAL = "Temporal"

    def __repr__(self):
        return f"Sort.{self.name}"


# direct subsort edges; the order is their reflexive-transitive closure
_PARENT = {
    Sort.FRESH: Sort.MSG,
    Sort.PUBLIC: Sort.MSG,
    Sort.G: Sort.MSG,
    Sort.E: Sort.MSG,
    Sort.PUBG: Sort.G,
    Sort.FRE: Sort.E,
    Sort.VARE: Sort.E,
}


def sort_leq(a: Sort, b: Sort) -> bool:
    """True iff a is a subsort of b (reflexively)."""
    while True:
        if a == b:
            return True
        if a not in _PARENT:
            return False
        a = _PARENT[a]


def sort_of_name(text: str) -> Sort:
    for s in Sort:
        if s.value == text:
            return s
    raise ValueError(f"unknown sort: {text!r}")


DH_SORTS = (Sort.G, Sort.E, Sort.PUBG, Sort.FRE, Sort.VARE)


def is_dh_sort(s: Sort) -> bool:
    return s in DH_SORTS


NAME_SORTS = (Sort.FRESH, Sort.PUBLIC, Sort.PUBG, Sort.FRE)
