"""Ordered equality patterns over state means.

A hypothesis about one gene says which states share a mean and how the
distinct means are ordered: formally an ordered set partition of the
states 1..S, written e.g. ``mu1=mu3 < mu2=mu4``.  The number of such
patterns is the ordered Bell number (1, 3, 13, 75, 541 for S = 1..5).

Patterns are enumerated in a fixed canonical order: ascending number of
groups, then lexicographic on the per-state rank vector.  Index 0 is
always the null pattern (all means equal).  Downstream results should be
keyed by group structure, not by raw index, when compared across tools.
"""

from dataclasses import dataclass, replace
from functools import lru_cache
from itertools import product

import numpy as np

from .errors import ValidationError

MAX_STATES = 7


@dataclass(frozen=True)
class Hypothesis:
    """One ordered equality pattern.

    Attributes
    ----------
    index : int
        Position in the canonical enumeration for this number of states.
    groups : tuple of tuple of int
        Groups of 1-based state labels, ordered by ascending mean; states
        within a group are sorted ascending.
    """

    index: int
    groups: tuple

    @property
    def num_states(self):
        return sum(len(g) for g in self.groups)

    @property
    def num_groups(self):
        return len(self.groups)

    @property
    def rank_vector(self):
        """1-based group rank of each state, state-major."""
        rank = [0] * self.num_states
        for m, grp in enumerate(self.groups, start=1):
            for s in grp:
                rank[s - 1] = m
        return tuple(rank)

    def same_group(self, a, b):
        """True when states a and b (1-based) share a mean under this pattern."""
        rv = self.rank_vector
        return rv[a - 1] == rv[b - 1]

    def pattern(self):
        """Human-readable inequality string, e.g. ``mu1=mu3 < mu2=mu4``."""
        return " < ".join("=".join(f"mu{s}" for s in grp) for grp in self.groups)


def _groups_from_rank_vector(rank, index):
    num_groups = max(rank)
    groups = tuple(
        tuple(s for s in range(1, len(rank) + 1) if rank[s - 1] == m)
        for m in range(1, num_groups + 1)
    )
    return Hypothesis(index=index, groups=groups)


@lru_cache(maxsize=None)
def _enumeration(num_states):
    hypotheses = []
    for num_groups in range(1, num_states + 1):
        for rank in product(range(1, num_groups + 1), repeat=num_states):
            if len(set(rank)) == num_groups:
                hypotheses.append(_groups_from_rank_vector(rank, len(hypotheses)))
    return tuple(hypotheses)


@lru_cache(maxsize=None)
def _rank_index(num_states):
    return {h.rank_vector: h for h in _enumeration(num_states)}


def enumerate_hypotheses(num_states):
    """All ordered equality patterns over ``num_states`` states, canonical order.

    Returns a list whose element 0 is the null pattern.  Raises
    ValidationError for num_states outside 1..MAX_STATES (the count grows
    as the ordered Bell numbers and is already 541 at five states).
    """
    if not isinstance(num_states, (int, np.integer)) or isinstance(num_states, bool):
        raise ValidationError(f"num_states must be an integer, got {num_states!r}")
    if not 1 <= num_states <= MAX_STATES:
        raise ValidationError(
            f"num_states must be in [1, {MAX_STATES}], got {num_states}"
        )
    return list(_enumeration(num_states))


def hypothesis_from_means(means, rel_tolerance=0.0):
    """Map a vector of state means to the pattern it satisfies.

    Two means a, b count as tied when |a - b| <= rel_tolerance * max(a, b).
    Ties are closed transitively; if the resulting tie components are not
    internally consistent (some pair inside a component differs by more
    than the tolerance) the tie structure is ambiguous and an error is
    raised.  With the default tolerance 0 only exact equality ties.
    """
    means = np.asarray(means, dtype=float)
    if means.ndim != 1 or means.size < 1:
        raise ValidationError("means must be a non-empty 1-D vector")
    if not np.all(np.isfinite(means)) or np.any(means <= 0):
        raise ValidationError("means must be strictly positive and finite")
    if rel_tolerance < 0:
        raise ValidationError("rel_tolerance must be >= 0")
    S = means.size
    if S > MAX_STATES:
        raise ValidationError(f"at most {MAX_STATES} states supported, got {S}")

    def close(a, b):
        return abs(means[a] - means[b]) <= rel_tolerance * max(means[a], means[b])

    # Transitive closure of pairwise ties via union-find.
    parent = list(range(S))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(S):
        for j in range(i + 1, S):
            if close(i, j):
                parent[find(i)] = find(j)

    roots = [find(i) for i in range(S)]
    components = {}
    for i, r in enumerate(roots):
        components.setdefault(r, []).append(i)
    for members in components.values():
        for i in members:
            for j in members:
                if i < j and not close(i, j):
                    raise ValidationError(
                        "ambiguous tie structure: states "
                        f"{i + 1} and {j + 1} are linked through intermediates "
                        "but differ by more than the tolerance"
                    )

    ordered = sorted(components.values(), key=lambda m: means[m].mean())
    rank = [0] * S
    for m, members in enumerate(ordered, start=1):
        for i in members:
            rank[i] = m
    try:
        return _rank_index(S)[tuple(rank)]
    except KeyError:  # pragma: no cover - enumeration covers every rank vector
        raise ValidationError(f"no pattern for rank vector {tuple(rank)}")


@dataclass(frozen=True)
class HypothesisGroup:
    """A labelled set of hypothesis indices treated as one decision unit."""

    label: str
    members: tuple
    description: str = ""


def collapse_by_predicate(hypotheses, predicates, residual_label="residual"):
    """Partition hypotheses into labelled groups by structural predicates.

    Parameters
    ----------
    hypotheses : sequence of Hypothesis
    predicates : sequence of (label, callable) pairs
        Each callable takes a Hypothesis and returns a bool.  A hypothesis
        matching two predicates is an error (the groups must be disjoint).
        Hypotheses matching no predicate land in a residual group.

    Returns
    -------
    list of HypothesisGroup, in predicate order, residual last.
    """
    labels = [label for label, _ in predicates]
    if len(set(labels)) != len(labels) or residual_label in labels:
        raise ValidationError("group labels must be distinct")
    members = {label: [] for label in labels}
    residual = []
    for h in hypotheses:
        hits = [label for label, pred in predicates if pred(h)]
        if len(hits) > 1:
            raise ValidationError(
                f"overlapping groups: hypothesis {h.index} ({h.pattern()}) "
                f"matches {hits}"
            )
        if hits:
            members[hits[0]].append(h.index)
        else:
            residual.append(h.index)
    groups = [HypothesisGroup(label, tuple(members[label])) for label in labels]
    groups.append(HypothesisGroup(residual_label, tuple(residual)))
    return groups


def standard_grouping(hypotheses):
    """The built-in four-state collapse used by the CLI's standard scheme.

    C0: null.  C1: the two paired-shift patterns where states {1,3} and
    {2,4} move together in opposite directions.  C2: states 3 and 4 share
    a mean while 1 and 2 do not.  C3: states 1 and 2 share a mean while
    3 and 4 do not.  Everything else is residual.
    """
    if any(h.num_states != 4 for h in hypotheses):
        raise ValidationError("standard grouping is defined for four states")

    def c1(h):
        return h.num_groups == 2 and set(map(frozenset, h.groups)) == {
            frozenset({1, 3}),
            frozenset({2, 4}),
        }

    predicates = [
        ("C0", lambda h: h.num_groups == 1),
        ("C1", c1),
        ("C2", lambda h: h.same_group(3, 4) and not h.same_group(1, 2)),
        ("C3", lambda h: h.same_group(1, 2) and not h.same_group(3, 4)),
    ]
    groups = collapse_by_predicate(hypotheses, predicates)
    descriptions = {
        "C0": "all state means equal",
        "C1": "states 1,3 vs 2,4 shifted as pairs",
        "C2": "states 3,4 share a mean; 1,2 differ",
        "C3": "states 1,2 share a mean; 3,4 differ",
        "residual": "no structural label",
    }
    return [replace(g, description=descriptions[g.label]) for g in groups]
