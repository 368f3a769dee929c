"""Provenance semirings over weighted proof bags.

A derived fact's provenance is a bag of at most k proofs; a proof is a set
of input-fact literals jointly sufficient to derive the fact, weighted by
the product of its literal probabilities.  `otimes` composes provenance
across a rule body, `oplus` merges alternative derivations, and
`dnf_probability` converts a bag into an exact success probability
(weighted model count of the disjunction, honoring exclusion groups).
All values are immutable; the heavy lifting lives in the kernel backends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import impl


def pos_lit(fact: int) -> int:
    return fact << 1


def neg_lit(fact: int) -> int:
    return (fact << 1) | 1


@dataclass(frozen=True)
class InputLiteral:
    fact: int
    negated: bool = False

    @property
    def encoded(self) -> int:
        return (self.fact << 1) | int(self.negated)

    def __str__(self):
        return f"~{self.fact}" if self.negated else str(self.fact)


@dataclass(frozen=True)
class Proof:
    """A sorted set of literals; weight is relative to one assignment."""

    literals: tuple
    weight: float = 1.0

    def __str__(self):
        return "{" + ", ".join(str(l) for l in self.literals) + "}"


class FactSpace:
    """Grounded input facts: names, ids, and exclusion-group membership."""

    def __init__(self, names, group_ids=None):
        self.names = list(names)
        self.n = len(self.names)
        if group_ids is None:
            group_ids = [-1] * self.n
        self.group_ids = np.asarray(group_ids, dtype=np.int32)
        if self.group_ids.shape != (self.n,):
            raise ValueError("group_ids length must match fact count")
        groups: dict[int, list[int]] = {}
        for f, g in enumerate(self.group_ids):
            if g >= 0:
                groups.setdefault(int(g), []).append(f)
        self.groups = [tuple(groups[g]) for g in sorted(groups)]
        self.index = {name: f for f, name in enumerate(self.names)}

    def __len__(self):
        return self.n


class ProbAssignment:
    """Probability per grounded input fact, over one FactSpace.

    When `normalized` is set, every exclusion group's probabilities must
    sum to 1 within 1e-6 (softmax outputs); group semantics are always
    categorical regardless of the flag.
    """

    def __init__(self, space: FactSpace, values, normalized: bool = True):
        self.space = space
        self.values = np.asarray(values, dtype=np.float64).copy()
        if self.values.shape != (space.n,):
            raise ValueError(f"expected {space.n} probabilities, got {self.values.shape}")
        if np.any(~np.isfinite(self.values)):
            raise ValueError("probabilities must be finite")
        if np.any(self.values < -1e-12) or np.any(self.values > 1.0 + 1e-12):
            raise ValueError("probabilities must lie in [0, 1]")
        np.clip(self.values, 0.0, 1.0, out=self.values)
        self.normalized = normalized
        if normalized:
            for members in space.groups:
                s = float(self.values[list(members)].sum())
                if abs(s - 1.0) > 1e-6:
                    raise ValueError(f"exclusion group {members} sums to {s}, expected 1")

    def prob(self, fact: int) -> float:
        return float(self.values[fact])


class ProofBag:
    """At most k proofs, sorted by weight descending (ties lexicographic)."""

    __slots__ = ("raw",)

    def __init__(self, raw=()):
        self.raw = tuple(raw)

    @classmethod
    def from_literals(cls, proofs, k: int, env: ProbAssignment) -> "ProofBag":
        """Build a normalized bag from iterables of InputLiteral (or ints)."""
        cands = []
        for pf in proofs:
            lits = sorted(l.encoded if isinstance(l, InputLiteral) else int(l) for l in pf)
            cands.append(tuple(lits))
        return cls(impl.normalize(cands, k, env.values, env.space.group_ids))

    def proofs(self, env: ProbAssignment | None = None):
        out = []
        for pf in self.raw:
            lits = tuple(InputLiteral(l >> 1, bool(l & 1)) for l in pf)
            w = impl.proof_weight(pf, env.values) if env is not None else 1.0
            out.append(Proof(lits, w))
        return out

    def support(self):
        return sorted({l >> 1 for pf in self.raw for l in pf})

    def __len__(self):
        return len(self.raw)

    def __eq__(self, other):
        return isinstance(other, ProofBag) and self.raw == other.raw

    def __hash__(self):
        return hash(self.raw)

    def __repr__(self):
        return f"ProofBag({list(self.raw)!r})"


EMPTY_BAG = ProofBag()


def singleton(fact: int, negated: bool = False) -> ProofBag:
    return ProofBag(((((fact << 1) | int(negated)),),))

# The unit bag: one empty proof, weight 1 (a fact derived unconditionally).
UNIT_BAG = ProofBag(((),))


def _check_support(bag: ProofBag, env: ProbAssignment):
    for pf in bag.raw:
        for lit in pf:
            if (lit >> 1) >= env.space.n:
                raise ValueError(f"unassigned fact id {lit >> 1}")


def otimes(a: ProofBag, b: ProofBag, k: int, env: ProbAssignment) -> ProofBag:
    """Pairwise proof unions, contradictions and exclusion violations pruned,
    truncated to the top k by weight under `env`."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return ProofBag(impl.combine(a.raw, b.raw, k, env.values, env.space.group_ids))


def oplus(a: ProofBag, b: ProofBag, k: int, env: ProbAssignment) -> ProofBag:
    """Merge two bags: dedup by literal set, sort by weight, truncate to k."""
    if k < 1:
        raise ValueError("k must be at least 1")
    return ProofBag(impl.merge(a.raw, b.raw, k, env.values, env.space.group_ids))


def dnf_probability(bag: ProofBag, env: ProbAssignment) -> float:
    """Exact P(any proof holds) under `env`, via recursive decomposition on
    the bag's support.  Exclusion groups are expanded jointly one-hot."""
    _check_support(bag, env)
    return impl.wmc(bag.raw, env.values, env.space.group_ids)


def dnf_gradient(bag: ProofBag, env: ProbAssignment) -> dict:
    """Partial derivative of `dnf_probability` w.r.t. every support fact.

    By multilinearity this equals P(p_f = 1) - P(p_f = 0); facts outside
    the bag's support have derivative 0 and are omitted.
    """
    _check_support(bag, env)
    facts, grads = impl.wmc_gradient(bag.raw, env.values, env.space.group_ids)
    return dict(zip(facts, grads))
