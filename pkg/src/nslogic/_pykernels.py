"""Pure-Python proof-bag kernels.

This is the fallback implementation of the hot inner loops; `_native`
(Cython) mirrors it operation for operation.  Both backends must produce
bitwise-identical results, so arithmetic order here is load-bearing:
weights multiply in ascending literal order and the model-count recursion
always branches on the first literal of the first clause.

Representation shared with the native backend:
  * literal  = fact_id * 2, or fact_id * 2 + 1 when negated
  * proof    = tuple of literals, strictly ascending
  * bag      = tuple of proofs: deduplicated, set-minimal (no proof is a
               superset of another), sorted by weight descending with ties
               broken lexicographically, truncated to k
  * probs    = float64 array indexed by fact id
  * group_ids= int32 array, -1 for facts outside any exclusion group
"""

from __future__ import annotations

BACKEND = "pure"


def proof_weight(proof, probs):
    w = 1.0
    for lit in proof:
        p = float(probs[lit >> 1])
        w *= (1.0 - p) if (lit & 1) else p
    return w


def _valid(proof, group_ids):
    # Rejects `x and not x` and two positive members of one exclusion group.
    prev = -2
    seen_groups = set()
    for lit in proof:
        if (prev >> 1) == (lit >> 1):
            return False
        prev = lit
        if not (lit & 1):
            g = int(group_ids[lit >> 1])
            if g >= 0:
                if g in seen_groups:
                    return False
                seen_groups.add(g)
    return True


def _union(pa, pb):
    out = []
    i = j = 0
    la, lb = len(pa), len(pb)
    while i < la and j < lb:
        x, y = pa[i], pb[j]
        if x == y:
            out.append(x)
            i += 1
            j += 1
        elif x < y:
            out.append(x)
            i += 1
        else:
            out.append(y)
            j += 1
    out.extend(pa[i:])
    out.extend(pb[j:])
    return tuple(out)


def normalize(candidates, k, probs, group_ids):
    """Dedup, drop invalid proofs, absorb supersets, sort, truncate to k.

    Absorption (dropping any proof that is a superset of another) never
    changes the disjunction's probability and never demotes a proof past a
    lighter one, since a superset's weight cannot exceed its subset's.
    """
    uniq = []
    seen = set()
    for pf in candidates:
        if pf in seen:
            continue
        seen.add(pf)
        if _valid(pf, group_ids):
            uniq.append(pf)
    if len(uniq) > 1:
        uniq.sort(key=len)
        kept = []
        kept_sets = []
        for pf in uniq:
            s = frozenset(pf)
            if any(ks <= s for ks in kept_sets):
                continue
            kept.append(pf)
            kept_sets.append(s)
        uniq = kept
    uniq.sort(key=lambda pf: (-proof_weight(pf, probs), pf))
    del uniq[k:]
    return tuple(uniq)


def combine(a, b, k, probs, group_ids):
    """Semiring product: pairwise unions, contradictions pruned, top-k."""
    if not a or not b:
        return ()
    cands = []
    for pa in a:
        for pb in b:
            cands.append(_union(pa, pb))
    return normalize(cands, k, probs, group_ids)


def merge(a, b, k, probs, group_ids):
    """Semiring sum: concatenation then normalization (top-k)."""
    if not a:
        return normalize(list(b), k, probs, group_ids)
    if not b:
        return normalize(list(a), k, probs, group_ids)
    return normalize(list(a) + list(b), k, probs, group_ids)


# ---------------------------------------------------------------------------
# Exact DNF probability by recursive decomposition.  Facts inside an
# exclusion group are expanded jointly one-hot: exactly one member of the
# group is true in any world, the residual branch covers members absent
# from the clause set.  Free facts branch true/false.  Memoization keys on
# the conditioned clause set.


def _cond_binary(clauses, fact, value):
    pos = fact << 1
    neg = pos | 1
    hit, miss = (neg, pos) if value else (pos, neg)
    out = []
    for c in clauses:
        if hit in c:
            continue  # clause falsified
        if miss in c:
            c = tuple(l for l in c if l != miss)
        out.append(c)
    return tuple(out)


def _cond_group(clauses, g, member, group_ids):
    # `member` true, every other present member of group g false; member=-1
    # means the group's true member is one absent from the clause set.
    out = []
    for c in clauses:
        dead = False
        kept = []
        for lit in c:
            f = lit >> 1
            if int(group_ids[f]) == g:
                true_lit = (f == member) != bool(lit & 1)
                if true_lit:
                    continue
                dead = True
                break
            kept.append(lit)
        if not dead:
            out.append(tuple(kept))
    return tuple(out)


def _wmc(clauses, probs, group_ids, memo):
    for c in clauses:
        if not c:
            return 1.0
    if not clauses:
        return 0.0
    val = memo.get(clauses)
    if val is not None:
        return val
    f = clauses[0][0] >> 1
    g = int(group_ids[f])
    if g >= 0:
        present = sorted({lit >> 1 for c in clauses for lit in c if int(group_ids[lit >> 1]) == g})
        total = 0.0
        psum = 0.0
        for m in present:
            pm = float(probs[m])
            psum += pm
            total += pm * _wmc(_cond_group(clauses, g, m, group_ids), probs, group_ids, memo)
        total += (1.0 - psum) * _wmc(_cond_group(clauses, g, -1, group_ids), probs, group_ids, memo)
        memo[clauses] = total
        return total
    p = float(probs[f])
    val = p * _wmc(_cond_binary(clauses, f, True), probs, group_ids, memo) + (1.0 - p) * _wmc(
        _cond_binary(clauses, f, False), probs, group_ids, memo
    )
    memo[clauses] = val
    return val


def wmc(bag, probs, group_ids):
    """Exact probability of the disjunction of the bag's proofs."""
    if not bag:
        return 0.0
    return _wmc(tuple(bag), probs, group_ids, {})


def wmc_gradient(bag, probs, group_ids):
    """Per support fact f: P(p_f := 1) - P(p_f := 0) (multilinearity).

    Temporarily mutates `probs` in place; restored before returning.
    """
    support = sorted({lit >> 1 for pf in bag for lit in pf})
    facts = []
    grads = []
    for f in support:
        saved = probs[f]
        probs[f] = 1.0
        hi = wmc(bag, probs, group_ids)
        probs[f] = 0.0
        lo = wmc(bag, probs, group_ids)
        probs[f] = saved
        facts.append(f)
        grads.append(hi - lo)
    return facts, grads
