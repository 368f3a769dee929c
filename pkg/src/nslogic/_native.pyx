# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled proof-bag kernels: the Cython twin of `_pykernels`.

Semantics, arithmetic order, and tie-breaking must match the pure backend
bit for bit; any change here needs the mirror change there.  Proofs cross
the boundary as tuples of literal ints and are unpacked into flat C
arrays internally.
"""

from cpython.bytes cimport PyBytes_AS_STRING, PyBytes_FromStringAndSize
from libc.stdlib cimport free, malloc

BACKEND = "native"


cdef inline double _lit_weight(long long lit, const double* probs) noexcept:
    cdef double p = probs[lit >> 1]
    return 1.0 - p if (lit & 1) else p


def proof_weight(proof, const double[::1] probs):
    cdef double w = 1.0
    cdef double p
    cdef long long lit
    for lit in proof:
        p = probs[lit >> 1]
        if lit & 1:
            w *= 1.0 - p
        else:
            w *= p
    return w


cdef int _unpack(bags, long long** lits_out, Py_ssize_t** offs_out) except -1:
    """Flatten a sequence of literal tuples into one lits array + offsets."""
    cdef Py_ssize_t total = 0, n = len(bags), i, j
    for p in bags:
        total += len(p)
    cdef long long* lits = <long long*> malloc(max(total, 1) * sizeof(long long))
    cdef Py_ssize_t* offs = <Py_ssize_t*> malloc((n + 1) * sizeof(Py_ssize_t))
    if lits == NULL or offs == NULL:
        free(lits)
        free(offs)
        raise MemoryError()
    j = 0
    for i in range(n):
        offs[i] = j
        for lit in bags[i]:
            lits[j] = lit
            j += 1
    offs[n] = j
    lits_out[0] = lits
    offs_out[0] = offs
    return 0


cdef bint _valid_c(const long long* lits, Py_ssize_t n, const int[::1] gids) noexcept:
    cdef Py_ssize_t i, j, ng = 0
    cdef long long prev = -2, lit
    cdef int g
    cdef int seen[64]
    for i in range(n):
        lit = lits[i]
        if (prev >> 1) == (lit >> 1):
            return False
        prev = lit
        if not (lit & 1):
            g = gids[lit >> 1]
            if g >= 0:
                for j in range(ng):
                    if seen[j] == g:
                        return False
                if ng < 64:
                    seen[ng] = g
                    ng += 1
    return True


cdef bint _valid_tuple(pf, const int[::1] gids) except? 0:
    cdef Py_ssize_t i, j, ng = 0
    cdef long long prev = -2, lit
    cdef int g
    cdef int seen[64]
    for x in pf:
        lit = x
        if (prev >> 1) == (lit >> 1):
            return False
        prev = lit
        if not (lit & 1):
            g = gids[lit >> 1]
            if g >= 0:
                for j in range(ng):
                    if seen[j] == g:
                        return False
                if ng < 64:
                    seen[ng] = g
                    ng += 1
    return True


cdef _finish(list uniq, Py_ssize_t k, const double[::1] probs):
    """Absorption plus deterministic ordering, shared by all bag builders.
    Candidates must already be deduplicated and validity-checked."""
    cdef Py_ssize_t i
    if len(uniq) > 1:
        uniq.sort(key=len)
        kept = []
        kept_sets = []
        for pf in uniq:
            s = frozenset(pf)
            absorbed = False
            for ks in kept_sets:
                if ks <= s:
                    absorbed = True
                    break
            if not absorbed:
                kept.append(pf)
                kept_sets.append(s)
        uniq = kept
    decorated = [(-proof_weight(pf, probs), pf) for pf in uniq]
    decorated.sort()
    return tuple(pf for _, pf in decorated[:k])


def normalize(candidates, Py_ssize_t k, const double[::1] probs, const int[::1] gids):
    """Dedup, drop invalid proofs, absorb supersets, sort, truncate to k."""
    uniq = []
    seen = set()
    for pf in candidates:
        if pf in seen:
            continue
        seen.add(pf)
        if _valid_tuple(pf, gids):
            uniq.append(pf)
    return _finish(uniq, k, probs)


def combine(a, b, Py_ssize_t k, const double[::1] probs, const int[::1] gids):
    """Semiring product: pairwise unions, contradictions pruned, top-k."""
    if not a or not b:
        return ()
    cdef long long* alits
    cdef Py_ssize_t* aoffs
    cdef long long* blits
    cdef Py_ssize_t* boffs
    _unpack(a, &alits, &aoffs)
    try:
        _unpack(b, &blits, &boffs)
    except BaseException:
        free(alits)
        free(aoffs)
        raise
    cdef Py_ssize_t na = len(a), nb = len(b)
    cdef Py_ssize_t maxlen = aoffs[na] + boffs[nb]
    cdef long long* scratch = <long long*> malloc(max(maxlen, 1) * sizeof(long long))
    if scratch == NULL:
        free(alits)
        free(aoffs)
        free(blits)
        free(boffs)
        raise MemoryError()
    cdef Py_ssize_t ia, ib, i, j, m, ea, eb, t
    cdef long long x, y
    uniq = []
    seen = set()
    try:
        for ia in range(na):
            for ib in range(nb):
                i = aoffs[ia]
                ea = aoffs[ia + 1]
                j = boffs[ib]
                eb = boffs[ib + 1]
                m = 0
                while i < ea and j < eb:
                    x = alits[i]
                    y = blits[j]
                    if x == y:
                        scratch[m] = x
                        m += 1
                        i += 1
                        j += 1
                    elif x < y:
                        scratch[m] = x
                        m += 1
                        i += 1
                    else:
                        scratch[m] = y
                        m += 1
                        j += 1
                while i < ea:
                    scratch[m] = alits[i]
                    m += 1
                    i += 1
                while j < eb:
                    scratch[m] = blits[j]
                    m += 1
                    j += 1
                if not _valid_c(scratch, m, gids):
                    continue
                pf = tuple([scratch[t] for t in range(m)])
                if pf in seen:
                    continue
                seen.add(pf)
                uniq.append(pf)
        return _finish(uniq, k, probs)
    finally:
        free(alits)
        free(aoffs)
        free(blits)
        free(boffs)
        free(scratch)


def merge(a, b, Py_ssize_t k, const double[::1] probs, const int[::1] gids):
    """Semiring sum: concatenation then normalization (top-k)."""
    if not a:
        return normalize(list(b), k, probs, gids)
    if not b:
        return normalize(list(a), k, probs, gids)
    return normalize(list(a) + list(b), k, probs, gids)


# ---------------------------------------------------------------------------
# Exact DNF probability.  Clause sets live in flat C arrays; subproblems
# are memoized on a packed byte key.  Branching order (first literal of
# the first clause; group members ascending, residual branch last) matches
# the pure backend exactly.


cdef bytes _memo_key(const long long* lits, const Py_ssize_t* offs, Py_ssize_t n_clauses):
    cdef Py_ssize_t total = offs[n_clauses]
    cdef Py_ssize_t nbytes = (n_clauses + 1 + total) * sizeof(long long)
    # Fresh uninitialized bytes, filled before anyone else can see it.
    key = PyBytes_FromStringAndSize(NULL, nbytes)
    cdef long long* view = <long long*> PyBytes_AS_STRING(key)
    cdef Py_ssize_t i
    for i in range(n_clauses + 1):
        view[i] = offs[i]
    for i in range(total):
        view[n_clauses + 1 + i] = lits[i]
    return key


cdef double _wmc_c(const long long* lits, const Py_ssize_t* offs, Py_ssize_t n_clauses,
                   double* probs, const int[::1] gids, dict memo) except? -1.0:
    cdef Py_ssize_t i, j, m, w, nc, lo, hi, mid, n_present
    for i in range(n_clauses):
        if offs[i + 1] == offs[i]:
            return 1.0
    if n_clauses == 0:
        return 0.0
    key = _memo_key(lits, offs, n_clauses)
    cached = memo.get(key)
    if cached is not None:
        return <double> cached

    cdef long long fact = lits[offs[0]] >> 1
    cdef int g = gids[fact]
    cdef Py_ssize_t total = offs[n_clauses]
    cdef long long* nlits = <long long*> malloc(max(total, 1) * sizeof(long long))
    cdef Py_ssize_t* noffs = <Py_ssize_t*> malloc((n_clauses + 1) * sizeof(Py_ssize_t))
    if nlits == NULL or noffs == NULL:
        free(nlits)
        free(noffs)
        raise MemoryError()

    cdef double result = 0.0, p, psum
    cdef long long lit, f, member
    cdef bint dead, istrue
    cdef long long* present = NULL
    try:
        if g >= 0:
            present = <long long*> malloc(max(total, 1) * sizeof(long long))
            if present == NULL:
                raise MemoryError()
            n_present = 0
            for i in range(total):  # present members, ascending, deduplicated
                f = lits[i] >> 1
                if gids[f] == g:
                    lo = 0
                    hi = n_present
                    while lo < hi:
                        mid = (lo + hi) >> 1
                        if present[mid] < f:
                            lo = mid + 1
                        else:
                            hi = mid
                    if lo < n_present and present[lo] == f:
                        continue
                    for j in range(n_present, lo, -1):
                        present[j] = present[j - 1]
                    present[lo] = f
                    n_present += 1
            psum = 0.0
            for i in range(n_present + 1):
                member = present[i] if i < n_present else -1
                nc = 0
                w = 0
                for j in range(n_clauses):
                    noffs[nc] = w
                    dead = False
                    m = w
                    for lo in range(offs[j], offs[j + 1]):
                        lit = lits[lo]
                        f = lit >> 1
                        if gids[f] == g:
                            istrue = (f == member) != <bint>(lit & 1)
                            if istrue:
                                continue
                            dead = True
                            break
                        nlits[m] = lit
                        m += 1
                    if not dead:
                        w = m
                        nc += 1
                noffs[nc] = w
                if i < n_present:
                    p = probs[member]
                    psum += p
                    result += p * _wmc_c(nlits, noffs, nc, probs, gids, memo)
                else:
                    result += (1.0 - psum) * _wmc_c(nlits, noffs, nc, probs, gids, memo)
        else:
            p = probs[fact]
            result = p * _cond_binary_rec(lits, offs, n_clauses, nlits, noffs, fact, 1, probs, gids, memo)
            result += (1.0 - p) * _cond_binary_rec(lits, offs, n_clauses, nlits, noffs, fact, 0, probs, gids, memo)
        memo[key] = result
        return result
    finally:
        free(nlits)
        free(noffs)
        free(present)


cdef double _cond_binary_rec(const long long* lits, const Py_ssize_t* offs, Py_ssize_t n_clauses,
                             long long* nlits, Py_ssize_t* noffs, long long fact, bint value,
                             double* probs, const int[::1] gids, dict memo) except? -1.0:
    cdef long long pos = fact << 1
    cdef long long neg = pos | 1
    cdef long long hit = neg if value else pos
    cdef long long miss = pos if value else neg
    cdef Py_ssize_t nc = 0, w = 0, j, lo, m
    cdef long long lit
    cdef bint dead
    for j in range(n_clauses):
        noffs[nc] = w
        dead = False
        m = w
        for lo in range(offs[j], offs[j + 1]):
            lit = lits[lo]
            if lit == hit:
                dead = True
                break
            if lit == miss:
                continue
            nlits[m] = lit
            m += 1
        if not dead:
            w = m
            nc += 1
    noffs[nc] = w
    return _wmc_c(nlits, noffs, nc, probs, gids, memo)


cdef double* _copy_probs(const double[::1] probs) except NULL:
    cdef Py_ssize_t n = probs.shape[0], i
    cdef double* pbuf = <double*> malloc(max(n, 1) * sizeof(double))
    if pbuf == NULL:
        raise MemoryError()
    for i in range(n):
        pbuf[i] = probs[i]
    return pbuf


def wmc(bag, const double[::1] probs, const int[::1] gids):
    """Exact probability of the disjunction of the bag's proofs."""
    if not bag:
        return 0.0
    cdef long long* lits
    cdef Py_ssize_t* offs
    _unpack(bag, &lits, &offs)
    cdef double* pbuf
    try:
        pbuf = _copy_probs(probs)
    except BaseException:
        free(lits)
        free(offs)
        raise
    try:
        return _wmc_c(lits, offs, len(bag), pbuf, gids, {})
    finally:
        free(lits)
        free(offs)
        free(pbuf)


def wmc_gradient(bag, const double[::1] probs, const int[::1] gids):
    """Per support fact f: P(p_f := 1) - P(p_f := 0) (multilinearity)."""
    support = sorted({lit >> 1 for pf in bag for lit in pf})
    if not support:
        return [], []
    cdef long long* lits
    cdef Py_ssize_t* offs
    _unpack(bag, &lits, &offs)
    cdef double* pbuf
    try:
        pbuf = _copy_probs(probs)
    except BaseException:
        free(lits)
        free(offs)
        raise
    cdef Py_ssize_t nb = len(bag)
    cdef double saved, hi, lo
    cdef long long f
    facts = []
    grads = []
    try:
        for f in support:
            saved = pbuf[f]
            pbuf[f] = 1.0
            hi = _wmc_c(lits, offs, nb, pbuf, gids, {})
            pbuf[f] = 0.0
            lo = _wmc_c(lits, offs, nb, pbuf, gids, {})
            pbuf[f] = saved
            facts.append(int(f))
            grads.append(hi - lo)
        return facts, grads
    finally:
        free(lits)
        free(offs)
        free(pbuf)
