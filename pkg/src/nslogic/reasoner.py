"""Bottom-up evaluation of programs under the top-k proofs provenance.

`compile_program` grounds a validated program over its declared finite
domains into rule instances arranged by stratum.  A `Session` then runs a
semi-naive fixpoint per probability assignment (`forward`), differentiates
query probabilities w.r.t. input-fact probabilities (`backward`), and can
cross-check itself against exhaustive world enumeration (`oracle_forward`).
Sessions are immutable; `set_test_k` returns a copy sharing the grounding.
"""

from __future__ import annotations

import itertools

import numpy as np

from .kernels import impl
from .logic import (
    BodyAtom,
    Constant,
    Guard,
    Program,
    eval_term,
    stratify,
    validate,
    _tuple_sort_key,
)
from .provenance import FactSpace, ProbAssignment, ProofBag, neg_lit, pos_lit

DEFAULT_GROUND_CAP = 1_000_000
DEFAULT_WORLD_CAP = 1 << 20


class CompileError(Exception):
    pass


class EvalError(Exception):
    pass


class GroundRule:
    """One rule instance: `head_tuple :- items`, where each item is either
    ('f', literal) for an input-fact literal or ('d', relation, tuple) for a
    derived atom."""

    __slots__ = ("relation", "head", "items")

    def __init__(self, relation, head, items):
        self.relation = relation
        self.head = head
        self.items = items

    def __repr__(self):
        return f"GroundRule({self.relation}{self.head} :- {self.items})"


def _match(pattern, tup, binding):
    """Try to extend `binding` so the arg pattern matches a ground tuple."""
    new = {}
    for term, value in zip(pattern, tup):
        if isinstance(term, Constant):
            if term.value != value:
                return None
        else:  # Variable; arithmetic is banned in body atoms
            name = term.name
            bound = binding.get(name, new.get(name))
            if bound is None:
                new[name] = value
            elif bound != value:
                return None
    if not new:
        return binding
    merged = dict(binding)
    merged.update(new)
    return merged


class Session:
    """A compiled program plus per-run provenance settings (train/test k)."""

    def __init__(self, program, space, strata_instances, possible, train_k, test_k=None):
        self.program = program
        self.space = space
        self.strata = strata_instances  # list of lists of GroundRule
        self.possible = possible  # derived relation -> sorted tuples
        self.train_k = train_k
        self.test_k = train_k if test_k is None else test_k
        self.query = program.query
        self.answers = program.query_domain()
        self._oracle_table = None

    # -- public surface -----------------------------------------------------

    @property
    def fact_names(self):
        return self.space.names

    @property
    def n_facts(self):
        return self.space.n

    def assignment(self, values, normalized=None) -> ProbAssignment:
        if normalized is None:
            normalized = bool(self.space.groups)
        return ProbAssignment(self.space, values, normalized=normalized)

    def set_test_k(self, k: int) -> "Session":
        if k < 1:
            raise ValueError("k must be at least 1")
        return Session(self.program, self.space, self.strata, self.possible, self.train_k, k)

    def forward(self, env: ProbAssignment, k: int | None = None) -> "OutputDistribution":
        k = self.test_k if k is None else k
        bags = self._fixpoint(env, k)
        query_bags = bags.get(self.query, {})
        raw = [query_bags.get(t, ()) for t in self.answers]
        probs = np.array(
            [impl.wmc(b, env.values, self.space.group_ids) for b in raw], dtype=np.float64
        )
        return OutputDistribution(self.answers, probs, raw)

    def backward(self, env: ProbAssignment, upstream, forward=None, k=None) -> np.ndarray:
        """Chain rule into fact space: sum over answers of
        upstream[answer] * d P(answer) / d p(fact)."""
        if forward is None:
            forward = self.forward(env, k=k)
        known = set(map(tuple, forward.answers))
        for t in upstream:
            if tuple(t) not in known:
                raise EvalError(f"upstream gradient references unknown answer {t!r}")
        grad = np.zeros(self.space.n, dtype=np.float64)
        for i, answer in enumerate(forward.answers):
            g = float(upstream.get(answer, 0.0))
            if g == 0.0 or not forward.raw_bags[i]:
                continue
            facts, partials = impl.wmc_gradient(forward.raw_bags[i], env.values, self.space.group_ids)
            for f, d in zip(facts, partials):
                grad[f] += g * d
        return grad

    # -- evaluation ---------------------------------------------------------

    def _fixpoint(self, env, k, naive=False):
        if env.space is not self.space and env.space.names != self.space.names:
            raise EvalError("assignment does not cover this session's facts")
        probs = env.values
        gids = self.space.group_ids
        unit = ((),)
        bags: dict[str, dict[tuple, tuple]] = {}

        for instances in self.strata:
            by_dep: dict[tuple, list[GroundRule]] = {}
            for inst in instances:
                for item in inst.items:
                    if item[0] == "d":
                        by_dep.setdefault((item[1], item[2]), []).append(inst)

            def evaluate(inst):
                contribution = unit
                for item in inst.items:
                    if item[0] == "f":
                        operand = ((item[1],),)
                    else:
                        operand = bags.get(item[1], {}).get(item[2], ())
                        if not operand:
                            return None
                    contribution = impl.combine(contribution, operand, k, probs, gids)
                    if not contribution:
                        return None
                return contribution

            def apply(inst):
                contribution = evaluate(inst)
                if contribution is None:
                    return None
                rel_bags = bags.setdefault(inst.relation, {})
                old = rel_bags.get(inst.head, ())
                new = impl.merge(old, contribution, k, probs, gids)
                if new != old:
                    rel_bags[inst.head] = new
                    return (inst.relation, inst.head)
                return None

            changed = set()
            for inst in instances:
                key = apply(inst)
                if key:
                    changed.add(key)
            guard = 0
            cap = 1000 + 10 * max(1, len(instances))
            while changed:
                guard += 1
                if guard > cap:
                    raise EvalError("fixpoint iteration cap exceeded")
                if naive:
                    todo = list(instances)
                else:
                    todo, seen = [], set()
                    for key in sorted(changed, key=lambda kt: (kt[0], _tuple_sort_key(kt[1]))):
                        for inst in by_dep.get(key, ()):
                            if id(inst) not in seen:
                                seen.add(id(inst))
                                todo.append(inst)
                changed = set()
                for inst in todo:
                    key = apply(inst)
                    if key:
                        changed.add(key)
        return bags

    # -- exact oracle ---------------------------------------------------------

    def _build_oracle_table(self, world_cap):
        # Relations that can feed the query, then the support facts they read.
        relevant = {self.query}
        frontier = [self.query]
        instances_of: dict[str, list[GroundRule]] = {}
        for stratum in self.strata:
            for inst in stratum:
                instances_of.setdefault(inst.relation, []).append(inst)
        while frontier:
            rel = frontier.pop()
            for inst in instances_of.get(rel, ()):
                for item in inst.items:
                    if item[0] == "d" and item[1] not in relevant:
                        relevant.add(item[1])
                        frontier.append(item[1])
        relevant_instances = [
            inst for stratum in self.strata for inst in stratum if inst.relation in relevant
        ]
        support = sorted(
            {item[1] >> 1 for inst in relevant_instances for item in inst.items if item[0] == "f"}
        )
        support_set = set(support)

        # Branch dimensions: each exclusion group intersecting the support
        # (members outside the support collapse into one residual branch),
        # then the free support facts.
        gids = self.space.group_ids
        dims = []
        seen_groups = set()
        for f in support:
            g = int(gids[f])
            if g >= 0 and g not in seen_groups:
                seen_groups.add(g)
                members = [m for m in self.space.groups[g] if m in support_set]
                dims.append(("group", members))
        for f in support:
            if int(gids[f]) < 0:
                dims.append(("fact", f))

        sizes = [len(members) + 1 if kind == "group" else 2 for kind, members in dims]
        n_worlds = 1
        for s in sizes:
            n_worlds *= s
            if n_worlds > world_cap:
                raise EvalError(
                    f"world-count cap exceeded: {n_worlds}+ worlds > {world_cap}"
                )

        choices = np.zeros((len(dims), max(1, n_worlds)), dtype=np.int32)
        answer_worlds: dict[tuple, list[int]] = {t: [] for t in self.answers}
        for w, combo in enumerate(itertools.product(*[range(s) for s in sizes])):
            world = {}
            for (kind, payload), c in zip(dims, combo):
                if kind == "group":
                    for i, m in enumerate(payload):
                        world[m] = i == c
                else:
                    world[payload] = c == 0
            choices[:, w] = combo
            for t in self._boolean_eval(relevant_instances, world):
                answer_worlds.setdefault(t, []).append(w)

        self._oracle_table = {
            "dims": dims,
            "choices": choices,
            "n_worlds": n_worlds,
            "answer_worlds": {t: np.array(ws, dtype=np.int64) for t, ws in answer_worlds.items()},
        }

    def _boolean_eval(self, instances, world):
        derived: dict[str, set] = {}
        changed = True
        while changed:
            changed = False
            for inst in instances:
                ok = True
                for item in inst.items:
                    if item[0] == "f":
                        lit = item[1]
                        if world[lit >> 1] == bool(lit & 1):
                            ok = False
                            break
                    elif item[2] not in derived.get(item[1], ()):
                        ok = False
                        break
                if ok and inst.head not in derived.setdefault(inst.relation, set()):
                    derived[inst.relation].add(inst.head)
                    changed = True
        return derived.get(self.query, set())

    def oracle_forward(self, env: ProbAssignment, world_cap=DEFAULT_WORLD_CAP) -> "OutputDistribution":
        """Exact output distribution by enumerating all worlds (one-hot per
        exclusion group, binary otherwise) and running boolean evaluation in
        each.  Worlds are enumerated once per session and reweighted per
        assignment."""
        if self._oracle_table is None:
            self._build_oracle_table(world_cap)
        table = self._oracle_table
        weights = np.ones(table["n_worlds"], dtype=np.float64)
        for d, (kind, payload) in enumerate(table["dims"]):
            if kind == "group":
                ps = [float(env.values[m]) for m in payload]
                branch = np.array(ps + [1.0 - sum(ps)], dtype=np.float64)
            else:
                p = float(env.values[payload])
                branch = np.array([p, 1.0 - p], dtype=np.float64)
            weights *= branch[table["choices"][d]]
        probs = np.array(
            [float(weights[table["answer_worlds"][t]].sum()) for t in self.answers],
            dtype=np.float64,
        )
        return OutputDistribution(self.answers, probs, [None] * len(self.answers))


class OutputDistribution:
    """Per-candidate-answer success probabilities; these need not sum to 1."""

    def __init__(self, answers, probs, raw_bags):
        self.answers = list(answers)
        self.probs = probs
        self.raw_bags = raw_bags
        self._index = {t: i for i, t in enumerate(self.answers)}

    def prob(self, answer) -> float:
        return float(self.probs[self._index[tuple(answer)]])

    def bag(self, answer) -> ProofBag:
        return ProofBag(self.raw_bags[self._index[tuple(answer)]] or ())

    def as_dict(self):
        return {t: float(p) for t, p in zip(self.answers, self.probs)}

    def argmax(self):
        return self.answers[int(np.argmax(self.probs))]

    def __repr__(self):
        body = ", ".join(f"{t}: {p:.4g}" for t, p in zip(self.answers, self.probs))
        return f"OutputDistribution({body})"


def random_assignment(session: Session, rng) -> ProbAssignment:
    """Random valid assignment: uniform per free fact, renormalized uniform
    within each exclusion group."""
    values = rng.uniform(0.05, 0.95, session.n_facts)
    for members in session.space.groups:
        idx = list(members)
        values[idx] = values[idx] / values[idx].sum()
    return session.assignment(values)


def compile_program(program: Program, train_k: int, ground_cap=DEFAULT_GROUND_CAP) -> Session:
    """Ground a validated program over its declared finite domains.

    Grounding is eager and total; ordering is deterministic (declaration
    order, then sorted tuples), so two compilations of the same program are
    identical.  Raises CompileError when the grounded atom or instance count
    exceeds `ground_cap`.
    """
    if train_k < 1:
        raise CompileError("k must be at least 1")
    diags = validate(program)
    if diags:
        raise CompileError("invalid program:\n" + "\n".join(str(d) for d in diags))
    strata_rules = stratify(program)

    names = []
    fact_index = {}
    for decl in program.input_decls():
        for t in program.input_facts(decl.name):
            fact_index[(decl.name, t)] = len(names)
            names.append(f"{decl.name}({', '.join(map(str, t))})" if t else decl.name)
    group_ids = [-1] * len(names)
    for group in program.exclusion_groups():
        for t in group.members:
            group_ids[fact_index[(group.relation, t)]] = group.gid
    space = FactSpace(names, group_ids)

    input_names = {d.name: d for d in program.input_decls()}
    facts_by_rel: dict[str, list] = {}
    for (rel, t), _ in fact_index.items():
        facts_by_rel.setdefault(rel, []).append(t)

    possible: dict[str, set] = {}

    def snapshot_candidates():
        # Sorted once per pass; re-sorting inside the join would be quadratic.
        derived_sorted = {rel: sorted(ts, key=_tuple_sort_key) for rel, ts in possible.items()}

        def candidates(rel):
            if rel in input_names:
                return facts_by_rel.get(rel, [])
            return derived_sorted.get(rel, [])

        return candidates

    def rule_error(rule, e):
        return CompileError(f"{program.path}:{rule.line}:{rule.col}: {e}")

    def bindings(rule, candidates):
        # Positive atoms bind variables in source order; guards filter once
        # bound.  Negated atoms never filter a grounding (negating an absent
        # fact is vacuously true; a present one contributes a literal later).
        positives = [b for b in rule.body if isinstance(b, BodyAtom) and not b.negated]
        guards = rule.guards()

        def join(i, binding):
            if i == len(positives):
                try:
                    passed = all(g.holds(binding) for g in guards)
                except TypeError as e:
                    raise rule_error(rule, e) from None
                if passed:
                    yield dict(binding)
                return
            atom = positives[i].atom
            for t in candidates(atom.relation):
                merged = _match(atom.args, t, binding)
                if merged is not None:
                    yield from join(i + 1, merged)

        yield from join(0, {})

    def head_tuple(rule, binding):
        try:
            return tuple(eval_term(t, binding) for t in rule.head.args)
        except TypeError as e:
            raise rule_error(rule, e) from None

    # Fixpoint over derivable tuples: grows monotonically, arithmetic in
    # recursive heads is rejected at validation so this terminates.
    total_atoms = len(names)
    changed = True
    while changed:
        changed = False
        candidates = snapshot_candidates()
        for rule in program.rules:
            for binding in bindings(rule, candidates):
                ht = head_tuple(rule, binding)
                rel = rule.head.relation
                if ht not in possible.setdefault(rel, set()):
                    possible[rel].add(ht)
                    total_atoms += 1
                    if total_atoms > ground_cap:
                        raise CompileError(f"grounded atom count exceeds cap {ground_cap}")
                    changed = True

    declared = set(program.query_domain())
    for t in possible.get(program.query, ()):
        if t not in declared:
            raise CompileError(
                f"rule can derive {program.query}{t}, outside the declared output domain"
            )

    # Final deterministic pass: emit instances per stratum.
    strata_instances = []
    n_instances = 0
    candidates = snapshot_candidates()
    for rules in strata_rules:
        instances = []
        seen = set()
        for rule in rules:
            for binding in bindings(rule, candidates):
                items = []
                dead = False
                for b in rule.body:
                    if isinstance(b, Guard):
                        continue
                    values = tuple(eval_term(t, binding) for t in b.atom.args)
                    rel = b.atom.relation
                    if rel in input_names:
                        fid = fact_index.get((rel, values))
                        if fid is None:
                            if not b.negated:
                                dead = True
                                break
                            continue  # negation of an absent fact holds
                        items.append(("f", (neg_lit(fid) if b.negated else pos_lit(fid))))
                    else:
                        items.append(("d", rel, values))
                if dead:
                    continue
                inst_key = (rule.head.relation, head_tuple(rule, binding), tuple(items))
                if inst_key in seen:
                    continue
                seen.add(inst_key)
                instances.append(GroundRule(rule.head.relation, inst_key[1], tuple(items)))
                n_instances += 1
                if n_instances > ground_cap:
                    raise CompileError(f"ground rule instance count exceeds cap {ground_cap}")
        strata_instances.append(instances)

    sp = {rel: sorted(ts, key=_tuple_sort_key) for rel, ts in possible.items()}
    return Session(program, space, strata_instances, sp, train_k)
