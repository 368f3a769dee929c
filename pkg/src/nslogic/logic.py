"""Datalog-lite programs: terms, rules, declarations, validation, stratification.

A program consists of relation declarations over finite argument domains,
optional explicit fact lists for input relations, and range-restricted rules.
Negation is restricted to input relations, so probabilistic evaluation stays
multilinear in the input-fact probabilities.  Programs are immutable once
built; see `parser` for the concrete `.nsl` syntax.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1


class ProgramError(Exception):
    """Raised when a program cannot be parsed or fails validation."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class Diagnostic:
    message: str
    line: int = 0
    col: int = 0
    path: str = "<program>"

    def __str__(self):
        return f"{self.path}:{self.line}:{self.col}: {self.message}"


# ---------------------------------------------------------------------------
# Terms.  A constant is a signed-64-bit integer or an interned symbol string.
# Variables are capitalized identifiers; `_` in source becomes a fresh variable.


@dataclass(frozen=True)
class Constant:
    value: int | str

    def __post_init__(self):
        if isinstance(self.value, bool):
            raise TypeError("constants are int or symbol, not bool")
        if isinstance(self.value, int):
            if not (INT64_MIN <= self.value <= INT64_MAX):
                raise ValueError(f"integer constant out of 64-bit range: {self.value}")
        elif isinstance(self.value, str):
            if not self.value:
                raise ValueError("symbol constants are non-empty")
        else:
            raise TypeError(f"bad constant: {self.value!r}")

    def __str__(self):
        return str(self.value)


@dataclass(frozen=True)
class Variable:
    name: str

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Arith:
    """Integer arithmetic over terms; only valid in rule heads and guards."""

    op: str  # '+' or '-'
    left: "Term"
    right: "Term"

    def __str__(self):
        return f"{self.left} {self.op} {self.right}"


Term = Constant | Variable | Arith


def term_variables(t: Term):
    if isinstance(t, Variable):
        yield t
    elif isinstance(t, Arith):
        yield from term_variables(t.left)
        yield from term_variables(t.right)


def eval_term(t: Term, binding: dict) -> int | str:
    """Evaluate a term under a complete variable binding."""
    if isinstance(t, Constant):
        return t.value
    if isinstance(t, Variable):
        return binding[t.name]
    left = eval_term(t.left, binding)
    right = eval_term(t.right, binding)
    if not (isinstance(left, int) and isinstance(right, int)):
        raise TypeError(f"arithmetic on non-integers: {t}")
    return left + right if t.op == "+" else left - right


@dataclass(frozen=True)
class Atom:
    relation: str
    args: tuple = ()

    def __str__(self):
        if not self.args:
            return self.relation
        return f"{self.relation}({', '.join(str(a) for a in self.args)})"


@dataclass(frozen=True)
class BodyAtom:
    atom: Atom
    negated: bool = False

    def __str__(self):
        return f"not {self.atom}" if self.negated else str(self.atom)


@dataclass(frozen=True)
class Guard:
    """Comparison between two terms, filtering groundings of a rule body."""

    op: str  # one of == != < <= > >=
    left: Term
    right: Term

    def __str__(self):
        return f"{self.left} {self.op} {self.right}"

    def holds(self, binding: dict) -> bool:
        a = eval_term(self.left, binding)
        b = eval_term(self.right, binding)
        if isinstance(a, int) != isinstance(b, int):
            return self.op == "!="  # int never equals symbol
        if self.op == "==":
            return a == b
        if self.op == "!=":
            return a != b
        if isinstance(a, str):
            raise TypeError(f"ordered comparison on symbols: {self}")
        return {"<": a < b, "<=": a <= b, ">": a > b, ">=": a >= b}[self.op]


@dataclass(frozen=True)
class Rule:
    head: Atom
    body: tuple = ()  # BodyAtom | Guard items, in source order
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)

    def body_atoms(self):
        return [b for b in self.body if isinstance(b, BodyAtom)]

    def guards(self):
        return [b for b in self.body if isinstance(b, Guard)]

    def __str__(self):
        if not self.body:
            return f"{self.head}."
        return f"{self.head} :- {', '.join(str(b) for b in self.body)}."


@dataclass(frozen=True)
class RelationDecl:
    name: str
    arity: int
    kind: str  # 'input' | 'derived'
    domains: tuple = ()  # per-argument tuple of constant values, in order
    arg_names: tuple = ()
    exclusive_arg: int | None = None  # index of categorical argument, inputs only
    line: int = field(default=0, compare=False)
    col: int = field(default=0, compare=False)


@dataclass(frozen=True)
class ExclusionGroup:
    """One categorical variable: exactly one member fact holds in any world."""

    gid: int
    relation: str
    members: tuple  # tuples of constant values, in declaration order


@dataclass(frozen=True)
class Program:
    declarations: tuple = ()  # RelationDecl for inputs and the output relation
    rules: tuple = ()
    facts: tuple = ()  # (relation, value-tuple) explicit input facts
    query: str = ""  # name of the single output relation
    path: str = field(default="<program>", compare=False)

    def decl(self, name: str) -> RelationDecl | None:
        for d in self.declarations:
            if d.name == name:
                return d
        return None

    def input_decls(self):
        return [d for d in self.declarations if d.kind == "input"]

    def input_facts(self, name: str):
        """Fact tuples of one input relation: explicit list, else domain product."""
        explicit = [t for rel, t in self.facts if rel == name]
        if explicit:
            return explicit
        d = self.decl(name)
        return [tuple(c) for c in itertools.product(*d.domains)]

    def exclusion_groups(self):
        """Materialize exclusion groups from `exclusive` argument declarations.

        Facts of a relation marked exclusive on argument i are grouped by the
        values of the remaining arguments; each group is one categorical
        variable.
        """
        groups = []
        gid = 0
        for d in self.input_decls():
            if d.exclusive_arg is None:
                continue
            keyed: dict[tuple, list] = {}
            for t in self.input_facts(d.name):
                key = t[: d.exclusive_arg] + t[d.exclusive_arg + 1 :]
                keyed.setdefault(key, []).append(t)
            for key in sorted(keyed, key=_tuple_sort_key):
                groups.append(ExclusionGroup(gid, d.name, tuple(keyed[key])))
                gid += 1
        return groups

    def derived_relations(self):
        """Relations appearing in rule heads, in first-appearance order."""
        seen = []
        for r in self.rules:
            if r.head.relation not in seen:
                seen.append(r.head.relation)
        return seen

    def query_domain(self):
        """Candidate answer tuples of the output relation, in domain order."""
        d = self.decl(self.query)
        return [tuple(c) for c in itertools.product(*d.domains)]


def _tuple_sort_key(t):
    return tuple((0, v) if isinstance(v, int) else (1, v) for v in t)


# ---------------------------------------------------------------------------
# Validation.


def validate(program: Program) -> list[Diagnostic]:
    """Check all Program invariants; an empty list means the program is valid."""
    diags: list[Diagnostic] = []
    p = program.path

    def err(msg, line=0, col=0):
        diags.append(Diagnostic(msg, line, col, p))

    decls = {d.name: d for d in program.declarations}
    input_names = {d.name for d in program.declarations if d.kind == "input"}

    for d in program.declarations:
        if len(d.domains) != d.arity:
            err(f"relation '{d.name}' declares {len(d.domains)} domains for arity {d.arity}", d.line, d.col)
        for i, dom in enumerate(d.domains):
            if len(dom) == 0:
                err(f"relation '{d.name}' argument {i} has an empty domain", d.line, d.col)
            if len(set(dom)) != len(dom):
                err(f"relation '{d.name}' argument {i} has duplicate domain values", d.line, d.col)
        if d.exclusive_arg is not None:
            if d.kind != "input":
                err(f"'exclusive' only applies to input relations ('{d.name}')", d.line, d.col)
            elif not (0 <= d.exclusive_arg < d.arity):
                err(f"exclusive argument index out of range for '{d.name}'", d.line, d.col)

    # Output query: exactly one, declared, derived (never an input relation).
    outputs = [d for d in program.declarations if d.kind == "derived"]
    if not program.query or program.query not in decls:
        err("exactly one output query relation is required; none declared")
    elif len(outputs) != 1 or outputs[0].name != program.query:
        err("exactly one output query relation is required")
    elif program.query in input_names:
        err(f"output relation '{program.query}' cannot be an input relation")

    # Explicit facts: known input relation, arity and domain membership.
    for rel, tup in program.facts:
        d = decls.get(rel)
        if d is None or d.kind != "input":
            err(f"fact for undeclared input relation '{rel}'")
            continue
        if len(tup) != d.arity:
            err(f"fact {rel}{tup} does not match arity {d.arity}")
            continue
        for i, v in enumerate(tup):
            if v not in d.domains[i]:
                err(f"fact {rel}{tup} argument {i} outside declared domain")

    derived = set(program.derived_relations())
    arities: dict[str, int] = {n: d.arity for n, d in decls.items()}

    recursive = _recursive_relations(program)

    for rule in program.rules:
        head = rule.head
        if head.relation in input_names:
            err(f"input relation '{head.relation}' cannot appear in a rule head", rule.line, rule.col)
        known = arities.get(head.relation)
        if known is None:
            arities[head.relation] = len(head.args)
        elif known != len(head.args):
            err(f"arity mismatch for '{head.relation}': {len(head.args)} vs {known}", rule.line, rule.col)

        positive_vars: set[str] = set()
        for b in rule.body_atoms():
            rel = b.atom.relation
            if rel not in decls and rel not in derived:
                err(f"unknown relation '{rel}'", rule.line, rule.col)
            known = arities.get(rel)
            if known is None:
                arities[rel] = len(b.atom.args)
            elif known != len(b.atom.args):
                err(f"arity mismatch for '{rel}': {len(b.atom.args)} vs {known}", rule.line, rule.col)
            if b.negated and rel not in input_names:
                err("negation restricted to input relations", rule.line, rule.col)
            for t in b.atom.args:
                if isinstance(t, Arith):
                    err(f"arithmetic not allowed inside body atoms: {t}", rule.line, rule.col)
                if not b.negated:
                    positive_vars.update(v.name for v in term_variables(t))

        # Range restriction: every head / negated-atom / guard variable must be
        # bound by a positive body atom.
        for t in head.args:
            for v in term_variables(t):
                if v.name not in positive_vars:
                    err(f"head variable '{v.name}' not bound by a positive body atom", rule.line, rule.col)
        for b in rule.body:
            if isinstance(b, Guard):
                for t in (b.left, b.right):
                    for v in term_variables(t):
                        if v.name not in positive_vars:
                            err(f"guard variable '{v.name}' not bound by a positive body atom", rule.line, rule.col)
            elif b.negated:
                for t in b.atom.args:
                    for v in term_variables(t):
                        if v.name not in positive_vars:
                            err(f"negated-atom variable '{v.name}' not bound by a positive body atom", rule.line, rule.col)

        # Recursion through head arithmetic would make the Herbrand base
        # unbounded; only pure recursion (plain variables/constants) is allowed.
        if head.relation in recursive:
            if any(isinstance(t, Arith) for t in head.args):
                err(f"arithmetic in the head of recursive relation '{head.relation}'", rule.line, rule.col)

    try:
        stratify(program)
    except ProgramError as e:
        diags.extend(e.diagnostics)

    return diags


def _dependency_edges(program: Program):
    """(head_rel, body_rel, negated) edges between derived relations."""
    derived = set(program.derived_relations())
    edges = []
    for rule in program.rules:
        for b in rule.body_atoms():
            if b.atom.relation in derived:
                edges.append((rule.head.relation, b.atom.relation, b.negated))
    return edges


def _recursive_relations(program: Program) -> set[str]:
    """Derived relations lying on a dependency cycle."""
    sccs = _condensation(program)
    out = set()
    for comp in sccs:
        if len(comp) > 1:
            out.update(comp)
        else:
            (rel,) = comp
            if any(h == rel and b == rel for h, b, _ in _dependency_edges(program)):
                out.add(rel)
    return out


def _condensation(program: Program):
    """Strongly connected components of the derived-relation dependency graph,
    in reverse topological order (dependencies first).  Tarjan, iterative."""
    order = program.derived_relations()
    succ: dict[str, list[str]] = {r: [] for r in order}
    for h, b, _ in _dependency_edges(program):
        if b not in succ.get(h, []):
            succ[h].append(b)

    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    sccs: list[tuple] = []
    counter = itertools.count()

    for root in order:
        if root in index:
            continue
        work = [(root, iter(succ[root]))]
        index[root] = low[root] = next(counter)
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for nxt in it:
                if nxt not in index:
                    index[nxt] = low[nxt] = next(counter)
                    stack.append(nxt)
                    on_stack.add(nxt)
                    work.append((nxt, iter(succ[nxt])))
                    advanced = True
                    break
                if nxt in on_stack:
                    low[node] = min(low[node], index[nxt])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index[node]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == node:
                        break
                sccs.append(tuple(sorted(comp, key=order.index)))
    return sccs


def stratify(program: Program) -> list[list[Rule]]:
    """Partition rules into strata so negated dependencies resolve first.

    Returns rule lists in evaluation order.  Ordering is deterministic:
    components are emitted in topological order with ties broken by the
    first declaration position of the component's relations.  Raises
    ProgramError on a cycle through negation.
    """
    order = program.derived_relations()
    sccs = _condensation(program)
    comp_of = {rel: i for i, comp in enumerate(sccs) for rel in comp}
    edges = _dependency_edges(program)

    for h, b, neg in edges:
        if neg and comp_of.get(h) == comp_of.get(b):
            raise ProgramError(
                [Diagnostic(f"unstratifiable: cycle through negation involving '{h}'", path=program.path)]
            )

    # Stratum index = longest chain of negative edges below the component.
    # Tarjan emits dependencies first, so one pass suffices.
    level: dict[int, int] = {}
    for i, comp in enumerate(sccs):
        lv = 0
        for h, b, neg in edges:
            if comp_of[h] == i and comp_of[b] != i:
                lv = max(lv, level[comp_of[b]] + (1 if neg else 0))
        level[i] = lv

    n_strata = max(level.values(), default=0) + 1
    strata: list[list[Rule]] = [[] for _ in range(n_strata)]
    rel_rank = {rel: order.index(rel) for rel in order}
    rules = sorted(
        program.rules,
        key=lambda r: (level[comp_of[r.head.relation]], rel_rank[r.head.relation], program.rules.index(r)),
    )
    for r in rules:
        strata[level[comp_of[r.head.relation]]].append(r)
    return strata


# ---------------------------------------------------------------------------
# Pretty printing.  `parse(pretty(parse(text)))` equals `parse(text)`.


def _format_domain(dom) -> str:
    if all(isinstance(v, int) for v in dom):
        lo, hi = min(dom), max(dom)
        if list(dom) == list(range(lo, hi + 1)):
            return f"{lo}..{hi}"
    return "{" + ", ".join(str(v) for v in dom) + "}"


def pretty_print(program: Program) -> str:
    lines = []
    for d in program.declarations:
        kw = "input" if d.kind == "input" else "output"
        if d.arity == 0:
            lines.append(f"{kw} {d.name}.")
            continue
        args = ", ".join(
            f"{d.arg_names[i] if d.arg_names else chr(97 + i)}: {_format_domain(d.domains[i])}"
            for i in range(d.arity)
        )
        excl = ""
        if d.exclusive_arg is not None:
            name = d.arg_names[d.exclusive_arg] if d.arg_names else chr(97 + d.exclusive_arg)
            excl = f" exclusive {name}"
        lines.append(f"{kw} {d.name}({args}){excl}.")
    for rel, tup in program.facts:
        args = ", ".join(str(v) for v in tup)
        lines.append(f"fact {rel}({args})." if tup else f"fact {rel}.")
    for r in program.rules:
        lines.append(str(r))
    return "\n".join(lines) + "\n"
