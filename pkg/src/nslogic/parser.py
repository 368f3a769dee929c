"""Parser for the `.nsl` Datalog-lite dialect.

Grammar (terminals quoted; `#` and `//` start comments to end of line)::

    program    := { statement }
    statement  := input_decl | output_decl | fact_decl | rule
    input_decl := "input" relsig [ "exclusive" IDENT ] "."
    output_decl:= "output" relsig "."
    relsig     := NAME [ "(" argspec { "," argspec } ")" ]
    argspec    := NAME ":" domain
    domain     := INT                    # shorthand for 0..INT-1
                | INT ".." INT           # inclusive integer range
                | "{" const { "," const } "}"
    fact_decl  := "fact" NAME [ "(" const { "," const } ")" ] "."
    rule       := atom [ ":-" bodyitem { "," bodyitem } ] "."
    bodyitem   := "not" atom | atom | guard
    guard      := term CMP term          # CMP in == != < <= > >=
    atom       := NAME [ "(" term { "," term } ")" ]
    term       := primary { ("+"|"-") primary }
    primary    := INT | IDENT | VAR | "_"

Identifiers starting with a lowercase letter are relation names or symbol
constants depending on position; identifiers starting with an uppercase
letter are variables; each `_` is a fresh anonymous variable.  Arithmetic
is only legal in rule heads and guards (enforced by `logic.validate`).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .logic import (
    Arith,
    Atom,
    BodyAtom,
    Constant,
    Diagnostic,
    Guard,
    Program,
    ProgramError,
    RelationDecl,
    Rule,
    Variable,
    validate,
)

# Unary minus is handled by the parser, not the lexer; a signed INT token
# would make `q(A-1)` lex as `A`, `-1`.
_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>(\#|//)[^\n]*)
  | (?P<dots>\.\.)
  | (?P<arrow>:-)
  | (?P<cmp>==|!=|<=|>=|<|>)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[().,{}:+-])
    """,
    re.VERBOSE,
)

_KEYWORDS = {"input", "output", "fact", "not", "exclusive"}


@dataclass(frozen=True)
class _Token:
    kind: str  # 'int' | 'ident' | 'punct' | 'cmp' | 'dots' | 'arrow' | 'eof'
    text: str
    line: int
    col: int


def _tokenize(text: str, path: str):
    tokens = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ProgramError([Diagnostic(f"unexpected character {text[pos]!r}", line, col, path)])
        kind = m.lastgroup
        tok = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(_Token(kind, tok, line, col))
        newlines = tok.count("\n")
        if newlines:
            line += newlines
            col = len(tok) - tok.rfind("\n")
        else:
            col += len(tok)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(self, tokens, path):
        self.tokens = tokens
        self.path = path
        self.i = 0
        self.fresh = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def fail(self, msg, tok=None):
        tok = tok or self.peek()
        raise ProgramError([Diagnostic(msg, tok.line, tok.col, self.path)])

    def expect(self, text):
        t = self.next()
        if t.text != text:
            self.fail(f"expected {text!r}, found {t.text!r}", t)
        return t

    def parse(self) -> Program:
        decls, rules, facts = [], [], []
        query = ""
        while self.peek().kind != "eof":
            t = self.peek()
            if t.text == "input":
                decls.append(self.decl("input"))
            elif t.text == "output":
                d = self.decl("derived")
                if query:
                    self.fail("exactly one output query relation is required", t)
                query = d.name
                decls.append(d)
            elif t.text == "fact":
                facts.append(self.fact())
            else:
                rules.append(self.rule())
        if not query:
            raise ProgramError([Diagnostic("no output declaration", path=self.path)])
        return Program(tuple(decls), tuple(rules), tuple(facts), query, self.path)

    def decl(self, kind) -> RelationDecl:
        kw = self.next()
        name = self.ident("relation name")
        arg_names, domains = [], []
        if self.peek().text == "(":
            self.next()
            while True:
                arg_names.append(self.ident("argument name"))
                self.expect(":")
                domains.append(self.domain())
                if self.peek().text == ",":
                    self.next()
                    continue
                break
            self.expect(")")
        exclusive = None
        if self.peek().text == "exclusive":
            self.next()
            argname = self.ident("exclusive argument")
            if argname not in arg_names:
                self.fail(f"exclusive argument '{argname}' not among declared arguments")
            exclusive = arg_names.index(argname)
        self.expect(".")
        return RelationDecl(
            name,
            len(domains),
            kind,
            tuple(domains),
            tuple(arg_names),
            exclusive,
            kw.line,
            kw.col,
        )

    def domain(self):
        t = self.peek()
        if t.kind == "int" or t.text == "-":
            lo = self.next_int()
            if self.peek().kind == "dots":
                self.next()
                hi = self.next_int()
                if hi < lo:
                    self.fail(f"empty range {lo}..{hi}", t)
                return tuple(range(lo, hi + 1))
            if lo <= 0:
                self.fail("domain size must be positive", t)
            return tuple(range(lo))
        if t.text == "{":
            self.next()
            values = []
            while True:
                values.append(self.const())
                if self.peek().text == ",":
                    self.next()
                    continue
                break
            self.expect("}")
            return tuple(values)
        self.fail("expected a domain (N, lo..hi, or {v, ...})")

    def next_int(self) -> int:
        t = self.next()
        neg = False
        if t.text == "-":
            neg = True
            t = self.next()
        if t.kind != "int":
            self.fail("expected an integer", t)
        return -int(t.text) if neg else int(t.text)

    def const(self):
        t = self.peek()
        if t.kind == "int" or t.text == "-":
            return self.next_int()
        t = self.next()
        if t.kind == "ident" and t.text not in _KEYWORDS and t.text[0].islower():
            return t.text
        self.fail("expected a constant", t)

    def ident(self, what) -> str:
        t = self.next()
        if t.kind != "ident" or t.text in _KEYWORDS or not t.text[0].islower():
            self.fail(f"expected {what}, found {t.text!r}", t)
        return t.text

    def fact(self):
        self.next()
        name = self.ident("relation name")
        values = []
        if self.peek().text == "(":
            self.next()
            while True:
                values.append(self.const())
                if self.peek().text == ",":
                    self.next()
                    continue
                break
            self.expect(")")
        self.expect(".")
        return (name, tuple(values))

    def rule(self) -> Rule:
        start = self.peek()
        head = self.atom()
        body = []
        if self.peek().kind == "arrow":
            self.next()
            while True:
                body.append(self.body_item())
                if self.peek().text == ",":
                    self.next()
                    continue
                break
        self.expect(".")
        return Rule(head, tuple(body), start.line, start.col)

    def body_item(self):
        if self.peek().text == "not":
            self.next()
            return BodyAtom(self.atom(), negated=True)
        # Could be an atom `rel(...)` / bare `rel`, or a guard `term CMP term`.
        save = self.i
        t = self.peek()
        if t.kind == "ident" and t.text[0].islower():
            atom = self.atom()
            if self.peek().kind == "cmp":
                self.i = save  # symbol constant in a guard, e.g. `X != pau`
            else:
                return BodyAtom(atom)
        left = self.term()
        op = self.next()
        if op.kind != "cmp":
            self.fail("expected a comparison operator", op)
        right = self.term()
        return Guard(op.text, left, right)

    def atom(self) -> Atom:
        name = self.ident("relation name")
        args = []
        if self.peek().text == "(":
            self.next()
            while True:
                args.append(self.term())
                if self.peek().text == ",":
                    self.next()
                    continue
                break
            self.expect(")")
        return Atom(name, tuple(args))

    def term(self):
        left = self.primary()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            right = self.primary()
            left = Arith(op, left, right)
        return left

    def primary(self):
        t = self.next()
        if t.text == "-":
            n = self.next()
            if n.kind != "int":
                self.fail("expected an integer after '-'", n)
            return Constant(-int(n.text))
        if t.kind == "int":
            return Constant(int(t.text))
        if t.kind == "ident":
            if t.text == "_":
                self.fresh += 1
                return Variable(f"_W{self.fresh}")
            if t.text in _KEYWORDS:
                self.fail(f"keyword {t.text!r} cannot be a term", t)
            if t.text[0].isupper() or t.text[0] == "_":
                return Variable(t.text)
            return Constant(t.text)
        self.fail(f"expected a term, found {t.text!r}", t)


def parse_program(text: str, path: str = "<program>") -> Program:
    """Parse and validate `.nsl` source; raises ProgramError with diagnostics."""
    program = _Parser(_tokenize(text, path), path).parse()
    diags = validate(program)
    if diags:
        raise ProgramError(diags)
    return program


def load_program(path) -> Program:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_program(fh.read(), str(path))
