import pytest

from nslogic import (
    Atom,
    BodyAtom,
    Constant,
    Program,
    ProgramError,
    RelationDecl,
    Rule,
    Variable,
    parse_program,
    pretty_print,
    stratify,
    validate,
)

SUM2 = "input digit(img:2, val:3). output sum(s:5). sum(A+B) :- digit(0,A), digit(1,B)."


def test_parse_sum_digits_example():
    p = parse_program(SUM2)
    assert len(p.rules) == 1
    assert p.query == "sum"
    d = p.decl("digit")
    assert d.domains == ((0, 1), (0, 1, 2))
    assert p.decl("sum").domains == ((0, 1, 2, 3, 4),)
    assert p.input_facts("digit") == [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]


def test_empty_text_reports_no_output():
    with pytest.raises(ProgramError) as e:
        parse_program("")
    assert "no output declaration" in str(e.value)


def test_head_variable_missing_from_body():
    with pytest.raises(ProgramError) as e:
        parse_program("input a(x:2). output q(y:2). q(Z) :- a(X).")
    assert "not bound by a positive body atom" in str(e.value)


def test_unknown_relation_and_arity_mismatch():
    with pytest.raises(ProgramError) as e:
        parse_program("input a(x:2). output q(y:2). q(X) :- b(X).")
    assert "unknown relation 'b'" in str(e.value)
    with pytest.raises(ProgramError) as e:
        parse_program("input a(x:2). output q(y:2). q(X) :- a(X, X).")
    assert "arity mismatch" in str(e.value)


def test_diagnostics_carry_positions():
    try:
        parse_program("input a(x:2).\noutput q(y:2).\nq(Z) :- a(X).", path="prog.nsl")
    except ProgramError as e:
        d = e.diagnostics[0]
        assert str(d).startswith("prog.nsl:3:")
    else:
        pytest.fail("expected diagnostics")


def test_negated_derived_atom_rejected():
    text = """
    input a(x:2).
    output q(y:2).
    helper(X) :- a(X).
    q(X) :- a(X), not helper(X).
    """
    program = _parse_unchecked(text)
    diags = validate(program)
    assert any("negation restricted to input relations" in d.message for d in diags)


def test_two_output_declarations_rejected():
    with pytest.raises(ProgramError) as e:
        parse_program("input a(x:2). output q(y:2). output r(y:2). q(X) :- a(X).")
    assert "exactly one output query" in str(e.value)


def test_validate_accepts_sum_program():
    assert validate(parse_program(SUM2)) == []


def test_fact_outside_domain_rejected():
    with pytest.raises(ProgramError) as e:
        parse_program("input e(a:2, b:2). fact e(0, 5). output q(y:2). q(X) :- e(X, _).")
    assert "outside declared domain" in str(e.value)


def test_arithmetic_in_body_atom_rejected():
    with pytest.raises(ProgramError) as e:
        parse_program("input a(x:3). output q(y:3). q(X) :- a(X + 1).")
    assert "arithmetic not allowed inside body atoms" in str(e.value)


def test_recursive_head_arithmetic_rejected():
    text = """
    input a(x:3).
    output q(y:3).
    q(X) :- a(X).
    q(X + 1) :- q(X).
    """
    with pytest.raises(ProgramError) as e:
        parse_program(text)
    assert "arithmetic in the head of recursive relation" in str(e.value)


def test_symbol_domains_and_guards():
    text = """
    input ph(slot: 0..1, s: {pau, iy, z}) exclusive s.
    output w(x: {zero, other}).
    w(zero) :- ph(0, z), ph(1, iy).
    w(other) :- ph(0, S), S != z.
    """
    p = parse_program(text)
    assert p.decl("ph").domains[1] == ("pau", "iy", "z")
    assert len(p.exclusion_groups()) == 2
    assert pretty_print(p)  # printable
    assert parse_program(pretty_print(p)) == p


def test_arithmetic_without_spaces_and_negative_ints():
    p = parse_program("input a(x: 0..4). output q(y: 0..4). q(A-1) :- a(A), A >= 1.")
    assert str(p.rules[0].head) == "q(A - 1)"
    p = parse_program("input a(x: -2..2). output q(y: -4..4). q(A + A) :- a(A).")
    assert p.decl("a").domains == ((-2, -1, 0, 1, 2),)
    assert parse_program(pretty_print(p)) == p
    p = parse_program("input a(x: {-1, 0, 1}). output q(y: -1..1). q(A) :- a(A), A != -1.")
    assert parse_program(pretty_print(p)) == p


def test_pretty_print_parse_roundtrip_idempotent():
    texts = [
        SUM2,
        "input dot(p:4). input edge(a:4,b:4). fact edge(0,1). fact edge(2,3). "
        "output c. link(A,B) :- edge(A,B). link(B,A) :- edge(A,B). "
        "reach(A,B) :- link(A,B). reach(A,C) :- reach(A,B), link(B,C). "
        "c :- dot(0), dot(3), reach(0,3).",
        "input a(x: 3..5). output q(y: 3..5). q(X) :- a(X), X >= 4.",
    ]
    for text in texts:
        p1 = parse_program(text)
        p2 = parse_program(pretty_print(p1))
        assert p1 == p2
        assert pretty_print(p1) == pretty_print(p2)


def _parse_unchecked(text):
    from nslogic.parser import _Parser, _tokenize

    return _Parser(_tokenize(text, "<t>"), "<t>").parse()


def test_stratify_single_stratum_without_negation():
    p = parse_program(SUM2)
    strata = stratify(p)
    assert len(strata) == 1
    assert [r.head.relation for r in strata[0]] == ["sum"]


def test_stratify_negated_inputs_stay_single_stratum():
    text = """
    input edge(a:3, b:3).
    input mask(x:3).
    output r(a:3, b:3).
    r(A, B) :- edge(A, B), not mask(A).
    r(A, C) :- r(A, B), edge(B, C).
    """
    assert len(stratify(parse_program(text))) == 1


def test_stratify_cycle_through_negation_fails():
    # p :- not q; q :- p, both derived: the textbook unstratifiable cycle.
    rules = (
        Rule(Atom("p", (Variable("X"),)), (BodyAtom(Atom("a", (Variable("X"),))), BodyAtom(Atom("q", (Variable("X"),)), negated=True))),
        Rule(Atom("q", (Variable("X"),)), (BodyAtom(Atom("p", (Variable("X"),))),)),
    )
    program = Program(
        declarations=(
            RelationDecl("a", 1, "input", ((0, 1),), ("x",)),
            RelationDecl("p", 1, "derived", ((0, 1),), ("x",)),
        ),
        rules=rules,
        query="p",
    )
    with pytest.raises(ProgramError) as e:
        stratify(program)
    assert "unstratifiable" in str(e.value)
    assert any("unstratifiable" in d.message for d in validate(program))


def test_stratify_deterministic_order():
    text = """
    input e(a:3, b:3).
    input m(x:3).
    output q(x:3).
    s(X) :- e(X, _), not m(X).
    t(X) :- s(X).
    q(X) :- t(X), s(X).
    """
    runs = [stratify(parse_program(text)) for _ in range(3)]
    as_names = [[[r.head.relation for r in st] for st in run] for run in runs]
    assert as_names[0] == as_names[1] == as_names[2]


def test_validate_mutations_of_known_good_program():
    # Each single deliberate invariant break must be rejected.
    good = parse_program(SUM2)
    assert validate(good) == []

    # Input relation in a rule head.
    broken = Program(
        good.declarations,
        good.rules + (Rule(Atom("digit", (Constant(0), Constant(1))), (BodyAtom(Atom("sum", (Constant(0),))),)),),
        good.facts,
        good.query,
    )
    assert any("cannot appear in a rule head" in d.message for d in validate(broken))

    # No output relation at all.
    broken = Program(tuple(d for d in good.declarations if d.kind == "input"), good.rules, good.facts, "")
    assert any("exactly one output" in d.message for d in validate(broken))

    # Empty domain.
    bad_decl = RelationDecl("digit", 2, "input", ((0, 1), ()), ("img", "val"))
    broken = Program((bad_decl, good.decl("sum")), good.rules, good.facts, good.query)
    assert any("empty domain" in d.message for d in validate(broken))
