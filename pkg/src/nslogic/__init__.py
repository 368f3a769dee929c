"""nslogic: a differentiable probabilistic Datalog-lite engine with an
assurance evaluation harness (calibration, adversarial and corruption
robustness, user parity, and symbolic-shortcut inspection)."""

from .kernels import BACKEND
from .logic import (
    Arith,
    Atom,
    BodyAtom,
    Constant,
    Diagnostic,
    ExclusionGroup,
    Guard,
    Program,
    ProgramError,
    RelationDecl,
    Rule,
    Variable,
    pretty_print,
    stratify,
    validate,
)
from .parser import load_program, parse_program
from .provenance import (
    EMPTY_BAG,
    UNIT_BAG,
    FactSpace,
    InputLiteral,
    ProbAssignment,
    Proof,
    ProofBag,
    dnf_gradient,
    dnf_probability,
    oplus,
    otimes,
    singleton,
)

__version__ = "0.1.0"
