"""Engine boundary for foreign runtimes: a framed binary protocol on stdio.

External tensor frameworks drive compile/forward/backward through this
process to train their own perception models against the reasoner.  The
protocol is deliberately C-ABI-flavored: fixed little-endian frames, flat
float64 arrays in grounding order (see `fact_names`), and numeric status
codes instead of exceptions.

Request frame:   u8 opcode | u32 payload_len | payload
Response frame:  u8 status | u32 payload_len | payload

Opcodes:
  1 COMPILE      payload = u32 k | utf-8 program source -> u32 handle
  2 FACT_NAMES   payload = u32 handle -> newline-joined fact names (grounding order)
  3 OUTPUT_NAMES payload = u32 handle -> newline-joined answer tuples
  4 FORWARD      payload = u32 handle | n x f64 fact probabilities -> m x f64
  5 BACKWARD     payload = u32 handle | m x f64 upstream -> n x f64 fact gradients
  6 SET_TEST_K   payload = u32 handle | u32 k -> empty
  7 RELEASE      payload = u32 handle -> empty

Status codes:
  0 ok
  1 parse/validate/compile failure (payload = utf-8 diagnostics)
  2 unknown or released handle
  3 payload/array length or value mismatch
  4 stale state: backward before forward on this handle
  5 malformed request

Handles are process-local and independent; releasing one never touches
another.  EOF on stdin shuts the server down.
"""

from __future__ import annotations

import struct
import sys

import numpy as np

from .parser import parse_program
from .logic import ProgramError
from .reasoner import CompileError, compile_program

OK = 0
ERR_COMPILE = 1
ERR_HANDLE = 2
ERR_LENGTH = 3
ERR_STALE = 4
ERR_MALFORMED = 5

OP_COMPILE = 1
OP_FACT_NAMES = 2
OP_OUTPUT_NAMES = 3
OP_FORWARD = 4
OP_BACKWARD = 5
OP_SET_TEST_K = 6
OP_RELEASE = 7


class _Handle:
    __slots__ = ("session", "last_env", "last_forward")

    def __init__(self, session):
        self.session = session
        self.last_env = None
        self.last_forward = None


class EngineServer:
    """Protocol state machine, decoupled from the transport for testing."""

    def __init__(self):
        self.handles = {}
        self.next_id = 1

    def handle_request(self, opcode, payload):
        try:
            return self._dispatch(opcode, payload)
        except (struct.error, IndexError, UnicodeDecodeError):
            return ERR_MALFORMED, b"malformed request payload"

    def _dispatch(self, opcode, payload):
        if opcode == OP_COMPILE:
            (k,) = struct.unpack_from("<I", payload, 0)
            source = payload[4:].decode("utf-8")
            try:
                program = parse_program(source, path="<boundary>")
                session = compile_program(program, max(1, k))
            except (ProgramError, CompileError) as e:
                return ERR_COMPILE, str(e).encode("utf-8")
            handle = self.next_id
            self.next_id += 1
            self.handles[handle] = _Handle(session)
            return OK, struct.pack("<I", handle)

        if opcode not in (OP_FACT_NAMES, OP_OUTPUT_NAMES, OP_FORWARD, OP_BACKWARD, OP_SET_TEST_K, OP_RELEASE):
            return ERR_MALFORMED, f"unknown opcode {opcode}".encode()
        (hid,) = struct.unpack_from("<I", payload, 0)
        state = self.handles.get(hid)
        if state is None:
            return ERR_HANDLE, f"unknown or released handle {hid}".encode()
        session = state.session

        if opcode == OP_FACT_NAMES:
            return OK, "\n".join(session.fact_names).encode("utf-8")
        if opcode == OP_OUTPUT_NAMES:
            names = ["(" + ", ".join(map(str, t)) + ")" for t in session.answers]
            return OK, "\n".join(names).encode("utf-8")
        if opcode == OP_FORWARD:
            values = np.frombuffer(payload, dtype="<f8", offset=4)
            if values.size != session.n_facts:
                return ERR_LENGTH, f"expected {session.n_facts} fact probabilities, got {values.size}".encode()
            try:
                env = session.assignment(values)
            except ValueError as e:
                return ERR_LENGTH, str(e).encode("utf-8")
            out = session.forward(env)
            state.last_env = env
            state.last_forward = out
            return OK, np.ascontiguousarray(out.probs, dtype="<f8").tobytes()
        if opcode == OP_BACKWARD:
            upstream = np.frombuffer(payload, dtype="<f8", offset=4)
            if state.last_forward is None:
                return ERR_STALE, b"backward before forward on this handle"
            if upstream.size != len(session.answers):
                return ERR_LENGTH, f"expected {len(session.answers)} upstream values, got {upstream.size}".encode()
            upstream_map = {a: float(g) for a, g in zip(session.answers, upstream)}
            grad = session.backward(state.last_env, upstream_map, forward=state.last_forward)
            return OK, np.ascontiguousarray(grad, dtype="<f8").tobytes()
        if opcode == OP_SET_TEST_K:
            (k,) = struct.unpack_from("<I", payload, 4)
            if k < 1:
                return ERR_LENGTH, b"k must be at least 1"
            state.session = session.set_test_k(k)
            state.last_env = None
            state.last_forward = None
            return OK, b""
        del self.handles[hid]  # OP_RELEASE
        return OK, b""


def serve(stdin=None, stdout=None):
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    server = EngineServer()
    while True:
        header = stdin.read(5)
        if len(header) < 5:
            return 0
        opcode, length = struct.unpack("<BI", header)
        payload = stdin.read(length) if length else b""
        if len(payload) < length:
            return 0
        status, body = server.handle_request(opcode, payload)
        stdout.write(struct.pack("<BI", status, len(body)))
        stdout.write(body)
        stdout.flush()


if __name__ == "__main__":
    sys.exit(serve())
