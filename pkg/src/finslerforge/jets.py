"""Forward-mode differentiation via truncated multivariate polynomials (jets).

A :class:`JetAlgebra` fixes the set of monomials dx^a dy^b kept during
arithmetic; the set is downward closed, so kept coefficients are exact Taylor
coefficients of the evaluated function.  Expression trees compile once into a
straight-line program; a numba kernel evaluates the program over either plain
floats or jet coefficient vectors.

Coefficient convention: entry for monomial dx^a dy^b is the Taylor
coefficient, i.e. the partial derivative divided by a! b!.
"""

from __future__ import annotations

import itertools
import math
import os
import threading
from dataclasses import dataclass

import numpy as np

from . import dsl
from .errors import EvalDomainError

_JIT_ENABLED = os.environ.get("FINSLER_FORGE_JIT", "1") != "0"

if _JIT_ENABLED:
    from numba import njit as _njit

    def _jit(func):
        return _njit(cache=True)(func)
else:  # pragma: no cover - debugging escape hatch, exercised manually
    def _jit(func):
        return func


# opcodes
OP_CONST = 0
OP_X = 1
OP_Y = 2
OP_ADD = 3
OP_SUB = 4
OP_MUL = 5
OP_DIV = 6
OP_NEG = 7
OP_SQRT = 8
OP_POWI = 9
OP_POWR = 10
OP_ABS = 11

# evaluation error codes (returned as code * 1_000_000 + op_index)
ERR_SQRT = 1
ERR_DIV0 = 2
ERR_POW = 3
ERR_ABS0 = 4
ERR_NONFINITE = 5

_ERR_MESSAGES = {
    ERR_SQRT: "sqrt argument outside domain",
    ERR_DIV0: "division by zero",
    ERR_POW: "power outside domain",
    ERR_ABS0: "abs is not differentiable at zero",
    ERR_NONFINITE: "non-finite value",
}


class JetAlgebra:
    """Monomial basis and multiplication table for one truncation profile.

    ``boxes`` is a tuple of (max_x_order, max_y_order) pairs; a monomial is
    kept if it fits into at least one box.  The union of boxes is downward
    closed, which keeps truncated products exact on the kept set.
    """

    def __init__(self, dim, boxes):
        self.dim = dim
        self.boxes = tuple(sorted(set(boxes)))
        mono = []
        max_px = max(b[0] for b in self.boxes)
        max_py = max(b[1] for b in self.boxes)
        for a in _exponents(dim, max_px):
            for b in _exponents(dim, max_py):
                ta, tb = sum(a), sum(b)
                if any(ta <= px and tb <= py for px, py in self.boxes):
                    mono.append(a + b)
        # sort: total order, then x-order, then lexicographic; constant first
        mono.sort(key=lambda e: (sum(e), sum(e[:dim]), e))
        self.exps = np.array(mono, dtype=np.int64)
        self.size = len(mono)
        self.index = {tuple(e): i for i, e in enumerate(mono)}
        self.max_total = int(self.exps.sum(axis=1).max())
        # factorial multiplicity: derivative = coefficient * fact[i]
        self.fact = np.array(
            [float(np.prod([math.factorial(int(k)) for k in e]))
             for e in mono])
        self.x_mono = np.array(
            [self.index.get(_unit(dim, i, True), -1) for i in range(dim)],
            dtype=np.int64)
        self.y_mono = np.array(
            [self.index.get(_unit(dim, i, False), -1) for i in range(dim)],
            dtype=np.int64)
        mi, mj, mk = [], [], []
        for i, ei in enumerate(mono):
            for j, ej in enumerate(mono):
                prod = tuple(p + q for p, q in zip(ei, ej))
                k = self.index.get(prod)
                if k is not None:
                    mi.append(i)
                    mj.append(j)
                    mk.append(k)
        self.mul_i = np.array(mi, dtype=np.int64)
        self.mul_j = np.array(mj, dtype=np.int64)
        self.mul_k = np.array(mk, dtype=np.int64)

    def idx(self, x_exp=(), y_exp=()):
        """Monomial index for exponent multisets given as coordinate tuples."""
        e = [0] * (2 * self.dim)
        for i in x_exp:
            e[i] += 1
        for i in y_exp:
            e[self.dim + i] += 1
        return self.index[tuple(e)]

    def mul(self, a, b):
        """Truncated product of two coefficient vectors (test/support path)."""
        return np.bincount(self.mul_k, weights=a[self.mul_i] * b[self.mul_j],
                           minlength=self.size)


def _exponents(dim, max_total):
    out = []
    for total in range(max_total + 1):
        for c in itertools.combinations_with_replacement(range(dim), total):
            e = [0] * dim
            for i in c:
                e[i] += 1
            out.append(tuple(e))
    return out


def _unit(dim, i, is_x):
    e = [0] * (2 * dim)
    e[i if is_x else dim + i] = 1
    return tuple(e)


_algebra_cache = {}
_algebra_lock = threading.Lock()


def get_algebra(dim, boxes):
    key = (dim, tuple(sorted(set(boxes))))
    with _algebra_lock:
        alg = _algebra_cache.get(key)
        if alg is None:
            alg = JetAlgebra(dim, boxes)
            _algebra_cache[key] = alg
        return alg


# standard truncation profiles
def spray_algebra(dim):
    """Enough for the geodesic spray: g plus first mixed x,y derivatives."""
    return get_algebra(dim, ((1, 1), (0, 2)))


def metric_algebra(dim):
    """Fundamental tensor only."""
    return get_algebra(dim, ((0, 2),))


def connection_algebra(dim):
    """Cartan tensor, formal Christoffels, nonlinear and Chern connection."""
    return get_algebra(dim, ((1, 3),))


def curvature_algebra(dim):
    """One more x-order for the hh-curvature of the Chern connection."""
    return get_algebra(dim, ((1, 3), (2, 2)))


# ---------------------------------------------------------------------------
# program compilation

@dataclass
class Program:
    """Straight-line form of an expression tree (one slot per node)."""

    ops: np.ndarray
    arg1: np.ndarray
    arg2: np.ndarray
    payload: np.ndarray
    spans: list
    dim: int


def compile_program(root, dim):
    ops, arg1, arg2, payload, spans = [], [], [], [], []

    def emit(op, a1=-1, a2=-1, pay=0.0, span=None):
        ops.append(op)
        arg1.append(a1)
        arg2.append(a2)
        payload.append(pay)
        spans.append(span)
        return len(ops) - 1

    def walk(node):
        k = node.kind
        if k == dsl.CONST:
            return emit(OP_CONST, pay=float(node.value), span=node.span)
        if k == dsl.COORD_X:
            return emit(OP_X, a1=int(node.value), span=node.span)
        if k == dsl.COORD_Y:
            return emit(OP_Y, a1=int(node.value), span=node.span)
        if k == dsl.NEG:
            return emit(OP_NEG, a1=walk(node.children[0]), span=node.span)
        if k == dsl.SQRT:
            return emit(OP_SQRT, a1=walk(node.children[0]), span=node.span)
        if k == dsl.ABS:
            return emit(OP_ABS, a1=walk(node.children[0]), span=node.span)
        if k == dsl.POW:
            base = walk(node.children[0])
            e = float(node.value)
            if abs(e - round(e)) < 1e-12:
                return emit(OP_POWI, a1=base, pay=float(round(e)),
                            span=node.span)
            return emit(OP_POWR, a1=base, pay=e, span=node.span)
        a = walk(node.children[0])
        b = walk(node.children[1])
        op = {dsl.ADD: OP_ADD, dsl.SUB: OP_SUB,
              dsl.MUL: OP_MUL, dsl.DIV: OP_DIV}[k]
        return emit(op, a1=a, a2=b, span=node.span)

    walk(root)
    return Program(np.array(ops, dtype=np.int64),
                   np.array(arg1, dtype=np.int64),
                   np.array(arg2, dtype=np.int64),
                   np.array(payload, dtype=np.float64),
                   spans, dim)


# ---------------------------------------------------------------------------
# kernels

@_jit
def _vec_mul(out, a, b, mi, mj, mk):
    for c in range(out.shape[0]):
        out[c] = 0.0
    for p in range(mi.shape[0]):
        out[mk[p]] += a[mi[p]] * b[mj[p]]


@_jit
def _vec_pow(out, a, r, integer_r, D, mi, mj, mk):
    """out = a**r by Taylor/Horner composition; returns error code or 0."""
    m = a.shape[0]
    a0 = a[0]
    if integer_r:
        if a0 == 0.0:
            return ERR_POW
    else:
        if a0 <= 0.0:
            return ERR_POW
    t = np.empty(D + 1)
    t[0] = a0 ** r
    for d in range(1, D + 1):
        t[d] = t[d - 1] * (r - d + 1.0) / (d * a0)
    delta = np.empty(m)
    for c in range(m):
        delta[c] = a[c]
    delta[0] = 0.0
    res = np.zeros(m)
    res[0] = t[D]
    tmp = np.empty(m)
    for d in range(D - 1, -1, -1):
        _vec_mul(tmp, res, delta, mi, mj, mk)
        for c in range(m):
            res[c] = tmp[c]
        res[0] += t[d]
    for c in range(m):
        out[c] = res[c]
    return 0


@_jit
def jet_program_eval(ops, arg1, arg2, payload, x, y, x_mono, y_mono,
                     mi, mj, mk, max_total, W):
    """Evaluate all program slots as jets; nonzero return = code*1e6 + op index."""
    m = W.shape[1]
    for s in range(ops.shape[0]):
        o = ops[s]
        if o == OP_CONST:
            for c in range(m):
                W[s, c] = 0.0
            W[s, 0] = payload[s]
        elif o == OP_X:
            for c in range(m):
                W[s, c] = 0.0
            W[s, 0] = x[arg1[s]]
            if x_mono[arg1[s]] >= 0:
                W[s, x_mono[arg1[s]]] = 1.0
        elif o == OP_Y:
            for c in range(m):
                W[s, c] = 0.0
            W[s, 0] = y[arg1[s]]
            if y_mono[arg1[s]] >= 0:
                W[s, y_mono[arg1[s]]] = 1.0
        elif o == OP_ADD:
            i, j = arg1[s], arg2[s]
            for c in range(m):
                W[s, c] = W[i, c] + W[j, c]
        elif o == OP_SUB:
            i, j = arg1[s], arg2[s]
            for c in range(m):
                W[s, c] = W[i, c] - W[j, c]
        elif o == OP_MUL:
            _vec_mul(W[s], W[arg1[s]], W[arg2[s]], mi, mj, mk)
        elif o == OP_NEG:
            i = arg1[s]
            for c in range(m):
                W[s, c] = -W[i, c]
        elif o == OP_DIV:
            rec = np.empty(m)
            err = _vec_pow(rec, W[arg2[s]], -1.0, True, max_total, mi, mj, mk)
            if err != 0:
                return ERR_DIV0 * 1000000 + s
            _vec_mul(W[s], W[arg1[s]], rec, mi, mj, mk)
        elif o == OP_SQRT:
            err = _vec_pow(W[s], W[arg1[s]], 0.5, False, max_total, mi, mj, mk)
            if err != 0:
                return ERR_SQRT * 1000000 + s
        elif o == OP_POWI:
            k = int(payload[s])
            i = arg1[s]
            if k >= 0:
                for c in range(m):
                    W[s, c] = 0.0
                W[s, 0] = 1.0
                tmp = np.empty(m)
                for _ in range(k):
                    _vec_mul(tmp, W[s], W[i], mi, mj, mk)
                    for c in range(m):
                        W[s, c] = tmp[c]
            else:
                pos = np.empty(m)
                for c in range(m):
                    pos[c] = 0.0
                pos[0] = 1.0
                tmp = np.empty(m)
                for _ in range(-k):
                    _vec_mul(tmp, pos, W[i], mi, mj, mk)
                    for c in range(m):
                        pos[c] = tmp[c]
                err = _vec_pow(W[s], pos, -1.0, True, max_total, mi, mj, mk)
                if err != 0:
                    return ERR_POW * 1000000 + s
        elif o == OP_POWR:
            err = _vec_pow(W[s], W[arg1[s]], payload[s], False, max_total,
                           mi, mj, mk)
            if err != 0:
                return ERR_POW * 1000000 + s
        elif o == OP_ABS:
            i = arg1[s]
            if W[i, 0] > 0.0:
                for c in range(m):
                    W[s, c] = W[i, c]
            elif W[i, 0] < 0.0:
                for c in range(m):
                    W[s, c] = -W[i, c]
            else:
                return ERR_ABS0 * 1000000 + s
    last = ops.shape[0] - 1
    for c in range(m):
        if not np.isfinite(W[last, c]):
            return ERR_NONFINITE * 1000000 + last
    return 0


@_jit
def float_program_eval(ops, arg1, arg2, payload, x, y, vals):
    """Plain scalar evaluation of a compiled program."""
    for s in range(ops.shape[0]):
        o = ops[s]
        if o == OP_CONST:
            vals[s] = payload[s]
        elif o == OP_X:
            vals[s] = x[arg1[s]]
        elif o == OP_Y:
            vals[s] = y[arg1[s]]
        elif o == OP_ADD:
            vals[s] = vals[arg1[s]] + vals[arg2[s]]
        elif o == OP_SUB:
            vals[s] = vals[arg1[s]] - vals[arg2[s]]
        elif o == OP_MUL:
            vals[s] = vals[arg1[s]] * vals[arg2[s]]
        elif o == OP_DIV:
            if vals[arg2[s]] == 0.0:
                return ERR_DIV0 * 1000000 + s
            vals[s] = vals[arg1[s]] / vals[arg2[s]]
        elif o == OP_NEG:
            vals[s] = -vals[arg1[s]]
        elif o == OP_SQRT:
            if vals[arg1[s]] < 0.0:
                return ERR_SQRT * 1000000 + s
            vals[s] = math.sqrt(vals[arg1[s]])
        elif o == OP_POWI:
            k = int(payload[s])
            base = vals[arg1[s]]
            if k < 0 and base == 0.0:
                return ERR_POW * 1000000 + s
            vals[s] = base ** k
        elif o == OP_POWR:
            base = vals[arg1[s]]
            if base < 0.0 or (base == 0.0 and payload[s] < 0.0):
                return ERR_POW * 1000000 + s
            vals[s] = base ** payload[s]
        elif o == OP_ABS:
            vals[s] = abs(vals[arg1[s]])
    last = ops.shape[0] - 1
    if not np.isfinite(vals[last]):
        return ERR_NONFINITE * 1000000 + last
    return 0


# ---------------------------------------------------------------------------
# wrappers

def _raise_eval_error(status, prog):
    code, op_idx = divmod(int(status), 1000000)
    span = prog.spans[op_idx] if op_idx < len(prog.spans) else None
    raise EvalDomainError(_ERR_MESSAGES.get(code, "evaluation error"), span)


def eval_float(prog, x, y):
    vals = np.empty(prog.ops.shape[0])
    status = float_program_eval(prog.ops, prog.arg1, prog.arg2, prog.payload,
                                np.asarray(x, dtype=float),
                                np.asarray(y, dtype=float), vals)
    if status != 0:
        _raise_eval_error(status, prog)
    return float(vals[-1])


def eval_jet(prog, alg, x, y):
    """Jet of the program's value at (x, y) in the given algebra."""
    W = np.empty((prog.ops.shape[0], alg.size))
    status = jet_program_eval(prog.ops, prog.arg1, prog.arg2, prog.payload,
                              np.asarray(x, dtype=float),
                              np.asarray(y, dtype=float),
                              alg.x_mono, alg.y_mono,
                              alg.mul_i, alg.mul_j, alg.mul_k,
                              alg.max_total, W)
    if status != 0:
        _raise_eval_error(status, prog)
    return W[-1].copy()


def half_square(alg, f_jet):
    """Jet of (1/2) f^2 from the jet of f."""
    return 0.5 * alg.mul(f_jet, f_jet)
