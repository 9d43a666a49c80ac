"""Dense two-phase tableau simplex.

Dantzig pricing with a switch to Bland's rule once a run of degenerate pivots
suggests cycling. Meant for the small reference problems of this package, not
as a general-purpose solver.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LE, EQ, GE = "<=", "==", ">="


@dataclass
class LinearProgram:
    """``min c.x`` subject to ``A x (senses) b`` and ``lb <= x <= ub``."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    senses: list
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        n = self.c.size
        self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.senses = list(self.senses)
        self.lb = np.broadcast_to(np.asarray(self.lb, dtype=float), (n,)).copy()
        self.ub = np.broadcast_to(np.asarray(self.ub, dtype=float), (n,)).copy()
        if self.A.shape[0] != self.b.size or len(self.senses) != self.b.size:
            raise ValueError("constraint matrix, right-hand side and senses disagree in length")
        if any(s not in (LE, EQ, GE) for s in self.senses):
            raise ValueError(f"unknown constraint sense in {set(self.senses)}")
        if not (np.all(np.isfinite(self.c)) and np.all(np.isfinite(self.A)) and np.all(np.isfinite(self.b))):
            raise ValueError("LP coefficients must be finite")

    @property
    def num_vars(self) -> int:
        return self.c.size

    @property
    def num_rows(self) -> int:
        return self.b.size

    def dump(self) -> str:
        """Plain-text listing, one constraint per line, for external cross-checks."""
        lines = [f"vars {self.num_vars} rows {self.num_rows}",
                 "min " + " ".join(repr(float(v)) for v in self.c)]
        for row, sense, rhs in zip(self.A, self.senses, self.b):
            lines.append(" ".join(repr(float(v)) for v in row) + f" {sense} {float(rhs)!r}")
        for j, (lo, hi) in enumerate(zip(self.lb, self.ub)):
            lines.append(f"bound {j} {float(lo)!r} {float(hi)!r}")
        return "\n".join(lines) + "\n"


@dataclass
class LPResult:
    status: str
    value: float
    x: np.ndarray | None
    iterations: int = 0


def _pivot(T, i, j):
    T[i] /= T[i, j]
    col = T[:, j].copy()
    col[i] = 0.0
    T -= np.outer(col, T[i])


def _iterate(T, basis, ncols, tol, max_iter, counter):
    m = T.shape[0] - 1
    degenerate = 0
    bland = False
    while counter[0] < max_iter:
        rc = T[-1, :ncols]
        if bland:
            cand = np.flatnonzero(rc < -tol)
            if cand.size == 0:
                return "optimal"
            j = int(cand[0])
        else:
            j = int(np.argmin(rc))
            if rc[j] >= -tol:
                return "optimal"
        col = T[:m, j]
        pos = col > tol
        if not np.any(pos):
            return "unbounded"
        ratios = np.full(m, np.inf)
        ratios[pos] = T[:m, -1][pos] / col[pos]
        rmin = ratios.min()
        ties = np.flatnonzero(ratios <= rmin + 1e-12 * max(1.0, abs(rmin)))
        i = int(ties[np.argmin(basis[ties])])
        degenerate = degenerate + 1 if T[i, -1] <= tol else 0
        if degenerate > 30:
            bland = True
        _pivot(T, i, j)
        basis[i] = j
        counter[0] += 1
    return "iteration_limit"


def simplex_solve(lp: LinearProgram, tol: float = 1e-10, feas_tol: float = 1e-8,
                  max_iter: int = 100_000) -> LPResult:
    """Solve ``lp``; status is ``optimal``, ``infeasible`` or ``unbounded``."""
    n = lp.num_vars
    # x = shift + M y with y >= 0
    shift = np.zeros(n)
    cols = []
    extra = []
    for j in range(n):
        lo, hi = lp.lb[j], lp.ub[j]
        if lo > hi:
            return LPResult("infeasible", np.inf, None)
        if np.isfinite(lo):
            shift[j] = lo
            cols.append((j, 1.0))
            if np.isfinite(hi):
                extra.append((len(cols) - 1, hi - lo))
        elif np.isfinite(hi):
            shift[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    ns = len(cols)
    M = np.zeros((n, ns))
    for k, (j, s) in enumerate(cols):
        M[j, k] = s
    A = lp.A @ M
    b = lp.b - lp.A @ shift
    senses = list(lp.senses)
    if extra:
        rows = np.zeros((len(extra), ns))
        for r, (k, cap) in enumerate(extra):
            rows[r, k] = 1.0
        A = np.vstack([A, rows])
        b = np.concatenate([b, [cap for _, cap in extra]])
        senses += [LE] * len(extra)
    c = lp.c @ M

    m = b.size
    flip = b < 0
    A[flip] *= -1
    b[flip] *= -1
    senses = [({LE: GE, GE: LE}.get(s, s) if f else s) for s, f in zip(senses, flip)]
    n_slack = sum(s != EQ for s in senses)
    needs_art = [s != LE for s in senses]
    n_art = sum(needs_art)
    width = ns + n_slack + n_art
    T = np.zeros((m + 1, width + 1))
    T[:m, :ns] = A
    T[:m, -1] = b
    basis = np.zeros(m, dtype=int)
    sk, ak = ns, ns + n_slack
    for i, s in enumerate(senses):
        if s == LE:
            T[i, sk] = 1.0
            basis[i] = sk
            sk += 1
        elif s == GE:
            T[i, sk] = -1.0
            sk += 1
        if needs_art[i]:
            T[i, ak] = 1.0
            basis[i] = ak
            ak += 1
    counter = [0]
    art_start = ns + n_slack
    if n_art:
        art_rows = np.array(needs_art)
        T[-1, :art_start] = -T[:m][art_rows, :art_start].sum(axis=0)
        T[-1, -1] = -T[:m][art_rows, -1].sum()
        status = _iterate(T, basis, width, tol, max_iter, counter)
        if status == "iteration_limit":
            return LPResult(status, np.nan, None, counter[0])
        scale = max(1.0, float(np.abs(b).max(initial=0.0)))
        if -T[-1, -1] > feas_tol * scale:
            return LPResult("infeasible", np.inf, None, counter[0])
        keep = np.ones(m, dtype=bool)
        for i in range(m):
            if basis[i] >= art_start:
                cand = np.flatnonzero(np.abs(T[i, :art_start]) > 1e-9)
                if cand.size:
                    _pivot(T, i, int(cand[0]))
                    basis[i] = int(cand[0])
                else:
                    keep[i] = False
        T = np.vstack([T[:m][keep], T[-1:]])
        basis = basis[keep]
        T = np.hstack([T[:, :art_start], T[:, -1:]])
        m = basis.size
    width = art_start
    T[-1, :] = 0.0
    T[-1, :ns] = c
    for i in range(m):
        cb = T[-1, basis[i]]
        if cb != 0.0:
            T[-1] -= cb * T[i]
    status = _iterate(T, basis, width, tol, max_iter, counter)
    if status != "optimal":
        return LPResult(status, -np.inf if status == "unbounded" else np.nan, None, counter[0])
    y = np.zeros(width)
    y[basis] = T[:m, -1]
    x = shift + M @ y[:ns]
    return LPResult("optimal", float(lp.c @ x), x, counter[0])
