"""Problem definitions: operators, constraint sets, and KKT bookkeeping.

A variational inequality VI(F, C) asks for x* in C with
(x - x*)' F(x*) >= 0 for all x in C.  The constraint set is described by
smooth inequalities g(x) <= 0 and affine equalities h(x) = Hx - c_h = 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

DEFAULT_TOL_ACTIVE = 1e-8


class DimensionMismatch(ValueError):
    """Point or matrix dimensions inconsistent with the problem."""


@dataclass(frozen=True)
class Operator:
    """The map F of a variational inequality, with declared regularity.

    ``mu`` is the declared strong-monotonicity constant (0 for merely
    monotone) and ``lipschitz`` the declared global Lipschitz constant.
    Both are trusted inputs; see :func:`probe_monotonicity` for an
    empirical check.
    """

    dim: int
    func: Callable[[np.ndarray], np.ndarray]
    jacobian: Optional[Callable[[np.ndarray], np.ndarray]] = None
    mu: float = 0.0
    lipschitz: Optional[float] = None
    name: str = ""
    # (Q, r) when F(x) = Qx + r; lets integrators skip per-point closures
    linear: Optional[tuple] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("operator dimension must be positive")
        if self.mu < 0:
            raise ValueError("monotonicity constant must be >= 0")
        if self.lipschitz is not None and self.lipschitz <= 0:
            raise ValueError("Lipschitz constant must be > 0")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DimensionMismatch(
                f"expected point in R^{self.dim}, got shape {x.shape}")
        return np.asarray(self.func(x), dtype=float)


def affine_operator(Q: np.ndarray, r: np.ndarray, name: str = "") -> Operator:
    """F(x) = Qx + r with mu and Lipschitz constant computed from Q."""
    Q = np.asarray(Q, dtype=float)
    r = np.asarray(r, dtype=float)
    n = Q.shape[0]
    if Q.shape != (n, n) or r.shape != (n,):
        raise DimensionMismatch("Q must be n x n and r length n")
    mu = float(np.linalg.eigvalsh(0.5 * (Q + Q.T))[0])
    ell = float(np.linalg.norm(Q, 2))
    return Operator(
        dim=n,
        func=lambda x: Q @ x + r,
        jacobian=lambda x: Q,
        mu=max(mu, 0.0),
        lipschitz=ell if ell > 0 else None,
        name=name,
        linear=(Q, r),
    )


class ConstraintSet:
    """C = {x : g(x) <= 0, Hx - c_h = 0}, optionally polyhedral.

    For polyhedral sets g(x) = Gx - c_g.  Box sets (each row of G a
    signed unit vector, no equalities) get closed-form projections in
    the flows; the structure is detected at construction.
    """

    def __init__(self, n, m, k, g, g_jacobian, g_hessians=None,
                 H=None, c_h=None, G=None, c_g=None, rng_seed=0):
        self.n = int(n)
        self.m = int(m)
        self.k = int(k)
        self._g = g
        self._g_jac = g_jacobian
        self._g_hess = g_hessians
        if self.k > 0:
            self.H = np.asarray(H, dtype=float).reshape(self.k, self.n)
            self.c_h = np.asarray(c_h, dtype=float).reshape(self.k)
        else:
            self.H = np.zeros((0, self.n))
            self.c_h = np.zeros(0)
        self.polyhedral = G is not None
        if self.polyhedral:
            self.G = np.asarray(G, dtype=float).reshape(self.m, self.n)
            self.c_g = np.asarray(c_g, dtype=float).reshape(self.m)
        else:
            self.G = None
            self.c_g = None
        self._check_equalities_affine(rng_seed)
        self._box = self._detect_box()

    # -- constructors ------------------------------------------------

    @classmethod
    def polyhedron(cls, G, c_g, H=None, c_h=None):
        G = np.atleast_2d(np.asarray(G, dtype=float))
        c_g = np.atleast_1d(np.asarray(c_g, dtype=float))
        m, n = G.shape
        k = 0 if H is None else np.atleast_2d(H).shape[0]
        return cls(
            n, m, k,
            g=lambda x: G @ x - c_g,
            g_jacobian=lambda x: G,
            g_hessians=lambda x: np.zeros((m, n, n)),
            H=H, c_h=c_h, G=G, c_g=c_g,
        )

    @classmethod
    def box(cls, lower, upper):
        """[lower_1, upper_1] x ... x [lower_n, upper_n]; infinities allowed."""
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        n = lower.size
        rows, offs = [], []
        for j in range(n):
            if np.isfinite(upper[j]):
                e = np.zeros(n)
                e[j] = 1.0
                rows.append(e)
                offs.append(upper[j])
            if np.isfinite(lower[j]):
                e = np.zeros(n)
                e[j] = -1.0
                rows.append(e)
                offs.append(-lower[j])
        return cls.polyhedron(np.array(rows), np.array(offs))

    @classmethod
    def smooth(cls, n, g, g_jacobian, g_hessians=None, m=None,
               H=None, c_h=None):
        if m is None:
            m = np.atleast_1d(g(np.zeros(n))).size
        k = 0 if H is None else np.atleast_2d(H).shape[0]
        return cls(n, m, k, g=g, g_jacobian=g_jacobian,
                   g_hessians=g_hessians, H=H, c_h=c_h)

    # -- evaluation ---------------------------------------------------

    def g(self, x: np.ndarray) -> np.ndarray:
        x = self._check_point(x)
        if self.m == 0:
            return np.zeros(0)
        return np.atleast_1d(np.asarray(self._g(x), dtype=float))

    def g_jacobian(self, x: np.ndarray) -> np.ndarray:
        x = self._check_point(x)
        if self.m == 0:
            return np.zeros((0, self.n))
        return np.atleast_2d(np.asarray(self._g_jac(x), dtype=float))

    def g_hessians(self, x: np.ndarray) -> Optional[np.ndarray]:
        if self._g_hess is None:
            return None
        return np.asarray(self._g_hess(self._check_point(x)), dtype=float)

    def h(self, x: np.ndarray) -> np.ndarray:
        x = self._check_point(x)
        return self.H @ x - self.c_h

    def contains(self, x, tol=DEFAULT_TOL_ACTIVE) -> bool:
        gx = self.g(x)
        hx = self.h(x)
        ok_g = self.m == 0 or float(np.max(gx)) <= tol
        ok_h = self.k == 0 or float(np.max(np.abs(hx))) <= tol
        return ok_g and ok_h

    @property
    def is_box(self) -> bool:
        return self._box is not None

    def box_bounds(self):
        """(lower, upper, row_of_upper, row_of_lower) for box sets."""
        if self._box is None:
            raise ValueError("constraint set is not a box")
        return self._box

    # -- internals ----------------------------------------------------

    def _check_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise DimensionMismatch(
                f"expected point in R^{self.n}, got shape {x.shape}")
        return x

    def _check_equalities_affine(self, seed):
        if self.k == 0:
            return
        rng = np.random.default_rng(seed)
        for _ in range(10):
            x = rng.standard_normal(self.n)
            y = rng.standard_normal(self.n)
            resid = (self.H @ (x + y) - self.c_h) - (self.H @ x - self.c_h) \
                - self.H @ y
            if np.max(np.abs(resid)) > 1e-10:
                raise ValueError("equality constraints are not affine")

    def _detect_box(self):
        if not self.polyhedral or self.k > 0 or self.m == 0:
            return None
        lower = np.full(self.n, -np.inf)
        upper = np.full(self.n, np.inf)
        row_up = np.full(self.n, -1, dtype=int)
        row_lo = np.full(self.n, -1, dtype=int)
        for i in range(self.m):
            row = self.G[i]
            nz = np.flatnonzero(row)
            if nz.size != 1 or abs(abs(row[nz[0]]) - 1.0) > 0:
                return None
            j = nz[0]
            if row[j] > 0:
                if self.c_g[i] < upper[j]:
                    upper[j] = self.c_g[i]
                    row_up[j] = i
            else:
                if -self.c_g[i] > lower[j]:
                    lower[j] = -self.c_g[i]
                    row_lo[j] = i
        return lower, upper, row_up, row_lo


@dataclass
class ActiveSets:
    """Classification of inequality constraints at a point."""

    I0: np.ndarray
    I_minus: np.ndarray
    I_plus: np.ndarray
    I_h: np.ndarray


@dataclass
class KKTTriple:
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=float))
        self.u = np.atleast_1d(np.asarray(self.u, dtype=float)) \
            if self.u is not None else np.zeros(0)
        self.v = np.atleast_1d(np.asarray(self.v, dtype=float)) \
            if self.v is not None else np.zeros(0)


def active_sets(C: ConstraintSet, x, tol_active: float = DEFAULT_TOL_ACTIVE
                ) -> ActiveSets:
    """Partition constraints into active / inactive / violated at x."""
    if tol_active <= 0:
        raise ValueError("tol_active must be positive")
    gx = C.g(x)
    hx = C.h(x)
    return ActiveSets(
        I0=np.flatnonzero(np.abs(gx) <= tol_active),
        I_minus=np.flatnonzero(gx < -tol_active),
        I_plus=np.flatnonzero(gx > tol_active),
        I_h=np.flatnonzero(np.abs(hx) > tol_active),
    )


def kkt_residual(F: Operator, C: ConstraintSet, T: KKTTriple) -> float:
    """Max violation of the KKT system at (x, u, v); 0 iff it holds exactly."""
    x, u, v = T.x, T.u, T.v
    if u.shape != (C.m,) or v.shape != (C.k,):
        raise DimensionMismatch("multiplier dimensions inconsistent with C")
    gx = C.g(x)
    hx = C.h(x)
    stat = F(x)
    if C.m:
        stat = stat + C.g_jacobian(x).T @ u
    if C.k:
        stat = stat + C.H.T @ v
    parts = [float(np.max(np.abs(stat)))]
    if C.m:
        parts.append(float(np.max(np.maximum(gx, 0.0))))
        parts.append(float(np.max(np.maximum(-u, 0.0))))
        parts.append(abs(float(u @ gx)))
    if C.k:
        parts.append(float(np.max(np.abs(hx))))
    return max(parts)


def natural_residual(F: Operator, C: Optional[ConstraintSet], x,
                     projector: Callable[[np.ndarray], np.ndarray]) -> float:
    """||x - Proj_C(x - F(x))||, the standard VI merit; 0 iff x solves VI."""
    x = np.asarray(x, dtype=float)
    y = x - F(x)
    return float(np.linalg.norm(x - projector(y)))


def probe_monotonicity(F: Operator, sample_pairs) -> float:
    """Empirical lower bound on the strong-monotonicity constant of F.

    Returns min over pairs of (x - y)'(F(x) - F(y)) / ||x - y||^2.
    """
    pairs = list(sample_pairs)
    if not pairs:
        raise ValueError("need at least one sample pair")
    best = np.inf
    for x, y in pairs:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        d = x - y
        nd2 = float(d @ d)
        if nd2 == 0.0:
            raise ValueError("sample pair with x == y")
        best = min(best, float(d @ (F(x) - F(y))) / nd2)
    return best


def check_jacobian(F: Operator, points, h: float = 1e-6, tol: float = 1e-4
                   ) -> float:
    """Max relative error between F.jacobian and finite differences."""
    if F.jacobian is None:
        raise ValueError("operator has no Jacobian")
    worst = 0.0
    for x in points:
        x = np.asarray(x, dtype=float)
        J = np.asarray(F.jacobian(x), dtype=float)
        fx = F(x)
        for i in range(F.dim):
            e = np.zeros(F.dim)
            e[i] = h
            col = (F(x + e) - fx) / h
            err = np.linalg.norm(col - J[:, i]) / (1.0 + np.linalg.norm(J[:, i]))
            worst = max(worst, float(err))
    if worst > tol:
        raise ValueError(f"Jacobian disagrees with finite differences: {worst:g}")
    return worst


# -- problem files ----------------------------------------------------

_REGISTRY: dict[str, Callable[[], tuple[Operator, ConstraintSet]]] = {}


def register_problem(name: str, builder) -> None:
    """Register a programmatic problem builder under a name."""
    _REGISTRY[name] = builder


def builtin_problem(name: str) -> tuple[Operator, ConstraintSet]:
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; known: {sorted(_REGISTRY)}")


def load_problem(path) -> tuple[Operator, ConstraintSet]:
    """Load an affine/polyhedral problem from a JSON file.

    Schema: n, m, k, Q, r (F(x) = Qx + r), G, c_g, H, c_h.
    """
    with open(path) as fh:
        data = json.load(fh)
    n = int(data["n"])
    Q = np.asarray(data["Q"], dtype=float)
    r = np.asarray(data["r"], dtype=float)
    if Q.shape != (n, n) or r.shape != (n,):
        raise DimensionMismatch("Q/r shapes inconsistent with n")
    F = affine_operator(Q, r, name=str(data.get("name", "")))
    m = int(data.get("m", 0))
    k = int(data.get("k", 0))
    G = np.asarray(data["G"], dtype=float).reshape(m, n) if m else np.zeros((0, n))
    c_g = np.asarray(data["c_g"], dtype=float).reshape(m) if m else np.zeros(0)
    H = np.asarray(data["H"], dtype=float).reshape(k, n) if k else None
    c_h = np.asarray(data["c_h"], dtype=float).reshape(k) if k else None
    C = ConstraintSet.polyhedron(G, c_g, H=H, c_h=c_h)
    return F, C


def save_problem(path, F: Operator, C: ConstraintSet, name: str = "",
                 extra: Optional[dict] = None) -> None:
    """Serialize an affine/polyhedral problem to the JSON schema."""
    if not C.polyhedral:
        raise ValueError("only polyhedral constraint sets are serializable")
    if F.jacobian is None:
        raise ValueError("need an affine operator with Jacobian")
    Q = np.asarray(F.jacobian(np.zeros(F.dim)), dtype=float)
    r = F(np.zeros(F.dim))
    data = {
        "name": name or F.name,
        "n": F.dim, "m": C.m, "k": C.k,
        "Q": Q.tolist(), "r": r.tolist(),
        "G": C.G.tolist(), "c_g": C.c_g.tolist(),
        "H": C.H.tolist(), "c_h": C.c_h.tolist(),
    }
    if extra:
        data.update(extra)
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
