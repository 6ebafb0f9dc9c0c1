"""Domain types for the pencil, validation, boundary forms and flat-file IO.

A pencil is the coefficient bundle (Q1, Q0, h1, h0, H1, H0) of the problem

    Y'' + (rho^2 I + 2 i rho Q1(x) + Q0(x)) Y = 0,   x in (0, pi),
    U(Y) = Y'(0) + (i rho h1 + h0) Y(0) = 0,
    V(Y) = Y'(pi) + (i rho H1 + H0) Y(pi) = 0.

Potentials are stored as samples on a uniform grid over [0, pi] and
evaluated through a local polynomial interpolant of order 4, so that the
forward and inverse solvers agree on what "the potential" is between nodes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

INTERP_ORDER = 4
SELFADJOINT_TOL = 1e-12
INVERTIBILITY_TOL = 1e-10
REAL_POLE_TOL = 1e-8
RANK_REL_TOL = 1e-8


class PencilError(Exception):
    """Base class for errors raised by this package."""


class FormatError(PencilError):
    """Malformed or inconsistent pencil / spectral-data record."""


class RegimeError(PencilError):
    """Spectral data outside the all-real, simple-pole regime."""


class NumericalError(PencilError):
    """A numerical stage failed (integration, root finding, conditioning)."""


# ---------------------------------------------------------------------------
# grid functions


class GridFunction:
    """Matrix-valued function of x in [0, pi], sampled on a uniform grid.

    Evaluation between nodes uses Lagrange interpolation of order
    INTERP_ORDER on a sliding 5-node stencil; the derivative is the
    derivative of that local polynomial.
    """

    def __init__(self, values):
        values = np.asarray(values, dtype=complex)
        if values.ndim == 2:
            values = values[:, None, None]
        if values.ndim != 3 or values.shape[1] != values.shape[2]:
            raise FormatError("grid values must have shape (nodes, m, m)")
        if values.shape[0] < INTERP_ORDER + 1:
            raise FormatError(
                "grid must have at least %d nodes (G >= 4)" % (INTERP_ORDER + 1)
            )
        self.values = values
        self.num_nodes = values.shape[0]
        self.dim = values.shape[1]
        self.h = math.pi / (self.num_nodes - 1)
        self.nodes = np.linspace(0.0, math.pi, self.num_nodes)

    @classmethod
    def constant(cls, mat, dim=None, num_nodes=129):
        mat = np.atleast_2d(np.asarray(mat, dtype=complex))
        if dim is not None and mat.shape != (dim, dim):
            raise FormatError("constant matrix has wrong dimension")
        return cls(np.broadcast_to(mat, (num_nodes,) + mat.shape).copy())

    @classmethod
    def from_callable(cls, f, dim, num_nodes=129):
        xs = np.linspace(0.0, math.pi, num_nodes)
        vals = np.empty((num_nodes, dim, dim), dtype=complex)
        for i, x in enumerate(xs):
            vals[i] = np.asarray(f(x), dtype=complex).reshape(dim, dim)
        return cls(vals)

    def _stencil(self, x):
        x = np.asarray(x, dtype=float)
        idx = np.floor(x / self.h).astype(int) - INTERP_ORDER // 2
        idx = np.clip(idx, 0, self.num_nodes - 1 - INTERP_ORDER)
        offsets = np.arange(INTERP_ORDER + 1)
        cols = idx[..., None] + offsets
        return cols, self.nodes[cols]

    def __call__(self, x):
        scalar = np.isscalar(x)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        cols, xk = self._stencil(x)
        basis = _lagrange_basis(x, xk)
        out = np.einsum("kj,kjab->kab", basis, self.values[cols])
        return out[0] if scalar else out

    def deriv(self, x):
        scalar = np.isscalar(x)
        x = np.atleast_1d(np.asarray(x, dtype=float))
        cols, xk = self._stencil(x)
        dbasis = _lagrange_basis_deriv(x, xk)
        out = np.einsum("kj,kjab->kab", dbasis, self.values[cols])
        return out[0] if scalar else out

    def __eq__(self, other):
        return (
            isinstance(other, GridFunction)
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )


def _lagrange_basis(x, xk):
    """Lagrange basis values; x shape (K,), xk shape (K, 5)."""
    n = xk.shape[-1]
    basis = np.ones_like(xk)
    for j in range(n):
        for k in range(n):
            if k != j:
                basis[:, j] *= (x - xk[:, k]) / (xk[:, j] - xk[:, k])
    return basis


def _lagrange_basis_deriv(x, xk):
    n = xk.shape[-1]
    dbasis = np.zeros_like(xk)
    for j in range(n):
        denom = 1.0
        for k in range(n):
            if k != j:
                denom *= xk[:, j] - xk[:, k]
        total = np.zeros_like(x)
        for l in range(n):
            if l == j:
                continue
            term = np.ones_like(x)
            for k in range(n):
                if k != j and k != l:
                    term *= x - xk[:, k]
            total = total + term
        dbasis[:, j] = total / denom
    return dbasis


# ---------------------------------------------------------------------------
# pencil record


@dataclass
class PencilSpec:
    """Coefficient bundle of the boundary value problem."""

    dim: int
    Q1: GridFunction
    Q0: GridFunction
    h1: np.ndarray
    h0: np.ndarray
    H1: np.ndarray
    H0: np.ndarray

    def __post_init__(self):
        m = self.dim
        for name in ("h1", "h0", "H1", "H0"):
            mat = np.asarray(getattr(self, name), dtype=complex)
            if mat.shape != (m, m):
                raise FormatError("%s must be %dx%d" % (name, m, m))
            setattr(self, name, mat)
        for name in ("Q1", "Q0"):
            gf = getattr(self, name)
            if not isinstance(gf, GridFunction) or gf.dim != m:
                raise FormatError("%s must be a %dx%d GridFunction" % (name, m, m))
        if self.Q1.num_nodes != self.Q0.num_nodes:
            raise FormatError("Q1 and Q0 must share one grid")

    @classmethod
    def build(cls, dim, Q1=None, Q0=None, h1=None, h0=None, H1=None, H0=None,
              num_nodes=129):
        """Convenience constructor; missing pieces default to zero."""
        zero = np.zeros((dim, dim), dtype=complex)

        def as_grid(obj):
            if obj is None:
                return GridFunction.constant(zero, dim, num_nodes)
            if isinstance(obj, GridFunction):
                return obj
            if callable(obj):
                probe = np.asarray(obj(0.0), dtype=complex)
                f = obj if probe.ndim else (lambda x: obj(x) * np.eye(dim))
                return GridFunction.from_callable(f, dim, num_nodes)
            mat = np.atleast_2d(np.asarray(obj, dtype=complex))
            if mat.shape == (1, 1) and dim > 1:
                mat = mat[0, 0] * np.eye(dim)
            return GridFunction.constant(mat, dim, num_nodes)

        def as_mat(obj):
            if obj is None:
                return zero.copy()
            mat = np.atleast_2d(np.asarray(obj, dtype=complex))
            if mat.shape == (1, 1) and dim > 1:
                mat = mat[0, 0] * np.eye(dim)
            return mat

        return cls(dim, as_grid(Q1), as_grid(Q0),
                   as_mat(h1), as_mat(h0), as_mat(H1), as_mat(H0))

    @property
    def grid(self):
        return self.Q1.nodes


@dataclass
class SDEntry:
    """One pole of the Weyl matrix with its residue (weight matrix)."""

    n: int           # |index|
    sign: int        # +1 / -1; the index set contains both +0 and -0
    q: int           # asymptotic channel, 1..m (first channel of the pole)
    rho: complex
    alpha: np.ndarray
    mult: int = 1

    def __post_init__(self):
        self.alpha = np.atleast_2d(np.asarray(self.alpha, dtype=complex))
        self.rho = complex(self.rho)
        if self.n < 0:
            raise FormatError("store |n| in n and the sign separately")
        if self.sign not in (-1, 1):
            raise FormatError("sign must be +1 or -1")

    @property
    def signed_index(self):
        return self.sign * self.n


@dataclass
class AsymptoticFrame:
    """Constants governing the eigenvalue and weight asymptotics.

    A is the unitary monodromy-like matrix whose eigenvalues exp(2 pi i w_q)
    fix the shifts w_q; W diagonalizes it (A = W^dagger diag(mu) W); groups
    collect channels with equal shifts.
    """

    A: np.ndarray
    W: np.ndarray
    mdiag: np.ndarray          # eigenvalues mu_q, |mu_q| = 1
    omegas: np.ndarray         # shifts in [0, 1), ascending
    groups: tuple              # tuple of tuples of 0-based channel indices

    def iq(self, group):
        m = self.A.shape[0]
        out = np.zeros((m, m), dtype=complex)
        for j in group:
            out[j, j] = 1.0
        return out

    def group_of_channel(self, q):
        for g in self.groups:
            if q in g:
                return g
        raise KeyError(q)


@dataclass
class SpectralData:
    """Indexed eigenvalues with weight matrices: the data of the inverse problem."""

    dim: int
    nmax: int
    entries: list
    frame: AsymptoticFrame | None = None

    def __post_init__(self):
        self.check_regime()

    def check_regime(self):
        """Reject data outside the all-real / simple-pole regime."""
        for e in self.entries:
            if abs(e.rho.imag) >= REAL_POLE_TOL:
                raise RegimeError(
                    "N=0 regime violated: pole at index (%+d, q=%d) has "
                    "Im rho = %.3e" % (e.signed_index, e.q, e.rho.imag))
            if e.alpha.shape != (self.dim, self.dim):
                raise FormatError("weight matrix dimension mismatch")

    def rank_defects(self):
        """Entries whose weight-matrix rank disagrees with the multiplicity."""
        bad = []
        for e in self.entries:
            sv = np.linalg.svd(e.alpha, compute_uv=False)
            rank = int(np.sum(sv > RANK_REL_TOL * max(sv[0], 1e-300)))
            if rank != e.mult:
                bad.append((e, rank))
        return bad

    def sorted_entries(self):
        return sorted(self.entries, key=lambda e: (e.rho.real, e.q))

    def poles(self):
        return np.array([e.rho for e in self.entries])


# ---------------------------------------------------------------------------
# validation


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    condition_numbers: dict = field(default_factory=dict)

    @property
    def passed(self):
        return not self.violations

    def add(self, condition, where, defect):
        self.violations.append({
            "condition": condition, "where": where, "defect": float(defect)})

    def __str__(self):
        if self.passed:
            lines = ["validation: pass"]
        else:
            lines = ["validation: FAIL (%d violations)" % len(self.violations)]
            for v in self.violations:
                lines.append("  %(condition)s at %(where)s: defect %(defect).3e" % v)
        for k, v in self.condition_numbers.items():
            lines.append("  cond(%s) = %.3e" % (k, v))
        return "\n".join(lines)


def validate(spec, require_selfadjoint=True):
    """Check the standing assumptions on the coefficients.

    Violations are listed in the report, never raised: callers decide
    whether a failed condition is fatal.
    """
    report = ValidationReport()
    m = spec.dim
    eye = np.eye(m)

    # invertibility of I +/- h1 and I +/- H1, via smallest singular value
    for name, mat in (("h1", spec.h1), ("H1", spec.H1)):
        for s, tag in ((1.0, "+"), (-1.0, "-")):
            target = eye + s * mat
            sv = np.linalg.svd(target, compute_uv=False)
            key = "I%s%s" % (tag, name)
            report.condition_numbers[key] = float(sv[0] / max(sv[-1], 1e-300))
            if sv[-1] <= INVERTIBILITY_TOL:
                report.add("det(I %s %s) != 0" % (tag, name), name, sv[-1])

    if require_selfadjoint:
        checks = [
            ("h1 skew-Hermitian", spec.h1 + spec.h1.conj().T),
            ("H1 skew-Hermitian", spec.H1 + spec.H1.conj().T),
            ("h0 Hermitian", spec.h0 - spec.h0.conj().T),
            ("H0 Hermitian", spec.H0 - spec.H0.conj().T),
        ]
        for label, defect_mat in checks:
            defect = np.max(np.abs(defect_mat))
            if defect > SELFADJOINT_TOL:
                report.add(label, label.split()[0], defect)
        q1 = spec.Q1.values
        q0 = spec.Q0.values
        d1 = np.max(np.abs(q1 + np.conj(np.swapaxes(q1, 1, 2))), axis=(1, 2))
        d0 = np.max(np.abs(q0 - np.conj(np.swapaxes(q0, 1, 2))), axis=(1, 2))
        if np.max(d1) > SELFADJOINT_TOL:
            node = int(np.argmax(d1))
            report.add("Q1 skew-Hermitian", "node %d" % node, np.max(d1))
        if np.max(d0) > SELFADJOINT_TOL:
            node = int(np.argmax(d0))
            report.add("Q0 Hermitian", "node %d" % node, np.max(d0))

    return report


# ---------------------------------------------------------------------------
# boundary forms


def boundary_form_U(spec, Y0, Yp0, rho):
    """U(Y) = Y'(0) + (i rho h1 + h0) Y(0)."""
    Y0 = np.asarray(Y0, dtype=complex)
    Yp0 = np.asarray(Yp0, dtype=complex)
    if Y0.shape[0] != spec.dim or Yp0.shape[0] != spec.dim:
        raise FormatError("boundary value dimension mismatch")
    return Yp0 + (1j * rho * spec.h1 + spec.h0) @ Y0


def boundary_form_V(spec, Ypi, Yppi, rho):
    """V(Y) = Y'(pi) + (i rho H1 + H0) Y(pi)."""
    Ypi = np.asarray(Ypi, dtype=complex)
    Yppi = np.asarray(Yppi, dtype=complex)
    if Ypi.shape[0] != spec.dim or Yppi.shape[0] != spec.dim:
        raise FormatError("boundary value dimension mismatch")
    return Yppi + (1j * rho * spec.H1 + spec.H0) @ Ypi


# ---------------------------------------------------------------------------
# serialization: JSON-compatible, complex numbers as [re, im] pairs


def _c2j(arr):
    arr = np.asarray(arr, dtype=complex)
    return np.stack([arr.real, arr.imag], axis=-1).tolist()


def _j2c(obj, shape, what):
    arr = np.asarray(obj, dtype=float)
    if arr.shape != shape + (2,):
        raise FormatError("field %r has shape %s, expected %s" %
                          (what, arr.shape, shape + (2,)))
    return arr[..., 0] + 1j * arr[..., 1]


def save_pencil(path, spec):
    m = spec.dim
    doc = {
        "kind": "pencil",
        "dim": m,
        "grid_nodes": spec.Q1.num_nodes,
        "interp_order": INTERP_ORDER,
        "Q1": _c2j(spec.Q1.values),
        "Q0": _c2j(spec.Q0.values),
        "h1": _c2j(spec.h1),
        "h0": _c2j(spec.h0),
        "H1": _c2j(spec.H1),
        "H0": _c2j(spec.H0),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_pencil(path):
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError("cannot parse %s: %s" % (path, exc)) from exc
    if doc.get("kind") != "pencil":
        raise FormatError("%s: not a pencil record" % path)
    try:
        m = int(doc["dim"])
        nodes = int(doc["grid_nodes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("%s: missing dim/grid_nodes" % path) from exc
    if nodes < INTERP_ORDER + 1:
        raise FormatError("%s: grid must have >= %d nodes" %
                          (path, INTERP_ORDER + 1))
    q1 = _j2c(doc["Q1"], (nodes, m, m), "Q1")
    q0 = _j2c(doc["Q0"], (nodes, m, m), "Q0")
    mats = {k: _j2c(doc[k], (m, m), k) for k in ("h1", "h0", "H1", "H0")}
    return PencilSpec(m, GridFunction(q1), GridFunction(q0), **mats)


def save_sd(path, sd):
    doc = {
        "kind": "spectral_data",
        "dim": sd.dim,
        "nmax": sd.nmax,
        "entries": [
            {"n": e.n, "sign": e.sign, "q": e.q,
             "rho": [e.rho.real, e.rho.imag],
             "alpha": _c2j(e.alpha), "mult": e.mult}
            for e in sd.entries
        ],
    }
    if sd.frame is not None:
        fr = sd.frame
        doc["frame"] = {
            "A": _c2j(fr.A), "W": _c2j(fr.W), "mdiag": _c2j(fr.mdiag),
            "omegas": list(map(float, fr.omegas)),
            "groups": [list(g) for g in fr.groups],
        }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_sd(path):
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError("cannot parse %s: %s" % (path, exc)) from exc
    if doc.get("kind") != "spectral_data":
        raise FormatError("%s: not a spectral-data record" % path)
    m = int(doc["dim"])
    entries = []
    for i, rec in enumerate(doc["entries"]):
        try:
            rho = complex(rec["rho"][0], rec["rho"][1])
            entries.append(SDEntry(
                n=int(rec["n"]), sign=int(rec["sign"]), q=int(rec["q"]),
                rho=rho, alpha=_j2c(rec["alpha"], (m, m), "alpha"),
                mult=int(rec.get("mult", 1))))
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise FormatError("%s: bad entry %d: %s" % (path, i, exc)) from exc
    frame = None
    if doc.get("frame"):
        fr = doc["frame"]
        frame = AsymptoticFrame(
            A=_j2c(fr["A"], (m, m), "A"),
            W=_j2c(fr["W"], (m, m), "W"),
            mdiag=_j2c(fr["mdiag"], (m,), "mdiag"),
            omegas=np.asarray(fr["omegas"], dtype=float),
            groups=tuple(tuple(g) for g in fr["groups"]))
    return SpectralData(dim=m, nmax=int(doc["nmax"]), entries=entries,
                        frame=frame)
