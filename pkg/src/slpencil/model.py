"""Model pencils sharing the asymptotic constants of given spectral data.

The inverse solver compares the target against an explicitly known model
pencil whose eigenvalues and weights have the same leading asymptotics, so
that the difference series converge.  Two constructions are provided:

  * a constant model, Q1 = T with T a constant skew-Hermitian matrix solving
    exp(2 T pi) = O for the unitary matrix O carrying the shifts;
  * a spliced model that keeps an already known piece of Q1 on [0, delta],
    extends it by Q1(delta) + i kappa (x - delta) I, and pushes the remaining
    phase mismatch into the right boundary matrix H1 = (I+O)^{-1}(I-O).

Both need only the shift constants (h1, A) estimated from the spectral data:
h1 from the large-imaginary-rho limit of the Weyl matrix, the shifts w_q from
the eigenvalue lattice, and A from the group sums of the weight matrices.
"""

from __future__ import annotations

import cmath
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm, schur

from .core import (
    AsymptoticFrame,
    GridFunction,
    NumericalError,
    PencilSpec,
)
from .forward import group_tail_constant, weyl_from_sd
from .ode import DEFAULT_TOL, solve_P

EXTRACT_TAUS = (20.0, 40.0, 80.0)
H1_DEFECT_TOL = 0.05
FRAME_UNITARITY_TOL = 0.2
MODEL_UNITARITY_TOL = 1e-6
LOG_RECONSTRUCTION_TOL = 1e-8
OMEGA_CLUSTER_GAP = 0.02       # shifts closer than this merge into one group
KAPPA_SCAN = np.linspace(-0.9, 0.9, 21)
KAPPA_SCAN[np.abs(KAPPA_SCAN) < 1e-12] = 0.0
BRANCH_MARGIN = 1e-8


@dataclass
class ModelRecipe:
    """How a model pencil was assembled, for logs and reproducibility."""

    kind: str                  # "constant" or "spliced"
    h1_tilde: np.ndarray
    H1_tilde: np.ndarray
    T: np.ndarray | None = None
    delta: float = 0.0
    kappa: float = 0.0


# ---------------------------------------------------------------------------
# asymptotic constants estimated from spectral data


def estimate_shifts(sd):
    """Per-channel shifts w_q and channel groups from the eigenvalue lattice.

    rho_{nq} = n + w_q + c_q / n + O(n^-2), and the 1/n term flips sign with
    the index sign, so the symmetric average over +-n is w_q + O(n^-2); a
    two-point |n|-weighted extrapolation removes the remaining term.  Shifts
    that land just below 1 are wrapped to just below 0 so that a group
    straddling the wrap point stays together.
    """
    m, N = sd.dim, sd.nmax
    n1 = max(N // 2, 2)
    by_index = {}
    for e in sd.entries:
        by_index[(e.signed_index, e.q)] = e.rho.real
    omega = np.zeros(m)
    for q in range(1, m + 1):
        sym = []
        for n in (n1, N):
            try:
                sym.append(0.5 * ((by_index[(n, q)] - n)
                                  + (by_index[(-n, q)] + n)))
            except KeyError:
                raise NumericalError(
                    "spectral data has no entry at index (+-%d, q=%d); "
                    "shift estimation needs the full lattice" % (n, q))
        g1, g2 = sym
        omega[q - 1] = (N * N * g2 - n1 * n1 * g1) / (N * N - n1 * n1)
    omega = omega - np.floor(omega + OMEGA_CLUSTER_GAP)

    order = np.argsort(omega, kind="stable")
    groups = []
    current = [int(order[0])]
    for q in order[1:]:
        if omega[q] - omega[current[-1]] <= OMEGA_CLUSTER_GAP:
            current.append(int(q))
        else:
            groups.append(tuple(current))
            current = [int(q)]
    groups.append(tuple(current))
    return omega, tuple(groups)


def _provisional_frame(sd):
    """Frame stub carrying only shifts and groups, for tail evaluation."""
    omega, groups = estimate_shifts(sd)
    return AsymptoticFrame(A=None, W=None,
                           mdiag=np.exp(2j * math.pi * omega),
                           omegas=omega, groups=groups)


def extract_h1(sd, frame=None, taus=EXTRACT_TAUS):
    """Left boundary matrix h1 from the Weyl matrix on the imaginary axis.

    M(i tau) = (i rho)^{-1} (I + h1)^{-1} + O(tau^{-2}), so
    f(tau) = (i rho M)^{-1} - I tends to h1 with an O(1/tau) error term;
    polynomial extrapolation in 1/tau to 0 removes the leading corrections.
    The Hermitian part of the estimate is discarded and reported as a
    defect; a large defect means the data is inconsistent with the
    self-adjoint symmetry pattern of the coefficients.

    Returns (h1, defect).
    """
    if frame is None:
        frame = sd.frame if sd.frame is not None else _provisional_frame(sd)
    m = sd.dim
    eye = np.eye(m)
    xs = np.array([1.0 / t for t in taus])
    fs = []
    for tau in taus:
        rho = 1j * tau
        M = weyl_from_sd(sd, rho, frame)
        fs.append(np.linalg.inv(1j * rho * M) - eye)
    # Lagrange extrapolation to 1/tau = 0
    h = np.zeros((m, m), dtype=complex)
    for j, fj in enumerate(fs):
        wj = 1.0
        for k in range(len(xs)):
            if k != j:
                wj *= xs[k] / (xs[k] - xs[j])
        h += wj * fj
    herm = 0.5 * (h + h.conj().T)
    defect = float(np.max(np.abs(herm)))
    if defect > H1_DEFECT_TOL:
        raise NumericalError(
            "estimated h1 has a Hermitian part of size %.3e; spectral data "
            "inconsistent with skew-Hermitian h1" % defect)
    return h - herm, defect


def estimate_q0_constant(sd, sd_model, frame):
    """Constant Hermitian offset between target and model Q0, per group.

    For a matched pair of spectra the squared eigenvalues differ by the
    mean of Q0 - Q0_tilde along the channel, up to O(1/n):

        rho_nq^2 - rho_nq_tilde^2 -> mean(Q0_tilde - Q0) on group q.

    Averaging the difference over the largest indices of both signs gives
    a per-group constant c_q; the assembled correction

        C = sum_q c_q W^dagger I_q W

    is the constant that should be subtracted from the model's Q0 so that
    the tail eigenvalues line up.  Without this matching the difference
    series carries a non-decaying oscillatory artifact at spatial
    frequency about 2 N_max.
    """
    def rho_table(data):
        tab = {}
        for e in data.entries:
            tab[(e.signed_index, e.q)] = e.rho.real
        return tab

    tt, tm = rho_table(sd), rho_table(sd_model)
    N = min(sd.nmax, sd_model.nmax)
    m = sd.dim
    C = np.zeros((m, m), dtype=complex)
    for gi, g in enumerate(frame.groups):
        diffs = []
        for n in (N, N - 1):
            for s in (1, -1):
                for q in g:
                    key = (s * n, q + 1)
                    if key in tt and key in tm:
                        diffs.append(tt[key] ** 2 - tm[key] ** 2)
        if not diffs:
            raise NumericalError(
                "no paired tail eigenvalues for group %d; cannot match "
                "the model's constant Q0" % gi)
        c = float(np.mean(diffs))
        Iq = np.zeros((m, m))
        for q in g:
            Iq[q, q] = 1.0
        W = frame.W if frame.W is not None else np.eye(m)
        C += c * (W.conj().T @ Iq @ W)
    return 0.5 * (C + C.conj().T)


def build_frame_from_sd(sd, h1=None):
    """Asymptotic frame (shifts, groups, unitary matrix A) from the data.

    The group sums pi n sum_{J_q} alpha/mult tend to
    (I - h1)^{-1} W^dagger I_q W (I + h1)^{-1}, so conjugating the
    extrapolated limits with (I -+ h1) recovers W^dagger I_q W, and

        A = sum over groups of mu_q W^dagger I_q W,  mu_q = exp(2 pi i w_q).

    The assembled A is checked for unitarity, projected onto the nearest
    unitary matrix, and rediagonalized.
    """
    omega_est, groups = estimate_shifts(sd)
    if h1 is None:
        prov = AsymptoticFrame(A=None, W=None,
                               mdiag=np.exp(2j * math.pi * omega_est),
                               omegas=omega_est, groups=groups)
        h1, _ = extract_h1(sd, prov)
    m = sd.dim
    eye = np.eye(m)
    A = np.zeros((m, m), dtype=complex)
    for g in groups:
        w = float(np.mean(omega_est[list(g)]))
        C = group_tail_constant(sd, g)
        wiqw = (eye - h1) @ C @ (eye + h1)
        A += cmath.exp(2j * math.pi * w) * wiqw
    defect = float(np.max(np.abs(A.conj().T @ A - eye)))
    if defect > FRAME_UNITARITY_TOL:
        raise NumericalError(
            "assembled asymptotic matrix fails unitarity by %.3e; spectral "
            "data too short or inconsistent" % defect)
    U, _, Vh = np.linalg.svd(A)
    A = U @ Vh

    T, Z = schur(A, output="complex")
    mu = np.diag(T)
    omega = np.angle(mu) / (2.0 * math.pi)
    omega = omega - np.floor(omega + OMEGA_CLUSTER_GAP)
    order = np.argsort(omega, kind="stable")
    omega = omega[order]
    mu = mu[order]
    W = Z[:, order].conj().T
    return AsymptoticFrame(A=A, W=W, mdiag=mu, omegas=omega, groups=groups)


# ---------------------------------------------------------------------------
# model constructions


def _cayley(h1):
    """(I - h1)(I + h1)^{-1}, unitary for skew-Hermitian h1."""
    eye = np.eye(h1.shape[0])
    return (eye - h1) @ np.linalg.inv(eye + h1)


def _check_unitary(mat, tol, what):
    defect = float(np.max(np.abs(mat.conj().T @ mat - np.eye(mat.shape[0]))))
    if defect > tol:
        raise NumericalError("%s fails unitarity by %.3e" % (what, defect))


def _skew_log(O):
    """Skew-Hermitian T with exp(2 T pi) = O, O unitary.

    Eigenvalue arguments are taken in (-pi, pi]; an eigenvalue at -1 makes
    that branch ambiguous, so the cut is rotated away from it with a warning.
    """
    Tn, Z = schur(O, output="complex")
    lam = np.diag(Tn)
    args = np.angle(lam)
    if np.min(np.abs(lam + 1.0)) < BRANCH_MARGIN:
        warnings.warn(
            "matrix O has an eigenvalue at -1; rotating the logarithm "
            "branch cut", stacklevel=2)
        eta = 0.25
        args = np.angle(lam * cmath.exp(-1j * eta)) + eta
    T = Z @ np.diag(1j * args / (2.0 * math.pi)) @ Z.conj().T
    T = 0.5 * (T - T.conj().T)
    err = float(np.max(np.abs(expm(2.0 * math.pi * T) - O)))
    if err > LOG_RECONSTRUCTION_TOL:
        raise NumericalError(
            "matrix logarithm reconstruction error %.3e; O not unitary "
            "enough" % err)
    return T


def build_constant_model(frame, h1_tilde=None, q0_tilde=None, num_nodes=129):
    """Model with constant Q1 = T, constant (default zero) Q0.

    T solves exp(2 T pi) = O with O = A (I - h1)(I + h1)^{-1}, so that
    P-^dagger(pi) P+(pi) = exp(2 T pi) reproduces the target's shift
    matrix with H1 = 0.  q0_tilde, when given, is a constant Hermitian
    matrix used as the model's Q0 so the tail eigenvalues match the
    target's (see estimate_q0_constant).

    Returns (PencilSpec, ModelRecipe).
    """
    m = frame.A.shape[0]
    h1t = np.zeros((m, m), dtype=complex) if h1_tilde is None \
        else np.asarray(h1_tilde, dtype=complex)
    O = frame.A @ _cayley(h1t)
    _check_unitary(O, MODEL_UNITARITY_TOL, "shift matrix O")
    T = _skew_log(O)
    q0t = np.zeros((m, m), dtype=complex) if q0_tilde is None \
        else np.asarray(q0_tilde, dtype=complex)
    spec = PencilSpec.build(m, Q1=T, Q0=q0t, h1=h1t, num_nodes=num_nodes)
    recipe = ModelRecipe(kind="constant", h1_tilde=h1t,
                         H1_tilde=np.zeros((m, m), dtype=complex), T=T)
    return spec, recipe


def _eval_q1(q1, x, m):
    if q1 is None:
        return np.zeros((m, m), dtype=complex)
    return np.asarray(q1(x), dtype=complex).reshape(m, m)


def build_spliced_model(frame, h1_tilde=None, q1=None, delta=0.0, kappa=None,
                        q0_tilde=None, num_nodes=129, tol=DEFAULT_TOL):
    """Model keeping a known piece of Q1 on [0, delta].

    Beyond the splice point the potential continues as
    Q1(delta) + i kappa (x - delta) I, and the phase bookkeeping moves to
    the right boundary matrix:

        O(kappa) = exp(-i kappa (pi - delta)^2) U,
        U = E P-(delta) A (I - h1)(I + h1)^{-1} P+(delta)^{-1} E,
        E = exp(-Q1(delta) (pi - delta)),
        H1 = (I + O)^{-1} (I - O),

    which requires det(I + O) != 0.  When kappa is not given it is scanned
    over 21 points in [-0.9, 0.9] and the value maximizing the distance of
    the eigenvalues of O(kappa) from -1 is chosen.

    Returns (PencilSpec, ModelRecipe).
    """
    m = frame.A.shape[0]
    eye = np.eye(m)
    h1t = np.zeros((m, m), dtype=complex) if h1_tilde is None \
        else np.asarray(h1_tilde, dtype=complex)
    if not 0.0 <= delta < math.pi:
        raise NumericalError("splice point delta must lie in [0, pi)")

    Q1d = _eval_q1(q1, delta, m)
    if delta > 0.0 and q1 is not None:
        # P_+-(delta) depend on Q1 only below delta; clamp beyond it
        base = PencilSpec.build(
            m, Q1=lambda x: _eval_q1(q1, min(x, delta), m),
            num_nodes=num_nodes)
        xs = np.array([0.0, delta])
        Pp = solve_P(base, +1, tol, x_eval=xs).values[-1]
        Pm = solve_P(base, -1, tol, x_eval=xs).values[-1]
    else:
        Pp = eye.copy()
        Pm = eye.copy()

    E = expm(-Q1d * (math.pi - delta))
    U = E @ Pm @ frame.A @ _cayley(h1t) @ np.linalg.solve(Pp, E)
    _check_unitary(U, MODEL_UNITARITY_TOL, "spliced shift matrix")

    lam = np.linalg.eigvals(U)
    phase = (math.pi - delta) ** 2

    def margin(k):
        return float(np.min(np.abs(cmath.exp(-1j * k * phase) * lam + 1.0)))

    if kappa is None:
        margins = [margin(k) for k in KAPPA_SCAN]
        kappa = float(KAPPA_SCAN[int(np.argmax(margins))])
        if max(margins) < BRANCH_MARGIN:
            raise NumericalError(
                "no admissible kappa on the scan grid keeps I + O(kappa) "
                "invertible; widen the scan")
    elif margin(kappa) < BRANCH_MARGIN:
        raise NumericalError(
            "kappa = %s makes I + O(kappa) singular" % kappa)

    O = cmath.exp(-1j * kappa * phase) * U
    H1t = np.linalg.solve(eye + O, eye - O)
    H1t = 0.5 * (H1t - H1t.conj().T)

    def q1_model(x):
        if x <= delta and q1 is not None:
            return _eval_q1(q1, x, m)
        return Q1d + 1j * kappa * (x - delta) * eye

    q0t = np.zeros((m, m), dtype=complex) if q0_tilde is None \
        else np.asarray(q0_tilde, dtype=complex)
    spec = PencilSpec.build(m, Q1=q1_model, Q0=q0t, h1=h1t, H1=H1t,
                            num_nodes=num_nodes)
    recipe = ModelRecipe(kind="spliced", h1_tilde=h1t, H1_tilde=H1t,
                         delta=float(delta), kappa=float(kappa))
    return spec, recipe
