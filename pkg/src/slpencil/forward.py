"""Forward spectral analysis: eigenvalues, Weyl matrix, weights, asymptotics.

Eigenvalues are the zeros of the characteristic function det V(phi).  They
cluster around the lattice n + w_q, where the shifts w_q come from the
unitary matrix

    A = P_-(pi)^{-1} (I+H1)^{-1} (I-H1) P_+(pi) (I+h1) (I-h1)^{-1},

whose eigenvalues are exp(2 pi i w_q).  Each lattice point gets a disc; the
number of zeros inside is counted by the argument principle, located through
boundary moments of det' / det, and refined by Newton iteration.  Weight
matrices are residues of the Weyl matrix M(rho), computed by trapezoid
contour quadrature (spectrally accurate on circles).
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import schur
from scipy.special import digamma, polygamma

from .core import (
    AsymptoticFrame,
    NumericalError,
    RegimeError,
    SDEntry,
    SpectralData,
    validate,
)
from .ode import (
    DEFAULT_TOL,
    gl_panels,
    param_derivative,
    solve_P,
    solve_phi_S,
)

UNITARITY_TOL = 1e-8
GROUP_TOL = 1e-6          # shifts closer than this are one group (exact data)
WINDING_SLACK = 0.1
POLE_ORDER_TOL = 1e-6
RESIDUE_STABILITY_TOL = 1e-8
DEFAULT_QUAD_NODES = 64
DEFAULT_BOUNDARY_NODES = 128


@dataclass
class CharacteristicSample:
    """V(phi) at one rho with its determinant and conditioning."""

    rho: complex
    Vphi: np.ndarray
    det: complex
    cond: float


@dataclass
class WeylEvaluation:
    """The Weyl matrix M(rho) = -(V(phi))^{-1} V(S) at one point."""

    rho: complex
    M: np.ndarray
    cond: float


@dataclass
class LocatedPole:
    """One located eigenvalue with its index assignment."""

    n: int
    sign: int
    q: int
    rho: complex
    mult: int = 1

    @property
    def signed_index(self):
        return self.sign * self.n


@dataclass
class ForwardResult:
    """Everything the forward pass produces."""

    sd: SpectralData
    frame: AsymptoticFrame
    located: list
    notes: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# characteristic function and Weyl matrix


def _char_batch(spec, rhos, tol=DEFAULT_TOL, derivative=False):
    """V(phi) at x = pi for a batch of rhos; optionally dV/drho as well."""
    rhos = np.atleast_1d(np.asarray(rhos, dtype=complex))
    xs = np.array([math.pi])
    bc = 1j * rhos[:, None, None] * spec.H1 + spec.H0
    if derivative:
        phi, dphi = param_derivative(spec, rhos, order=1, which="phi",
                                     tol=tol, x_eval=xs)
        V = phi.derivs[:, -1] + bc @ phi.values[:, -1]
        dV = (dphi.derivs[:, -1] + 1j * spec.H1 @ phi.values[:, -1]
              + bc @ dphi.values[:, -1])
        return V, dV
    phi, _ = solve_phi_S(spec, rhos, tol, x_eval=xs)
    V = phi.derivs[:, -1] + bc @ phi.values[:, -1]
    return V, None


def _adjugate(V):
    """Batched adjugate; adj(V) V = det(V) I even at singular V."""
    m = V.shape[-1]
    if m == 1:
        return np.ones_like(V)
    adj = np.empty_like(V)
    for i in range(m):
        minor_rows = np.delete(V, i, axis=-2)
        for j in range(m):
            minor = np.delete(minor_rows, j, axis=-1)
            adj[..., j, i] = (-1) ** (i + j) * np.linalg.det(minor)
    return adj


def characteristic_sample(spec, rho, tol=DEFAULT_TOL):
    """det V(phi) with its matrix and condition estimate."""
    V, _ = _char_batch(spec, [rho], tol)
    return CharacteristicSample(complex(rho), V[0],
                                complex(np.linalg.det(V[0])),
                                float(np.linalg.cond(V[0])))


def _weyl_batch(spec, rhos, tol=DEFAULT_TOL):
    """M(rho) = -(V(phi))^{-1} V(S) over a batch; returns (M, cond)."""
    rhos = np.atleast_1d(np.asarray(rhos, dtype=complex))
    xs = np.array([math.pi])
    phi, S = solve_phi_S(spec, rhos, tol, x_eval=xs)
    bc = 1j * rhos[:, None, None] * spec.H1 + spec.H0
    Vphi = phi.derivs[:, -1] + bc @ phi.values[:, -1]
    VS = S.derivs[:, -1] + bc @ S.values[:, -1]
    M = -np.linalg.solve(Vphi, VS)
    cond = np.linalg.cond(Vphi)
    return M, np.atleast_1d(cond)


def weyl_matrix(spec, rho, tol=DEFAULT_TOL):
    """The Weyl matrix at one point away from the spectrum."""
    V, _ = _char_batch(spec, [rho], tol)
    sv = np.linalg.svd(V[0], compute_uv=False)
    if sv[-1] < 1e-8 * (1.0 + abs(rho)) or sv[0] / sv[-1] > 1e10:
        raise NumericalError(
            "V(phi) numerically singular at rho = %s: too close to an "
            "eigenvalue" % rho)
    M, cond = _weyl_batch(spec, [rho], tol)
    return WeylEvaluation(complex(rho), M[0], float(cond[0]))


# ---------------------------------------------------------------------------
# asymptotic frame


def asymptotic_frame(spec, tol=DEFAULT_TOL):
    """Shifts w_q, diagonalizer W and channel groups from the matrix A."""
    m = spec.dim
    xs = np.array([0.0, math.pi])
    Pp = solve_P(spec, +1, tol, x_eval=xs).values[-1]
    Pm = solve_P(spec, -1, tol, x_eval=xs).values[-1]
    eye = np.eye(m)
    right = Pp @ (eye + spec.h1) @ np.linalg.inv(eye - spec.h1)
    A = np.linalg.solve(Pm, np.linalg.solve(eye + spec.H1,
                                            (eye - spec.H1) @ right))
    defect = np.max(np.abs(A.conj().T @ A - eye))
    if defect > UNITARITY_TOL:
        raise NumericalError(
            "asymptotic matrix A fails unitarity by %.3e (invalid "
            "coefficients or integration failure)" % defect)

    T, Z = schur(A, output="complex")
    mu = np.diag(T)
    omega = np.mod(np.angle(mu) / (2.0 * math.pi), 1.0)
    omega[omega > 1.0 - 1e-9] = 0.0
    order = np.argsort(omega, kind="stable")
    omega = omega[order]
    mu = mu[order]
    W = Z[:, order].conj().T

    groups = []
    current = [0]
    for q in range(1, m):
        if omega[q] - omega[current[0]] <= GROUP_TOL:
            current.append(q)
        else:
            groups.append(tuple(current))
            current = [q]
    groups.append(tuple(current))
    return AsymptoticFrame(A=A, W=W, mdiag=mu, omegas=omega,
                           groups=tuple(groups))


def _distinct_shifts(frame):
    """(omega, channel tuple) per group."""
    return [(float(frame.omegas[g[0]]), g) for g in frame.groups]


# ---------------------------------------------------------------------------
# eigenvalue location


def _winding_and_moments(dets, ddets, center, radius, max_order):
    """Zero count inside the circle and power sums of the enclosed zeros."""
    K = len(dets)
    ang = np.angle(dets)
    d = np.diff(np.concatenate([ang, ang[:1]]))
    d = (d + math.pi) % (2.0 * math.pi) - math.pi
    total = float(d.sum() / (2.0 * math.pi))
    count = int(round(total))
    ok = abs(total - count) < WINDING_SLACK and \
        np.min(np.abs(dets)) > 1e-12 * np.median(np.abs(dets))
    theta = 2.0 * math.pi * np.arange(K) / K
    rhos = center + radius * np.exp(1j * theta)
    logd = ddets / dets
    sums = []
    for p in range(1, max_order + 1):
        sums.append(radius / K * np.sum(rhos ** p * logd * np.exp(1j * theta)))
    return count, ok, sums


def _roots_from_power_sums(sums, count):
    """Newton's identities: power sums -> monic polynomial -> roots."""
    if count == 1:
        return np.array([sums[0]])
    e = np.zeros(count + 1, dtype=complex)
    e[0] = 1.0
    for k in range(1, count + 1):
        acc = 0.0 + 0.0j
        for i in range(1, k + 1):
            acc += (-1) ** (i - 1) * e[k - i] * sums[i - 1]
        e[k] = acc / k
    coeffs = [(-1) ** k * e[k] for k in range(count + 1)]
    return np.roots(coeffs)


def _newton_refine(spec, starts, tol, root_tol, max_iter=40):
    """Batched Newton iteration on det V(phi)."""
    rhos = np.asarray(starts, dtype=complex).copy()
    active = np.ones(len(rhos), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        V, dV = _char_batch(spec, rhos[active], tol, derivative=True)
        det = np.linalg.det(V)
        adj = _adjugate(V)
        ddet = np.trace(adj @ dV, axis1=-2, axis2=-1)
        scale = np.maximum(np.abs(ddet), 1e-300)
        step = np.where(np.abs(ddet) > 1e-13 * (1.0 + np.abs(det)),
                        det / ddet, 0.0)
        # clip runaway steps; roots sit within O(1) of the start
        big = np.abs(step) > 0.5
        step = np.where(big, 0.5 * step / np.abs(np.where(big, step, 1.0)),
                        step)
        rhos[active] = rhos[active] - step
        moved = np.abs(step) > root_tol * (1.0 + np.abs(rhos[active]))
        idx = np.flatnonzero(active)
        active[idx[~moved]] = False
        del scale
    return rhos


def _cluster(roots, tol):
    """Merge numerically coincident roots into (value, multiplicity)."""
    roots = sorted(roots, key=lambda r: (r.real, r.imag))
    out = []
    for r in roots:
        if out and abs(r - out[-1][0]) < tol:
            val, mult = out[-1]
            out[-1] = ((val * mult + r) / (mult + 1), mult + 1)
        else:
            out.append((r, 1))
    return out


def _disc_starts(dets, ddets, center, radius, max_count):
    """Count + starting points for one disc, or None when unstable."""
    count, ok, sums = _winding_and_moments(dets, ddets, center, radius,
                                           max_count)
    if not (ok and 0 <= count <= max_count):
        return None
    if count == 0:
        return []
    return list(_roots_from_power_sums(sums[:count], count))


def _scan_discs(spec, centers, radius, max_count, tol, nodes):
    """Newton starting points for every disc, batched into one solve.

    Discs whose phase sum is unstable (a zero close to the boundary) are
    retried individually with more nodes and then with a slightly grown
    radius; a zero captured twice by overlapping grown discs is merged
    later by the global dedup.
    """
    K = nodes
    theta = 2.0 * math.pi * np.arange(K) / K
    ring = radius * np.exp(1j * theta)
    rhos = (np.asarray(centers, dtype=complex)[:, None] + ring).reshape(-1)
    V, dV = _char_batch(spec, rhos, tol, derivative=True)
    dets = np.linalg.det(V).reshape(len(centers), K)
    ddets = np.trace(_adjugate(V) @ dV,
                     axis1=-2, axis2=-1).reshape(len(centers), K)

    starts = []
    for i, center in enumerate(centers):
        got = _disc_starts(dets[i], ddets[i], center, radius, max_count)
        if got is None:
            got = _rescan_disc(spec, center, radius, max_count, tol, nodes)
        starts.extend(got)
    return starts


def _rescan_disc(spec, center, radius, max_count, tol, nodes):
    for grow in (1.0, 1.07, 1.1449):
        r = radius * grow
        for K in (2 * nodes, 4 * nodes):
            theta = 2.0 * math.pi * np.arange(K) / K
            V, dV = _char_batch(spec, center + r * np.exp(1j * theta), tol,
                                derivative=True)
            dets = np.linalg.det(V)
            ddets = np.trace(_adjugate(V) @ dV, axis1=-2, axis2=-1)
            got = _disc_starts(dets, ddets, center, r, max_count)
            if got is not None:
                return got
    raise NumericalError(
        "argument-principle count unstable on disc center %s radius %.3f"
        % (center, radius))


def _multiplicities(spec, roots, tol, nodes=64):
    """Zero order of det V(phi) at each distinct root, by small-circle winding."""
    roots = np.asarray(roots, dtype=complex)
    theta = 2.0 * math.pi * np.arange(nodes) / nodes
    radii = []
    for rho in roots:
        d = np.abs(roots - rho)
        d = d[d > 0]
        radii.append(min(0.05, 0.4 * float(d.min())) if len(d) else 0.05)
    circles = (roots[:, None]
               + np.asarray(radii)[:, None] * np.exp(1j * theta)[None, :])
    V, _ = _char_batch(spec, circles.reshape(-1), tol)
    dets = np.linalg.det(V).reshape(len(roots), nodes)
    mults = []
    for i, rho in enumerate(roots):
        ang = np.angle(dets[i])
        dd = np.diff(np.concatenate([ang, ang[:1]]))
        dd = (dd + math.pi) % (2.0 * math.pi) - math.pi
        total = float(dd.sum() / (2.0 * math.pi))
        if abs(total - round(total)) > WINDING_SLACK:
            raise NumericalError(
                "multiplicity count unstable at root %s" % rho)
        mults.append(int(round(total)))
    return mults


def locate_eigenvalues(spec, frame, n_max, tol=DEFAULT_TOL, root_tol=1e-11,
                       boundary_nodes=DEFAULT_BOUNDARY_NODES):
    """All eigenvalues with |n| <= n_max, indexed per the lattice n + w_q.

    Contiguous discs of radius 1/2 centered at n plus the midrange of the
    shifts tile the search interval; each disc's zeros are counted by the
    argument principle and located from boundary moments, then every
    candidate is refined by Newton iteration on det V(phi).  Refined roots
    are deduplicated globally, their multiplicities confirmed by
    small-circle winding, and indices assigned by sorted order: the total
    of 2(n_max + 1) m zeros splits into blocks of m per index
    -n_max, ..., -1, -0, +0, +1, ..., +n_max, with channels within a block
    taken in ascending shift order.
    """
    m = spec.dim
    shifts = _distinct_shifts(frame)
    ws = [w for w, _ in shifts]
    c0 = 0.5 * (min(ws) + max(ws))

    centers = [n + c0 for n in range(-n_max, n_max + 1)]
    all_starts = _scan_discs(spec, centers, 0.5, 2 * m + 2, tol,
                             boundary_nodes)

    refined = _newton_refine(spec, all_starts, tol, root_tol)
    clustered = _cluster(list(refined), 1e-7 * (1.0 + n_max))
    roots = [rho for rho, _ in clustered]
    mults = _multiplicities(spec, roots, tol)

    expected = 2 * (n_max + 1) * m
    if sum(mults) < expected:
        # zeros missing from the near-axis discs have left the real axis
        raise RegimeError(
            "N=0 regime violated: only %d zeros (with multiplicity) found "
            "near the real axis for |n| <= %d, the index lattice requires "
            "%d; eigenvalues are likely nonreal" %
            (sum(mults), n_max, expected))
    if sum(mults) > expected:
        raise NumericalError(
            "found %d zeros (with multiplicity) in |n| <= %d but the "
            "index lattice requires %d" % (sum(mults), n_max, expected))

    # channels listed per group in ascending shift order, for assignment
    channel_order = [q for _, g in shifts for q in g]
    located = []
    slot = 0
    for rho, mult in sorted(zip(roots, mults), key=lambda t: t[0].real):
        if abs(rho.imag) >= 1e-8:
            raise RegimeError(
                "N=0 regime violated: eigenvalue %s has nonzero imaginary "
                "part" % rho)
        block, offset = divmod(slot, m)
        if block <= n_max:
            sign, n = -1, n_max - block
        else:
            sign, n = 1, block - (n_max + 1)
        q = channel_order[offset] + 1
        located.append(LocatedPole(n, sign, q, rho, mult))
        slot += mult
    located.sort(key=lambda p: (p.rho.real, p.q))
    return located


# ---------------------------------------------------------------------------
# weight matrices (residues)


def weight_matrices(spec, located, frame, n_max, quad_nodes=DEFAULT_QUAD_NODES,
                    tol=DEFAULT_TOL):
    """Residues of M(rho) at the located eigenvalues.

    Each distinct pole gets a circular contour of radius capped by half the
    distance to its nearest neighbour; the trapezoid rule on a circle is
    spectrally accurate.  Doubling the node count must leave each residue
    unchanged to 1e-8.  A nonvanishing first moment of (rho - rho_0) M
    flags a higher-order pole: fatal for |n| >= 1, reported-and-excluded
    for the center indices.

    Returns (SpectralData, notes).
    """
    m = spec.dim
    shifts = _distinct_shifts(frame)
    guard = [s * (n_max + 1) + w for w, _ in shifts for s in (1, -1)]
    poles = np.array([p.rho for p in located])
    all_pts = np.concatenate([poles, np.array(guard, dtype=complex)])

    radii = []
    for p in located:
        d = np.abs(all_pts - p.rho)
        d = d[d > 1e-9]
        radii.append(min(0.45 * float(d.min()), 0.2))

    K = quad_nodes
    theta1 = 2.0 * math.pi * np.arange(K) / K
    theta2 = 2.0 * math.pi * np.arange(2 * K) / (2 * K)
    batch = []
    for p, r in zip(located, radii):
        batch.append(p.rho + r * np.exp(1j * theta1))
        batch.append(p.rho + r * np.exp(1j * theta2))
    Mvals, _ = _weyl_batch(spec, np.concatenate(batch), tol)

    entries = []
    notes = []
    off = 0
    for p, r in zip(located, radii):
        M1 = Mvals[off:off + K]
        M2 = Mvals[off + K:off + 3 * K]
        off += 3 * K
        a1 = r / K * np.einsum("k,kab->ab", np.exp(1j * theta1), M1)
        a2 = r / (2 * K) * np.einsum("k,kab->ab", np.exp(1j * theta2), M2)
        if np.max(np.abs(a1 - a2)) > RESIDUE_STABILITY_TOL:
            raise NumericalError(
                "residue quadrature unstable at rho = %s (node doubling "
                "moved it by %.3e); contour too close to another pole"
                % (p.rho, np.max(np.abs(a1 - a2))))
        beta = r ** 2 / (2 * K) * np.einsum("k,kab->ab",
                                            np.exp(2j * theta2), M2)
        if np.max(np.abs(beta)) > POLE_ORDER_TOL * max(1.0,
                                                       np.max(np.abs(a2))):
            if p.n == 0:
                notes.append({
                    "kind": "higher_order_pole_excluded",
                    "rho": p.rho, "n": p.signed_index, "q": p.q,
                    "first_moment": float(np.max(np.abs(beta)))})
                continue
            raise RegimeError(
                "N=0 regime violated: pole at rho = %s (n=%+d) has order "
                "> 1 (first contour moment %.3e)"
                % (p.rho, p.signed_index, np.max(np.abs(beta))))
        sv = np.linalg.svd(a2, compute_uv=False)
        rank = int(np.sum(sv > 1e-8 * max(sv[0], 1e-300)))
        if rank != p.mult:
            raise NumericalError(
                "weight matrix at rho = %s has rank %d but the eigenvalue "
                "has multiplicity %d" % (p.rho, rank, p.mult))
        entries.append(SDEntry(n=p.n, sign=p.sign, q=p.q,
                               rho=complex(p.rho.real), alpha=a2,
                               mult=p.mult))
    sd = SpectralData(dim=m, nmax=n_max, entries=entries, frame=frame)
    return sd, notes


# ---------------------------------------------------------------------------
# Weyl matrix from spectral data


def group_weight_sum(sd, n, group):
    """Sum of alpha/mult over the channels of one group at signed index n."""
    m = sd.dim
    out = np.zeros((m, m), dtype=complex)
    for e in sd.entries:
        if e.signed_index == n and (e.q - 1) in group:
            out += e.alpha / e.mult
    return out


def group_tail_constant(sd, group):
    """lim pi n * (group weight sum) via Richardson in 1/n.

    The group sums behave like B/(pi n) + O(n^-2); two points at n_max/2
    and n_max cancel the first correction.  Positive and negative index
    sides are averaged.
    """
    N = sd.nmax
    n1, n2 = max(N // 2, 1), N
    ests = []
    for s in (1, -1):
        f1 = math.pi * (s * n1) * group_weight_sum(sd, s * n1, group)
        f2 = math.pi * (s * n2) * group_weight_sum(sd, s * n2, group)
        ests.append((n2 * f2 - n1 * f1) / (n2 - n1))
    return 0.5 * (ests[0] + ests[1])


def _group_tail_linear(sd, group):
    """Per-side 1/n correction coefficients of the scaled group sums.

    The group sums behave like pi n sum = B + C/n + D/n^2 with a side
    dependent C; a three-point fit in 1/n on each side isolates C.  Returns
    (C_plus, C_minus); zeros when the data is too short to resolve them.
    """
    N = sd.nmax
    m = sd.dim
    zero = np.zeros((m, m), dtype=complex)
    ns = sorted({max(N // 2, 2), max(3 * N // 4, 3), N})
    if len(ns) < 3 or ns[0] < 2:
        return zero, zero
    out = []
    for s in (1, -1):
        xs = [1.0 / (s * n) for n in ns]
        gs = [math.pi * (s * n) * group_weight_sum(sd, s * n, group)
              for n in ns]
        C = zero.copy()
        # derivative of the Lagrange interpolant at 1/n = 0 gives C
        for j in range(3):
            others = [xs[k] for k in range(3) if k != j]
            wj = -(others[0] + others[1]) / (
                (xs[j] - others[0]) * (xs[j] - others[1]))
            C = C + wj * gs[j]
        out.append(C)
    return out[0], out[1]


def weyl_from_sd(sd, rho, frame=None):
    """M(rho) from the partial-fraction expansion over the stored poles.

    The truncated sum over |n| <= n_max is completed by the analytic tail

        sum_{|n| > N} B_q / (pi n (z - n)) =
            B_q / (pi z) [psi(N + 1 - z) - psi(N + 1 + z)],  z = rho - w_q,

    per shift group, where psi is the digamma function and B_q is the
    extrapolated group-sum constant.  The next order of the group sums,
    C_s / n per index side s, is summed the same way through

        sum_{n > N} 1 / (n^2 (z -+ n)) =
            psi'(N + 1) / z +- [psi(N + 1 -+ z) - psi(N + 1)] / z^2.
    """
    frame = frame if frame is not None else sd.frame
    if frame is None:
        raise NumericalError("spectral data carries no asymptotic frame")
    rho = complex(rho)
    poles = sd.poles()
    if len(poles) and np.min(np.abs(poles - rho)) < 1e-6:
        raise NumericalError("evaluation point %s is on a pole" % rho)
    m = sd.dim
    M = np.zeros((m, m), dtype=complex)
    for e in sd.entries:
        M += e.alpha / (rho - e.rho)
    N = sd.nmax
    trig = float(polygamma(1, N + 1))
    psi0 = float(digamma(N + 1))
    for w, g in _distinct_shifts(frame):
        B = group_tail_constant(sd, g)
        Cp, Cm = _group_tail_linear(sd, g)
        z = rho - w
        if abs(z) < 1e-12:
            continue
        psim = digamma(N + 1 - z)
        psip = digamma(N + 1 + z)
        M += B / (math.pi * z) * (psim - psip)
        M += Cp / math.pi * (trig / z + (psim - psi0) / z ** 2)
        M += Cm / math.pi * (trig / z - (psip - psi0) / z ** 2)
    return M


# ---------------------------------------------------------------------------
# diagnostics


def verify_norming_integral(spec, rho, n, tol=DEFAULT_TOL):
    """Scaled defect of int phi^dagger phi dx against (pi/2)(I + h1^t h1)."""
    cells = np.linspace(0.0, math.pi, 65)
    nodes, weights = gl_panels(cells)
    flat = nodes.reshape(-1)
    phi, _ = solve_phi_S(spec, [rho], tol, x_eval=flat)
    vals = phi.values[0]
    integrand = np.conj(np.swapaxes(vals, -1, -2)) @ vals
    total = np.einsum("k,kab->ab", weights.reshape(-1), integrand)
    target = (math.pi / 2.0) * (np.eye(spec.dim)
                                + spec.h1.conj().T @ spec.h1)
    return float(np.max(np.abs(total - target))) * max(abs(n), 1)


def forward_spectral_data(spec, n_max=20, tol=DEFAULT_TOL, root_tol=1e-11,
                          quad_nodes=DEFAULT_QUAD_NODES,
                          require_selfadjoint=True):
    """Full forward pass: frame, eigenvalues, weights."""
    report = validate(spec, require_selfadjoint=require_selfadjoint)
    if not report.passed:
        raise NumericalError("coefficient validation failed:\n%s" % report)
    frame = asymptotic_frame(spec, tol)
    located = locate_eigenvalues(spec, frame, n_max, tol, root_tol)
    sd, notes = weight_matrices(spec, located, frame, n_max, quad_nodes, tol)
    return ForwardResult(sd=sd, frame=frame, located=located, notes=notes)
