"""Inverse solver: recover pencil coefficients from spectral data.

The reconstruction compares the target pencil against a known model pencil
whose spectral data share the target's asymptotic constants.  Eigenvalues of
both pencils are collected into groups by index and shift; on each group the
difference between target and model weights decays fast enough that the
linear "main equation"

    z(x) (I + R(x)) = psi(x)

holds in a sequence space indexed by the group members, where psi collects
the model solutions phi~(x, g) at the member points and the operator blocks
are built from the signed weights and the model-side kernels

    D(x, rho, theta) = <phi~*(x, theta), phi~(x, rho)> / (rho - theta).

Solving a finite section of the main equation gives z = Omega^{-1} phi at
the member points; series over the members then produce z(x, rho) and
w(x, rho) = Omega^{-1} Phi(x, rho) at arbitrary rho, the mixing matrix
Omega(x) follows from Wronskian identities and a Cauchy problem, and the
coefficients are read off the differential equation satisfied by
phi = Omega z.  When det Omega vanishes inside the interval, the solve is
re-anchored: the coefficients recovered so far are spliced into a new model
and the sweep restarts, which pushes the singularity further right.

Everything beyond |n| = n_max is handled by the truncation convention that
target and model data are identified there, so all tail terms vanish.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import lu_factor, lu_solve

from .core import (
    GridFunction,
    NumericalError,
    PencilSpec,
    RegimeError,
)
from .forward import forward_spectral_data, weyl_matrix
from .model import (
    OMEGA_CLUSTER_GAP,
    build_constant_model,
    build_frame_from_sd,
    build_spliced_model,
    estimate_q0_constant,
    estimate_shifts,
    extract_h1,
)
from .ode import DEFAULT_TOL, gl_panels, solve_P, solve_phi_S

DEFAULT_GRID_NODES = 257
COND_FLAG = 1e10
Z_COND_LIMIT = 1e8
RHO_EVAL_BASE = (0.37, 0.61, 0.11)
POLE_CLEARANCE = 0.05
MERGE_TOL = 1e-9
SAFETY_FACTOR = 0.9
MAX_STEPS = 24
GRAM_FLOOR = 1e-2          # Omega treated as degenerate below this


# ---------------------------------------------------------------------------
# group index


@dataclass
class Member:
    """One pole position with its signed weight alpha / mult.

    Target entries contribute +alpha/mult, model entries -alpha/mult;
    coincident positions are merged by summing weights.
    """

    rho: float
    weight: np.ndarray


@dataclass
class Group:
    """All target and model poles sharing one index and one shift."""

    n: int                  # signed index
    omega: float
    members: list

    @property
    def diam(self):
        rhos = [mb.rho for mb in self.members]
        return max(rhos) - min(rhos) if len(rhos) > 1 else 0.0


@dataclass
class GroupIndex:
    """Ordered groups; the index set of the main equation's section."""

    dim: int
    groups: list

    def positions(self):
        return np.array([mb.rho for g in self.groups for mb in g.members])

    def weights(self):
        return np.array([mb.weight for g in self.groups for mb in g.members])

    @property
    def total(self):
        return sum(len(g.members) for g in self.groups)


def _sd_shift_groups(sd):
    if sd.frame is not None:
        return np.asarray(sd.frame.omegas, float), sd.frame.groups
    return estimate_shifts(sd)


def build_group_index(sd, sd_model, n_max=None):
    """Pair target and model poles into groups by (index, shift).

    The shift structures of the two data sets must agree within the
    clustering gap; otherwise the model does not share the target's
    asymptotic constants and the series would not converge.
    """
    if sd.dim != sd_model.dim:
        raise NumericalError("target and model dimensions differ")
    if n_max is None:
        n_max = min(sd.nmax, sd_model.nmax)
    om_t, gr_t = _sd_shift_groups(sd)
    om_m, gr_m = _sd_shift_groups(sd_model)
    if len(gr_t) != len(gr_m):
        raise NumericalError(
            "model pencil incompatible: %d shift groups against %d"
            % (len(gr_t), len(gr_m)))
    pairs = []
    for gt in gr_t:
        wt = float(np.mean(om_t[list(gt)]))
        best = min(gr_m, key=lambda gm: _circ_dist(
            wt, float(np.mean(om_m[list(gm)]))))
        wm = float(np.mean(om_m[list(best)]))
        if _circ_dist(wt, wm) > OMEGA_CLUSTER_GAP:
            raise NumericalError(
                "model pencil incompatible: no model shift within %.2g of "
                "omega = %.4f" % (OMEGA_CLUSTER_GAP, wt))
        pairs.append((wt, gt, best))
    pairs.sort(key=lambda p: p[0])

    by_key_t = _entries_by_index(sd, n_max)
    by_key_m = _entries_by_index(sd_model, n_max)

    groups = []
    # the two n = 0 poles straddle the shift omega, one reached from each
    # side of the lattice; both signs belong to a single group, otherwise
    # the group weight sums do not telescope
    index_list = ([((-1,), n) for n in range(n_max, 0, -1)]
                  + [((-1, 1), 0)]
                  + [((1,), n) for n in range(1, n_max + 1)])
    for signs, n in index_list:
        for wt, gt, gm in pairs:
            members = []
            for s in signs:
                for e in by_key_t.get((s, n), []):
                    if (e.q - 1) in gt:
                        _add_member(members, e.rho.real, e.alpha / e.mult)
                for e in by_key_m.get((s, n), []):
                    if (e.q - 1) in gm:
                        _add_member(members, e.rho.real, -e.alpha / e.mult)
            if members:
                members.sort(key=lambda mb: mb.rho)
                groups.append(Group(n=signs[0] * n, omega=wt,
                                    members=members))
    return GroupIndex(dim=sd.dim, groups=groups)


def _circ_dist(a, b):
    d = abs(a - b) % 1.0
    return min(d, 1.0 - d)


def _entries_by_index(sd, n_max):
    out = {}
    for e in sd.entries:
        if e.n <= n_max:
            out.setdefault((e.sign, e.n), []).append(e)
    return out


def _add_member(members, rho, weight):
    for mb in members:
        if abs(mb.rho - rho) < MERGE_TOL * (1.0 + abs(rho)):
            mb.weight = mb.weight + weight
            return
    members.append(Member(rho=float(rho), weight=np.array(weight,
                                                          dtype=complex)))


# ---------------------------------------------------------------------------
# section context: model-side fields and kernels on a grid


class SectionContext:
    """Model solutions and cumulative kernels for one pencil on one grid.

    One batched ODE solve covers every member position and evaluation point
    at all Gauss-Legendre panel nodes and grid nodes; the kernels

        D(x, rho, theta) = i h1 + int_0^x phi*(t, theta)
                           [(rho + theta) I + 2 i Q1(t)] phi(t, rho) dt

    are then accumulated cell by cell, with the section matrix built from
    matrix products of stacked left (theta) and right (rho) factors.
    """

    def __init__(self, gi, spec, x_grid, rho_eval=(), tol=DEFAULT_TOL,
                 weyl_eval=True):
        self.gi = gi
        self.spec = spec
        self.x_grid = np.asarray(x_grid, dtype=float)
        self.tol = tol
        m = spec.dim
        self.m = m
        self.thetas = gi.positions()
        self.alphas = gi.weights()
        self.J = len(self.thetas)
        self.rho_eval = np.asarray(rho_eval, dtype=float)
        self.nE = len(self.rho_eval)

        self.nodes, self.wts = gl_panels(self.x_grid)
        C, p = self.nodes.shape
        x_all = np.concatenate([self.x_grid, self.nodes.reshape(-1)])
        order = np.argsort(x_all, kind="stable")
        x_sorted = x_all[order]
        back = np.empty_like(order)
        back[order] = np.arange(len(order))

        rhos = np.concatenate([self.thetas, self.rho_eval]).astype(complex)
        if len(rhos) == 0:
            rhos = np.array([0.37 + 0j])     # placeholder, never used
        phi, S = solve_phi_S(spec, rhos, tol, x_eval=x_sorted)
        vals = phi.values[:, back]           # (B, X_all, m, m) in x_all order
        ders = phi.derivs[:, back]
        X = len(self.x_grid)
        self.phiJ = vals[:self.J, :X]
        self.dphiJ = ders[:self.J, :X]
        self.phiJ_gl = vals[:self.J, X:].reshape(self.J, C, p, m, m)
        self.phiE = vals[self.J:self.J + self.nE, :X]
        self.dphiE = ders[self.J:self.J + self.nE, :X]
        self.phiE_gl = vals[self.J:self.J + self.nE, X:].reshape(
            self.nE, C, p, m, m)
        SE = S.values[self.J:self.J + self.nE][:, back]
        dSE = S.derivs[self.J:self.J + self.nE][:, back]

        if self.nE and weyl_eval:
            self.M_eval = np.array([weyl_matrix(spec, r, tol).M
                                    for r in self.rho_eval])
            self.PhiE = SE[:, :X] + np.einsum(
                "exab,ebc->exac", self.phiE, self.M_eval)
            self.dPhiE = dSE[:, :X] + np.einsum(
                "exab,ebc->exac", self.dphiE, self.M_eval)
            SE_gl = SE[:, X:].reshape(self.nE, C, p, m, m)
            self.PhiE_gl = SE_gl + np.einsum(
                "ecpab,ebd->ecpad", self.phiE_gl, self.M_eval)
        else:
            self.M_eval = None

        self.q1_grid = spec.Q1(self.x_grid)
        self.dq1_grid = spec.Q1.deriv(self.x_grid)
        self.q0_grid = spec.Q0(self.x_grid)
        self.q1_gl = spec.Q1(self.nodes.reshape(-1)).reshape(C, p, m, m)

    # -- stacked factors ---------------------------------------------------

    def _left_stack(self, star_vals, q1):
        """theta_j phi*_j + 2 i phi*_j Q1, stacked to (J m, m)."""
        mid = (self.thetas[:, None, None] * star_vals
               + 2j * (star_vals @ q1))
        return mid.reshape(self.J * self.m, self.m)

    def _kernel_gemm(self, star_vals, right_vals, right_rhos, q1):
        """Kernel integrand for all (theta_j, rho_i) pairs at one x sample.

        Returns the (J m, I m) block matrix phi*_j [(rho_i + theta_j) I
        + 2 i Q1] y_i, with y the supplied right-hand field.
        """
        L = self._left_stack(star_vals, q1)
        P = star_vals.reshape(self.J * self.m, self.m)
        nI = right_vals.shape[0]
        R = np.transpose(right_vals, (1, 0, 2)).reshape(self.m, nI * self.m)
        Srho = np.transpose(right_rhos[:, None, None] * right_vals,
                            (1, 0, 2)).reshape(self.m, nI * self.m)
        return L @ R + P @ Srho

    def kernel_deriv1(self, i):
        """Member kernel integrand (the kernel's x-derivative) at node i."""
        sv = np.conj(np.swapaxes(self.phiJ[:, i], -1, -2))
        return self._kernel_gemm(sv, self.phiJ[:, i], self.thetas,
                                 self.q1_grid[i])

    def kernel_deriv2(self, i):
        """x-derivative of the member kernel integrand at grid node i."""
        m, J = self.m, self.J
        q1 = self.q1_grid[i]
        dq1 = self.dq1_grid[i]
        sv = np.conj(np.swapaxes(self.phiJ[:, i], -1, -2))
        dsv = np.conj(np.swapaxes(self.dphiJ[:, i], -1, -2))
        rv = self.phiJ[:, i]
        drv = self.dphiJ[:, i]
        th = self.thetas[:, None, None]
        L1 = (th * dsv + 2j * (dsv @ q1) + 2j * (sv @ dq1)).reshape(J * m, m)
        P1 = dsv.reshape(J * m, m)
        L2 = self._left_stack(sv, q1)
        P2 = sv.reshape(J * m, m)
        R = np.transpose(rv, (1, 0, 2)).reshape(m, J * m)
        Rr = np.transpose(self.thetas[:, None, None] * rv,
                          (1, 0, 2)).reshape(m, J * m)
        dR = np.transpose(drv, (1, 0, 2)).reshape(m, J * m)
        dRr = np.transpose(self.thetas[:, None, None] * drv,
                           (1, 0, 2)).reshape(m, J * m)
        return L1 @ R + P1 @ Rr + L2 @ dR + P2 @ dRr

    def phi_second(self, i, which="members"):
        """phi'' at grid node i from the differential equation."""
        q1, q0 = self.q1_grid[i], self.q0_grid[i]
        if which == "members":
            rhos, vals = self.thetas, self.phiJ[:, i]
        else:
            rhos, vals = self.rho_eval, self.phiE[:, i]
        r = rhos[:, None, None]
        return -(r ** 2 * vals + 2j * r * (q1 @ vals) + q0 @ vals)

    # -- kernel initial values and cell updates ----------------------------

    def initial_kernels(self):
        m, J, nE = self.m, self.J, self.nE
        ih1 = 1j * self.spec.h1
        Dbig = np.tile(ih1, (J, J)) if J else np.zeros((0, 0), dtype=complex)
        DE = np.broadcast_to(ih1, (J, nE, m, m)).copy()
        EE = np.zeros((J, nE, m, m), dtype=complex)
        if self.M_eval is not None:
            for e in range(nE):
                base = ih1 @ self.M_eval[e]
                for j in range(J):
                    EE[j, e] = base - np.eye(m) / (
                        self.rho_eval[e] - self.thetas[j])
        return Dbig, DE, EE

    def advance_cell(self, c, Dbig, DE, EE):
        """Add cell c's Gauss-Legendre contribution to the running kernels."""
        m, J, nE = self.m, self.J, self.nE
        for pnode in range(self.nodes.shape[1]):
            w = self.wts[c, pnode]
            q1 = self.q1_gl[c, pnode]
            sv = np.conj(np.swapaxes(self.phiJ_gl[:, c, pnode], -1, -2))
            rv = self.phiJ_gl[:, c, pnode]
            Dbig += w * self._kernel_gemm(sv, rv, self.thetas, q1)
            if nE:
                ev = self.phiE_gl[:, c, pnode]
                DE += w * self._pair_integrand(sv, ev, q1)
                if self.M_eval is not None:
                    Ev = self.PhiE_gl[:, c, pnode]
                    EE += w * self._pair_integrand(sv, Ev, q1)
        return Dbig, DE, EE

    def _pair_integrand(self, star_vals, right_vals, q1):
        """(J, nE, m, m) integrand with eval-point right factors."""
        mid = (self.thetas[:, None, None] * star_vals
               + 2j * (star_vals @ q1))
        t1 = np.einsum("jab,ebc->jeac", mid, right_vals)
        t2 = np.einsum("jab,ebc->jeac", star_vals,
                       self.rho_eval[:, None, None] * right_vals)
        return t1 + t2

    def pair_deriv(self, i, right="phi"):
        """x-derivative of the eval-point kernels at grid node i."""
        q1 = self.q1_grid[i]
        sv = np.conj(np.swapaxes(self.phiJ[:, i], -1, -2))
        rv = self.phiE[:, i] if right == "phi" else self.PhiE[:, i]
        return self._pair_integrand(sv, rv, q1)

    def pair_deriv2(self, i):
        """Second x-derivative of the eval-point phi kernels at node i."""
        q1, dq1 = self.q1_grid[i], self.dq1_grid[i]
        sv = np.conj(np.swapaxes(self.phiJ[:, i], -1, -2))
        dsv = np.conj(np.swapaxes(self.dphiJ[:, i], -1, -2))
        rv, drv = self.phiE[:, i], self.dphiE[:, i]
        th = self.thetas[:, None, None]
        re = self.rho_eval[:, None, None]
        mid = th * sv + 2j * (sv @ q1)
        dmid = th * dsv + 2j * (dsv @ q1) + 2j * (sv @ dq1)
        out = np.einsum("jab,ebc->jeac", dmid, rv)
        out += np.einsum("jab,ebc->jeac", dsv, re * rv)
        out += np.einsum("jab,ebc->jeac", mid, drv)
        out += np.einsum("jab,ebc->jeac", sv, re * drv)
        return out

    def scale_rows(self, Dbig):
        """Left-multiply each row block j by the signed weight alpha_j."""
        m, J = self.m, self.J
        if J == 0:
            return Dbig
        blocks = Dbig.reshape(J, m, J * m)
        return np.einsum("jab,jbK->jaK", self.alphas,
                         blocks).reshape(J * m, J * m)

    def scale_pairs(self, DE):
        return np.einsum("jab,jebc->jeac", self.alphas, DE)


# ---------------------------------------------------------------------------
# main-equation section: assembly and solve at one point


@dataclass
class TruncatedOperator:
    """Finite section of the main equation at one x."""

    x: float
    matrix: np.ndarray          # I + R, shape (J m, J m)
    rhs: np.ndarray             # psi values, shape (J, m, m)
    gi: GroupIndex


def assemble_R(x, gi, spec_model, tol=DEFAULT_TOL, cells=None):
    """Section matrix I + R(x) and right-hand side for the main equation.

    R's blocks are alpha_j D(x, g_i, g_j) with the kernels of the supplied
    pencil; the right-hand side collects phi(x, g_i) of the same pencil.
    """
    m = spec_model.dim
    if gi.total == 0:
        return TruncatedOperator(x, np.zeros((0, 0), dtype=complex),
                                 np.zeros((0, m, m), dtype=complex), gi)
    if cells is None:
        cells = max(16, int(math.ceil(x / 0.02)))
    grid = np.linspace(0.0, max(x, 1e-9), cells + 1)
    ctx = SectionContext(gi, spec_model, grid, rho_eval=(), tol=tol,
                         weyl_eval=False)
    Dbig, DE, EE = ctx.initial_kernels()
    for c in range(cells):
        ctx.advance_cell(c, Dbig, DE, EE)
    matrix = np.eye(gi.total * m) + ctx.scale_rows(Dbig)
    rhs = ctx.phiJ[:, -1].copy()
    return TruncatedOperator(x=float(x), matrix=matrix, rhs=rhs, gi=gi)


def solve_main_equation(op):
    """Solve z (I + R) = psi for the member values of z.

    Returns (z, residual, cond) with z of shape (J, m, m).
    """
    J = len(op.rhs)
    if J == 0:
        return op.rhs.copy(), 0.0, 1.0
    m = op.rhs.shape[-1]
    psi = np.transpose(op.rhs, (1, 0, 2)).reshape(m, J * m)
    cond = float(np.linalg.cond(op.matrix))
    if cond > COND_FLAG:
        raise NumericalError(
            "main equation near-singular at x = %.6f (condition %.3e)"
            % (op.x, cond))
    z = np.linalg.solve(op.matrix.T, psi.T).T
    res = np.linalg.norm(z @ op.matrix - psi) / max(np.linalg.norm(psi),
                                                    1e-300)
    return z.reshape(m, J, m).transpose(1, 0, 2), float(res), cond


# ---------------------------------------------------------------------------
# full-grid sweep


@dataclass
class SweepData:
    """Main-equation solution and reconstructed fields on the x grid."""

    x_grid: np.ndarray
    rho_eval: np.ndarray
    z_mem: np.ndarray           # (X, J, m, m)
    z_eval: np.ndarray          # (X, nE, m, m) and two x-derivatives
    dz_eval: np.ndarray
    ddz_eval: np.ndarray
    w_eval: np.ndarray
    dw_eval: np.ndarray
    cond: np.ndarray
    residual: np.ndarray
    flagged: np.ndarray         # bool per node


def solve_section(gi, spec_model, x_grid, rho_eval, tol=DEFAULT_TOL):
    """Sweep the grid: solve the main equation and build z, w at rho_eval.

    The solution's x-derivatives satisfy the x-differentiated main equation
    with the same matrix, so each node costs one factorization and three
    solves; the reconstruction series at the evaluation points are summed
    with the same cumulative kernels.
    """
    ctx = SectionContext(gi, spec_model, x_grid, rho_eval=rho_eval, tol=tol)
    m, J, nE = ctx.m, ctx.J, ctx.nE
    X = len(ctx.x_grid)
    eye = np.eye(J * m)

    Dbig, DE, EE = ctx.initial_kernels()
    out = SweepData(
        x_grid=ctx.x_grid, rho_eval=ctx.rho_eval,
        z_mem=np.zeros((X, J, m, m), dtype=complex),
        z_eval=np.zeros((X, nE, m, m), dtype=complex),
        dz_eval=np.zeros((X, nE, m, m), dtype=complex),
        ddz_eval=np.zeros((X, nE, m, m), dtype=complex),
        w_eval=np.zeros((X, nE, m, m), dtype=complex),
        dw_eval=np.zeros((X, nE, m, m), dtype=complex),
        cond=np.ones(X), residual=np.zeros(X),
        flagged=np.zeros(X, dtype=bool))

    for i in range(X):
        if J:
            A = eye + ctx.scale_rows(Dbig)
            Rp = ctx.scale_rows(ctx.kernel_deriv1(i))
            Rpp = ctx.scale_rows(ctx.kernel_deriv2(i))
            psi = _stack(ctx.phiJ[:, i], m)
            dpsi = _stack(ctx.dphiJ[:, i], m)
            ddpsi = _stack(ctx.phi_second(i), m)
            cond = float(np.linalg.cond(A))
            out.cond[i] = cond
            if cond > COND_FLAG or not np.isfinite(cond):
                out.flagged[i] = True
            lu = lu_factor(A.T)
            Z = lu_solve(lu, psi.T).T
            dZ = lu_solve(lu, (dpsi - Z @ Rp).T).T
            ddZ = lu_solve(lu, (ddpsi - 2.0 * dZ @ Rp - Z @ Rpp).T).T
            out.residual[i] = float(
                np.linalg.norm(Z @ A - psi)
                / max(np.linalg.norm(psi), 1e-300))
            zb = _unstack(Z, J, m)
            dzb = _unstack(dZ, J, m)
            ddzb = _unstack(ddZ, J, m)
            out.z_mem[i] = zb
        else:
            zb = dzb = ddzb = np.zeros((0, m, m), dtype=complex)

        if nE:
            aDE = ctx.scale_pairs(DE)
            aDEp = ctx.scale_pairs(ctx.pair_deriv(i))
            aDEpp = ctx.scale_pairs(ctx.pair_deriv2(i))
            aEE = ctx.scale_pairs(EE)
            aEEp = ctx.scale_pairs(ctx.pair_deriv(i, right="Phi"))
            out.z_eval[i] = ctx.phiE[:, i] - _series(zb, aDE)
            out.dz_eval[i] = (ctx.dphiE[:, i] - _series(dzb, aDE)
                              - _series(zb, aDEp))
            out.ddz_eval[i] = (ctx.phi_second(i, "eval")
                               - _series(ddzb, aDE)
                               - 2.0 * _series(dzb, aDEp)
                               - _series(zb, aDEpp))
            out.w_eval[i] = ctx.PhiE[:, i] - _series(zb, aEE)
            out.dw_eval[i] = (ctx.dPhiE[:, i] - _series(dzb, aEE)
                              - _series(zb, aEEp))

        if i < X - 1:
            ctx.advance_cell(i, Dbig, DE, EE)
    return out


def _stack(blocks, m):
    """(J, m, m) -> (m, J m) row of blocks."""
    return np.transpose(blocks, (1, 0, 2)).reshape(m, -1)


def _unstack(row, J, m):
    return row.reshape(m, J, m).transpose(1, 0, 2)


def _series(zb, scaled_kernels):
    """sum_j z_j (alpha_j K_j) over the members, per evaluation point."""
    if len(zb) == 0:
        return 0.0
    return np.einsum("jab,jebc->eac", zb, scaled_kernels)


def reconstruct_z_w(x, z_members, gi, spec_model, rho_eval, tol=DEFAULT_TOL):
    """z(x, rho) and w(x, rho) at the requested points from member values.

    Standalone wrapper over the series used inside solve_section; z_members
    must come from solve_main_equation at the same x.
    """
    cells = max(16, int(math.ceil(x / 0.02)))
    grid = np.linspace(0.0, max(x, 1e-9), cells + 1)
    ctx = SectionContext(gi, spec_model, grid, rho_eval=rho_eval, tol=tol)
    Dbig, DE, EE = ctx.initial_kernels()
    for c in range(cells):
        ctx.advance_cell(c, Dbig, DE, EE)
    z = ctx.phiE[:, -1] - _series(z_members, ctx.scale_pairs(DE))
    w = ctx.PhiE[:, -1] - _series(z_members, ctx.scale_pairs(EE))
    return z, w


# ---------------------------------------------------------------------------
# Omega recovery


@dataclass
class OmegaResult:
    Omega: np.ndarray           # (X, m, m)
    a: np.ndarray               # (X, m, m), a = Omega^{-1} Omega'
    gram: np.ndarray            # (X, m, m), Omega^dagger Omega
    eval_used: np.ndarray       # per-node evaluation-point index
    pd_ok: np.ndarray
    consistency: float


def recover_Omega(sweep, tol=DEFAULT_TOL):
    """Mixing matrix Omega(x) from the z, w fields.

    (z w*' - w z*')^{-1} gives Omega^dagger Omega; a Wronskian identity
    determines the skew part of its logarithmic derivative, the symmetric
    part comes from differentiating the grid interpolant, and Omega itself
    solves Omega' = a Omega from Omega(0) = I.
    """
    X = len(sweep.x_grid)
    m = sweep.z_eval.shape[-1]
    gram = np.zeros((X, m, m), dtype=complex)
    Xmat = np.zeros((X, m, m), dtype=complex)
    used = np.zeros(X, dtype=int)
    pd_ok = np.ones(X, dtype=bool)
    for i in range(X):
        e = _pick_eval(sweep, i)
        used[i] = e
        z, dz = sweep.z_eval[i, e], sweep.dz_eval[i, e]
        w, dw = sweep.w_eval[i, e], sweep.dw_eval[i, e]
        Y = z @ _dag(dw) - w @ _dag(dz)
        try:
            gram[i] = np.linalg.inv(Y)
            herm = 0.5 * (gram[i] + _dag(gram[i]))
            if np.min(np.linalg.eigvalsh(herm)) <= GRAM_FLOOR:
                pd_ok[i] = False
            rhs = _dag(z) @ gram[i] @ dz - _dag(dz) @ gram[i] @ z
            Xmat[i] = np.linalg.solve(_dag(z), rhs) @ np.linalg.inv(z)
        except np.linalg.LinAlgError:
            gram[i] = np.eye(m)
            pd_ok[i] = False

    dgram = GridFunction(gram).deriv(sweep.x_grid)
    a = np.linalg.solve(gram, 0.5 * (dgram - Xmat))
    finite = np.isfinite(a).all(axis=(1, 2))
    a[~finite] = 0.0

    a_gf = GridFunction(a)

    def rhs_ivp(x, y):
        return (a_gf(x) @ y.reshape(m, m)).reshape(-1)

    sol = solve_ivp(rhs_ivp, (0.0, sweep.x_grid[-1]),
                    np.eye(m, dtype=complex).reshape(-1),
                    method="DOP853", t_eval=sweep.x_grid,
                    rtol=tol, atol=tol * 1e-2)
    if not sol.success:
        raise NumericalError("Omega integration failed: %s" % sol.message)
    Omega = sol.y.T.reshape(X, m, m)
    good = pd_ok & ~sweep.flagged
    cons = float(np.max(np.abs(
        np.einsum("xab,xbc->xac", _dag_all(Omega), Omega)[good]
        - gram[good]))) if good.any() else float("inf")
    return OmegaResult(Omega=Omega, a=a, gram=gram, eval_used=used,
                       pd_ok=pd_ok, consistency=cons)


def _dag(mat):
    return mat.conj().T


def _dag_all(arr):
    return np.conj(np.swapaxes(arr, -1, -2))


def _pick_eval(sweep, i):
    """First evaluation point whose z(x_i, rho) is comfortably invertible."""
    for e in range(len(sweep.rho_eval)):
        c = np.linalg.cond(sweep.z_eval[i, e])
        if np.isfinite(c) and c < Z_COND_LIMIT:
            return e
    return 0


# ---------------------------------------------------------------------------
# coefficient extraction


def extract_coefficients(sweep, omega_result):
    """Pencil coefficients from phi = Omega z.

    B(rho) = -(phi'' + rho^2 phi) phi^{-1} equals 2 i rho Q1 + Q0, so two
    evaluation points separate Q1 and Q0; the boundary matrices come from
    phi'(0) = -(i rho h1 + h0) and from the Weyl solution Phi = Omega w at
    pi.  The output is projected onto the self-adjoint symmetry class and
    the discarded parts are reported.

    Returns (coeffs dict, info dict).
    """
    X = len(sweep.x_grid)
    m = sweep.z_eval.shape[-1]
    nE = len(sweep.rho_eval)
    Om, a = omega_result.Omega, omega_result.a
    da = GridFunction(a).deriv(sweep.x_grid)

    Q1 = np.zeros((X, m, m), dtype=complex)
    Q0 = np.zeros((X, m, m), dtype=complex)
    bad_nodes = []
    for i in range(X):
        Bs, rhos_ok = [], []
        Omi = Om[i]
        try:
            Omi_inv = np.linalg.inv(Omi)
        except np.linalg.LinAlgError:
            bad_nodes.append(i)
            continue
        shared = -(da[i] + a[i] @ a[i])
        for e in range(nE):
            z = sweep.z_eval[i, e]
            c = np.linalg.cond(z)
            if not np.isfinite(c) or c >= Z_COND_LIMIT:
                continue
            rho = sweep.rho_eval[e]
            zi = np.linalg.inv(z)
            core = (2.0 * a[i] @ Omi @ sweep.dz_eval[i, e]
                    + Omi @ (sweep.ddz_eval[i, e] + rho ** 2 * z))
            Bs.append(shared - core @ zi @ Omi_inv)
            rhos_ok.append(rho)
            if len(Bs) == 2:
                break
        if len(Bs) < 2:
            bad_nodes.append(i)
            continue
        r1, r2 = rhos_ok
        Q1[i] = (Bs[0] - Bs[1]) / (2j * (r1 - r2))
        Q0[i] = Bs[0] - 2j * r1 * Q1[i]
    for i in bad_nodes:
        j = _nearest_good(i, bad_nodes, X)
        Q1[i], Q0[i] = Q1[j], Q0[j]

    # boundary matrices at x = 0 (Omega(0) = I) and x = pi
    dphi0 = [a[0] @ sweep.z_eval[0, e] + sweep.dz_eval[0, e]
             for e in range(min(nE, 2))]
    r1, r2 = sweep.rho_eval[0], sweep.rho_eval[1]
    h1 = 1j * (dphi0[0] - dphi0[1]) / (r1 - r2)
    h0 = -dphi0[0] - 1j * r1 * h1

    Ks, Krho = [], []
    for e in range(nE):
        w, dw = sweep.w_eval[-1, e], sweep.dw_eval[-1, e]
        Phi = Om[-1] @ w
        c = np.linalg.cond(Phi)
        if not np.isfinite(c) or c >= Z_COND_LIMIT:
            continue
        dPhi = Om[-1] @ (a[-1] @ w + dw)
        Ks.append(-dPhi @ np.linalg.inv(Phi))
        Krho.append(sweep.rho_eval[e])
        if len(Ks) == 2:
            break
    if len(Ks) < 2:
        raise NumericalError(
            "boundary extraction at pi failed: the Weyl solution is "
            "singular at every evaluation point")
    H1 = (Ks[0] - Ks[1]) / (1j * (Krho[0] - Krho[1]))
    H0 = Ks[0] - 1j * Krho[0] * H1

    defects = {}
    Q1, defects["Q1"] = _project(Q1, skew=True)
    Q0, defects["Q0"] = _project(Q0, skew=False)
    h1, defects["h1"] = _project(h1, skew=True)
    H1, defects["H1"] = _project(H1, skew=True)
    h0, defects["h0"] = _project(h0, skew=False)
    H0, defects["H0"] = _project(H0, skew=False)
    coeffs = {"Q1": Q1, "Q0": Q0, "h1": h1, "h0": h0, "H1": H1, "H0": H0}
    info = {"selfadjoint_defects": defects, "bad_nodes": bad_nodes}
    return coeffs, info


def _nearest_good(i, bad, X):
    bad_set = set(bad)
    for d in range(1, X):
        for j in (i - d, i + d):
            if 0 <= j < X and j not in bad_set:
                return j
    raise NumericalError("coefficient extraction failed at every grid node")


def _project(arr, skew):
    dag = _dag_all(np.asarray(arr))
    if skew:
        kept, dropped = 0.5 * (arr - dag), 0.5 * (arr + dag)
    else:
        kept, dropped = 0.5 * (arr + dag), 0.5 * (arr - dag)
    return kept, float(np.max(np.abs(dropped)))


# ---------------------------------------------------------------------------
# stepwise driver

LAYER_NODES = 16           # nodes rebuilt at each end by extrapolation
LAYER_FIT_NODES = 48       # nodes of the fit window next to the layer
LAYER_FIT_DEGREE = 3


def _extrapolate_layer(vals, n_max, x_grid, L=LAYER_NODES,
                       K=LAYER_FIT_NODES, deg=LAYER_FIT_DEGREE):
    """Replace the first and last L nodes by a smooth extrapolation.

    The recovered coefficients carry a decaying oscillatory boundary layer
    at spatial frequency about 2 n_max (the sharp truncation of the data at
    |n| = n_max acts like a spectral window).  The fit basis is a degree-deg
    polynomial plus 1/x-damped cos and sin at that frequency; only the
    polynomial part is evaluated on the layer, which strips the artifact
    while keeping the smooth trend.
    """
    vals = np.asarray(vals)
    X = vals.shape[0]
    if X < 2 * (L + K) or n_max < 4:
        return vals.copy()
    out = vals.astype(complex).copy()
    x = np.asarray(x_grid)
    xs = x[L:L + K] - x[0]
    env = 1.0 / xs
    A = np.column_stack([xs ** k for k in range(deg + 1)]
                        + [env * np.cos(2 * n_max * xs),
                           env * np.sin(2 * n_max * xs)])
    t = x[:L] - x[0]
    V = np.column_stack([t ** k for k in range(deg + 1)])
    for end in (0, 1):
        v = out[::-1].copy() if end else out.copy()
        flat = v[L:L + K].reshape(K, -1)
        cf, *_ = np.linalg.lstsq(A, flat, rcond=None)
        v[:L] = (V @ cf[:deg + 1]).reshape((L,) + vals.shape[1:])
        out = v[::-1].copy() if end else v
    return out


def _strip_oscillation(vals, n_max, x_grid, deg=2):
    """Remove the narrowband truncation artifact at frequency about 2 n_max.

    Sliding least-squares fit with a local quadratic plus cos/sin at the
    artifact frequency; each node keeps only the local polynomial value.
    Smooth coefficients pass through unchanged (polynomials up to the
    window scale are reproduced exactly); features the data could not
    resolve anyway are suppressed.
    """
    vals = np.asarray(vals)
    X = vals.shape[0]
    h = x_grid[1] - x_grid[0]
    half = int(round(1.5 * (math.pi / max(n_max, 1)) / h))
    if half < 3 or 2 * half + 1 > X:
        return vals.copy()
    out = vals.astype(complex).copy()
    flat = vals.reshape(X, -1)
    for i in range(X):
        lo, hi = max(0, i - half), min(X, i + half + 1)
        if hi - lo < 2 * half:
            lo = max(0, hi - 2 * half - 1)
            hi = min(X, lo + 2 * half + 1)
        xs = x_grid[lo:hi] - x_grid[i]
        A = np.column_stack([xs ** p for p in range(deg + 1)]
                            + [np.cos(2 * n_max * xs),
                               np.sin(2 * n_max * xs)])
        cf, *_ = np.linalg.lstsq(A, flat[lo:hi], rcond=None)
        out[i] = cf[0].reshape(vals.shape[1:])
    return out


@dataclass
class RunLog:
    """Per-step diagnostics of the stepwise reconstruction."""

    steps: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    defects: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)   # (x, cond, res, step)

    def to_text(self):
        lines = ["reconstruction log"]
        for s in self.steps:
            lines.append(
                "step %(k)d: delta %(delta_prev).6f -> %(delta).6f, "
                "max cond %(max_cond).3e, max residual %(max_res).3e" % s)
        for n in self.notes:
            lines.append("note: %s" % n)
        for k, v in sorted(self.defects.items()):
            lines.append("defect %s: %.3e" % (k, v))
        return "\n".join(lines)


def reconstruct_pencil(sd, n_max=None, grid_nodes=DEFAULT_GRID_NODES,
                       tol=DEFAULT_TOL, rho_eval=None, root_tol=1e-11,
                       quad_nodes=None, refine=2):
    """Recover the pencil coefficients from spectral data.

    Builds a model sharing the data's asymptotic constants, sweeps the main
    equation over the grid, and extracts coefficients up to the first point
    where the mixing matrix Omega degenerates; the recovered piece is then
    spliced into the next model and the sweep repeats until the whole
    interval is covered.

    Three accuracy measures beyond the plain sweep:

      * the model's constant Q0 is matched to the data so the tail
        eigenvalues of target and model line up (estimate_q0_constant);
        without it the recovered Q0 carries a non-decaying artifact;
      * each pass's output is smoothed by stripping the narrowband
        truncation artifact at frequency 2 n_max and rebuilding the
        unresolvable boundary layer from the adjacent interior;
      * `refine` extra passes rebuild the model from the smoothed
        previous recovery and re-solve; each pass contracts the
        remaining model-mismatch error (refine=0 disables this).

    Returns (PencilSpec, RunLog).
    """
    if n_max is None:
        n_max = sd.nmax
    m = sd.dim
    x_grid = np.linspace(0.0, math.pi, grid_nodes)
    log = RunLog()

    frame = build_frame_from_sd(sd)
    h1_hat, h1_defect = extract_h1(sd)
    log.defects["h1_estimate_hermitian_part"] = h1_defect

    poles = [e.rho.real for e in sd.entries]
    evals = _shift_eval_points(
        rho_eval if rho_eval is not None else RHO_EVAL_BASE, poles)

    Q1_vals = np.zeros((grid_nodes, m, m), dtype=complex)
    Q0_vals = np.zeros((grid_nodes, m, m), dtype=complex)
    boundary = {}
    delta_prev = 0.0
    i_prev = 0
    safety = SAFETY_FACTOR
    halved = False
    fw_kwargs = {}
    if quad_nodes is not None:
        fw_kwargs["quad_nodes"] = quad_nodes

    q0t = None
    for k in range(1, MAX_STEPS + 1):
        if k == 1:
            model, recipe = build_constant_model(frame, h1_tilde=h1_hat)
            model_res = forward_spectral_data(model, n_max=n_max, tol=tol,
                                              root_tol=root_tol, **fw_kwargs)
            C = estimate_q0_constant(sd, model_res.sd, frame)
            log.defects["q0_constant_mismatch"] = float(np.max(np.abs(C)))
            if np.max(np.abs(C)) > 1e-10:
                try:
                    model2, recipe2 = build_constant_model(
                        frame, h1_tilde=h1_hat, q0_tilde=-C)
                    res2 = forward_spectral_data(
                        model2, n_max=n_max, tol=tol, root_tol=root_tol,
                        **fw_kwargs)
                    q0t = -C
                    model, recipe, model_res = model2, recipe2, res2
                except (RegimeError, NumericalError) as exc:
                    log.notes.append(
                        "constant-Q0 matching skipped: %s" % exc)
        else:
            # the scan-chosen kappa keeps I + O invertible but may leave
            # the real-spectrum class; fall back over alternatives
            model = model_res = None
            last_exc = None
            for kap in (None, 0.0, 0.45, -0.45, 0.9, -0.9):
                try:
                    cand, recipe = build_spliced_model(
                        frame, h1_tilde=h1_hat,
                        q1=GridFunction(Q1_vals.copy()), delta=delta_prev,
                        kappa=kap, q0_tilde=q0t, num_nodes=grid_nodes)
                    model_res = forward_spectral_data(
                        cand, n_max=n_max, tol=tol, root_tol=root_tol,
                        **fw_kwargs)
                    model = cand
                    if kap is not None:
                        log.notes.append(
                            "step %d: fell back to kappa = %.2f" % (k, kap))
                    break
                except (RegimeError, NumericalError) as exc:
                    last_exc = exc
            if model is None:
                raise NumericalError(
                    "no admissible spliced model at delta = %.6f: %s"
                    % (delta_prev, last_exc))
        evals = _shift_eval_points(
            evals, poles + [e.rho.real for e in model_res.sd.entries])
        gi = build_group_index(sd, model_res.sd, n_max)
        sweep = solve_section(gi, model, x_grid, evals, tol)

        flags = np.flatnonzero(sweep.flagged)
        if len(flags) and flags[0] <= i_prev + 1:
            raise NumericalError(
                "main equation near-singular at x = %.6f, immediately past "
                "the last anchored point %.6f" % (x_grid[flags[0]],
                                                  delta_prev))
        omr = recover_Omega(sweep, tol)
        bad = np.flatnonzero(sweep.flagged | ~omr.pd_ok)
        bad = bad[bad > i_prev]
        if len(bad) == 0:
            i_next = grid_nodes - 1
        else:
            i_flag = int(bad[0])
            i_next = i_prev + int(safety * (i_flag - i_prev))
            if i_next <= i_prev:
                if not halved:
                    halved = True
                    safety *= 0.5
                    i_next = i_prev + max(
                        1, int(safety * (i_flag - i_prev)))
                if i_next <= i_prev:
                    raise NumericalError(
                        "no progress past x = %.6f: main equation "
                        "degenerates within one grid cell" % delta_prev)
        coeffs, info = extract_coefficients(sweep, omr)
        lo = 0 if k == 1 else i_prev + 1
        Q1_vals[lo:i_next + 1] = coeffs["Q1"][lo:i_next + 1]
        Q0_vals[lo:i_next + 1] = coeffs["Q0"][lo:i_next + 1]
        if k == 1:
            boundary["h1"], boundary["h0"] = coeffs["h1"], coeffs["h0"]
        log.steps.append({
            "k": k, "delta_prev": delta_prev, "delta": x_grid[i_next],
            "max_cond": float(np.max(sweep.cond[:i_next + 1])),
            "max_res": float(np.max(sweep.residual[:i_next + 1]))})
        for i in range(lo, i_next + 1):
            log.diagnostics.append((float(x_grid[i]), float(sweep.cond[i]),
                                    float(sweep.residual[i]), k))
        log.defects["omega_consistency_step_%d" % k] = omr.consistency
        for name, val in info["selfadjoint_defects"].items():
            log.defects.setdefault("selfadjoint_%s" % name, val)
        if info["bad_nodes"]:
            log.notes.append("interpolated %d nodes where z(x, rho) was "
                             "singular" % len(info["bad_nodes"]))
        if i_next == grid_nodes - 1:
            boundary["H1"], boundary["H0"] = coeffs["H1"], coeffs["H0"]
            break
        delta_prev = x_grid[i_next]
        i_prev = i_next
    else:
        raise NumericalError("reconstruction did not terminate in %d steps"
                             % MAX_STEPS)

    def smooth(vals):
        return _extrapolate_layer(_strip_oscillation(vals, n_max, x_grid),
                                  n_max, x_grid)

    Q1x = smooth(Q1_vals)
    Q0x = smooth(Q0_vals)
    for p in range(1, int(refine) + 1):
        try:
            model_r = PencilSpec(m, GridFunction(Q1x), GridFunction(Q0x),
                                 boundary["h1"], boundary["h0"],
                                 boundary["H1"], boundary["H0"])
            res_r = forward_spectral_data(model_r, n_max=n_max, tol=tol,
                                          root_tol=root_tol, **fw_kwargs)
            evals_r = _shift_eval_points(
                evals, poles + [e.rho.real for e in res_r.sd.entries])
            gi_r = build_group_index(sd, res_r.sd, n_max)
            sweep_r = solve_section(gi_r, model_r, x_grid, evals_r, tol)
            omr_r = recover_Omega(sweep_r, tol)
            coeffs_r, info_r = extract_coefficients(sweep_r, omr_r)
            Q1x = smooth(coeffs_r["Q1"])
            Q0x = smooth(coeffs_r["Q0"])
            boundary = {"h1": coeffs_r["h1"], "h0": coeffs_r["h0"],
                        "H1": coeffs_r["H1"], "H0": coeffs_r["H0"]}
            log.notes.append("refinement pass %d applied" % p)
            log.defects["omega_consistency_refine"] = omr_r.consistency
            for i in range(grid_nodes):
                log.diagnostics.append(
                    (float(x_grid[i]), float(sweep_r.cond[i]),
                     float(sweep_r.residual[i]), -p))
            for name, val in info_r["selfadjoint_defects"].items():
                log.defects["selfadjoint_refine_%s" % name] = val
        except (RegimeError, NumericalError) as exc:
            log.notes.append("refinement pass %d skipped: %s" % (p, exc))
            break

    spec = PencilSpec(m, GridFunction(Q1x), GridFunction(Q0x),
                      boundary["h1"], boundary["h0"],
                      boundary["H1"], boundary["H0"])
    return spec, log


def _shift_eval_points(base, poles):
    """Move evaluation points at least the clearance away from all poles."""
    poles = np.asarray(poles, dtype=float)
    out = []
    for r in base:
        r = float(r)
        while ((len(poles) and np.min(np.abs(poles - r)) < POLE_CLEARANCE)
               or any(abs(r - s) < 0.01 for s in out)):
            r += POLE_CLEARANCE
        out.append(r)
    return tuple(out)


# ---------------------------------------------------------------------------
# operator identity cross-check


def operator_identity_defect(x, gi, spec, spec_model, tol=DEFAULT_TOL):
    """Section norm of R - R~ + Theta~ + R~ R at one x (test mode).

    R uses the target's kernels, R~ the model's; Theta~ couples them through
    the mixing matrix Lambda~ = (1/2i)(P~- P-^dagger - P~+ P+^dagger).
    The identity holds exactly for the untruncated operators, so the
    returned defect measures truncation plus quadrature error.
    """
    m = spec.dim
    J = gi.total
    if J == 0:
        return 0.0
    opR = assemble_R(x, gi, spec, tol)
    opRt = assemble_R(x, gi, spec_model, tol)
    R = opR.matrix - np.eye(J * m)
    Rt = opRt.matrix - np.eye(J * m)

    xs = np.array([0.0, x]) if x > 0 else np.array([0.0, 1e-9])
    Pp = solve_P(spec, +1, tol, x_eval=xs).values[-1]
    Pm = solve_P(spec, -1, tol, x_eval=xs).values[-1]
    Ppt = solve_P(spec_model, +1, tol, x_eval=xs).values[-1]
    Pmt = solve_P(spec_model, -1, tol, x_eval=xs).values[-1]
    Lam = (Pmt @ _dag(Pm) - Ppt @ _dag(Pp)) / 2j

    thetas = gi.positions().astype(complex)
    xs1 = np.array([x])
    phi_t, _ = solve_phi_S(spec, thetas, tol, x_eval=xs1)
    phi_m, _ = solve_phi_S(spec_model, thetas, tol, x_eval=xs1)
    phi_target = phi_t.values[:, 0]                      # (J, m, m)
    star_model = _dag_all(phi_m.values[:, 0])
    alphas = gi.weights()
    left = np.einsum("jab,jbc,cd->jad", alphas, star_model, Lam)
    Theta = np.einsum("jab,ibc->jiac", left, phi_target)
    Theta = Theta.transpose(0, 2, 1, 3).reshape(J * m, J * m)

    defect = R - Rt + Theta + Rt @ R
    # measure in the divided-difference coordinates of the sequence space:
    # per group, (value at first member, scaled differences to the others);
    # in raw coordinates near-coincident members with large near-cancelling
    # weights (the n = 0 pair) would dominate the norm
    A = np.zeros((J * m, J * m))
    off = 0
    for g in gi.groups:
        r = len(g.members)
        d = g.diam if g.diam > 0 else 1.0
        A[off:off + m, off:off + m] = np.eye(m)
        for i in range(1, r):
            A[off + i * m:off + (i + 1) * m, off:off + m] = np.eye(m) / d
            A[off + i * m:off + (i + 1) * m,
              off + i * m:off + (i + 1) * m] = -np.eye(m) / d
        off += r * m
    defect = np.linalg.solve(A.T, defect) @ A.T
    return float(np.linalg.norm(defect, 2))
