"""High-accuracy integration of the matrix ODE initial-value problems.

All solvers integrate the second-order equation

    Y'' + (rho^2 I + 2 i rho Q1(x) + Q0(x)) Y = 0

as a first-order system in the two m x m blocks (Y, Y'), batched over many
values of the spectral parameter at once: eigenvalue contours and residue
quadratures sample hundreds of rho values, and one adaptive solve over the
stacked batch is far cheaper than one solve per sample.

Solutions are reported on a caller-supplied x grid.  The kernel

    D(x, rho, theta) = <phi*(x, theta), phi(x, rho)> / (rho - theta)

is evaluated by the Wronskian quotient away from the diagonal and by a
Volterra integral (per-cell Gauss-Legendre panels) near it, where the
quotient loses ~|rho - theta|^-1 digits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .core import NumericalError

DEFAULT_TOL = 1e-11
IMAG_RHO_LIMIT = 40.0 / math.pi   # exp(|Im rho| pi) <= e^40
GL_POINTS_PER_CELL = 8


def eps_switch(rho):
    """Branch-switch radius for the kernel quotient, scaled with |rho|."""
    return 1e-3 * (1.0 + abs(rho))


@dataclass
class SolutionField:
    """A matrix solution and its x-derivative sampled on a grid.

    values / derivs have shape (len(grid), m, m) for a single rho, or
    (B, len(grid), m, m) for a batch of B spectral parameters.
    """

    grid: np.ndarray
    values: np.ndarray
    derivs: np.ndarray
    rho: complex | np.ndarray
    tag: str

    def at(self, i):
        """Field of batch member i."""
        return SolutionField(self.grid, self.values[i], self.derivs[i],
                             np.atleast_1d(self.rho)[i], self.tag)

    def endpoint(self):
        return self.values[..., -1, :, :], self.derivs[..., -1, :, :]


def _check_rhos(rhos):
    rhos = np.atleast_1d(np.asarray(rhos, dtype=complex))
    worst = np.max(np.abs(rhos.imag))
    if worst > IMAG_RHO_LIMIT:
        raise NumericalError(
            "|Im rho| = %.3g exceeds the supported bound %.3g "
            "(exp(|Im rho| pi) would overflow the working precision budget)"
            % (worst, IMAG_RHO_LIMIT))
    return rhos


def _run_ivp(rhs, y0, x_eval, tol, t0, t1):
    sol = solve_ivp(rhs, (t0, t1), y0, method="DOP853",
                    t_eval=x_eval, rtol=tol, atol=tol * 1e-2,
                    dense_output=False)
    if not sol.success:
        raise NumericalError("integrator failed near x = %.6f: %s"
                             % (sol.t[-1] if len(sol.t) else t0, sol.message))
    return sol.y


def _integrate_second_order(spec, rhos, x_eval, tol, width_init, forcing=None,
                            reverse=False):
    """Integrate (Y, Y') batched over rhos.

    width_init: (B, 2m, W) initial block [Y(a); Y'(a)] with W columns.
    forcing(x, Y, rhos) -> extra term added to Y'' (same shape as Y), or None.
    reverse=True integrates in t = pi - x (coefficients mirrored, Y' sign
    handled by the caller through the initial data and output mapping).
    """
    rhos = np.asarray(rhos, dtype=complex)
    B = rhos.shape[0]
    m = spec.dim
    W = width_init.shape[-1]
    shape = (B, 2 * m, W)
    rho2 = (rhos ** 2)[:, None, None]
    two_i_rho = (2j * rhos)[:, None, None]

    def rhs(t, y):
        x = math.pi - t if reverse else t
        q1 = spec.Q1(x)
        q0 = spec.Q0(x)
        state = y.reshape(shape)
        Y = state[:, :m, :]
        Yp = state[:, m:, :]
        acc = -(rho2 * Y + two_i_rho * (q1 @ Y) + q0 @ Y)
        if forcing is not None:
            acc = acc + forcing(x, state, rhos)
        out = np.concatenate([Yp, acc], axis=1)
        return out.reshape(-1)

    t_eval = (math.pi - x_eval)[::-1] if reverse else x_eval
    y = _run_ivp(rhs, width_init.reshape(-1), t_eval, tol, 0.0, math.pi)
    out = y.T.reshape(len(x_eval), B, 2 * m, W)
    if reverse:
        out = out[::-1]
    out = np.moveaxis(out, 0, 1)          # (B, X, 2m, W)
    return out[:, :, :m, :], out[:, :, m:, :]


def solve_phi_S(spec, rhos, tol=DEFAULT_TOL, x_eval=None):
    """Solutions phi (phi(0)=I, U(phi)=0) and S (S(0)=0, S'(0)=I)."""
    rhos = _check_rhos(rhos)
    if x_eval is None:
        x_eval = np.linspace(0.0, math.pi, 65)
    x_eval = np.asarray(x_eval, dtype=float)
    B, m = len(rhos), spec.dim
    y0 = np.zeros((B, 2 * m, 2 * m), dtype=complex)
    eye = np.eye(m)
    for i, rho in enumerate(rhos):
        y0[i, :m, :m] = eye                                   # phi(0)
        y0[i, m:, :m] = -(1j * rho * spec.h1 + spec.h0)       # phi'(0)
        y0[i, m:, m:] = eye                                   # S'(0)
    Y, Yp = _integrate_second_order(spec, rhos, x_eval, tol, y0)
    phi = SolutionField(x_eval, Y[..., :m], Yp[..., :m], rhos, "phi")
    S = SolutionField(x_eval, Y[..., m:], Yp[..., m:], rhos, "S")
    return phi, S


def solve_psi(spec, rhos, tol=DEFAULT_TOL, x_eval=None):
    """Solution psi with psi(pi) = I and V(psi) = 0, integrated backward."""
    rhos = _check_rhos(rhos)
    if x_eval is None:
        x_eval = np.linspace(0.0, math.pi, 65)
    x_eval = np.asarray(x_eval, dtype=float)
    B, m = len(rhos), spec.dim
    # in t = pi - x: Z(t) = psi(pi - t), Z(0) = I, Z'(0) = -psi'(pi)
    y0 = np.zeros((B, 2 * m, m), dtype=complex)
    for i, rho in enumerate(rhos):
        y0[i, :m, :] = np.eye(m)
        y0[i, m:, :] = 1j * rho * spec.H1 + spec.H0
    # the reverse pass returns (Z, Z') with Z(t) = psi(pi - t): psi' = -Z'
    vals, dvals = _integrate_second_order(spec, rhos, x_eval, tol, y0,
                                          reverse=True)
    return SolutionField(x_eval, vals, -dvals, rhos, "psi")


def solve_P(spec, sign, tol=DEFAULT_TOL, x_eval=None):
    """First-order transmission solutions P' = sign * Q1 P, P(0) = I."""
    if sign not in (+1, -1):
        raise ValueError("sign must be +1 or -1")
    if x_eval is None:
        x_eval = np.linspace(0.0, math.pi, 65)
    x_eval = np.asarray(x_eval, dtype=float)
    m = spec.dim

    def rhs(t, y):
        P = y.reshape(m, m)
        return (sign * (spec.Q1(t) @ P)).reshape(-1)

    y = _run_ivp(rhs, np.eye(m, dtype=complex).reshape(-1), x_eval, tol,
                 0.0, math.pi)
    vals = y.T.reshape(len(x_eval), m, m)
    derivs = np.array([sign * spec.Q1(x) @ vals[k]
                       for k, x in enumerate(x_eval)])
    tag = "Pplus" if sign > 0 else "Pminus"
    return SolutionField(x_eval, vals, derivs, 0.0 + 0.0j, tag)


def param_derivative(spec, rhos, order=1, which="phi", tol=DEFAULT_TOL,
                     x_eval=None):
    """d^k/drho^k of phi or S via the variational equation (k = 1, 2).

    Returns (base, d1) or (base, d1, d2) as SolutionFields.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if which not in ("phi", "S"):
        raise ValueError("which must be 'phi' or 'S'")
    rhos = _check_rhos(rhos)
    if x_eval is None:
        x_eval = np.linspace(0.0, math.pi, 65)
    x_eval = np.asarray(x_eval, dtype=float)
    B, m = len(rhos), spec.dim
    nblk = order + 1
    y0 = np.zeros((B, 2 * m, nblk * m), dtype=complex)
    eye = np.eye(m)
    for i, rho in enumerate(rhos):
        if which == "phi":
            y0[i, :m, :m] = eye
            y0[i, m:, :m] = -(1j * rho * spec.h1 + spec.h0)
            y0[i, m:, m:2 * m] = -1j * spec.h1        # d/drho of phi'(0)
        else:
            y0[i, m:, :m] = eye

    two_i = 2j

    def forcing(x, state, rr):
        # C_rho = 2 rho I + 2 i Q1;  C_rhorho = 2 I
        q1 = spec.Q1(x)
        Y = state[:, :m, :]
        base = Y[:, :, :m]
        d1 = Y[:, :, m:2 * m]
        crho = lambda blk: (2.0 * rr[:, None, None]) * blk + two_i * (q1 @ blk)
        out = np.zeros_like(Y)
        out[:, :, m:2 * m] = -crho(base)
        if nblk == 3:
            out[:, :, 2 * m:] = -2.0 * crho(d1) - 2.0 * base
        return out

    Y, Yp = _integrate_second_order(spec, rhos, x_eval, tol, y0,
                                    forcing=forcing)
    fields = []
    names = [which, "d%s/drho" % which, "d2%s/drho2" % which]
    for k in range(nblk):
        fields.append(SolutionField(
            x_eval, Y[..., k * m:(k + 1) * m], Yp[..., k * m:(k + 1) * m],
            rhos, names[k]))
    return tuple(fields)


def wronskian(Z_vals, Z_derivs, Y_vals, Y_derivs):
    """Matrix Wronskian <Z, Y> = Z' Y - Z Y' of a row solution Z against Y."""
    return Z_derivs @ Y_vals - Z_vals @ Y_derivs


def adjoint_field(field):
    """phi*(x, rho) = phi(x, conj(rho))^dagger, from a field at conj(rho).

    For real rho the input field itself can be used.
    """
    return SolutionField(
        field.grid,
        np.conj(np.swapaxes(field.values, -1, -2)),
        np.conj(np.swapaxes(field.derivs, -1, -2)),
        np.conj(field.rho), field.tag + "*")


# ---------------------------------------------------------------------------
# Gauss-Legendre panels aligned with a report grid


def gl_panels(x_grid, points_per_cell=GL_POINTS_PER_CELL):
    """Gauss-Legendre nodes/weights per cell of a (uniform or not) grid.

    Returns (nodes, weights) with shapes (cells, p); nodes are strictly
    inside each cell so they can be appended to x_grid for one t_eval pass.
    """
    xg, wg = np.polynomial.legendre.leggauss(points_per_cell)
    a = x_grid[:-1]
    b = x_grid[1:]
    half = 0.5 * (b - a)
    nodes = a[:, None] + half[:, None] * (xg[None, :] + 1.0)
    weights = half[:, None] * wg[None, :]
    return nodes, weights


def volterra_D_cumulative(h1, phi_theta_star, phi_rho, q1_at_nodes, weights,
                          rho, theta):
    """D at panel boundaries from the Volterra form.

    D(x) = i h1 + int_0^x phi*(t, theta) ((rho+theta) I + 2 i Q1(t)) phi(t, rho) dt.

    phi_theta_star / phi_rho: (cells, p, m, m) at the panel nodes (the star
    field already conjugate-transposed); q1_at_nodes likewise; weights
    (cells, p).  Returns (cells + 1, m, m) at the cell boundaries.
    """
    m = h1.shape[0]
    mid = (rho + theta) * np.eye(m) + 2j * q1_at_nodes
    integrand = phi_theta_star @ mid @ phi_rho
    panel = np.einsum("cp,cpab->cab", weights, integrand)
    out = np.empty((panel.shape[0] + 1, m, m), dtype=complex)
    out[0] = 1j * h1
    np.cumsum(panel, axis=0, out=out[1:])
    out[1:] += 1j * h1
    return out


def kernel_D(spec, x, rho, theta, tol=DEFAULT_TOL, force_branch=None):
    """Kernel D(x, rho, theta) = <phi*(x, theta), phi(x, rho)> / (rho - theta).

    Uses the Wronskian quotient for well-separated arguments and the
    Volterra integral near the diagonal (including rho == theta exactly).
    force_branch in {None, "quotient", "volterra"} pins the path for
    cross-checks.
    """
    rho = complex(rho)
    theta = complex(theta)
    near = abs(rho - theta) < eps_switch(rho)
    branch = force_branch or ("volterra" if near else "quotient")

    if branch == "quotient":
        if rho == theta:
            raise ZeroDivisionError("quotient branch undefined at rho == theta")
        xs = np.array([x])
        phi_r, _ = solve_phi_S(spec, [rho], tol, xs)
        phi_t, _ = solve_phi_S(spec, [np.conj(theta)], tol, xs)
        star = adjoint_field(phi_t)
        w = wronskian(star.values[0, 0], star.derivs[0, 0],
                      phi_r.values[0, 0], phi_r.derivs[0, 0])
        return w / (rho - theta)

    cells = max(16, int(math.ceil(x / 0.05)) or 1)
    bounds = np.linspace(0.0, x, cells + 1)
    nodes, weights = gl_panels(bounds)
    flat = nodes.reshape(-1)
    phi_r, _ = solve_phi_S(spec, [rho], tol, flat)
    phi_t, _ = solve_phi_S(spec, [np.conj(theta)], tol, flat)
    star = adjoint_field(phi_t)
    p = nodes.shape[1]
    m = spec.dim
    pts = phi_r.values[0].reshape(cells, p, m, m)
    pts_star = star.values[0].reshape(cells, p, m, m)
    q1 = spec.Q1(flat).reshape(cells, p, m, m)
    cum = volterra_D_cumulative(spec.h1, pts_star, pts, q1, weights,
                                rho, theta)
    return cum[-1]
