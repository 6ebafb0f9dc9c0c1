import math

import numpy as np
import pytest

from slpencil.core import NumericalError, PencilSpec
from slpencil.forward import asymptotic_frame, forward_spectral_data
from slpencil.inverse import (
    _extrapolate_layer,
    assemble_R,
    build_group_index,
    extract_coefficients,
    operator_identity_defect,
    reconstruct_pencil,
    recover_Omega,
    solve_section,
)
from slpencil.model import build_spliced_model
from slpencil.ode import solve_phi_S

GRID65 = np.linspace(0.0, math.pi, 65)
RHO_EVAL = (0.37, 0.61, 0.11)


@pytest.fixture(scope="module")
def shift_spec():
    return PencilSpec.build(1, Q1=0.25j)


@pytest.fixture(scope="module")
def shift_sd(shift_spec):
    return forward_spectral_data(shift_spec, n_max=6).sd


@pytest.fixture(scope="module")
def telescoping(shift_spec, shift_sd):
    gi = build_group_index(shift_sd, shift_sd)
    sweep = solve_section(gi, shift_spec, GRID65, RHO_EVAL, tol=1e-12)
    return gi, sweep


@pytest.fixture(scope="module")
def phase_pair():
    # target carries the phase in Q1, the model in H1 = -i; the mixing
    # matrix between them is Omega(x) = cos(0.25 x)
    target = PencilSpec.build(1, Q1=0.25j)
    sd = forward_spectral_data(target, n_max=8).sd
    fr = asymptotic_frame(target)
    model, _ = build_spliced_model(fr, kappa=0.0, num_nodes=65)
    sdm = forward_spectral_data(model, n_max=8).sd
    gi = build_group_index(sd, sdm)
    sweep = solve_section(gi, model, GRID65, RHO_EVAL)
    return target, model, gi, sweep


class TestGroupIndex:
    def test_telescoping_members_kept_with_zero_weight(self, telescoping):
        gi, _ = telescoping
        assert gi.total > 0
        assert np.max(np.abs(gi.weights())) <= 1e-14

    def test_incompatible_model_rejected(self, shift_sd):
        zero_sd = forward_spectral_data(PencilSpec.build(1), n_max=6).sd
        with pytest.raises(NumericalError, match="incompatible"):
            build_group_index(shift_sd, zero_sd)


class TestTelescoping:
    def test_section_operator_vanishes(self, telescoping, shift_spec):
        gi, _ = telescoping
        for x in (0.7, 1.9, 3.0):
            op = assemble_R(x, gi, shift_spec)
            J = gi.total
            assert np.max(np.abs(op.matrix - np.eye(J))) <= 1e-12

    def test_solution_equals_model_phi(self, telescoping, shift_spec):
        gi, sweep = telescoping
        phi, _ = solve_phi_S(shift_spec, gi.positions().astype(complex),
                             1e-12, x_eval=GRID65)
        ref = phi.values.transpose(1, 0, 2, 3)
        assert np.max(np.abs(sweep.z_mem - ref)) <= 1e-10

    def test_solve_is_well_conditioned_and_exact(self, telescoping):
        _, sweep = telescoping
        assert np.max(sweep.residual) <= 1e-10
        assert np.max(sweep.cond) <= 1.0 + 1e-9
        assert not sweep.flagged.any()

    def test_omega_is_identity(self, telescoping):
        _, sweep = telescoping
        omr = recover_Omega(sweep)
        assert np.max(np.abs(omr.Omega - np.eye(1))) <= 1e-8
        assert omr.pd_ok.all()

    def test_coefficients_equal_model(self, telescoping):
        _, sweep = telescoping
        coeffs, _ = extract_coefficients(sweep, recover_Omega(sweep))
        assert np.max(np.abs(coeffs["Q1"] - 0.25j)) <= 1e-8
        assert np.max(np.abs(coeffs["Q0"])) <= 1e-8
        for name in ("h1", "h0", "H1", "H0"):
            assert np.max(np.abs(coeffs[name])) <= 1e-8


class TestPhasePairSweep:
    def test_residual_small(self, phase_pair):
        *_, sweep = phase_pair
        assert np.max(sweep.residual) <= 1e-10

    def test_wronskian_symmetry_zw(self, phase_pair):
        # z w* - w z* = 0 at real rho
        *_, sweep = phase_pair
        for e in range(sweep.z_eval.shape[1]):
            z, w = sweep.z_eval[:, e], sweep.w_eval[:, e]
            defect = z * np.conj(w) - w * np.conj(z)
            scale = max(1.0, np.max(np.abs(z * np.conj(w))))
            assert np.max(np.abs(defect)) <= 1e-8 * scale

    def test_omega_matches_cosine(self, phase_pair):
        *_, sweep = phase_pair
        omr = recover_Omega(sweep)
        oracle = np.cos(0.25 * GRID65)
        err = np.max(np.abs(omr.Omega[:, 0, 0] - oracle))
        # truncation error of the data series decays like 1/n_max
        assert err <= 2.5e-2

    def test_omega_error_decreases_with_more_data(self, phase_pair):
        target, model, _, sweep8 = phase_pair
        sd4 = forward_spectral_data(target, n_max=4).sd
        sdm4 = forward_spectral_data(model, n_max=4).sd
        gi4 = build_group_index(sd4, sdm4)
        sweep4 = solve_section(gi4, model, GRID65, RHO_EVAL)
        oracle = np.cos(0.25 * GRID65)
        err4 = np.max(np.abs(recover_Omega(sweep4).Omega[:, 0, 0] - oracle))
        err8 = np.max(np.abs(recover_Omega(sweep8).Omega[:, 0, 0] - oracle))
        assert err8 < err4

    def test_gram_consistency(self, phase_pair):
        *_, sweep = phase_pair
        omr = recover_Omega(sweep)
        gram_direct = np.abs(omr.Omega[:, 0, 0]) ** 2
        assert np.max(np.abs(omr.gram[:, 0, 0] - gram_direct)) <= 5e-2
        assert omr.consistency <= 5e-2


class TestExtrapolateLayer:
    GRID = np.linspace(0.0, math.pi, 257)

    def test_smooth_data_nearly_unchanged(self):
        vals = np.cos(self.GRID)[:, None, None].astype(complex)
        out = _extrapolate_layer(vals, 20, self.GRID)
        assert np.max(np.abs(out - vals)) <= 2e-3

    def test_corrupted_layer_repaired(self):
        truth = (0.3 + 0.1 * self.GRID ** 2)[:, None, None].astype(complex)
        bad = truth.copy()
        bad[:16] += 0.3
        bad[-16:] -= 0.3
        out = _extrapolate_layer(bad, 20, self.GRID)
        assert np.max(np.abs(out - truth)) <= 1e-6

    def test_oscillatory_artifact_stripped(self):
        x = self.GRID
        truth = np.cos(x)
        layer = 0.05 * np.cos(2 * 20 * x) / (1.0 + 40 * x)
        layer += 0.05 * np.cos(2 * 20 * x) / (1.0 + 40 * (math.pi - x))
        bad = (truth + layer)[:, None, None].astype(complex)
        out = _extrapolate_layer(bad, 20, x)
        err_in = np.max(np.abs(bad[:16, 0, 0] - truth[:16]))
        err_out = np.max(np.abs(out[:16, 0, 0] - truth[:16]))
        assert err_out < 0.3 * err_in

    def test_small_grid_passthrough(self):
        grid = np.linspace(0.0, math.pi, 65)
        vals = np.cos(grid)[:, None, None].astype(complex)
        out = _extrapolate_layer(vals, 20, grid)
        assert np.array_equal(out, vals)


class TestOperatorIdentity:
    def test_identity_pair_vanishes(self, telescoping, shift_spec):
        gi, _ = telescoping
        d = operator_identity_defect(1.3, gi, shift_spec, shift_spec)
        assert d <= 1e-10

    def test_defect_decays_with_section_size(self, phase_pair):
        target, model, gi8, _ = phase_pair
        sd4 = forward_spectral_data(target, n_max=4).sd
        sdm4 = forward_spectral_data(model, n_max=4).sd
        gi4 = build_group_index(sd4, sdm4)
        d4 = operator_identity_defect(1.0, gi4, target, model)
        d8 = operator_identity_defect(1.0, gi8, target, model)
        assert d8 < d4

    def test_defect_insensitive_to_quadrature(self, phase_pair):
        target, model, gi, _ = phase_pair
        d1 = operator_identity_defect(1.0, gi, target, model, tol=1e-9)
        d2 = operator_identity_defect(1.0, gi, target, model, tol=1e-11)
        assert d1 <= 2.0 * max(d2, 1e-14) and d2 <= 2.0 * max(d1, 1e-14)


class TestReconstruct:
    def test_zero_pencil_roundtrip(self):
        sd = forward_spectral_data(PencilSpec.build(1), n_max=6).sd
        rec, log = reconstruct_pencil(sd, n_max=6, grid_nodes=65,
                                      refine=False)
        assert np.max(np.abs(rec.Q1.values)) <= 1e-6
        assert np.max(np.abs(rec.Q0.values)) <= 1e-6
        for mat in (rec.h1, rec.h0, rec.H1, rec.H0):
            assert np.max(np.abs(mat)) <= 1e-6
        assert len(log.steps) == 1

    def test_shift_pencil_roundtrip(self, shift_sd):
        rec, _ = reconstruct_pencil(shift_sd, n_max=6, grid_nodes=65,
                                    refine=False)
        assert np.max(np.abs(rec.Q1.values - 0.25j)) <= 1e-4
        assert np.max(np.abs(rec.Q0.values)) <= 1e-3

    def test_diagnostics_cover_grid(self, shift_sd):
        _, log = reconstruct_pencil(shift_sd, n_max=6, grid_nodes=65,
                                    refine=False)
        assert len(log.diagnostics) == 65
        assert all(r <= 1e-10 for _, _, r, _ in log.diagnostics)


@pytest.fixture(scope="module")
def strong_pair():
    # Q1 strong enough that the mixing matrix against the constant
    # model crosses zero at x = asin(pi / (2 a)) inside the interval
    a = 1.8
    target = PencilSpec.build(1, Q1=lambda x: a * 1j * math.cos(x),
                              Q0=-0.5)
    sd = forward_spectral_data(target, n_max=8).sd
    model = PencilSpec.build(1, Q0=-0.5)
    sdm = forward_spectral_data(model, n_max=8).sd
    gi = build_group_index(sd, sdm)
    grid = np.linspace(0.0, math.pi, 129)
    sweep = solve_section(gi, model, grid, RHO_EVAL)
    return a, grid, sweep


class TestReanchoring:
    def test_degeneracy_flag_matches_omega_zero(self, strong_pair):
        a, grid, sweep = strong_pair
        omr = recover_Omega(sweep)
        bad = np.flatnonzero(sweep.flagged | ~omr.pd_ok)
        assert len(bad) > 0
        x_zero = math.asin((math.pi / 2) / a)
        gram_th = np.cos(a * np.sin(grid)) ** 2
        first = grid[bad[0]]
        assert first < x_zero
        # the first flagged node sits where the true gram drops to the floor
        assert gram_th[bad[0]] <= 0.05
        assert gram_th[max(bad[0] - 3, 0)] > 5e-3
