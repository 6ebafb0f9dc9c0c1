import cmath
import math

import numpy as np
import pytest

from slpencil.core import PencilSpec, RegimeError
from slpencil.forward import (
    asymptotic_frame,
    characteristic_sample,
    forward_spectral_data,
    group_weight_sum,
    locate_eigenvalues,
    verify_norming_integral,
    weight_matrices,
    weyl_from_sd,
    weyl_matrix,
)


@pytest.fixture(scope="module")
def zero_result():
    return forward_spectral_data(PencilSpec.build(1), n_max=8)


@pytest.fixture(scope="module")
def shift_result():
    return forward_spectral_data(PencilSpec.build(1, Q1=0.25j), n_max=10)


@pytest.fixture(scope="module")
def m2_result():
    spec = PencilSpec.build(2, Q1=np.diag([0.25j, 0.1j]),
                            Q0=lambda x: -0.1 * (1 + np.cos(x)) * np.eye(2))
    return forward_spectral_data(spec, n_max=10), spec


class TestFrame:
    def test_zero_pencil(self):
        fr = asymptotic_frame(PencilSpec.build(1))
        assert np.allclose(fr.A, 1.0, atol=1e-10)
        assert abs(fr.omegas[0]) < 1e-10
        assert fr.groups == ((0,),)

    def test_scalar_shift(self):
        # P_pm(pi) = exp(pm i pi / 4), A = exp(i pi / 2) = i
        fr = asymptotic_frame(PencilSpec.build(1, Q1=0.25j))
        assert abs(fr.A[0, 0] - 1j) < 1e-10
        assert abs(fr.omegas[0] - 0.25) < 1e-10

    def test_diagonal_two_groups(self):
        fr = asymptotic_frame(PencilSpec.build(2, Q1=np.diag([0.25j, 0.1j])))
        assert np.allclose(fr.omegas, [0.1, 0.25], atol=1e-10)
        assert fr.groups == ((0,), (1,))
        assert np.allclose(fr.W.conj().T @ np.diag(fr.mdiag) @ fr.W, fr.A,
                           atol=1e-10)

    def test_boundary_shift(self):
        # Q1 = 0, H1 = -i: A = (1+i)/(1-i)... = (I+H1)^{-1}(I-H1) = i
        fr = asymptotic_frame(PencilSpec.build(1, H1=-1j))
        assert abs(fr.omegas[0] - 0.25) < 1e-10


class TestLocate:
    def test_zero_pencil_integers(self, zero_result):
        for e in zero_result.sd.entries:
            assert abs(e.rho - e.signed_index) < 1e-8
            assert e.mult == 1

    def test_quadratic_formula_oracle(self, shift_result):
        # rho^2 - 0.5 rho = n^2  ->  rho = 0.25 +- sqrt(0.0625 + n^2)
        for e in shift_result.sd.entries:
            n = e.signed_index
            root = 0.25 + e.sign * math.sqrt(0.0625 + n * n)
            assert abs(e.rho - root) < 1e-8

    def test_scalar_example_with_real_shift(self):
        # y'' + (rho^2 + 2 rho p + q) y = 0: eigenvalues solve
        # rho^2 + 2 rho p + q = n^2
        p, q = 0.3, -0.2
        spec = PencilSpec.build(1, Q1=-1j * p, Q0=q)
        res = forward_spectral_data(spec, n_max=6)
        oracle = sorted(-p + s * math.sqrt(p * p - q + n * n)
                        for n in range(0, 8) for s in (1, -1))
        located = sorted(e.rho.real for e in res.sd.entries)
        # indices -6..+6 are the 14 largest of the 16 oracle roots
        # (the shift w = 0.7 places the ladder asymmetrically)
        assert np.allclose(located, oracle[2:], atol=1e-8)

    def test_double_root_multiplicity(self):
        spec = PencilSpec.build(1)
        fr = asymptotic_frame(spec)
        located = locate_eigenvalues(spec, fr, 3)
        at_zero = [p for p in located if abs(p.rho) < 1e-8]
        assert len(at_zero) == 1 and at_zero[0].mult == 2

    def test_complex_eigenvalue_rejected(self):
        # non-Hermitian Q0 pushes eigenvalues off the real axis
        spec = PencilSpec.build(1, Q0=0.4j)
        fr = asymptotic_frame(spec)
        with pytest.raises(RegimeError, match="N=0 regime violated"):
            locate_eigenvalues(spec, fr, 3)

    def test_refined_roots_kill_characteristic(self, shift_result):
        spec = PencilSpec.build(1, Q1=0.25j)
        for e in shift_result.sd.entries[:4]:
            cs = characteristic_sample(spec, e.rho)
            assert abs(cs.det) < 1e-8 * max(1.0, abs(e.rho))


class TestWeyl:
    def test_zero_pencil_closed_form(self):
        spec = PencilSpec.build(1)
        pts = [0.37, 0.61, 1.43, 2.71, 0.5 + 0.5j, 1.2 - 0.8j, 3.1 + 1.0j]
        for rho in pts:
            rho = complex(rho)
            oracle = cmath.cos(rho * math.pi) / (rho * cmath.sin(rho * math.pi))
            ev = weyl_matrix(spec, rho)
            assert abs(ev.M[0, 0] - oracle) <= 1e-8 * abs(oracle) + 1e-12

    def test_large_imag_leading_term(self):
        spec = PencilSpec.build(1, Q1=0.25j, h1=0.1j)
        for tau in (6.0, 12.0):
            M = weyl_matrix(spec, 1j * tau).M
            lead = 1.0 / (1j * 1j * tau) / (1 + 0.1j)
            assert abs(M[0, 0] - lead) < 2.0 / tau ** 2

    def test_selfadjoint_symmetry(self, m2_result):
        _, spec = m2_result
        for rho in (0.37, 1.43):
            M = weyl_matrix(spec, rho).M
            assert np.max(np.abs(M - M.conj().T)) < 1e-8

    def test_near_eigenvalue_rejected(self):
        spec = PencilSpec.build(1)
        with pytest.raises(Exception, match="eigenvalue"):
            weyl_matrix(spec, 1.0 + 1e-9)


class TestWeights:
    def test_zero_pencil_residues(self, zero_result):
        for e in zero_result.sd.entries:
            n = e.signed_index
            assert abs(e.alpha[0, 0] - 1.0 / (math.pi * n)) < 1e-6

    def test_double_pole_reported_and_excluded(self, zero_result):
        kinds = [note["kind"] for note in zero_result.notes]
        assert "higher_order_pole_excluded" in kinds
        assert all(e.signed_index != 0 for e in zero_result.sd.entries)

    def test_group_sum_asymptotics(self, zero_result):
        # pi n sum alpha -> (I-h1)^{-1} W Iq W (I+h1)^{-1} = 1 here
        fr = zero_result.frame
        for n in (4, 8):
            s = group_weight_sum(zero_result.sd, n, fr.groups[0])
            assert abs(math.pi * n * s[0, 0] - 1.0) < 1.0 / n

    def test_m2_weight_ranks(self, m2_result):
        res, _ = m2_result
        for e in res.sd.entries:
            sv = np.linalg.svd(e.alpha, compute_uv=False)
            rank = int(np.sum(sv > 1e-8 * sv[0]))
            assert rank == e.mult == 1

    def test_scaled_asymptotic_defects_bounded(self, m2_result):
        res, _ = m2_result
        fr = res.frame
        eye = np.eye(2)
        for g in fr.groups:
            pred = fr.W.conj().T @ fr.iq(g) @ fr.W
            defs = []
            for n in range(5, 11):
                s = group_weight_sum(res.sd, n, g)
                defs.append(np.max(np.abs(math.pi * n * s - pred)) * n)
            assert max(defs) < 1.0
        for e in res.sd.entries:
            n = e.signed_index
            if abs(n) >= 5:
                w = fr.omegas[e.q - 1]
                assert abs(e.rho - n - w) * abs(n) < 1.0

    def test_residue_stability_guard(self, shift_result):
        spec = PencilSpec.build(1, Q1=0.25j)
        sd2, _ = weight_matrices(spec, shift_result.located,
                                 shift_result.frame, 10, quad_nodes=32)
        for a, b in zip(shift_result.sd.entries, sd2.entries):
            assert np.max(np.abs(a.alpha - b.alpha)) < 1e-8


class TestWeylFromSD:
    def test_matches_direct_evaluation(self, shift_result):
        spec = PencilSpec.build(1, Q1=0.25j)
        for rho in (0.37, 2.8 + 0.3j):
            approx = weyl_from_sd(shift_result.sd, rho)
            direct = weyl_matrix(spec, rho).M
            assert np.max(np.abs(approx - direct)) < 1e-3

    def test_truncation_error_decreases(self):
        spec = PencilSpec.build(1, Q1=0.25j)
        direct = weyl_matrix(spec, 0.37).M
        errs = []
        for nmax in (5, 10, 20):
            res = forward_spectral_data(spec, n_max=nmax)
            errs.append(np.max(np.abs(weyl_from_sd(res.sd, 0.37) - direct)))
        assert errs[2] < errs[1] < errs[0]
        assert errs[2] < 1e-4

    def test_dominant_term_near_pole(self, shift_result):
        e = shift_result.sd.entries[-1]
        rho = e.rho + 1e-4
        approx = weyl_from_sd(shift_result.sd, rho)
        assert abs(approx[0, 0] - e.alpha[0, 0] / 1e-4) < \
            0.01 * abs(e.alpha[0, 0] / 1e-4)

    def test_pole_evaluation_rejected(self, shift_result):
        with pytest.raises(Exception, match="pole"):
            weyl_from_sd(shift_result.sd, shift_result.sd.entries[0].rho)


class TestNormingIntegral:
    def test_zero_pencil_exact(self):
        spec = PencilSpec.build(1)
        assert verify_norming_integral(spec, 3.0, 3) < 1e-8

    def test_bounded_over_n(self, shift_result):
        spec = PencilSpec.build(1, Q1=0.25j)
        defs = [verify_norming_integral(spec, e.rho, e.signed_index)
                for e in shift_result.sd.entries if e.signed_index >= 2]
        assert max(defs) < 1.0

    def test_h1_changes_the_limit(self):
        spec = PencilSpec.build(1, h1=0.5j)
        # defect is measured against (pi/2)(1 + |h1|^2) = (pi/2) * 1.25;
        # against the naive (pi/2) it would be off by ~ (pi/2) * 0.25 * n
        res = forward_spectral_data(spec, n_max=6)
        e = [x for x in res.sd.entries if x.signed_index == 6][0]
        assert verify_norming_integral(spec, e.rho, 6) < 1.0
