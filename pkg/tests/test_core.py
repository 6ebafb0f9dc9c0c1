import math

import numpy as np
import pytest

from slpencil.core import (
    FormatError,
    GridFunction,
    PencilSpec,
    RegimeError,
    SDEntry,
    SpectralData,
    boundary_form_U,
    boundary_form_V,
    load_pencil,
    load_sd,
    save_pencil,
    save_sd,
    validate,
)


def zero_pencil(m=1, num_nodes=33):
    return PencilSpec.build(m, num_nodes=num_nodes)


class TestGridFunction:
    def test_constant_exact(self):
        gf = GridFunction.constant(np.array([[1.0 + 2.0j]]), num_nodes=9)
        xs = np.linspace(0, math.pi, 37)
        assert np.allclose(gf(xs), 1.0 + 2.0j)
        assert np.allclose(gf.deriv(xs), 0.0)

    def test_polynomial_reproduced_exactly(self):
        # order-4 interpolation is exact on quartics
        f = lambda x: np.array([[x ** 4 - 2 * x ** 2 + 0.5j * x]])
        gf = GridFunction.from_callable(f, 1, num_nodes=17)
        xs = np.linspace(0, math.pi, 101)
        expected = np.array([f(x) for x in xs])
        assert np.allclose(gf(xs), expected, atol=1e-12)
        dexp = np.array([[[4 * x ** 3 - 4 * x + 0.5j]] for x in xs])
        assert np.allclose(gf.deriv(xs), dexp, atol=1e-10)

    def test_smooth_function_convergence(self):
        f = lambda x: np.array([[np.cos(3 * x)]])
        errs = []
        for nodes in (33, 65):
            gf = GridFunction.from_callable(f, 1, num_nodes=nodes)
            xs = np.linspace(0, math.pi, 313)
            errs.append(np.max(np.abs(gf(xs)[:, 0, 0] - np.cos(3 * xs))))
        # fifth-order local error: halving h gains ~2^5
        assert errs[1] < errs[0] / 16

    def test_too_few_nodes_rejected(self):
        with pytest.raises(FormatError):
            GridFunction(np.zeros((3, 1, 1)))


class TestValidate:
    def test_zero_pencil_passes(self):
        report = validate(zero_pencil(), require_selfadjoint=True)
        assert report.passed

    def test_condition_I_violation(self):
        spec = PencilSpec.build(1, h1=1.0)
        report = validate(spec, require_selfadjoint=False)
        assert not report.passed
        assert any("I - h1" in v["condition"] for v in report.violations)

    def test_skew_hermitian_q1_passes(self):
        spec = PencilSpec.build(1, Q1=0.25j)
        assert validate(spec).passed

    def test_hermitian_q1_fails_selfadjoint(self):
        spec = PencilSpec.build(1, Q1=0.25)
        report = validate(spec)
        assert any("Q1" in v["condition"] for v in report.violations)
        # and validation is a report, not an exception
        assert validate(spec, require_selfadjoint=False).passed

    def test_idempotent(self):
        spec = PencilSpec.build(2, Q1=np.array([[0.1j, 0.2], [-0.2, -0.1j]]))
        r1 = validate(spec)
        r2 = validate(spec)
        assert [v["condition"] for v in r1.violations] == \
               [v["condition"] for v in r2.violations]


class TestBoundaryForms:
    def test_phi_satisfies_U_zero_pencil(self):
        spec = zero_pencil()
        rho = 2.0
        # phi = cos(rho x) I: phi(0) = 1, phi'(0) = 0
        U = boundary_form_U(spec, np.eye(1), np.zeros((1, 1)), rho)
        assert np.allclose(U, 0.0)

    def test_S_gives_identity(self):
        spec = zero_pencil()
        U = boundary_form_U(spec, np.zeros((1, 1)), np.eye(1), 2.0)
        assert np.allclose(U, np.eye(1))

    def test_scalar_arithmetic(self):
        spec = PencilSpec.build(1, h0=2.0)
        U = boundary_form_U(spec, np.array([[1.0]]), np.array([[3.0]]), 1.7j)
        assert np.allclose(U, 5.0)

    def test_V_uses_right_matrices(self):
        spec = PencilSpec.build(1, H1=0.5j, H0=1.0)
        rho = 2.0
        V = boundary_form_V(spec, np.array([[1.0]]), np.array([[0.0]]), rho)
        assert np.allclose(V, 1j * rho * 0.5j + 1.0)


class TestSerialization:
    def test_pencil_roundtrip_bit_exact(self, tmp_path):
        spec = PencilSpec.build(
            2,
            Q1=np.array([[0.25j, 0.125], [-0.125, 0.1j]]),
            Q0=lambda x: np.cos(x) * np.eye(2),
            h1=np.array([[0, 0.2], [-0.2, 0]]),
            num_nodes=17)
        path = tmp_path / "pencil.json"
        save_pencil(path, spec)
        back = load_pencil(path)
        assert back.dim == spec.dim
        assert np.array_equal(back.Q1.values, spec.Q1.values)
        assert np.array_equal(back.Q0.values, spec.Q0.values)
        assert np.array_equal(back.h1, spec.h1)

    def test_small_grid_rejected(self, tmp_path):
        spec = zero_pencil(num_nodes=9)
        path = tmp_path / "pencil.json"
        save_pencil(path, spec)
        import json
        doc = json.loads(path.read_text())
        doc["grid_nodes"] = 3
        doc["Q1"] = doc["Q1"][:3]
        doc["Q0"] = doc["Q0"][:3]
        path.write_text(json.dumps(doc))
        with pytest.raises(FormatError):
            load_pencil(path)

    def test_sd_roundtrip(self, tmp_path):
        entries = [SDEntry(n=1, sign=1, q=1, rho=1.0 + 0j,
                           alpha=np.array([[1 / math.pi]]))]
        sd = SpectralData(dim=1, nmax=1, entries=entries)
        path = tmp_path / "sd.json"
        save_sd(path, sd)
        back = load_sd(path)
        assert back.entries[0].rho == sd.entries[0].rho
        assert np.array_equal(back.entries[0].alpha, sd.entries[0].alpha)

    def test_complex_pole_rejected(self, tmp_path):
        entries = [SDEntry(n=1, sign=1, q=1, rho=1.0 + 1e-3j,
                           alpha=np.array([[0.3]]))]
        with pytest.raises(RegimeError, match="N=0 regime violated"):
            SpectralData(dim=1, nmax=1, entries=entries)

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(FormatError):
            load_pencil(path)


class TestSDChecks:
    def test_rank_defect_detected(self):
        alpha = np.array([[1.0, 0], [0, 1.0]])   # rank 2
        sd = SpectralData(dim=2, nmax=1, entries=[
            SDEntry(n=1, sign=1, q=1, rho=1.0, alpha=alpha, mult=1)])
        assert len(sd.rank_defects()) == 1

    def test_rank_matches_mult(self):
        alpha = np.array([[1.0, 0], [0, 0.0]])
        sd = SpectralData(dim=2, nmax=1, entries=[
            SDEntry(n=1, sign=1, q=1, rho=1.0, alpha=alpha, mult=1)])
        assert sd.rank_defects() == []
