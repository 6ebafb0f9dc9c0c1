import json
import math

import numpy as np
import pytest

from slpencil.cli import main
from slpencil.core import PencilSpec, load_pencil, save_pencil, save_sd
from slpencil.forward import forward_spectral_data


@pytest.fixture(scope="module")
def zero_pencil_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "zero.json"
    save_pencil(str(path), PencilSpec.build(1))
    return str(path)


@pytest.fixture(scope="module")
def zero_sd_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "sd.json"
    sd = forward_spectral_data(PencilSpec.build(1), n_max=6).sd
    save_sd(str(path), sd)
    return str(path)


class TestForward:
    def test_writes_artifacts_and_residue_oracle(self, zero_pencil_file,
                                                 tmp_path):
        out = tmp_path / "fw"
        rc = main(["forward", "--input", zero_pencil_file,
                   "--out-dir", str(out), "--nmax", "6"])
        assert rc == 0
        assert (out / "sd.json").exists()
        assert (out / "frame.txt").exists()
        lines = (out / "eigenvalues.csv").read_text().splitlines()
        assert lines[0].startswith("n,q,")
        for row in lines[1:]:
            cells = row.split(",")
            n = int(cells[0])
            assert abs(float(cells[2]) - n) < 1e-6
            assert abs(float(cells[5]) - 1.0 / (math.pi * abs(n))) < 1e-6

    def test_deterministic_output(self, zero_pencil_file, tmp_path):
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            assert main(["forward", "--input", zero_pencil_file,
                         "--out-dir", str(out), "--nmax", "5"]) == 0
            outs.append((out / "eigenvalues.csv").read_bytes())
        assert outs[0] == outs[1]

    def test_nonselfadjoint_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        spec = PencilSpec.build(1, h0=0.3j)   # h0 must be Hermitian
        save_pencil(str(path), spec)
        rc = main(["forward", "--input", str(path),
                   "--out-dir", str(tmp_path / "o"), "--nmax", "4"])
        assert rc == 2
        rc = main(["forward", "--input", str(path), "--nmax", "4",
                   "--out-dir", str(tmp_path / "o2"),
                   "--no-require-selfadjoint"])
        assert rc != 2


class TestCheck:
    def test_valid_pencil_passes(self, zero_pencil_file):
        assert main(["check", "--input", zero_pencil_file]) == 0

    def test_valid_sd_passes(self, zero_sd_file):
        assert main(["check", "--input", zero_sd_file]) == 0

    def test_nonreal_pole_is_regime_violation(self, zero_sd_file, tmp_path):
        doc = json.load(open(zero_sd_file))
        doc["entries"][0]["rho"][1] = 0.3
        path = tmp_path / "complex_pole.json"
        path.write_text(json.dumps(doc))
        assert main(["check", "--input", str(path)]) == 3

    def test_garbage_file_is_validation_failure(self, tmp_path):
        path = tmp_path / "garbage.json"
        path.write_text("{not json")
        assert main(["check", "--input", str(path)]) == 2

    def test_unknown_kind_is_validation_failure(self, tmp_path):
        path = tmp_path / "unknown.json"
        path.write_text(json.dumps({"kind": "something_else"}))
        assert main(["check", "--input", str(path)]) == 2


class TestModel:
    def test_constant_model_from_sd(self, zero_sd_file, tmp_path):
        out = tmp_path / "model"
        assert main(["model", "--input", zero_sd_file,
                     "--out-dir", str(out)]) == 0
        model = load_pencil(str(out / "model_pencil.json"))
        assert np.max(np.abs(model.Q1.values)) < 1e-6


class TestInverse:
    def test_zero_sd_recovers_zero(self, zero_sd_file, tmp_path):
        out = tmp_path / "inv"
        rc = main(["inverse", "--input", zero_sd_file, "--nmax", "6",
                   "--grid", "65", "--out-dir", str(out)])
        assert rc == 0
        rec = load_pencil(str(out / "recovered_pencil.json"))
        assert np.max(np.abs(rec.Q1.values)) < 1e-6
        assert np.max(np.abs(rec.Q0.values)) < 1e-6
        diag = (out / "diagnostics.csv").read_text().splitlines()
        assert diag[0] == "x,cond,residual,step"
        assert len(diag) > 65          # sweep plus refinement rows


class TestRoundtrip:
    def test_zero_pencil(self, zero_pencil_file, tmp_path):
        rc = main(["roundtrip", "--input", zero_pencil_file, "--nmax", "6",
                   "--grid", "65", "--out-dir", str(tmp_path / "rt")])
        assert rc == 0
