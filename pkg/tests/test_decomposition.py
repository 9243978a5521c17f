import numpy as np
import pytest
import torch

from spfusion.datamodel import FeatureMatrix, Modality, Role, ValidationError
from spfusion.decomposition import DecompParams, Reconstruction, decompose, decorrelation_loss, gram_loss

from conftest import fd_rel_error


def _params(seed=0):
    torch.manual_seed(seed)
    return DecompParams(8, 5).double()


def _raw(x, m=Modality.M3D):
    return FeatureMatrix(torch.as_tensor(x), m, Role.RAW)


def test_decompose_roles_and_zero_rows():
    p = _params()
    s, r = decompose(_raw(torch.zeros(3, 8, dtype=torch.float64)), p)
    assert s.role is Role.SHARED and r.role is Role.PRIVATE and s.modality is Modality.M3D
    expect = p.shared_proj_3d.norm(p.shared_proj_3d.linear.bias)
    torch.testing.assert_close(s.values, expect.expand(3, 5), rtol=0, atol=0)
    s2, _ = decompose(_raw(torch.zeros(3, 8, dtype=torch.float64)), p)
    assert torch.equal(s.values, s2.values)


def test_decompose_uses_modality_pair(rng):
    p = _params()
    x = torch.as_tensor(rng.normal(size=(4, 8)))
    s2, _ = decompose(_raw(x, Modality.M2D), p)
    s3, _ = decompose(_raw(x, Modality.M3D), p)
    assert not torch.allclose(s2.values, s3.values)
    torch.testing.assert_close(s2.values, p.shared_proj_2d(x))


def test_decompose_row_permutation(rng):
    p = _params()
    x = torch.as_tensor(rng.normal(size=(7, 8)))
    perm = torch.as_tensor(rng.permutation(7))
    s, r = decompose(_raw(x), p)
    sp, rp = decompose(_raw(x[perm]), p)
    torch.testing.assert_close(sp.values, s.values[perm], rtol=0, atol=1e-12)
    torch.testing.assert_close(rp.values, r.values[perm], rtol=0, atol=1e-12)


def test_decompose_errors():
    p = _params()
    with pytest.raises(ValidationError, match="width"):
        decompose(_raw(torch.zeros(2, 7, dtype=torch.float64)), p)
    with pytest.raises(ValidationError, match="RAW"):
        decompose(FeatureMatrix(torch.zeros(2, 8), Modality.M3D, Role.SHARED), p)


# --- gram ---------------------------------------------------------------------

def test_gram_identical_zero(rng):
    s = rng.normal(size=(6, 4))
    assert float(gram_loss(s, s)) == 0.0


def test_gram_worked_example():
    assert float(gram_loss(np.array([[1.0, 0], [0, 0]]), np.array([[0.0, 0], [0, 1]]))) == pytest.approx(0.5, abs=1e-15)


def test_gram_rotation_invariance_and_symmetry(rng):
    for _ in range(10):
        a, b = rng.normal(size=(6, 3)), rng.normal(size=(9, 3))
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        assert float(gram_loss(q @ a, b)) == pytest.approx(float(gram_loss(a, b)), rel=1e-10)
        assert float(gram_loss(a, b)) == pytest.approx(float(gram_loss(b, a)), rel=1e-12)
        assert float(gram_loss(a, b)) >= 0


def test_gram_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        gram_loss(np.zeros((3, 2)), np.zeros((3, 4)))


# --- decorrelation ----------------------------------------------------------------

def test_decorrelation_orthogonal_supports(rng):
    a, b = rng.normal(size=5), rng.normal(size=5)
    r2 = np.zeros((5, 3))
    r3 = np.zeros((5, 3))
    r2[:, 0] = a
    r3[:, 1] = b - (b @ a) / (a @ a) * a
    assert float(decorrelation_loss(r2, r3)) == pytest.approx(0.0, abs=1e-24)
    r3[:, 1] = b
    assert float(decorrelation_loss(r2, r3)) > 0


def test_decorrelation_worked_and_homogeneous(rng):
    assert float(decorrelation_loss(np.eye(2), np.eye(2))) == pytest.approx(0.5, abs=1e-15)
    a, b = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    for s in (0.5, -2.0, 3.0):
        assert float(decorrelation_loss(s * a, b)) == pytest.approx(s * s * float(decorrelation_loss(a, b)), rel=1e-12)


def test_decorrelation_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        decorrelation_loss(np.zeros((3, 2)), np.zeros((4, 2)))


def test_regularizer_gradients(rng):
    dims = [2, 3, 5, 8]
    for i in range(10):
        n, c = dims[i % 4], dims[(i // 2) % 4]
        a, b, m = (torch.as_tensor(rng.normal(size=(k, c))) for k in (n, n, dims[(i + 1) % 4]))
        assert fd_rel_error(gram_loss, a, m) <= 1e-4
        assert fd_rel_error(decorrelation_loss, a, b) <= 1e-4


def test_reconstruction_term_zero_when_exact():
    rec = Reconstruction(3, 4).double()
    with torch.no_grad():
        rec.lift.weight.copy_(torch.eye(4, 3, dtype=torch.float64))
        rec.lift.bias.zero_()
    s = torch.tensor([[1.0, 2.0, 0.0]], dtype=torch.float64)
    r = torch.tensor([[0.0, 1.0, 1.0]], dtype=torch.float64)
    assert float(rec(s, r, torch.tensor([[1.0, 3.0, 1.0, 0.0]], dtype=torch.float64)).detach()) == 0.0
