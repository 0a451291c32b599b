import numpy as np
import pytest
import torch

from cocodiff.dataset import GraphTopology, ntu_topology
from cocodiff.encoder import EncoderConfig, SkeletonEncoder, normalize_adjacency
from cocodiff.errors import ConfigError, ProjectionError, ShapeError

from conftest import assert_grad_matches


def test_adjacency_two_joints():
    # A + I = [[1,1],[1,1]], degrees 2 -> every entry 1/sqrt(2)/sqrt(2)
    A = normalize_adjacency(GraphTopology(2, ((0, 1),)))
    assert np.allclose(A, [[0.5, 0.5], [0.5, 0.5]])


def test_adjacency_single_joint():
    assert np.array_equal(normalize_adjacency(GraphTopology(1, ())), [[1.0]])


def test_adjacency_symmetric_ntu():
    A = normalize_adjacency(ntu_topology())
    assert np.allclose(A, A.T)
    assert np.isfinite(A).all()
    # largest eigenvalue of the normalized A + I is 1
    assert np.isclose(np.linalg.eigvalsh(A).max(), 1.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(widths=(8, 16), strides=(1, 2), feature_dim=8).validate()
    with pytest.raises(ConfigError):
        EncoderConfig(temporal_kernel=4).validate()


def _encoder(dtype=torch.float64, seed=0, **kw):
    cfg = EncoderConfig(widths=(4, 6), strides=(1, 2), temporal_kernel=3, feature_dim=6,
                        num_classes=3, init_seed=seed, **kw)
    return SkeletonEncoder(cfg, GraphTopology(5, ((0, 1), (1, 2), (2, 3), (1, 4))), 8, dtype=dtype)


def test_default_shape_ntu():
    enc = SkeletonEncoder(EncoderConfig(num_classes=6), ntu_topology(), 64).eval()
    x = torch.randn(2, 3, 64, 25, 2)
    with torch.no_grad():
        assert enc.encode(x).shape == (2, 128)


def test_zero_input_zero_feature():
    enc = _encoder().eval()
    with torch.no_grad():
        f = enc.encode(torch.zeros(3, 3, 8, 5, 2, dtype=torch.float64))
    assert torch.count_nonzero(f) == 0


def test_batch_permutation_equivariance():
    enc = _encoder().eval()
    x = torch.randn(4, 3, 8, 5, 2, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    with torch.no_grad():
        assert torch.allclose(enc.encode(x)[perm], enc.encode(x[perm]))
        # independence: a sample's feature does not depend on its batch mates
        assert torch.allclose(enc.encode(x)[1:2], enc.encode(x[1:2]))


def test_shape_errors_name_axis():
    enc = _encoder()
    with pytest.raises(ShapeError, match="joints"):
        enc.encode(torch.zeros(1, 3, 8, 6, 2, dtype=torch.float64))
    with pytest.raises(ShapeError, match="channels"):
        enc.encode(torch.zeros(1, 2, 8, 5, 2, dtype=torch.float64))
    with pytest.raises(ShapeError):
        enc.classify(torch.zeros(2, 5, dtype=torch.float64))


def test_classify_affine():
    enc = _encoder()
    with torch.no_grad():
        enc.classifier.weight.zero_()
        enc.classifier.bias.copy_(torch.tensor([1.0, -2.0, 0.5]))
    out = enc.classify(torch.zeros(4, 6, dtype=torch.float64))
    assert out.shape == (4, 3)
    assert torch.equal(out, torch.tensor([[1.0, -2.0, 0.5]] * 4, dtype=torch.float64))
    enc2 = _encoder(seed=3)
    f = torch.randn(2, 6, dtype=torch.float64)
    b = enc2.classifier.bias
    assert torch.allclose(enc2.classify(2 * f) - b, 2 * (enc2.classify(f) - b))


def test_project_unit_rows_and_scale_invariance():
    enc = _encoder()
    with torch.no_grad():
        enc.projection.bias.zero_()
    f = torch.randn(5, 6, dtype=torch.float64)
    s = enc.project(f)
    assert s.shape == (5, 8)
    assert torch.allclose(s.norm(dim=1), torch.ones(5, dtype=torch.float64), atol=1e-6)
    assert torch.allclose(enc.project(3.5 * f), s)


def test_project_zero_row_raises():
    enc = _encoder()
    with torch.no_grad():
        enc.projection.bias.zero_()
    with pytest.raises(ProjectionError):
        enc.project(torch.zeros(1, 6, dtype=torch.float64))


def test_init_reproducible():
    a, b, c = _encoder(seed=5), _encoder(seed=5), _encoder(seed=6)
    for (n, p), (_, q), (_, r) in zip(a.state_dict().items(), b.state_dict().items(), c.state_dict().items()):
        assert torch.equal(p, q), n
    assert any(not torch.equal(p, r) for p, r in zip(a.parameters(), c.parameters()))


def test_classify_encode_gradient_matches_finite_differences():
    torch.manual_seed(0)
    enc = _encoder(seed=1).train()
    x = torch.randn(2, 3, 8, 5, 2, dtype=torch.float64)
    labels = torch.tensor([0, 2])

    def loss():
        logits = enc.classify(enc.encode(x))
        return torch.nn.functional.cross_entropy(logits, labels)

    # biases feeding batch norm get an exactly zero gradient, so probe weights only
    weights = [p for p in enc.backbone_parameters() if p.dim() > 1]
    assert_grad_matches(loss, weights, n_probe=3)
