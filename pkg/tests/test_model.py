import numpy as np
import pytest
import torch
from torch import nn

from splitmi import SplitModel, build_default_architecture, load_checkpoint, save_checkpoint
from splitmi.errors import ConfigurationError, InputContractError
from splitmi.model import read_checkpoint


def conv2d_oracle(x, w, b, padding):
    """Plain loops: x (C, H, W), w (O, C, k, k)."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((o, h + 2 * padding - k + 1, wd + 2 * padding - k + 1))
    for oc in range(o):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                out[oc, i, j] = (xp[:, i : i + k, j : j + k] * w[oc]).sum() + (b[oc] if b is not None else 0.0)
    return out


def _toy(head, encoder, classifier, shape=(1, 4, 4), classes=3):
    return SplitModel(head, encoder, classifier, shape, classes)


def test_zero_head_gives_zero_representation():
    head = nn.Conv2d(1, 2, 3, padding=1)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    m = _toy(head, nn.Flatten(), nn.Linear(32, 3))
    assert torch.count_nonzero(m.forward_head(torch.randn(5, 1, 4, 4))) == 0


def test_identity_head():
    head = nn.Conv2d(1, 1, 1, bias=False)
    with torch.no_grad():
        head.weight.fill_(1.0)
    m = _toy(head, nn.Flatten(), nn.Linear(16, 3))
    x = torch.randn(3, 1, 4, 4)
    assert torch.equal(m.forward_head(x), x)


def test_head_matches_loop_convolution():
    torch.manual_seed(0)
    head = nn.Conv2d(1, 2, 3, padding=1).double()
    m = _toy(head, nn.Flatten(), nn.Linear(32, 3).double())
    x = torch.rand(1, 1, 4, 4, dtype=torch.float64)
    ref = conv2d_oracle(x[0].numpy(), head.weight.detach().numpy(), head.bias.detach().numpy(), 1)
    np.testing.assert_allclose(m.forward_head(x)[0].detach().numpy(), ref, atol=1e-12)


def test_encoder_linear_matches_matmul():
    W = np.arange(12, dtype=np.float64).reshape(3, 4) / 7
    enc = nn.Linear(4, 3, bias=False).double()
    with torch.no_grad():
        enc.weight.copy_(torch.from_numpy(W))
    m = SplitModel(nn.Identity(), enc, nn.Linear(3, 2).double(), (4,), 2)
    r = np.random.default_rng(0).normal(size=(6, 4))
    z = m.forward_encoder(torch.from_numpy(r)).detach().numpy()
    assert z.shape[0] == 6
    np.testing.assert_allclose(z, r @ W.T, atol=1e-12)


def test_zero_classifier_uniform():
    cls = nn.Linear(4, 5)
    nn.init.zeros_(cls.weight)
    nn.init.zeros_(cls.bias)
    m = SplitModel(nn.Identity(), nn.Identity(), cls, (4,), 5)
    logits = m.forward_classifier(torch.randn(3, 4))
    assert torch.count_nonzero(logits) == 0
    assert torch.allclose(logits.softmax(1), torch.full((3, 5), 0.2))
    assert int(torch.tensor([[2.0, 0, 0]]).argmax(1)) == 0


def test_classifier_matches_layer_oracle():
    torch.manual_seed(3)
    cls = nn.Sequential(nn.Linear(4, 6), nn.ReLU(), nn.Linear(6, 3)).double()
    m = SplitModel(nn.Identity(), nn.Identity(), cls, (4,), 3)
    z = torch.randn(5, 4, dtype=torch.float64)
    w1, b1, w2, b2 = (p.detach().numpy() for p in cls.parameters())
    ref = np.maximum(z.numpy() @ w1.T + b1, 0) @ w2.T + b2
    np.testing.assert_allclose(m.forward_classifier(z).detach().numpy(), ref, atol=1e-12)


def test_full_forward_is_composition():
    m = build_default_architecture((1, 16, 16), 10, seed=1)
    m.eval()
    gen = torch.Generator().manual_seed(0)
    for _ in range(10):
        x = torch.rand(4, 1, 16, 16, generator=gen)
        chained = m.forward_classifier(m.forward_encoder(m.forward_head(x)))
        assert torch.equal(m.full_forward(x), chained)


def test_all_zero_model_is_uniform():
    m = build_default_architecture((1, 16, 16), 10, seed=0)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
    m.eval()
    probs = m.full_forward(torch.rand(3, 1, 16, 16)).softmax(1)
    assert torch.allclose(probs, torch.full_like(probs, 0.1))


def test_desk_shapes():
    m = build_default_architecture((1, 16, 16), 10)
    assert m.full_forward(torch.rand(7, 1, 16, 16)).shape == (7, 10)
    assert m.repr_shape == (8, 16, 16)


def test_paper_like_head_matches_body_width():
    m = build_default_architecture((3, 32, 32), 10, scale="paper-like", width=8)
    first_conv = next(mod for mod in m.encoder.modules() if isinstance(mod, nn.Conv2d))
    assert m.repr_shape[0] == first_conv.in_channels == 8
    assert m.full_forward(torch.rand(2, 3, 32, 32)).shape == (2, 10)


@pytest.mark.parametrize("shape", [(0, 0, 0), (1, 16), "abc"])
def test_invalid_shape(shape):
    with pytest.raises(ConfigurationError):
        build_default_architecture(shape, 10)


def test_wrong_input_shape_rejected():
    m = build_default_architecture((1, 16, 16), 10)
    with pytest.raises(InputContractError):
        m.forward_head(torch.rand(2, 1, 8, 8))
    with pytest.raises(InputContractError):
        m.forward_encoder(torch.rand(2, 3))


def test_seeded_build_is_reproducible():
    a = build_default_architecture((1, 16, 16), 10, seed=5)
    b = build_default_architecture((1, 16, 16), 10, seed=5)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_checkpoint_round_trip(tmp_path):
    a = build_default_architecture((1, 16, 16), 10, seed=1)
    b = build_default_architecture((1, 16, 16), 10, seed=2)
    path = save_checkpoint(tmp_path / "m.ckpt", {"model": a})
    assert path.read_bytes()[:6] == b"PSCKPT"
    load_checkpoint(path, {"model": b})
    for p, q in zip(a.state_dict().values(), b.state_dict().values()):
        if p.is_floating_point():
            assert torch.equal(p, q)


def test_truncated_checkpoint(tmp_path):
    path = save_checkpoint(tmp_path / "m.ckpt", build_default_architecture((1, 16, 16), 10))
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(InputContractError):
        read_checkpoint(path)
    (tmp_path / "bad").write_bytes(b"NOTACKPT")
    with pytest.raises(InputContractError):
        read_checkpoint(tmp_path / "bad")
