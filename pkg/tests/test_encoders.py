import numpy as np
import pytest
import torch

from tvnet.core import Config
from tvnet.encoders import Backbone, LanguageEncoder, image_to_tensor, pad_tokens


@pytest.fixture
def backbone():
    torch.manual_seed(0)
    return Backbone.from_config(Config())


def test_pyramid_shapes(backbone):
    cfg = Config()
    pyr = backbone(torch.rand(1, 3, 64, 64))
    pyr.check(cfg)
    assert pyr[2].shape[-2:] == (16, 16)
    assert all(pyr[l].shape[-2:] == (8, 8) for l in (3, 4, 5))


def test_different_images_different_features(backbone):
    a = backbone(torch.rand(1, 3, 64, 64))
    b = backbone(torch.rand(1, 3, 64, 64))
    assert not torch.allclose(a[5], b[5])


def test_siamese_swap(backbone):
    a, b = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
    pa, pb = backbone.siamese(a, b)
    qb, qa = backbone.siamese(b, a)
    for l in range(1, 6):
        assert torch.equal(pa[l], qa[l]) and torch.equal(pb[l], qb[l])


def test_siamese_gradients_accumulate(backbone):
    """One weight set: its gradient is the sum of the two branch gradients."""
    a, b = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
    w = backbone.stages[0][0].weight

    def grad_of(fn):
        backbone.zero_grad()
        fn().backward()
        return w.grad.clone()

    g_a = grad_of(lambda: backbone(a)[3].sum())
    g_b = grad_of(lambda: 2 * backbone(b)[3].sum())
    g_both = grad_of(lambda: sum(p[3].sum() * c for p, c in zip(backbone.siamese(a, b), (1, 2))))
    torch.testing.assert_close(g_both, g_a + g_b, rtol=1e-4, atol=1e-6)


@pytest.fixture
def lang():
    torch.manual_seed(0)
    return LanguageEncoder(18, 8, 12, 10)


def test_single_token_is_one_step(lang):
    out = lang(torch.tensor([[5]]))
    h, _ = lang.cell(lang.embed(torch.tensor([5])), None)
    torch.testing.assert_close(out, lang.proj(h))


def test_padding_does_not_change_output(lang):
    a = lang(torch.tensor([[2, 5, 9]]))
    b = lang(torch.tensor([[2, 5, 9, 0, 0, 0]]))
    assert torch.equal(a, b)


def test_batch_with_different_lengths(lang):
    batch = lang(pad_tokens([[2, 5, 9], [3, 4]]))
    torch.testing.assert_close(batch[1], lang(torch.tensor([[3, 4]]))[0])


def test_order_sensitive(lang):
    assert not torch.allclose(lang(torch.tensor([[2, 5, 9]])), lang(torch.tensor([[9, 5, 2]])))


def test_all_padding_rejected(lang):
    with pytest.raises(ValueError, match="non-padding"):
        lang(torch.tensor([[0, 0]]))


def test_pad_tokens_limits():
    t = pad_tokens([[1, 2], [3]], max_len=4)
    assert t.tolist() == [[1, 2, 0, 0], [3, 0, 0, 0]]
    with pytest.raises(ValueError, match="max_tokens"):
        pad_tokens([[1, 2, 3]], max_len=2)


def test_image_to_tensor_layout():
    img = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
    t = image_to_tensor(img)
    assert t.shape == (1, 3, 5, 7)
    assert t[0, 2, 4, 6].item() == img[4, 6, 2]
    with pytest.raises(ValueError):
        image_to_tensor(np.zeros((5, 5)))
