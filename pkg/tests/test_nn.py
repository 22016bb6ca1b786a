import numpy as np
import pytest

from quadgate import nn
from quadgate import tensor as T
from quadgate.errors import ConfigurationError, StateError
from quadgate.gradcheck import check_parameters, randomize_parameters
from quadgate.tensor import Tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def test_linear_shapes_and_registration():
    lin = nn.Linear(5, 3, rng())
    assert lin.weight.shape == (3, 5) and lin.bias.shape == (3,)
    assert [n for n, _ in lin.named_parameters()] == ["weight", "bias"]


def test_init_convention():
    lin = nn.Linear(400, 300, rng(1))
    assert abs(lin.weight.data.std() - 0.02) < 1e-3
    assert not lin.bias.data.any()
    ln = nn.LayerNorm(7)
    assert np.all(ln.weight.data == 1) and not ln.bias.data.any()


def test_sra_r1_is_mha_bit_identical():
    attn = nn.Attention(16, 4, rng(2), sr_ratio=1)
    x = Tensor(rng(3).normal(size=(2, 9, 16)))
    ours = attn(x, (3, 3)).data
    ref = nn.multi_head_attention(x, attn.q, attn.k, attn.v, attn.out, 4).data
    assert np.array_equal(ours, ref)


def test_sra_reduces_keys_at_full_scale_stage_one():
    attn = nn.Attention(8, 1, rng(4), sr_ratio=8)
    x = Tensor(rng(5).normal(size=(1, 56 * 56, 8)))
    out = attn(x, (56, 56))
    assert out.shape == (1, 3136, 8)
    assert attn.last_attention.shape == (1, 1, 3136, 49)


def test_attention_rows_are_distributions():
    attn = nn.Attention(12, 3, rng(6), sr_ratio=2)
    randomize_parameters(attn.named_parameters(), std=0.5, seed=1)
    attn(Tensor(rng(7).normal(size=(3, 16, 12))), (4, 4))
    p = attn.last_attention
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_sra_indivisible_grid():
    attn = nn.Attention(8, 2, rng(), sr_ratio=4)
    with pytest.raises(ConfigurationError):
        attn(Tensor(np.zeros((1, 36, 8))), (6, 6))


def test_heads_must_divide_dim():
    with pytest.raises(ConfigurationError):
        nn.Attention(10, 3, rng())


def test_sra_matches_torch_reference():
    torch = pytest.importorskip("torch")
    F = torch.nn.functional
    attn = nn.Attention(8, 2, rng(8), sr_ratio=2)
    randomize_parameters(attn.named_parameters(), std=0.3, seed=2)
    x = rng(9).normal(size=(2, 16, 8))
    ours = attn(Tensor(x), (4, 4)).data

    p = {n: torch.tensor(v.data) for n, v in attn.named_parameters()}
    tx = torch.tensor(x)
    q = F.linear(tx, p["q.weight"], p["q.bias"])
    kv = tx.transpose(1, 2).reshape(2, 8, 4, 4)
    kv = F.conv2d(kv, p["sr.weight"], p["sr.bias"], stride=2).reshape(2, 8, 4).transpose(1, 2)
    kv = F.layer_norm(kv, (8,), p["sr_norm.weight"], p["sr_norm.bias"], eps=1e-5)
    k = F.linear(kv, p["k.weight"])
    v = F.linear(kv, p["v.weight"], p["v.bias"])

    def heads(t):
        return t.reshape(2, -1, 2, 4).transpose(1, 2)

    ctx = F.scaled_dot_product_attention(heads(q), heads(k), heads(v))
    ref = F.linear(ctx.transpose(1, 2).reshape(2, 16, 8), p["out.weight"], p["out.bias"])
    np.testing.assert_allclose(ours, ref.numpy(), atol=1e-12)


def test_block_with_zeroed_outputs_is_identity():
    blk = nn.TransformerBlock(8, 2, rng(10), sr_ratio=2)
    blk.attn.out.weight.data[:] = 0
    blk.fc2.weight.data[:] = 0
    x = rng(11).normal(size=(1, 16, 8))
    assert np.array_equal(blk(Tensor(x), (4, 4)).data, x)


@pytest.mark.parametrize("dim,heads,r,hw", [(8, 1, 1, (3, 3)), (8, 2, 2, (4, 4)), (12, 3, 4, (8, 4))])
def test_block_preserves_shape(dim, heads, r, hw):
    blk = nn.TransformerBlock(dim, heads, rng(), sr_ratio=r)
    x = Tensor(np.ones((2, hw[0] * hw[1], dim)))
    assert blk(x, hw).shape == x.shape


def test_block_gradient_check():
    blk = nn.TransformerBlock(8, 2, rng(12), sr_ratio=2, mlp_ratio=2)
    randomize_parameters(blk.named_parameters(), seed=3)
    x = rng(13).uniform(-1, 1, (1, 16, 8))
    w = rng(14).uniform(-1, 1, (1, 16, 8))
    report = check_parameters(lambda: T.tsum(blk(Tensor(x), (4, 4)) * w), list(blk.named_parameters()))
    assert max(report.values()) < 1e-4, report


def test_patch_embed_token_count():
    pe = nn.PatchEmbed(3, 6, 4, rng())
    tokens, hw = pe(Tensor(np.zeros((2, 3, 16, 24))))
    assert hw == (4, 6) and tokens.shape == (2, 24, 6)


def test_patch_embed_indivisible():
    with pytest.raises(ConfigurationError):
        nn.PatchEmbed(1, 4, 4, rng())(Tensor(np.zeros((1, 1, 10, 8))))


def test_cls_map_uniform_single_head():
    probs = np.full((1, 5, 5), 0.2)
    np.testing.assert_allclose(nn.cls_attention_map(probs), [0.25] * 4, atol=1e-15)


def test_cls_map_head_average():
    probs = np.zeros((2, 3, 3))
    probs[0, 0] = [0.0, 1.0, 0.0]
    probs[1, 0] = [0.0, 0.0, 1.0]
    np.testing.assert_allclose(nn.cls_attention_map(probs), [0.5, 0.5])


def test_cls_map_from_block_is_distribution():
    blk = nn.TransformerBlock(8, 2, rng(15))
    blk(Tensor(rng(16).normal(size=(3, 10, 8))))
    att = nn.cls_attention_map(blk)
    assert att.shape == (3, 9)
    assert np.all(att >= 0)
    np.testing.assert_allclose(att.sum(-1), 1.0, atol=1e-12)


def test_cls_map_without_forward():
    with pytest.raises(StateError):
        nn.cls_attention_map(nn.TransformerBlock(8, 2, rng()))


def test_parameters_enumerated_once():
    class Shared(nn.Module):
        def __init__(self):
            self.a = nn.Linear(2, 2, rng())
            self.b = self.a
            self.blocks = [nn.TransformerBlock(4, 1, rng(), 2)]

    m = Shared()
    names = [n for n, _ in m.named_parameters()]
    assert len(names) == len(set(names))
    assert len({id(p) for p in m.parameters()}) == len(names)
    assert not any(n.startswith("b.") for n in names)
    assert "blocks.0.attn.sr.weight" in names
