import numpy as np
import pytest

from tgprompt import tensor as T
from tgprompt.backbone import AttnBackbone, MixerBackbone, make_backbone
from tgprompt.tensor import Tensor

N, W, D_H = 5, 9, 4


def _backbones(seed=0):
    rng = np.random.default_rng(seed)
    return [MixerBackbone(N, W, D_H, rng, channel_expansion=2.0), AttnBackbone(W, D_H, rng)]


def _input(rng, batch=None, valid=3):
    shape = (N, W) if batch is None else (batch, N, W)
    x = rng.standard_normal(shape)
    mask = np.zeros(shape[:-1], dtype=bool)
    mask[..., :valid] = True
    x[~mask] = 0.0
    return x, mask


@pytest.mark.parametrize("idx", [0, 1], ids=["mixer", "attn"])
class TestBothBackbones:
    def test_all_padding_gives_output_bias(self, idx):
        bb = _backbones()[idx]
        out = bb(np.zeros((N, W)), np.zeros(N, dtype=bool))
        assert np.array_equal(out.data, bb.out.b.data)

    def test_padding_contents_ignored(self, idx):
        bb = _backbones()[idx]
        x, mask = _input(np.random.default_rng(1))
        base = bb(x, mask).data
        x2 = x.copy()
        x2[3] = x[0]
        x2[4] = 100.0
        assert np.array_equal(bb(x2, mask).data, base)

    def test_batched_matches_single(self, idx):
        bb = _backbones()[idx]
        x, mask = _input(np.random.default_rng(2), batch=3)
        batched = bb(x, mask).data
        for i in range(3):
            assert np.allclose(bb(x[i], mask[i]).data, batched[i], rtol=0, atol=1e-13)

    def test_width_mismatch(self, idx):
        with pytest.raises(T.ShapeError, match="width"):
            _backbones()[idx](np.zeros((N, W + 1)), np.ones(N, dtype=bool))

    def test_input_gradient_matches_finite_differences(self, idx):
        bb = _backbones()[idx]
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(10):
            x, mask = _input(rng, batch=2)
            xt = Tensor(x, requires_grad=True)
            w = rng.standard_normal((2, D_H))
            worst = max(worst, T.gradcheck(lambda: T.tsum(T.mul(bb(xt, mask), w)), [xt]))
        assert worst < 1e-4

    def test_parameter_gradients(self, idx):
        bb = _backbones()[idx]
        x, mask = _input(np.random.default_rng(4), batch=2)
        assert T.gradcheck(lambda: T.tsum(bb(x, mask)), bb.parameters()) < 1e-4

    def test_frozen_blocks_gradients_and_mutation(self, idx):
        bb = _backbones()[idx]
        bb.freeze()
        assert bb.frozen
        before = {k: v.copy() for k, v in bb.state_dict().items()}
        x, mask = _input(np.random.default_rng(5))
        xt = Tensor(x, requires_grad=True)
        with T.Tape():
            grads = T.backward(T.tsum(bb(xt, mask)))
        assert set(grads) == {xt}
        assert all(p.grad is None for p in bb.parameters())
        assert all(np.array_equal(before[k], v) for k, v in bb.state_dict().items())
        bb.unfreeze()
        assert not bb.frozen


def test_attention_rows_sum_to_one_over_valid():
    bb = _backbones()[1]
    rng = np.random.default_rng(6)
    x, mask = _input(rng, batch=4, valid=4)
    mask[1, 2:] = False
    x[~mask] = 0.0
    attn = bb.attention_weights(x, mask)
    for b in range(4):
        valid = mask[b]
        # recompute the softmax independently
        q = x[b] @ bb.query.W.data + bb.query.b.data
        k = x[b] @ bb.key.W.data + bb.key.b.data
        s = q @ k.T / np.sqrt(D_H)
        s[:, ~valid] = -np.inf
        e = np.exp(s - s.max(axis=1, keepdims=True))
        ref = e / e.sum(axis=1, keepdims=True)
        assert np.allclose(attn[b], ref, rtol=0, atol=1e-14)
        assert np.allclose(attn[b].sum(axis=1), 1.0, atol=1e-14)
        assert not attn[b][:, ~valid].any()


def test_mixer_row_count_checked():
    with pytest.raises(T.ShapeError, match="rows"):
        _backbones()[0](np.zeros((N + 1, W)), np.ones(N + 1, dtype=bool))


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown backbone"):
        make_backbone("gru", N, W, D_H, np.random.default_rng(0))
