import numpy as np
import pytest

import oracles
from conftest import ORACLE_ATOL, randomize_bn
from resformer_mtl.backend import ShapeError, Tensor, no_grad
from resformer_mtl.config import ModelConfig
from resformer_mtl.encoder import Encoder, PatchMerging, ResFormerBlock, Stem
from resformer_mtl.nn import zero_


def tiny(**kw):
    return ModelConfig.tiny(**kw)


def _zero_swin(blk):
    for attn in (blk.attn_w, blk.attn_sw):
        zero_(attn.proj.weight)
        zero_(attn.proj.bias)
    for ffn in (blk.ffn1, blk.ffn2):
        zero_(ffn.fc2.weight)
        zero_(ffn.fc2.bias)


# -- stem / patch merging ---------------------------------------------------------

def test_stem_shape_and_zero_image(rng):
    stem = Stem(8, rng).eval()
    zero_(stem.conv.bias)
    out = stem(Tensor(np.zeros((2, 3, 32, 48))))
    assert out.shape == (2, 8, 16, 24)
    np.testing.assert_array_equal(out.data, 0.0)


def test_stem_odd_size_rejected(rng):
    with pytest.raises(ShapeError):
        Stem(4, rng)(Tensor(np.zeros((1, 3, 31, 32))))


def test_stem_matches_oracle(rng):
    stem = Stem(4, rng)
    randomize_bn(stem, rng)
    x = rng.random((2, 3, 10, 12))
    np.testing.assert_allclose(stem(Tensor(x)).data, oracles.stem(x, stem, training=True), atol=ORACLE_ATOL)


def test_patch_merging(rng):
    pm = PatchMerging(4, 8, rng)
    x = rng.standard_normal((1, 4, 32, 32))
    out = pm(Tensor(x))
    assert out.shape == (1, 8, 16, 16)
    np.testing.assert_allclose(out.data, oracles.patch_merge(x, pm), atol=ORACLE_ATOL)
    zero_(pm.conv.weight)
    pm.conv.bias.data[...] = np.arange(8)
    np.testing.assert_array_equal(pm(Tensor(x)).data, np.broadcast_to(np.arange(8.0)[None, :, None, None], (1, 8, 16, 16)))
    with pytest.raises(ShapeError):
        pm(Tensor(np.zeros((1, 4, 7, 8))))


# -- ResFormer block ----------------------------------------------------------------

@pytest.mark.parametrize("variant", ["sequential", "parallel"])
@pytest.mark.parametrize("hw", [(16, 16), (6, 10), (4, 4)])
def test_resformer_matches_oracle(rng, variant, hw):
    cfg = tiny(variant=variant)
    blk = ResFormerBlock(8, 2, cfg, rng)
    randomize_bn(blk, rng)
    blk.eval()
    x = rng.standard_normal((2, 8) + hw)
    np.testing.assert_allclose(blk(Tensor(x)).data, oracles.resformer(x, blk), atol=ORACLE_ATOL)


def test_sequential_zeroed_swin_is_resnet(rng):
    blk = ResFormerBlock(8, 2, tiny(variant="sequential"), rng).eval()
    _zero_swin(blk.swin)
    x = Tensor(rng.standard_normal((1, 8, 8, 8)))
    np.testing.assert_array_equal(blk(x).data, blk.resnet(x).data)


def test_parallel_zeroed_swin_adds_identity(rng):
    blk = ResFormerBlock(8, 2, tiny(variant="parallel"), rng).eval()
    _zero_swin(blk.swin)
    x = Tensor(rng.standard_normal((1, 8, 8, 8)))
    np.testing.assert_allclose(blk(x).data, blk.resnet(x).data + x.data, atol=1e-12)


def test_resformer_channel_error(rng):
    blk = ResFormerBlock(8, 2, tiny(), rng)
    with pytest.raises(ShapeError, match="channel"):
        blk(Tensor(np.zeros((1, 4, 8, 8))))


# -- encoder ----------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["sequential", "parallel"])
def test_encoder_ladder_and_oracle(rng, variant):
    cfg = tiny(variant=variant)
    enc = Encoder(cfg, rng)
    randomize_bn(enc, rng)
    enc.eval()
    x = rng.random((2, 3, 32, 32))
    feats = enc(Tensor(x))
    assert [f.shape for f in feats] == [(2, 8, 16, 16), (2, 16, 8, 8), (2, 32, 4, 4), (2, 64, 2, 2)]
    for got, exp in zip(feats, oracles.encoder(x, enc)):
        np.testing.assert_allclose(got.data, exp, atol=ORACLE_ATOL)


def test_encoder_batch_permutation(rng):
    enc = Encoder(tiny(), rng).eval()
    x = rng.random((3, 3, 32, 32))
    perm = [1, 2, 0]
    with no_grad():
        a = enc(Tensor(x[perm]))
        b = enc(Tensor(x))
    for fa, fb in zip(a, b):
        np.testing.assert_allclose(fa.data, fb.data[perm], atol=1e-12)


@pytest.mark.parametrize("hw", [(48, 32), (64, 80)])
def test_encoder_ladder_any_multiple_of_16(rng, hw):
    enc = Encoder(tiny(), rng).eval()
    with no_grad():
        feats = enc(Tensor(rng.random((1, 3) + hw)))
    for i, f in enumerate(feats):
        assert f.shape[2:] == (hw[0] >> (i + 1), hw[1] >> (i + 1))


def test_encoder_rejects_non_multiple_of_16(rng):
    with pytest.raises(ShapeError):
        Encoder(tiny(), rng)(Tensor(np.zeros((1, 3, 40, 32))))


def test_variants_same_shapes(rng):
    x = Tensor(rng.random((1, 3, 32, 32)))
    with no_grad():
        s = [f.shape for f in Encoder(tiny(variant="sequential"), rng).eval()(x)]
        p = [f.shape for f in Encoder(tiny(variant="parallel"), rng).eval()(x)]
    assert s == p


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(heads=[2, 4, 8, 48])
    with pytest.raises(ValueError):
        ModelConfig(channels=[64, 128, 256])
    with pytest.raises(ValueError):
        ModelConfig(variant="diagonal")
    cfg = ModelConfig()
    assert cfg.heads == [2, 4, 8, 16] and cfg.channels == [64, 128, 256, 512] and cfg.shift == 4
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
