"""Shape, masking, and round-trip contracts of the masked autoencoder."""

import numpy as np
import pytest

from pulse import autodiff as ad
from pulse import mae
from pulse.errors import InvariantError

TOY = mae.MaeConfig(signal_len=768, patch_len=96, enc_dim=16, enc_depth=2, enc_heads=2,
                    dec_dim=8, dec_depth=1, dec_heads=2)


def test_patchify_shapes_and_indexing():
    x = np.arange(3840, dtype=np.float32)
    patches = mae.patchify(x, 96)
    assert patches.shape == (40, 96)
    for k in (0, 7, 39):
        assert patches[k, 0] == k * 96
    np.testing.assert_array_equal(mae.unpatchify(patches), x)


def test_patchify_rejects_indivisible_length():
    with pytest.raises(InvariantError):
        mae.patchify(np.zeros(100), 96)


def test_mask_plan_counts_and_determinism():
    assert mae.make_mask_plan(40, 0.0, 0).masked_idx.size == 0
    plan = mae.make_mask_plan(40, 0.5, 1)
    assert plan.masked_idx.size == 20
    plan.validate()
    again = mae.make_mask_plan(40, 0.5, 1)
    assert np.array_equal(plan.masked_idx, again.masked_idx)


def test_mask_plans_differ_across_seeds():
    plans = {tuple(mae.make_mask_plan(40, 0.5, s).masked_idx.tolist()) for s in range(100)}
    assert len(plans) >= 95


def test_split_ratios():
    shared, private = mae.split_shared_private(40, 1.0, 0)
    assert shared.size == 0 and private.size == 40
    shared, private = mae.split_shared_private(40, 0.0, 0)
    assert shared.size == 40 and private.size == 0
    shared, private = mae.split_shared_private(40, 0.5, 3)
    assert shared.size == 20 and private.size == 20
    assert np.array_equal(np.sort(np.concatenate([shared, private])), np.arange(40))


def test_encode_layer_count_and_partition():
    model = mae.MaeModel(TOY, seed=0)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, TOY.signal_len)).astype(np.float32)
    plan = mae.make_mask_plan(TOY.n_patches, 0.5, 5)
    split = mae.split_shared_private(len(plan.visible_idx), 0.5, 6)
    bundle = model.encode(x, plan, split)
    assert len(bundle.layers) == TOY.enc_depth
    assert bundle.layers[-1].shape == (3, len(plan.visible_idx) + 1, TOY.enc_dim)
    bundle.validate()


def test_privileged_channel_has_no_shared_tokens():
    model = mae.MaeModel(TOY, seed=0)
    x = np.zeros((1, TOY.signal_len), dtype=np.float32)
    plan = mae.make_mask_plan(TOY.n_patches, 0.5, 5)
    bundle = model.encode(x, plan, split=None)
    assert bundle.shared_idx.size == 0
    assert bundle.private_idx.size == len(plan.visible_idx)


def test_zero_mask_ratio_keeps_all_patches():
    model = mae.MaeModel(TOY, seed=0)
    x = np.zeros((2, TOY.signal_len), dtype=np.float32)
    plan = mae.make_mask_plan(TOY.n_patches, 0.0, 0)
    bundle = model.encode(x, plan)
    assert bundle.layers[-1].shape[1] == TOY.n_patches + 1


def test_encode_permutation_equivariance():
    model = mae.MaeModel(TOY, seed=1)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, TOY.signal_len)).astype(np.float32)
    plan = mae.make_mask_plan(TOY.n_patches, 0.5, 7)
    tokens = model.encode(x, plan).final.data

    order = np.arange(len(plan.visible_idx))
    order[0], order[1] = order[1], order[0]
    permuted_plan = mae.MaskPlan(n_patches=plan.n_patches, masked_idx=plan.masked_idx,
                                 visible_idx=plan.visible_idx[order])
    permuted = model.encode(x, permuted_plan).final.data

    cls = 1
    np.testing.assert_allclose(permuted[:, cls:], tokens[:, cls:][:, order], atol=1e-5)
    np.testing.assert_allclose(permuted[:, 0], tokens[:, 0], atol=1e-5)


def test_decode_covers_all_positions_without_masking():
    model = mae.MaeModel(TOY, seed=3)
    plan = mae.make_mask_plan(TOY.n_patches, 0.0, 0)
    n_vis = len(plan.visible_idx)
    split = mae.all_private_split(n_vis)
    private = ad.Tensor(np.random.default_rng(1).standard_normal(
        (2, n_vis, TOY.enc_dim)).astype(np.float32))
    out = model.decode(None, private, plan, split)
    assert out.shape == (2, TOY.signal_len)
    assert np.isfinite(out.data).all()


def test_mask_token_locality_in_shallow_decoder():
    cfg = mae.MaeConfig(signal_len=768, patch_len=96, enc_dim=16, enc_depth=1, enc_heads=2,
                        dec_dim=8, dec_depth=0, dec_heads=2)
    model = mae.MaeModel(cfg, seed=4)
    plan = mae.make_mask_plan(cfg.n_patches, 0.5, 9)
    split = mae.all_private_split(len(plan.visible_idx))
    private = ad.Tensor(np.random.default_rng(2).standard_normal(
        (1, len(plan.visible_idx), cfg.enc_dim)).astype(np.float32))

    base = model.decode(None, private, plan, split).data.reshape(cfg.n_patches, cfg.patch_len)
    model.params["mask_token"].data[0, 0, 0] += 0.5  # single-coordinate bump survives LayerNorm
    bumped = model.decode(None, private, plan, split).data.reshape(cfg.n_patches, cfg.patch_len)

    changed = np.where(np.abs(bumped - base).max(axis=1) > 1e-7)[0]
    np.testing.assert_array_equal(np.sort(changed), np.sort(plan.masked_idx))


def test_checkpoint_round_trip(tmp_path):
    model = mae.MaeModel(TOY, seed=5)
    path = tmp_path / "model.ckpt"
    mae.save_checkpoint(model, path)
    back = mae.load_checkpoint(path)
    assert back.config == model.config
    assert set(back.params) == set(model.params)
    for name in model.params:
        assert np.array_equal(back.params[name].data, model.params[name].data)
    assert back.fingerprint() == model.fingerprint()


def test_sinusoidal_positions_supported():
    cfg = mae.MaeConfig(signal_len=768, patch_len=96, enc_dim=16, enc_depth=1, enc_heads=2,
                        dec_dim=8, dec_depth=1, dec_heads=2, pos_embed="sinusoidal")
    model = mae.MaeModel(cfg, seed=0)
    assert "pos_enc" not in model.params
    plan = mae.make_mask_plan(cfg.n_patches, 0.5, 0)
    bundle = model.encode(np.zeros((1, cfg.signal_len), dtype=np.float32), plan)
    assert np.isfinite(bundle.final.data).all()


def test_config_validation():
    with pytest.raises(InvariantError):
        mae.MaeConfig(signal_len=100, patch_len=96).validate()
    with pytest.raises(InvariantError):
        mae.MaeConfig(mask_ratio=1.0).validate()
    with pytest.raises(InvariantError):
        mae.MaeConfig(enc_dim=30, enc_heads=4).validate()
    mae.paper_config().validate()
    assert mae.paper_config().enc_dim == 1024
