import math

import numpy as np
import pytest

from hasn.kernels import conv2d, pixel_shuffle
from hasn.model import (
    DIHEDRAL,
    ModelConfig,
    block_params,
    cab_forward,
    check_params,
    count_flops,
    count_params,
    dihedral_apply,
    dihedral_invert,
    dump_feature_maps,
    esa_forward,
    feature_grid,
    feature_maps,
    forward,
    grid_layout,
    hasb_forward,
    init_params,
    param_breakdown,
    param_shapes,
    self_ensemble_infer,
)
from conftest import random_params
from oracles import cab_ref, esa_ref, forward_ref, hasb_ref, rel_err

CB = dict(use_esa=False, use_cab=False, fc_branches=2)


# ---- config --------------------------------------------------------------


def test_default_config_and_derived_sizes():
    cfg = ModelConfig()
    assert (cfg.dim, cfg.num_blocks, cfg.dw_kernel, cfg.scale, cfg.fuse_mode) == (52, 6, 7, 4, "multiply")
    assert cfg.width == 156 and cfg.cab_channels == 17 and cfg.squeeze_channels == 1


@pytest.mark.parametrize(
    "changes",
    [dict(scale=5), dict(dw_kernel=4), dict(fuse_mode="concat"), dict(gate_activation="tanh"),
     dict(use_esa=True, fc_branches=2), dict(expansion=1.3), dict(dim=0), dict(block_residual_position="middle")],
)
def test_invalid_configs_rejected(changes):
    with pytest.raises(ValueError):
        ModelConfig(**changes)


def test_config_dict_round_trip_and_unknown_keys():
    cfg = ModelConfig(dim=30, fuse_mode="add")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_dict({**cfg.to_dict(), "typo": 1})


def test_reconstruction_channels_follow_scale():
    for s in (2, 3, 4):
        assert param_shapes(ModelConfig(scale=s))["recon.weight"][0] == 3 * s * s


# ---- sizes ---------------------------------------------------------------


def test_published_size_calibration():
    assert count_params(ModelConfig()) == 435_272
    assert count_params(ModelConfig(**CB)) == 228_380
    assert [count_params(ModelConfig(dim=d, **CB)) for d in (30, 90)] == [90_198, 610_698]


def test_param_count_affine_in_blocks():
    counts = [count_params(ModelConfig(num_blocks=k)) for k in range(0, 13, 2)]
    steps = {b - a for a, b in zip(counts, counts[1:])}
    assert len(steps) == 1
    assert abs(steps.pop() / 2 - 64_500) <= 6_450


def test_kernel_size_deltas_closed_form():
    counts = [count_params(ModelConfig(dw_kernel=k, **CB)) for k in (3, 5, 7, 9)]
    deltas = [b - a for a, b in zip(counts, counts[1:])]
    assert deltas == [2 * 52 * (k2 * k2 - k1 * k1) * 6 for k1, k2 in ((3, 5), (5, 7), (7, 9))]
    assert deltas == [9_984, 14_976, 19_968]


def test_k0_breakdown_is_the_analytic_layer_sum():
    cfg = ModelConfig(num_blocks=0)
    head, body, recon = 3 * 52 * 9 + 52, 52 * 52 * 9 + 52, 52 * 48 * 9 + 48
    assert param_breakdown(cfg) == {"head": head, "blocks": 0, "body": body, "recon": recon}
    assert count_params(cfg) == head + body + recon


def test_flops_calibration_at_256_input():
    assert count_flops(ModelConfig(**CB), 1024, 1024) / 1e9 == pytest.approx(14.73, abs=0.005)
    assert count_flops(ModelConfig(), 1024, 1024) / 1e9 == pytest.approx(26.50, abs=0.005)


def test_flops_scale_with_area():
    cfg = ModelConfig(dim=16, num_blocks=1, **CB)
    assert count_flops(cfg, 128, 128) == 4 * count_flops(cfg, 64, 64)
    with pytest.raises(ValueError):
        count_flops(cfg, 30, 32)


def test_every_ablation_row_is_constructible(rng):
    rows = [
        dict(fuse_mode="add"), dict(per_block_residual=True), dict(use_esa=False, fc_branches=2),
        dict(use_cab=False), dict(use_esa=False, use_cab=False, fc_branches=2),
        dict(gate_activation="relu"), dict(gate_activation="leaky_relu"),
        dict(gate_activation="none"), dict(block_residual_position="before_dwconv"), dict(dw_pointwise=True),
    ]
    x = rng.random((1, 3, 8, 8)).astype(np.float32)
    for changes in rows:
        cfg = ModelConfig(dim=8, num_blocks=1, dw_kernel=3, esa_channels=4, **changes)
        assert math.isfinite(count_params(cfg))
        assert forward(cfg, init_params(cfg, 0), x).shape == (1, 3, 32, 32)


# ---- forward and blocks --------------------------------------------------


def test_forward_shape_and_dtype(tiny_cfg, tiny_params, rng):
    x = rng.random((1, 3, 24, 24)).astype(np.float32)
    y = forward(tiny_cfg, tiny_params, x)
    assert y.shape == (1, 3, 96, 96) and y.dtype == np.float32


def test_zero_params_give_zero_output(tiny_cfg, rng):
    zeros = {k: np.zeros_like(v) for k, v in init_params(tiny_cfg, 0).items()}
    assert not np.any(forward(tiny_cfg, zeros, rng.random((1, 3, 8, 8)).astype(np.float32)))


def test_global_residual_reduces_to_recon_of_shallow_features(tiny_cfg, rng):
    p = init_params(tiny_cfg, 1, np.float64)
    for k in p:
        if k.startswith(("blocks.", "body.")):
            p[k] = np.zeros_like(p[k])
    x = rng.random((1, 3, 8, 8))
    f0 = conv2d(x, p["head.weight"], p["head.bias"], padding=1)
    expected = pixel_shuffle(conv2d(f0, p["recon.weight"], p["recon.bias"], padding=1), tiny_cfg.scale)
    np.testing.assert_allclose(forward(tiny_cfg, p, x), expected, rtol=1e-12, atol=1e-12)


def test_forward_matches_straight_line_reimplementation(rng):
    cfg = ModelConfig(dim=8, num_blocks=2, dw_kernel=3, esa_channels=4)
    p = random_params(cfg, 7)
    x = rng.random((1, 3, 8, 8))
    assert rel_err(forward(cfg, p, x), forward_ref(cfg, p, x)) <= 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_esa_cab_hasb_match_oracles(seed):
    r = np.random.default_rng(seed)
    cfg = ModelConfig(dim=8, num_blocks=1, dw_kernel=3, esa_channels=4)
    P = block_params(random_params(cfg, seed), 0)
    esa = {k[4:]: v for k, v in P.items() if k.startswith("esa.")}
    cab = {k[4:]: v for k, v in P.items() if k.startswith("cab.")}
    x_esa = r.standard_normal((1, cfg.width, 16, 16))
    assert rel_err(esa_forward(esa, x_esa), esa_ref(esa, x_esa)) <= 1e-5
    x = r.standard_normal((1, 8, 6, 6))
    assert rel_err(cab_forward(cab, x), cab_ref(cab, x)) <= 1e-5
    x = r.standard_normal((1, 8, 9, 9))
    assert rel_err(hasb_forward(cfg, P, x), hasb_ref(cfg, P, x)) <= 1e-5


def test_esa_zero_weights_halves_input(rng):
    cfg = ModelConfig(dim=8, num_blocks=1, esa_channels=4)
    P = {k[4:]: np.zeros_like(v) for k, v in block_params(init_params(cfg, 0, np.float64), 0).items() if k.startswith("esa.")}
    x = rng.standard_normal((1, cfg.width, 10, 12))
    np.testing.assert_array_equal(esa_forward(P, x), x / 2)
    with pytest.raises(ValueError):
        esa_forward(P, rng.standard_normal((1, cfg.width, 7, 12)))


def test_esa_mask_never_amplifies(rng):
    cfg = ModelConfig(dim=8, num_blocks=1, esa_channels=4)
    P = {k[4:]: v for k, v in block_params(random_params(cfg, 4), 0).items() if k.startswith("esa.")}
    x = rng.standard_normal((1, cfg.width, 16, 16))
    assert np.all(np.abs(esa_forward(P, x)) <= np.abs(x))


def test_cab_zero_branch_is_identity_and_constant_pool(rng):
    cfg = ModelConfig(dim=8, num_blocks=1)
    P = {k[4:]: np.zeros_like(v) for k, v in block_params(init_params(cfg, 0, np.float64), 0).items() if k.startswith("cab.")}
    x = rng.standard_normal((1, 8, 6, 6))
    np.testing.assert_array_equal(cab_forward(P, x), x)
    # conv2 bias only: y is constant per channel, so the pooled value equals it
    P["conv2.bias"] = np.arange(8.0)
    P["excite.bias"] = np.full(8, 1e3)  # sigmoid -> 1
    np.testing.assert_allclose(cab_forward(P, x) - x, np.broadcast_to(np.arange(8.0)[None, :, None, None], x.shape))


def _hasb_probe_params(cfg):
    P = {k: np.zeros_like(v) for k, v in block_params(init_params(cfg, 0, np.float64), 0).items()}
    P["norm.gamma"] = np.ones(cfg.dim)
    k = cfg.dw_kernel
    for which in ("dw1", "dw2"):
        P[f"{which}.weight"][:, 0, k // 2, k // 2] = 1.0
    return P


def test_gate_saturates_at_six(rng):
    cfg = ModelConfig(dim=4, num_blocks=1, dw_kernel=3, expansion=1.0, use_esa=False, use_cab=False, fc_branches=3)
    P = _hasb_probe_params(cfg)
    P["fc1.bias"] = np.full(4, 10.0)  # gate input >= 6 everywhere
    P["fc2.weight"] = np.eye(4)
    P["fc_out.weight"] = np.eye(4)
    x = rng.standard_normal((1, 4, 5, 5))
    from hasn.kernels import layer_norm_channels

    f_o = layer_norm_channels(x, np.ones(4), np.zeros(4), cfg.ln_eps)
    np.testing.assert_allclose(hasb_forward(cfg, P, x), 6 * f_o + x, atol=1e-12)


def test_fuse_mode_annihilator(rng):
    kw = dict(dim=4, num_blocks=1, dw_kernel=3, expansion=1.0, use_esa=False, use_cab=False, fc_branches=2)
    x = rng.standard_normal((1, 4, 5, 5))
    outs = {}
    for mode in ("multiply", "add"):
        cfg = ModelConfig(fuse_mode=mode, **kw)
        P = _hasb_probe_params(cfg)
        P["fc1.bias"] = np.full(4, 2.0)  # gate = relu6(2) = 2, F_d2 = 0
        P["fc_out.weight"] = np.eye(4)
        outs[mode] = hasb_forward(cfg, P, x) - x
    np.testing.assert_allclose(outs["multiply"], 0.0, atol=1e-12)
    np.testing.assert_allclose(outs["add"], 2.0, atol=1e-12)


def test_residual_position_toggle_changes_output(rng):
    kw = dict(dim=8, num_blocks=1, dw_kernel=3, esa_channels=4)
    x = rng.standard_normal((1, 8, 8, 8))
    a = ModelConfig(**kw)
    b = ModelConfig(block_residual_position="before_dwconv", **kw)
    P = block_params(random_params(a, 2), 0)
    assert not np.allclose(hasb_forward(a, P, x), hasb_forward(b, P, x))


def test_check_params_reports_missing_and_bad_shapes(tiny_cfg, tiny_params):
    bad = dict(tiny_params)
    del bad["head.bias"]
    with pytest.raises(KeyError, match="head.bias"):
        check_params(tiny_cfg, bad)
    bad = dict(tiny_params, **{"recon.weight": np.zeros((1, 1, 1, 1), np.float32)})
    with pytest.raises(ValueError, match="recon.weight"):
        check_params(tiny_cfg, bad)


def test_init_is_seeded(tiny_cfg):
    a, b, c = init_params(tiny_cfg, 1), init_params(tiny_cfg, 1), init_params(tiny_cfg, 2)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["head.weight"], c["head.weight"])
    assert not np.any(a["head.bias"]) and np.all(a["blocks.0.norm.gamma"] == 1)


# ---- self-ensemble -------------------------------------------------------


def nearest_upsampler(scale):
    return lambda x: np.repeat(np.repeat(x, scale, axis=2), scale, axis=3)


def test_dihedral_group_closes_under_inversion(rng):
    x = rng.standard_normal((1, 1, 3, 5))
    assert len(set(DIHEDRAL)) == 8
    for k, flip in DIHEDRAL:
        np.testing.assert_array_equal(dihedral_invert(dihedral_apply(x, k, flip), k, flip), x)


def test_ensemble_of_equivariant_stub_is_bitwise_single_pass(rng):
    x = rng.random((1, 3, 5, 7)).astype(np.float32)
    stub = nearest_upsampler(4)
    np.testing.assert_array_equal(self_ensemble_infer(None, None, x, model=stub), stub(x))


def test_ensemble_commutes_with_scaling_for_linear_stub(rng):
    w = rng.standard_normal((3, 3, 3, 3))
    stub = lambda v: conv2d(v, w, None, padding=1)  # noqa: E731
    x = rng.random((1, 3, 6, 6))
    np.testing.assert_allclose(self_ensemble_infer(None, None, 2.5 * x, model=stub), 2.5 * self_ensemble_infer(None, None, x, model=stub), rtol=1e-12)


def test_ensemble_output_on_constant_input_is_dihedral_symmetric(tiny_cfg, tiny_params):
    x = np.full((1, 3, 8, 8), 0.4, dtype=np.float64)
    params = {k: v.astype(np.float64) for k, v in tiny_params.items()}
    y = self_ensemble_infer(tiny_cfg, params, x)
    for k, flip in DIHEDRAL:
        np.testing.assert_allclose(dihedral_apply(y, k, flip), y, rtol=0, atol=1e-12)


# ---- feature maps --------------------------------------------------------


def test_grid_layout_rule():
    assert grid_layout(52) == (7, 8)
    assert grid_layout(16) == (4, 4)
    assert grid_layout(1) == (1, 1)


def test_feature_grid_constant_channel_and_argmax(rng):
    fmap = rng.standard_normal((3, 4, 5))
    fmap[1] = 7.0
    grid = feature_grid(fmap)
    assert grid.shape == (2 * 4, 2 * 5) and grid.dtype == np.uint8
    assert not np.any(grid[0:4, 5:10])  # channel 1 tile is black
    tile0 = grid[0:4, 0:5]
    assert np.unravel_index(tile0.argmax(), tile0.shape) == np.unravel_index(fmap[0].argmax(), fmap[0].shape)
    assert not np.any(grid[4:8, 5:10])  # padding tile


def test_dump_feature_maps_shapes_and_determinism(tiny_cfg, tiny_params, rng):
    x = rng.random((1, 3, 8, 8)).astype(np.float32)
    grids = dump_feature_maps(tiny_cfg, tiny_params, x, [0, 2])
    assert set(grids) == {0, 2}
    rows, cols = grid_layout(tiny_cfg.dim)
    assert grids[0].shape == (rows * 8, cols * 8)
    again = dump_feature_maps(tiny_cfg, tiny_params, x, [0, 2])
    assert all(np.array_equal(grids[i], again[i]) for i in grids)
    with pytest.raises(IndexError):
        feature_maps(tiny_cfg, tiny_params, x, [3])
