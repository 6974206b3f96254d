import json

import numpy as np
import pytest
from skimage.registration import phase_cross_correlation

from proxyedit.controls import (GRAY, REFERENCE_DROP_PROB, STAGE2_TEXTURE_PROB, WHITE,
                                AugmentParams, TextureSimParams, alpha_merge, assemble_batch,
                                augment_reference, blend_weights, branch_flags,
                                geometry_control_map, inpaint_mask, merge_windows,
                                normal_from_depth, slic_segment, split_fg_bg, superpixel_mean_fill,
                                simulate_texture, texture_control_map, window_plan, write_batch)
from proxyedit.geometry import InvalidArgument

N_ORACLE = 1000


def rand_case(rng, H=6, W=5):
    return rng.random((H, W, 3)), rng.random((H, W, 3)), rng.random((H, W)) > 0.5


# mask algebra against scalar-loop oracles ------------------------------------


def test_split_fg_bg_oracle():
    rng = np.random.default_rng(0)
    for _ in range(N_ORACLE):
        f, _, m = rand_case(rng)
        ref, bg = split_fg_bg(f, m)
        for i in range(f.shape[0]):
            for j in range(f.shape[1]):
                for c in range(3):
                    assert ref[i, j, c] == (f[i, j, c] if m[i, j] else GRAY)
                    assert bg[i, j, c] == (WHITE if m[i, j] else f[i, j, c])


def test_inpaint_mask_oracle():
    rng = np.random.default_rng(1)
    for _ in range(N_ORACLE):
        a, b = rng.random((6, 5)) > 0.5, rng.random((6, 5)) > 0.5
        out = inpaint_mask(a, b)
        for i in range(6):
            for j in range(5):
                assert out[i, j] == (1.0 if a[i, j] and not b[i, j] else 0.0)


def test_texture_control_map_oracle():
    rng = np.random.default_rng(2)
    for _ in range(N_ORACLE):
        e, bg, _ = rand_case(rng)
        m = rng.random((6, 5))  # soft masks follow the same affine formula
        out = texture_control_map(e, m, bg)
        for i in range(6):
            for j in range(5):
                for c in range(3):
                    assert out[i, j, c] == e[i, j, c] * m[i, j] + bg[i, j, c] * (1.0 - m[i, j])


def test_geometry_control_map_oracle():
    rng = np.random.default_rng(3)
    for _ in range(N_ORACLE):
        n, _, m = rand_case(rng)
        out = geometry_control_map(n, m)
        for i in range(6):
            for j in range(5):
                for c in range(3):
                    assert out[i, j, c] == (n[i, j, c] if m[i, j] else GRAY)


def test_mask_algebra_trivial_cases():
    rng = np.random.default_rng(4)
    f, bg, _ = rand_case(rng)
    ones, zeros = np.ones((6, 5)), np.zeros((6, 5))
    assert np.array_equal(split_fg_bg(f, ones)[0], f)
    assert np.all(split_fg_bg(f, ones)[1] == WHITE)
    assert np.all(split_fg_bg(f, zeros)[0] == GRAY)
    assert not inpaint_mask(ones, ones).any()
    disjoint = np.zeros((6, 5))
    disjoint[0] = 1
    assert np.array_equal(inpaint_mask(disjoint, 1 - disjoint), disjoint)
    assert np.array_equal(texture_control_map(f, ones, bg), f)
    assert np.array_equal(texture_control_map(f, zeros, bg), bg)
    assert np.all(geometry_control_map(f, zeros) == GRAY)


def test_mask_shape_mismatch():
    f = np.zeros((4, 4, 3))
    with pytest.raises(InvalidArgument):
        split_fg_bg(f, np.zeros((3, 4)))
    with pytest.raises(InvalidArgument):
        inpaint_mask(np.zeros((4, 4)), np.zeros((4, 3)))
    with pytest.raises(InvalidArgument):
        texture_control_map(f, np.zeros((4, 4)), np.zeros((4, 5, 3)))
    with pytest.raises(InvalidArgument):
        geometry_control_map(f, np.zeros((5, 4)))


# normals from depth -----------------------------------------------------------


def test_normal_from_depth_constant_and_ramp():
    n = normal_from_depth(np.full((8, 8), 3.0)) * 2 - 1
    assert np.allclose(n, [0, 0, 1])
    ramp = np.tile(np.arange(8.0), (8, 1))  # dz/dx = 1
    n = normal_from_depth(ramp) * 2 - 1
    assert np.allclose(n, np.array([-1.0, 0, 1]) / np.sqrt(2))


def test_normal_from_depth_unit_norm():
    z = np.random.default_rng(0).random((10, 12))
    n = normal_from_depth(z) * 2 - 1
    assert np.allclose(np.linalg.norm(n, axis=-1), 1.0)
    with pytest.raises(InvalidArgument):
        normal_from_depth(np.full((3, 3), np.nan))


# superpixels and texture simulation -----------------------------------------


def test_slic_single_segment_and_partition():
    img = np.random.default_rng(0).random((20, 24, 3))
    assert not slic_segment(img, 1).any()
    labels = slic_segment(img, 30)
    assert labels.shape == (20, 24)
    assert set(np.unique(labels)) == set(range(labels.max() + 1))


def test_slic_caps_at_pixel_count():
    img = np.random.default_rng(1).random((3, 3, 3))
    labels = slic_segment(img, 100)
    assert labels.max() + 1 <= 9


def test_slic_uniform_image_segment_sizes():
    img = np.full((60, 60, 3), 0.4)
    labels = slic_segment(img, 100)
    sizes = np.bincount(labels.ravel())
    target = img.shape[0] * img.shape[1] / 100
    assert np.all(np.abs(sizes - target) <= 0.3 * target)


def test_superpixel_mean_fill_zero_variance():
    rng = np.random.default_rng(2)
    img = rng.random((24, 24, 3))
    labels = slic_segment(img, 40)
    out = superpixel_mean_fill(img, labels)
    for k in range(labels.max() + 1):
        sel = labels == k
        assert np.allclose(out[sel], img[sel].mean(axis=0))
        assert np.allclose(out[sel].var(axis=0), 0.0)


def test_simulate_texture_shape_and_determinism():
    img = np.random.default_rng(3).random((40, 36, 3))
    p = TextureSimParams(900, 5, 0.3, seed=7)
    a, b = simulate_texture(img, p), simulate_texture(img, p)
    assert a.shape == img.shape
    assert np.array_equal(a, b)


@pytest.mark.parametrize("kw", [{"n_segments": 700}, {"median_kernel": 4}, {"scale": 0.6}])
def test_texture_params_ranges(kw):
    with pytest.raises(InvalidArgument):
        TextureSimParams(**kw)


def test_texture_params_sample_in_range():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = TextureSimParams.sample(rng)
        assert 800 <= p.n_segments <= 1200 and p.median_kernel in (3, 5, 7, 9, 11)
        assert 0.25 <= p.scale <= 0.5


# reference augmentation -------------------------------------------------------


def _object_frames(T=4, H=40, W=40):
    frames, masks = [], []
    for k in range(T):
        m = np.zeros((H, W))
        m[10 + k:22 + k, 12:20 + k] = 1
        f = np.ones((H, W, 3))
        f[m > 0] = (0.9, 0.2 + 0.1 * k, 0.1)
        frames.append(f)
        masks.append(m)
    return frames, masks


def test_augment_identity_puts_object_on_gray():
    frames, masks = _object_frames()
    out, om, order = augment_reference(frames, masks, AugmentParams())
    assert np.array_equal(order, np.arange(4))
    for f, m, o in zip(frames, masks, out):
        assert np.array_equal(o[m > 0], f[m > 0])
        assert np.all(o[m == 0] == GRAY)


def test_augment_shared_transform_recovered_by_registration():
    frames, masks = _object_frames()
    p = AugmentParams(scale=1.0, shift=(3.0, -2.0), rotation=0.0)
    _, warped, _ = augment_reference(frames, masks, p)
    shifts = np.array([phase_cross_correlation(w, m, upsample_factor=10)[0]
                       for m, w in zip(masks, warped)])
    assert np.abs(shifts - shifts[0]).max() <= 0.5
    assert np.allclose(shifts[0], (-2.0, 3.0), atol=0.5)  # (row, col) = (dy, dx)


def test_augment_determinism_and_permutation():
    frames, masks = _object_frames()
    p = AugmentParams(scale=1.1, shift=(1.5, 0.5), rotation=10.0, permute=True, seed=3)
    a, _, oa = augment_reference(frames, masks, p)
    b, _, ob = augment_reference(frames, masks, p)
    assert np.array_equal(oa, ob)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert sorted(oa) == list(range(4))


def test_augment_empty_mask_warns():
    frames, masks = _object_frames(T=2)
    masks[1] = np.zeros_like(masks[1])
    with pytest.warns(RuntimeWarning):
        out, _, _ = augment_reference(frames, masks, AugmentParams())
    assert np.all(out[1] == GRAY)
    with pytest.raises(InvalidArgument):
        augment_reference(frames, masks[:1], AugmentParams())
    with pytest.raises(InvalidArgument):
        AugmentParams(scale=0.0)


# batch assembly ---------------------------------------------------------------


def _inputs(H=8, W=8):
    rng = np.random.default_rng(0)
    m = np.zeros((H, W))
    m[2:5, 2:6] = 1
    return {"input": rng.random((H, W, 3)), "mask": m, "background": rng.random((H, W, 3)),
            "texture": rng.random((H, W, 3)), "geometry": rng.random((H, W, 3)),
            "reference": rng.random((H, W, 3))}


def test_stage1_never_keeps_texture():
    rng = np.random.default_rng(0)
    assert not any(branch_flags(1, rng).texture_present for _ in range(10_000))


def test_branch_frequencies():
    rng = np.random.default_rng(1)
    flags = [branch_flags(2, rng) for _ in range(100_000)]
    tex = np.mean([f.texture_present for f in flags])
    ref = np.mean([f.reference_dropped for f in flags])
    assert abs(tex - STAGE2_TEXTURE_PROB) <= 0.01
    assert abs(ref - REFERENCE_DROP_PROB) <= 0.01


def test_branch_flags_match_assemble_batch():
    inp = _inputs()
    for seed in range(50):
        _, f1 = assemble_batch(2, inp, np.random.default_rng(seed))
        assert branch_flags(2, np.random.default_rng(seed)) == f1


def test_assemble_batch_channel_contents():
    inp = _inputs()
    m = inp["mask"] > 0
    for seed in range(200):
        batch, flags = assemble_batch(2, inp, np.random.default_rng(seed))
        if flags.texture_present:
            assert batch["texture"] is inp["texture"]
        else:
            assert np.array_equal(batch["texture"][~m], inp["background"][~m])
            assert not np.array_equal(batch["texture"][m], inp["background"][m])
        if flags.reference_dropped:
            assert not batch["reference"].any()
        else:
            assert batch["reference"] is inp["reference"]


def test_assemble_batch_errors():
    inp = _inputs()
    with pytest.raises(InvalidArgument):
        assemble_batch(3, inp, np.random.default_rng(0))
    inp.pop("geometry")
    with pytest.raises(InvalidArgument):
        assemble_batch(1, inp, np.random.default_rng(0))


def test_write_batch_manifest(tmp_path):
    batch, flags = assemble_batch(1, _inputs(), np.random.default_rng(0))
    manifest = write_batch(batch, flags, tmp_path)
    data = json.loads(manifest.read_text())
    assert data["flags"]["stage"] == 1 and data["flags"]["texture_present"] is False
    for name in data["files"].values():
        assert (tmp_path / name).exists()


# long-video windows ---------------------------------------------------------


def test_window_plan_examples():
    assert window_plan(14) == [(0, 13)]
    assert window_plan(21, 14, 7) == [(0, 13), (7, 20)]
    plan = window_plan(40, 14, 7)
    assert plan[0][0] == 0 and plan[-1][1] == 39
    assert all(e - s + 1 == 14 for s, e in plan)
    with pytest.raises(InvalidArgument):
        window_plan(30, 14, 14)


def test_blend_weights_and_midpoint():
    assert np.allclose(blend_weights(5), [1, 0.75, 0.5, 0.25, 0])
    a = [np.full((2, 2), float(k)) for k in range(5)]
    b = [np.full((2, 2), 10.0 + k) for k in range(5)]
    merged = alpha_merge(a, b)
    assert np.array_equal(merged[0], a[0]) and np.array_equal(merged[-1], b[-1])
    assert np.allclose(merged[2], (a[2] + b[2]) / 2)


def test_merge_windows_passes_through_and_blends():
    plan = window_plan(21, 14, 7)
    outs = [[np.full((1,), 0.0)] * 14, [np.full((1,), 1.0)] * 14]
    frames = merge_windows(plan, outs, 21)
    assert len(frames) == 21
    assert frames[0][0] == 0.0 and frames[20][0] == 1.0
    ramp = [f[0] for f in frames[7:14]]
    assert np.allclose(ramp, 1.0 - blend_weights(7))
