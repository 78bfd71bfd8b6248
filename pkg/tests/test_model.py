import numpy as np
import pytest
from scipy.special import erf

from msmlp.mixshift import identity_params, mix_shift_forward, mix_shift_reference_forward, multi_shift
from msmlp.model import (
    BlockSpec,
    ModelSpec,
    PRESET_NAMES,
    StageSpec,
    build_model,
    drop_path,
    forward_features,
    load_checkpoint,
    model_forward,
    ms_block_forward,
    patch_embed,
    preset,
    save_checkpoint,
)
from msmlp.flops import count_params
from msmlp import ops
from msmlp.tensor import Tensor

R_STAGES = [[1, 1, 3, 5, 7], [1, 3, 3, 5, 7], [1, 5, 5, 5, 7], [1, 7, 7, 7, 7]]


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

def test_tiny_preset_exact():
    spec = preset("ms-mlp-t")
    assert [s.out_channels for s in spec.stages] == [96, 192, 384, 768]
    assert [s.num_blocks for s in spec.stages] == [3, 3, 9, 3]
    assert [s.patch_ratio for s in spec.stages] == [4, 2, 2, 2]
    for st, r in zip(spec.stages, R_STAGES):
        assert st.mixshift.S == 5
        assert list(st.mixshift.d) == [0, 1, 2, 3, 4]
        assert list(st.mixshift.r) == r
    assert spec.drop_path_rate == 0.2


@pytest.mark.parametrize("name,channels,blocks,rate", [
    ("ms-mlp-s", [96, 192, 384, 768], [3, 3, 27, 3], 0.3),
    ("ms-mlp-b", [128, 256, 512, 1024], [3, 3, 27, 3], 0.5),
    ("ms-mlp-t-lite", [96, 192, 384, 768], [2, 2, 6, 2], 0.2),
    ("ms-mlp-s-lite", [96, 192, 384, 768], [2, 2, 18, 2], 0.3),
])
def test_size_presets(name, channels, blocks, rate):
    spec = preset(name)
    assert [s.out_channels for s in spec.stages] == channels
    assert [s.num_blocks for s in spec.stages] == blocks
    assert spec.drop_path_rate == rate


def test_base_first_stage_width():
    assert preset("ms-mlp-b").stages[0].out_channels == 128


@pytest.mark.parametrize("name,r,d", [
    ("ablation-local", [1, 1, 1, 1, 1], [0, 1, 2, 3, 4]),
    ("ablation-global", [7, 7, 7, 7, 7], [0, 1, 2, 3, 4]),
    ("ablation-isolated", [1, 1, 3, 5, 7], [0, 2, 5, 10, 17]),
    ("ablation-regional", [1, 1, 3, 5, 7], [0, 1, 2, 3, 4]),
])
def test_ablation_presets(name, r, d):
    spec = preset(name)
    assert [s.num_blocks for s in spec.stages] == [3, 3, 9, 3]
    for st in spec.stages:
        assert list(st.mixshift.r) == r and list(st.mixshift.d) == d


def test_tiny_desk():
    spec = preset("tiny-desk")
    assert len(spec.stages) == 2
    assert [s.out_channels for s in spec.stages] == [16, 32]
    assert spec.image_size == 32
    assert spec.drop_path_rate == 0.0


def test_unknown_preset():
    with pytest.raises(KeyError):
        preset("ms-mlp-xl")


def test_preset_overrides():
    spec = preset("ms-mlp-t", image_size=448, conv_type="full", axis_mode="horizontal")
    assert spec.image_size == 448
    assert all(s.mixshift.conv_type == "full" and s.mixshift.axis_mode == "horizontal" for s in spec.stages)


@pytest.mark.parametrize("name", [n for n in PRESET_NAMES if n != "tiny-desk"])
def test_resolutions_at_224(name):
    assert preset(name).resolutions() == [56, 28, 14, 7]


def test_drop_path_ramp():
    sched = preset("ms-mlp-t").drop_path_schedule()
    assert len(sched) == 18
    assert sched[0] == 0.0 and sched[-1] == pytest.approx(0.2)
    np.testing.assert_allclose(np.diff(sched), 0.2 / 17)


@pytest.mark.parametrize("kwargs", [
    dict(patch_ratio=3),
    dict(num_blocks=0),
])
def test_stage_spec_invalid(kwargs):
    from msmlp.mixshift import MixShiftSpec

    base = dict(patch_ratio=2, out_channels=8, num_blocks=1, mixshift=MixShiftSpec(S=2, d=(0, 1), r=(1, 3)))
    base.update(kwargs)
    with pytest.raises(ValueError):
        StageSpec(**base)


def test_image_size_must_divide():
    with pytest.raises(ValueError):
        preset("ms-mlp-t", image_size=100)


def test_spec_json_round_trip():
    for name in PRESET_NAMES:
        spec = preset(name)
        assert ModelSpec.from_json(spec.to_json()) == spec
    d = preset("ms-mlp-t").to_dict()
    assert {"image_size", "num_classes", "stages"} <= set(d)
    assert {"p", "c", "blocks", "mixshift", "drop_path_max"} <= set(d["stages"][0])


# ---------------------------------------------------------------------------
# building
# ---------------------------------------------------------------------------

def test_build_is_deterministic():
    a = build_model(preset("tiny-desk"), seed=5)
    b = build_model(preset("tiny-desk"), seed=5)
    np.testing.assert_array_equal(a.flat_vector(), b.flat_vector())
    c = build_model(preset("tiny-desk"), seed=6)
    assert not np.array_equal(a.flat_vector(), c.flat_vector())


def test_init_values():
    model = build_model(preset("tiny-desk"), seed=0)
    for name, t in model.named_parameters().items():
        assert t.name == name
        if name.endswith("gamma"):
            assert (t.data == 1).all()
        elif name.endswith(("beta", "bias")):
            assert (t.data == 0).all()
        else:
            assert np.abs(t.data).max() <= 0.04


@pytest.mark.parametrize("name", ["tiny-desk", "ms-mlp-t-lite"])
def test_param_count_matches_analytic(name):
    spec = preset(name)
    assert build_model(spec).num_parameters() == count_params(spec).total_params


def test_parameter_names():
    names = list(build_model(preset("tiny-desk")).named_parameters())
    assert names[0] == "stages.0.embed.weight"
    assert "stages.1.blocks.0.mix.vertical.region.3.weight" in names
    assert names[-2:] == ["head.weight", "head.bias"]
    assert len(names) == len(set(names))


# ---------------------------------------------------------------------------
# patch embedding
# ---------------------------------------------------------------------------

def test_patch_embed_p1_is_linear(rng):
    x = rng.standard_normal((2, 4, 4, 3))
    w = rng.standard_normal((5, 3))
    b = rng.standard_normal(5)
    np.testing.assert_array_equal(patch_embed(Tensor(x), 1, Tensor(w), Tensor(b)).data,
                                  ops.channel_linear(Tensor(x), Tensor(w), Tensor(b)).data)


def test_patch_embed_matches_loop(rng):
    p, cin, cout = 2, 3, 4
    x = rng.standard_normal((2, 6, 4, cin))
    w = rng.standard_normal((cout, p * p * cin))
    b = rng.standard_normal(cout)
    out = patch_embed(Tensor(x), p, Tensor(w), Tensor(b)).data
    assert out.shape == (2, 3, 2, cout)
    for n in range(2):
        for i in range(3):
            for j in range(2):
                vec = [x[n, i * p + a, j * p + bb, c] for a in range(p) for bb in range(p) for c in range(cin)]
                np.testing.assert_allclose(out[n, i, j], w @ np.array(vec) + b, atol=1e-12)


def test_patch_embed_224():
    x = Tensor(np.zeros((1, 224, 224, 3), dtype=np.float32))
    out = patch_embed(x, 4, Tensor(np.zeros((96, 48), dtype=np.float32)))
    assert out.shape == (1, 56, 56, 96)


def test_patch_embed_indivisible():
    with pytest.raises(ValueError):
        patch_embed(Tensor(np.zeros((1, 6, 6, 1))), 4, Tensor(np.zeros((2, 16))))


# ---------------------------------------------------------------------------
# block
# ---------------------------------------------------------------------------

def _block(seed=0, scale=10.0):
    spec = preset("tiny-desk")
    model = build_model(spec, seed=seed)
    rng = np.random.default_rng(seed)
    bp = model.stages[0].blocks[0]
    for _, t in bp.named():
        t.data = t.data * scale if t.ndim > 1 else rng.standard_normal(t.shape) * 0.3 + (t.data == 1)
    return spec.block_specs()[0][0], bp


def test_zero_block_is_identity(rng):
    bs, bp = _block()
    for _, t in bp.named():
        t.data = np.zeros_like(t.data)
    x = rng.standard_normal((2, 8, 8, 16))
    np.testing.assert_array_equal(ms_block_forward(Tensor(x), bs, bp).data, x)


def _ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def test_block_matches_straight_line_reference(rng):
    bs, bp = _block()
    x = rng.standard_normal((2, 8, 8, 16))
    h = _ln(x, bp.norm1_gamma.data, bp.norm1_beta.data)
    z = x + mix_shift_reference_forward(h, bs.mixshift, bp.mix)
    h = _ln(z, bp.norm2_gamma.data, bp.norm2_beta.data)
    h = h @ bp.fc1_weight.data.T + bp.fc1_bias.data
    h = 0.5 * h * (1 + erf(h / np.sqrt(2)))
    expect = z + h @ bp.fc2_weight.data.T + bp.fc2_bias.data
    np.testing.assert_allclose(ms_block_forward(Tensor(x), bs, bp).data, expect, atol=1e-10)


def test_block_zero_rate_train_equals_eval(rng):
    bs, bp = _block()
    x = Tensor(rng.standard_normal((2, 8, 8, 16)))
    np.testing.assert_array_equal(ms_block_forward(x, bs, bp, train_mode=True, rng=rng).data,
                                  ms_block_forward(x, bs, bp).data)


def test_block_channel_mismatch(rng):
    bs, bp = _block()
    with pytest.raises(ValueError):
        ms_block_forward(Tensor(rng.standard_normal((1, 8, 8, 12))), bs, bp)


def test_drop_path_statistics():
    x = Tensor(np.ones((4000, 1, 1, 1)))
    out = drop_path(x, 0.25, True, np.random.default_rng(0)).data.ravel()
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs((out == 0).mean() - 0.25) < 0.03
    assert abs(out.mean() - 1.0) < 0.05
    np.testing.assert_array_equal(drop_path(x, 0.25, False, None).data, x.data)


def test_block_with_drop_path_is_seeded(rng):
    bs, bp = _block()
    bs = BlockSpec(bs.channels, bs.mixshift, bs.mlp_ratio, 0.5)
    x = Tensor(rng.standard_normal((6, 8, 8, 16)))
    a = ms_block_forward(x, bs, bp, True, np.random.default_rng(1)).data
    b = ms_block_forward(x, bs, bp, True, np.random.default_rng(1)).data
    np.testing.assert_array_equal(a, b)


def test_ablation_local_mixing_is_pure_shift(rng):
    st = preset("ablation-local").stages[0]
    x = rng.standard_normal((1, 14, 14, st.out_channels))
    params = identity_params(st.mixshift, st.out_channels)
    out = mix_shift_forward(Tensor(x), st.mixshift, params).data
    expect = multi_shift(x, st.mixshift.d, "horizontal") + multi_shift(x, st.mixshift.d, "vertical")
    np.testing.assert_array_equal(out, expect)


# ---------------------------------------------------------------------------
# whole model
# ---------------------------------------------------------------------------

def test_forward_shapes_and_batch_behaviour(rng):
    model = build_model(preset("tiny-desk"), seed=0)
    img = rng.standard_normal((1, 32, 32, 3))
    x = np.concatenate([img, img, rng.standard_normal((1, 32, 32, 3))])
    logits = model_forward(model, x).data
    assert logits.shape == (3, 8)
    np.testing.assert_array_equal(logits[0], logits[1])
    perm = [2, 0, 1]
    np.testing.assert_allclose(model_forward(model, x[perm]).data, logits[perm], atol=1e-14, rtol=0)
    np.testing.assert_array_equal(model_forward(model, x).data, logits)


def test_forward_rejects_wrong_image():
    model = build_model(preset("tiny-desk"))
    with pytest.raises(ValueError):
        model_forward(model, np.zeros((1, 28, 28, 3)))


def test_tiny_model_stage_resolutions_224():
    model = build_model(preset("ms-mlp-t"), seed=0, dtype=np.float32)
    collected = []
    forward_features(model, Tensor(np.zeros((1, 224, 224, 3), dtype=np.float32)), collect=collected)
    assert [c.shape[1:] for c in collected] == [(56, 56, 96), (28, 28, 192), (14, 14, 384), (7, 7, 768)]


def test_checkpoint_round_trip(tmp_path, rng):
    model = build_model(preset("tiny-desk"), seed=3)
    for t in model.parameters():
        t.data = rng.standard_normal(t.shape)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == model.spec
    np.testing.assert_array_equal(loaded.flat_vector(), model.flat_vector())
    x = rng.standard_normal((2, 32, 32, 3))
    np.testing.assert_array_equal(model_forward(loaded, x).data, model_forward(model, x).data)


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(p)
