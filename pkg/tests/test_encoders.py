import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from utils.encoders import (
    DEFAULT_TEMPLATES,
    EncoderConfig,
    divided_spacetime_block,
    encode_handcrafted_classes,
    encode_text_classes,
    encode_video,
    init_frozen_encoders,
    init_prompt_set,
    map_text_prompts_to_video,
)
from utils.errors import ChecksumError, ConfigError, DimensionError, LabelError, ParameterError, TemplateError
from utils.numerics import Tape, Tensor, backward, layer_norm, tsum
from utils.vocabulary import embed_text

SMALL = EncoderConfig(depth=2, width=16, heads=2, text_prompt_len=2, video_prompt_len=2, frames=2, patches=2)


@pytest.fixture(scope="module")
def enc():
    return init_frozen_encoders(5, SMALL)


def _clip(seed, cfg=SMALL, batch=None):
    rng = np.random.default_rng(seed)
    shape = (cfg.frames, cfg.patches, cfg.width) if batch is None else (batch, cfg.frames, cfg.patches, cfg.width)
    return rng.normal(0.0, 0.3, size=shape).astype(np.float32)


def test_parameter_count_matches_closed_form():
    cfg = EncoderConfig(depth=2, width=32)
    d, r = cfg.width, cfg.mlp_ratio
    attention = 4 * d * d + 4 * d
    mlp = 2 * r * d * d + r * d + d
    text_layer = 4 * d + attention + mlp
    video_layer = 6 * d + 2 * attention + mlp
    expected = (cfg.depth * (text_layer + video_layer) + 2 * d + cfg.max_text_len * d + d
                + cfg.frames * d + cfg.patches * d)
    assert init_frozen_encoders(0, cfg).parameter_count() == expected


def test_frozen_weights_are_seeded():
    a, b, c = init_frozen_encoders(1, SMALL), init_frozen_encoders(1, SMALL), init_frozen_encoders(2, SMALL)
    assert a.checksum() == b.checksum()
    assert a.checksum() != c.checksum()
    assert_array_equal(a.w("video.0.time_attn.wq").values, b.w("video.0.time_attn.wq").values)
    with pytest.raises(ChecksumError):
        a.verify_checksum(c.checksum())


def test_config_validation():
    with pytest.raises(ConfigError, match="encoder.heads"):
        EncoderConfig(width=10, heads=4).validate()
    with pytest.raises(ConfigError, match="encoder.prompt_init"):
        EncoderConfig(prompt_init="random").validate()


def test_prompt_init_modes():
    zeros = init_prompt_set("verb", EncoderConfig(prompt_init="zeros"), 0)
    assert all(not p.values.any() for p in zeros.text_prompts)

    cfg = EncoderConfig(prompt_init="template", text_prompt_len=3)
    templ = init_prompt_set("noun", cfg, 0)
    tokens = embed_text(DEFAULT_TEMPLATES["noun"].replace("[CLASS]", " "), cfg.width)
    assert_allclose(templ.text_prompts[0].values, tokens[:3], atol=1e-7)

    with pytest.raises(ParameterError):
        init_prompt_set("object", EncoderConfig(), 0)


def test_text_table_shapes_and_determinism(enc):
    prompts = init_prompt_set("verb", SMALL, 3)
    table = encode_text_classes(enc, prompts, ["take", "put", "take"])
    assert table.embeddings.shape == (3, SMALL.width)
    assert table.source == "learned"
    assert_array_equal(table.embeddings.values[0], table.embeddings.values[2])
    single = encode_text_classes(enc, prompts, ["open"])
    assert single.embeddings.shape == (1, SMALL.width)


def test_prompts_change_text_embeddings(enc):
    zero = init_prompt_set("verb", EncoderConfig(**{**SMALL.to_dict(), "prompt_init": "zeros"}), 0)
    random = init_prompt_set("verb", SMALL, 0)
    for p in random.text_prompts:
        p.values = p.values * 50.0
    a = encode_text_classes(enc, zero, ["take", "put"]).embeddings.values
    b = encode_text_classes(enc, random, ["take", "put"]).embeddings.values
    assert not np.allclose(a, b)


def test_handcrafted_table(enc):
    first = encode_handcrafted_classes(enc, ["knife", "cup"], DEFAULT_TEMPLATES["noun"], "noun")
    again = encode_handcrafted_classes(enc, ["knife", "cup"], DEFAULT_TEMPLATES["noun"], "noun")
    other = encode_handcrafted_classes(enc, ["knife", "cup"], "a photo of [CLASS]", "noun")
    assert first.source == "frozen-template"
    assert not first.embeddings.requires_grad
    assert_array_equal(first.embeddings.values, again.embeddings.values)
    assert np.all(np.any(first.embeddings.values != other.embeddings.values, axis=1))


def test_zero_prompts_match_handcrafted_table(enc):
    zero = init_prompt_set("noun", EncoderConfig(**{**SMALL.to_dict(), "prompt_init": "zeros"}), 4)
    labels = ["knife", "cup", "board"]
    for template in (DEFAULT_TEMPLATES["noun"], "a photo of [CLASS]"):
        learned = encode_text_classes(enc, zero, labels, template).embeddings.values
        frozen = encode_handcrafted_classes(enc, labels, template, "noun").embeddings.values
        assert_array_equal(learned, frozen)


def test_text_errors(enc):
    prompts = init_prompt_set("verb", SMALL, 0)
    with pytest.raises(TemplateError):
        encode_text_classes(enc, prompts, ["take"], template="a video of an action")
    with pytest.raises(LabelError):
        encode_text_classes(enc, prompts, [])
    with pytest.raises(TemplateError):
        encode_text_classes(enc, prompts, ["!!"], template="[CLASS]")
    with pytest.raises(DimensionError):
        encode_text_classes(enc, prompts, ["take"], template="a " * 40 + "[CLASS]")


def test_mapping_identity_and_zero():
    prompts = init_prompt_set("verb", SMALL, 0)
    for k in range(SMALL.depth):
        prompts.proj_weights[k].values = np.eye(SMALL.width, dtype=np.float32)
    mapped = map_text_prompts_to_video(prompts)
    for k in range(SMALL.depth):
        assert_allclose(mapped[k].values, prompts.text_prompts[k].values, atol=1e-7)

    for k in range(SMALL.depth):
        prompts.proj_weights[k].values = np.zeros_like(prompts.proj_weights[k].values)
    assert all(not m.values.any() for m in map_text_prompts_to_video(prompts))


def test_mapping_resamples_prompt_length():
    cfg = EncoderConfig(text_prompt_len=4, video_prompt_len=2)
    prompts = init_prompt_set("noun", cfg, 0)
    assert prompts.resample is not None
    assert_allclose(prompts.resample.values.sum(axis=1), 1.0, atol=1e-6)
    assert [m.shape for m in map_text_prompts_to_video(prompts)] == [(2, cfg.width)] * cfg.depth


def test_block_is_residual_when_weights_are_zero():
    enc = init_frozen_encoders(9, SMALL)
    for name, t in enc.weights.items():
        if name.startswith("video.0.") and (".w" in name):
            t.values = np.zeros_like(t.values)
    e = Tensor(np.random.default_rng(0).normal(size=(SMALL.frames * SMALL.patches + SMALL.video_prompt_len,
                                                      SMALL.width)))
    assert_allclose(divided_spacetime_block(enc, e, 0).values, e.values, atol=1e-6)


def test_single_frame_temporal_attention_is_value_projection():
    cfg = EncoderConfig(**{**SMALL.to_dict(), "frames": 1})
    enc = init_frozen_encoders(9, cfg)
    rng = np.random.default_rng(2)
    for name in ("video.0.space_attn.wo", "video.0.space_attn.bo", "video.0.mlp.w2", "video.0.mlp.b2"):
        enc.w(name).values = np.zeros_like(enc.w(name).values)
    for name in ("video.0.time_attn.bv", "video.0.time_attn.bo"):
        enc.w(name).values = rng.normal(size=cfg.width).astype(np.float32)
    s = cfg.patches
    e = rng.normal(size=(s + cfg.video_prompt_len, cfg.width)).astype(np.float32)

    out = divided_spacetime_block(enc, Tensor(e), 0).values
    normed = layer_norm(Tensor(e[:s]), enc.w("video.0.ln_time.gamma"), enc.w("video.0.ln_time.beta")).values
    value = normed @ enc.w("video.0.time_attn.wv").values + enc.w("video.0.time_attn.bv").values
    expected = e[:s] + value @ enc.w("video.0.time_attn.wo").values + enc.w("video.0.time_attn.bo").values
    assert_allclose(out[:s], expected, atol=1e-5)
    assert_allclose(out[s:], e[s:], atol=1e-6)


def test_block_is_equivariant_to_frame_permutation(enc):
    t, s, lv, d = SMALL.frames, SMALL.patches, SMALL.video_prompt_len, SMALL.width
    rng = np.random.default_rng(1)
    grid, prompts = rng.normal(size=(t, s, d)), rng.normal(size=(lv, d))
    e = np.concatenate([grid.reshape(t * s, d), prompts])
    swapped = np.concatenate([grid[::-1].reshape(t * s, d), prompts])
    out = divided_spacetime_block(enc, Tensor(e), 1).values
    out_swapped = divided_spacetime_block(enc, Tensor(swapped), 1).values
    assert_allclose(out_swapped[: t * s].reshape(t, s, d), out[: t * s].reshape(t, s, d)[::-1], atol=1e-5)
    assert_allclose(out_swapped[t * s:], out[t * s:], atol=1e-5)


def test_block_rejects_bad_layout(enc):
    with pytest.raises(DimensionError):
        divided_spacetime_block(enc, Tensor(np.zeros((5, SMALL.width))), 0)


def test_video_feature_is_unit_norm_and_batch_consistent(enc):
    prompts = init_prompt_set("verb", SMALL, 0)
    clips = _clip(0, batch=3)
    batch = encode_video(enc, clips, prompts).values
    assert batch.shape == (3, SMALL.width)
    assert_allclose(np.linalg.norm(batch, axis=1), 1.0, atol=1e-6)
    single = encode_video(enc, clips[1], prompts).values
    assert_allclose(single, batch[1], atol=1e-5)


def test_verb_and_noun_prompts_give_different_features(enc):
    clip = _clip(2)
    f_v = encode_video(enc, clip, init_prompt_set("verb", SMALL, 0)).values
    f_n = encode_video(enc, clip, init_prompt_set("noun", SMALL, 0)).values
    assert not np.allclose(f_v, f_n)


def test_deep_prompting_switch_controls_later_layers():
    for deep, later_used in ((True, True), (False, False)):
        cfg = EncoderConfig(**{**SMALL.to_dict(), "deep_prompting": deep})
        enc = init_frozen_encoders(5, cfg)
        prompts = init_prompt_set("verb", cfg, 0)
        with Tape() as tape:
            loss = tsum(encode_video(enc, _clip(3, cfg), prompts) * Tensor(np.arange(cfg.width)))
        backward(loss, tape)
        assert prompts.proj_weights[0].grad is not None
        assert (prompts.proj_weights[1].grad is not None) == later_used


def test_video_rejects_wrong_grid(enc):
    with pytest.raises(DimensionError):
        encode_video(enc, np.zeros((3, 3, SMALL.width)), init_prompt_set("verb", SMALL, 0))
