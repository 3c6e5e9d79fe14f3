import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voplab.config import ModelSpec, PromptSpec, clip_b32
from voplab.encoders import (DualEncoder, TextBatch, VideoBatch, deep_sequence_length, patchify,
                             similarity, video_embed)
from voplab.tensor import ShapeError, Tensor

from .conftest import make_batch


def layer_events(trace, tower):
    return [e for e in trace if e["event"] == "layer" and e["tower"] == tower]


def test_text_length_contract(spec, batch):
    m = DualEncoder(spec)
    m.attach_prompts(PromptSpec(P_t=4, P_v=4))
    tr = []
    m.text(batch[0], m.bank, tr)
    for e in layer_events(tr, "text"):
        assert (e["input_len"], e["carried_len"]) == (12, 8)


def test_frame_length_contract(spec, batch):
    m = DualEncoder(spec)
    m.attach_prompts(PromptSpec(P_t=4, P_v=4))
    tr = []
    m.encode_frames(batch[1], trace=tr)
    for e in layer_events(tr, "vision"):
        assert (e["input_len"], e["carried_len"]) == (14, 10)


def test_output_shapes(spec, batch):
    m = DualEncoder(spec)
    assert m.encode_text(batch[0]).shape == (4, spec.d)
    assert m.encode_frames(batch[1]).shape == (4, spec.F, spec.d)
    assert m.encode_video(batch[1]).shape == (4, spec.d)


def test_patch_count_at_clip_resolution():
    assert clip_b32().M == 49
    frames = np.zeros((1, 2, 3, 224, 224), dtype=np.float32)
    assert patchify(frames, 32).shape == (2, 49, 3 * 32 * 32)


def test_patchify_order():
    frames = np.arange(1 * 1 * 3 * 4 * 4, dtype=np.float32).reshape(1, 1, 3, 4, 4)
    p = patchify(frames, 2)
    # second patch on the first row covers columns 2..3 of rows 0..1, channel-major
    np.testing.assert_array_equal(p[0, 1, :4], [2, 3, 6, 7])
    np.testing.assert_array_equal(p[0, 1, 4:8], [18, 19, 22, 23])


def test_text_embedding_width_at_clip_text_dims():
    spec = ModelSpec(K=1, d_t=512, heads_t=8, d=512, d_v=48, vocab=100, N_max=77)
    m = DualEncoder(spec)
    tb = TextBatch(np.zeros((2, 5), dtype=int), np.array([4, 2]))
    assert m.encode_text(tb).shape == (2, 512)


def test_zero_length_prompts_equal_unprompted(spec, batch):
    plain = DualEncoder(spec, seed=3)
    prompted = DualEncoder(spec, seed=3)
    prompted.attach_prompts(PromptSpec(P_t=0, P_v=0))
    assert plain.encode_text(batch[0]).data.tobytes() == prompted.encode_text(batch[0]).data.tobytes()
    assert plain.encode_frames(batch[1]).data.tobytes() == prompted.encode_frames(batch[1]).data.tobytes()


def test_prompt_width_mismatch_rejected(spec, batch):
    m = DualEncoder(spec)
    m.attach_prompts(PromptSpec())
    m.registry["prompts.text.layer.1"].tensor.data = np.zeros((4, spec.d_t + 1), dtype=np.float32)
    with pytest.raises(ShapeError, match="d_t"):
        m.encode_text(batch[0])


def test_token_out_of_vocab_rejected(spec):
    m = DualEncoder(spec)
    with pytest.raises(ValueError):
        m.encode_text(TextBatch(np.full((1, 4), spec.vocab), np.array([3])))


def test_textbatch_eos_contract():
    with pytest.raises(ValueError):
        TextBatch(np.zeros((2, 4), dtype=int), np.array([1, 4]))


def test_wrong_frame_side_rejected(spec):
    m = DualEncoder(spec)
    with pytest.raises(ShapeError):
        m.encode_frames(VideoBatch(np.zeros((1, 4, 3, 8, 8), dtype=np.float32)))


class TestVideoEmbed:
    def test_identical_frames(self):
        u = np.random.default_rng(0).standard_normal(6)
        z = video_embed(Tensor(np.tile(u, (1, 5, 1))))
        np.testing.assert_allclose(z.data[0], u)

    def test_opposite_frames_cancel(self):
        u = np.random.default_rng(1).standard_normal(6)
        z = video_embed(Tensor(np.stack([u, -u])[None]))
        np.testing.assert_allclose(z.data, 0.0, atol=1e-15)

    def test_brute_force_mean_of_twelve(self):
        x = np.random.default_rng(2).standard_normal((3, 12, 7))
        z = video_embed(Tensor(x)).data
        for b in range(3):
            for c in range(7):
                assert z[b, c] == pytest.approx(sum(x[b, f, c] for f in range(12)) / 12, abs=1e-12)

    @given(st.permutations(range(5)))
    def test_frame_permutation_invariance(self, perm):
        x = np.random.default_rng(3).standard_normal((2, 5, 4))
        a = video_embed(Tensor(x)).data
        b = video_embed(Tensor(x[:, list(perm)])).data
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestSimilarity:
    def test_identical_and_orthogonal(self):
        e = np.eye(3)
        S = similarity(Tensor(e), Tensor(e)).data
        np.testing.assert_allclose(S, np.eye(3), atol=1e-15)

    def test_random_against_formula(self):
        rng = np.random.default_rng(4)
        t, v = rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
        S = similarity(Tensor(t), Tensor(v)).data
        for i in range(5):
            for j in range(5):
                ref = t[i] @ v[j] / (np.linalg.norm(t[i]) * np.linalg.norm(v[j]))
                assert abs(S[i, j] - ref) < 1e-6

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            similarity(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))))

    @given(st.integers(0, 2**16), st.integers(1, 6), st.integers(1, 6))
    def test_cosine_bounds(self, seed, nt, nv):
        rng = np.random.default_rng(seed)
        S = similarity(Tensor(rng.standard_normal((nt, 4)) * 100),
                       Tensor(rng.standard_normal((nv, 4)) * 1e-3)).data
        assert S.shape == (nt, nv)
        assert (np.abs(S) <= 1 + 1e-12).all()


def test_deep_sequence_length():
    assert deep_sequence_length(F=4, P_v=4, M=9) == 44
    assert deep_sequence_length(F=12, P_v=8, M=49) == 608


def test_logit_scale_initial_value_and_clamp(spec):
    m = DualEncoder(spec)
    assert m.logit_scale().item() == pytest.approx(1 / 0.07, rel=1e-6)
    m.registry["logit_scale"].tensor.data = np.array(10.0, dtype=np.float32)
    assert m.logit_scale().item() == 100.0


def test_forward_is_deterministic(spec):
    tb, vb = make_batch(spec, seed=9)
    a = DualEncoder(spec, seed=2).similarity(tb, vb).data
    b = DualEncoder(spec, seed=2).similarity(tb, vb).data
    assert a.tobytes() == b.tobytes()
