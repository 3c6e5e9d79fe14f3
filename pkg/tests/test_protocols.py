import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voplab.config import ConfigError, ModelSpec, PromptSpec, Protocol, clip_b32
from voplab.encoders import DualEncoder
from voplab.params import ParameterRegistry, init_array
from voplab.protocols import (REFERENCE_PROMPTS, apply_protocol, backbone_params, closed_form_trainable,
                              count_parameters, ledger_for, protocol_mask)


CLIP = clip_b32()

# Trainable counts at ViT-B/32 dims, computed by hand from the layer shapes.
CLIP_COUNTS = {
    "full": 151_277_313,
    "bias": 171_008,
    "proj": 655_360,
    "partial": 7_743_232,
    "adapter_attn": 1_982_976,
    "adapter_ffn": 1_982_976,
    "vop": 122_880,
    "vop_p": 528_384,
    "vop_c": 14_257_152,
    "vop_f": 132_096,
    "vop_fp": 402_432,
    "vop_fc": 14_278_656,
}


@pytest.mark.parametrize("kind", sorted(CLIP_COUNTS))
def test_clip_ledger(kind):
    led = ledger_for(CLIP, Protocol(kind), REFERENCE_PROMPTS)
    assert led.trainable_total == CLIP_COUNTS[kind]
    assert led.backbone_total == CLIP_COUNTS["full"]


def test_hand_counts_of_the_small_protocols():
    # proj: two (width, 512) matrices; adapters: 12 layers x two towers x (down + up)
    assert CLIP_COUNTS["proj"] == 512 * 512 + 768 * 512
    assert CLIP_COUNTS["adapter_attn"] == 12 * (2 * 64 * 512 + 64 + 512) + 12 * (2 * 64 * 768 + 64 + 768)
    assert CLIP_COUNTS["vop"] == 12 * 8 * (512 + 768)
    assert CLIP_COUNTS["vop_p"] == CLIP_COUNTS["vop"] - 12 * 4 * 768 + 12 * 12 * 4 * 768


@pytest.mark.parametrize("kind,pct", [("vop", "0.103"), ("vop_p", "0.441"), ("proj", "0.547"),
                                      ("adapter_attn", "1.655")])
def test_clip_percentages(kind, pct):
    assert f"{ledger_for(CLIP, Protocol(kind), REFERENCE_PROMPTS).percent:.3f}" == pct


def test_full_is_everything_reconstructed():
    led = ledger_for(CLIP, Protocol("full"))
    assert led.percent_vs_reconstructed == 100.0
    assert backbone_params(CLIP) == led.backbone_total


def test_toy_ledger_matches_materialized_model(spec):
    for kind in Protocol.KINDS:
        shape_only = ledger_for(spec, Protocol(kind), PromptSpec(video_len=2, K_s=2))
        m = DualEncoder(spec)
        apply_protocol(m, Protocol(kind), PromptSpec(video_len=2, K_s=2))
        real = count_parameters(m.registry)
        assert real.trainable_total == shape_only.trainable_total
        assert real.trainable_total == sum(g.tensor.data.size for g in m.registry.trainable())


specs = st.builds(
    lambda K, dt_h, dv_h, h_t, h_v, F, g, vocab, N: ModelSpec(
        K=K, d_t=dt_h * h_t, d_v=dv_h * h_v, d=8, heads_t=h_t, heads_v=h_v, F=F, patch=2,
        image_side=2 * g, vocab=vocab, N_max=N),
    st.integers(1, 6), st.integers(1, 8), st.integers(1, 8), st.integers(1, 3), st.integers(1, 3),
    st.integers(1, 6), st.integers(1, 4), st.integers(2, 100), st.integers(1, 20))


@st.composite
def prompt_specs(draw, spec):
    P_v = draw(st.integers(0, 6))
    lo = draw(st.integers(1, spec.K))
    hi = draw(st.integers(lo, spec.K))
    return PromptSpec(P_t=draw(st.integers(0, 6)), P_v=P_v, video_len=draw(st.integers(0, P_v)),
                      depth_range=draw(st.sampled_from([None, (lo, hi)])),
                      K_s=draw(st.integers(0, spec.K)),
                      cmm_kind=draw(st.sampled_from(["bilstm", "lstm", "transformer"])),
                      cmm_hidden=draw(st.sampled_from([None, 3, 7])))


@given(st.data())
def test_closed_form_matches_registry_walk(data):
    spec = data.draw(specs)
    pspec = data.draw(prompt_specs(spec))
    kind = data.draw(st.sampled_from(Protocol.KINDS))
    proto = Protocol(kind, adapter_hidden=data.draw(st.integers(1, 9)))
    assert ledger_for(spec, proto, pspec).trainable_total == closed_form_trainable(spec, proto, pspec)


def test_masks_partition_groups(spec):
    m = DualEncoder(spec)
    m.attach_prompts(PromptSpec())
    names = m.registry.names()
    bias = protocol_mask(names, Protocol("bias"), spec.K)
    assert all(n.endswith(".bias") for n, f in bias.items() if f)
    assert not any(f for n, f in bias.items() if n.startswith("prompts."))
    partial = protocol_mask(names, Protocol("partial"), spec.K)
    on = {n for n, f in partial.items() if f}
    assert "text.proj" in on and "vision.proj" in on
    assert all(n.startswith(f"vision.layer.{spec.K}.") for n in on - {"text.proj", "vision.proj"})


def test_adapters_start_as_identity(spec, batch):
    plain = DualEncoder(spec, seed=4)
    for where in ("attn", "ffn"):
        m = DualEncoder(spec, seed=4)
        apply_protocol(m, Protocol(f"adapter_{where}"))
        assert m.similarity(*batch).data.tobytes() == plain.similarity(*batch).data.tobytes()


def test_unknown_protocol_rejected():
    with pytest.raises(ConfigError):
        Protocol("lora")


def test_ledger_rejects_incomplete_mask(spec):
    m = DualEncoder(spec)
    mask = m.registry.mask()
    mask.pop("text.proj")
    with pytest.raises(ConfigError):
        count_parameters(m.registry, mask)
    with pytest.raises(ConfigError):
        count_parameters(m.registry, {**m.registry.mask(), "nope": True})


def test_registry_rejects_duplicates_and_partial_masks():
    reg = ParameterRegistry()
    reg.create("a", (2,))
    with pytest.raises(KeyError):
        reg.create("a", (2,))
    with pytest.raises(KeyError):
        reg.set_trainable({})


def test_init_is_keyed_by_name_not_creation_order():
    a = init_array("normal:1.0", (3,), 5, "x", np.float32)
    reg = ParameterRegistry(seed=5)
    reg.create("y", (7,), "normal:1.0")
    reg.create("x", (3,), "normal:1.0")
    np.testing.assert_array_equal(reg.tensor("x").data, a)


def test_shape_only_registry_has_no_tensors():
    m = DualEncoder(CLIP, materialize=False)
    with pytest.raises(RuntimeError):
        m.registry.tensor("text.proj")
