import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from voplab import tensor as T
from voplab.config import PROMPT_MODES, MODE_TO_KIND, ModelSpec, PromptSpec, Protocol, TrainConfig
from voplab.corpus import CorpusConfig, generate
from voplab.encoders import DualEncoder
from voplab.params import ParameterSnapshot
from voplab.protocols import apply_protocol
from voplab.tensor import Tensor
from voplab.trainer import (AdamW, NonFiniteLoss, contrastive_loss, cosine_lr, load_backbone, lr_search,
                            model_loss, train)

SMALL = CorpusConfig(n_pairs=16, n_val=8, seed=3)
FAST = TrainConfig(epochs=2, batch_size=8, lr=1e-3)


@pytest.fixture(scope="module")
def corpus():
    return generate(SMALL)


def model_for(kind, seed=0, **prompt):
    m = DualEncoder(ModelSpec(), seed=seed)
    apply_protocol(m, Protocol(kind), PromptSpec(**prompt) if prompt else None)
    return m


# -- loss ---------------------------------------------------------------------

@pytest.mark.parametrize("B", [1, 2, 7])
def test_uniform_scores_give_log_batch(B):
    assert contrastive_loss(Tensor(np.zeros((B, B))), 1.0).item() == pytest.approx(math.log(B), abs=1e-12)


def test_identity_scores_at_two():
    loss = contrastive_loss(Tensor(np.eye(2)), 1.0).item()
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss == pytest.approx(0.31326, abs=1e-5)


def test_saturates_towards_zero():
    assert contrastive_loss(Tensor(np.eye(4)), 100.0).item() < 1e-40


@given(st.integers(0, 2**16), st.integers(1, 6))
def test_symmetric_in_texts_and_videos(seed, B):
    S = np.random.default_rng(seed).uniform(-1, 1, (B, B))
    a = contrastive_loss(Tensor(S), 5.0).item()
    b = contrastive_loss(Tensor(S.T.copy()), 5.0).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_loss_rejects_rectangular():
    with pytest.raises(T.ShapeError):
        contrastive_loss(Tensor(np.zeros((2, 3))))


def test_loss_gradient_wrt_scale():
    scale = Tensor(np.array(2.0), requires_grad=True)
    S = np.array([[0.9, 0.1], [0.2, 0.8]])
    T.backward(contrastive_loss(Tensor(S), scale))
    h = 1e-6
    num = (contrastive_loss(Tensor(S), 2.0 + h).item() - contrastive_loss(Tensor(S), 2.0 - h).item()) / (2 * h)
    assert scale.grad == pytest.approx(num, rel=1e-6)


# -- schedule -----------------------------------------------------------------

def test_cosine_schedule_points():
    assert cosine_lr(0, 10, 1e-3) == 1e-3
    assert cosine_lr(5, 10, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(10, 10, 1e-3) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(0, 0, 1e-3) == 1e-3
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1e-3)


# -- optimizer ----------------------------------------------------------------

class _Reg:
    """Minimal registry stand-in for driving AdamW directly."""

    def __init__(self, values):
        from voplab.params import ParameterRegistry
        self.reg = ParameterRegistry(dtype=np.float64)
        for name, v in values.items():
            self.reg.create(name, np.shape(v))
            self.reg.tensor(name).data = np.array(v, dtype=np.float64)
        self.reg.set_trainable({n: True for n in values})


def test_adamw_matches_reference_update():
    r = _Reg({"w": [1.0, -2.0, 0.5]}).reg
    opt = AdamW(r, lr=0.1, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.2)
    w = np.array([1.0, -2.0, 0.5])
    m = np.zeros(3)
    v = np.zeros(3)
    for t, g in enumerate([np.array([0.1, -0.3, 2.0]), np.array([-0.2, 0.0, 1.0]),
                           np.array([0.5, 0.5, -0.5])], start=1):
        r.tensor("w").grad = g
        opt.step(0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        w = w * (1 - 0.1 * 0.2) - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
        np.testing.assert_allclose(r.tensor("w").data, w, rtol=1e-14)


def test_adamw_skips_groups_without_gradient():
    r = _Reg({"a": [1.0], "b": [1.0]}).reg
    opt = AdamW(r, lr=0.1)
    r.tensor("a").grad = np.array([1.0])
    assert opt.step() == ["a"]
    assert r.tensor("b").data[0] == 1.0


def test_decay_touches_exactly_the_trainable_set(corpus):
    m = model_for("vop")
    snap = ParameterSnapshot.take(m.registry)
    train(m, corpus, TrainConfig(epochs=1, batch_size=8, weight_decay=0.5), validate=False)
    changed = set(snap.changed(m.registry))
    assert changed == {g.name for g in m.registry.trainable()}


def test_zero_epochs_leaves_parameters(corpus):
    m = model_for("full")
    snap = ParameterSnapshot.take(m.registry)
    res = train(m, corpus, TrainConfig(epochs=0))
    assert res.log == [] and snap.changed(m.registry) == []


# -- loop -------------------------------------------------------------------------

def test_log_records_per_step_and_epoch(corpus):
    res = train(model_for("vop"), corpus, FAST)
    kinds = [r["kind"] for r in res.log]
    assert kinds == ["step", "step", "epoch"] * 2
    assert [r["step"] for r in res.log if r["kind"] == "step"] == [1, 2, 3, 4]
    assert "t2v_R@1" in res.log[-1]["val"]
    assert res.final_val == res.log[-1]["val"]


def test_same_seed_same_log(corpus):
    a = train(model_for("vop_c", video_len=2), corpus, FAST).log
    b = train(model_for("vop_c", video_len=2), corpus, FAST).log
    assert a == b


def test_different_seed_different_log(corpus):
    a = train(model_for("vop"), corpus, FAST).log
    b = train(model_for("vop"), corpus, TrainConfig(**{**FAST.to_dict(), "seed": 1})).log
    assert a != b


def test_split_run_equals_single_run(corpus):
    cfg = TrainConfig(epochs=2, batch_size=4, lr=1e-3)
    whole_model = model_for("vop_p", video_len=2)
    whole = train(whole_model, corpus, cfg)
    m = model_for("vop_p", video_len=2)
    first = train(m, corpus, cfg, stop_after=3)
    assert first.stopped_early and first.state.step == 3
    second = train(m, corpus, cfg, resume=first.state)
    assert first.log + second.log == whole.log
    for g in whole_model.registry:
        assert g.tensor.data.tobytes() == m.registry.tensor(g.name).data.tobytes()


def test_non_finite_loss_aborts(corpus, monkeypatch):
    import voplab.trainer as tr
    monkeypatch.setattr(tr, "contrastive_loss", lambda S, scale: T.sum_(S) * float("nan"))
    m = model_for("vop")
    snap = ParameterSnapshot.take(m.registry)
    with pytest.raises(NonFiniteLoss) as e:
        train(m, corpus, FAST)
    assert e.value.step == 0 and "batch0" in e.value.batch_id
    assert snap.changed(m.registry) == []


@pytest.mark.parametrize("mode", PROMPT_MODES)
def test_every_prompt_group_receives_gradient(corpus, mode):
    m = model_for(MODE_TO_KIND[mode], video_len=2, K_s=2)
    loss = model_loss(m, corpus["train"], np.arange(4), FAST)
    T.backward(loss)
    for g in m.registry:
        if g.trainable:
            assert g.tensor.grad is not None and np.abs(g.tensor.grad).max() > 0, g.name
        else:
            assert g.tensor.grad is None, g.name


def test_max_steps_caps_the_run(corpus):
    res = train(model_for("vop"), corpus, TrainConfig(epochs=5, batch_size=8, max_steps=3))
    assert [r["step"] for r in res.log if r["kind"] == "step"] == [1, 2, 3]
    assert res.log[-1]["kind"] == "epoch"


def test_lr_search_prefers_earliest_on_ties(corpus):
    cfg = TrainConfig(epochs=0)  # nothing trains, every grid point scores the same
    best, rows = lr_search(lambda: model_for("vop"), corpus, cfg, grid=(1e-4, 1e-3))
    assert best == 1e-4 and len(rows) == 2


def test_load_backbone_skips_prompts():
    src = DualEncoder(ModelSpec(), seed=1)
    dst = model_for("vop", seed=2)
    before = dst.registry.tensor("prompts.text.layer.1").data.copy()
    loaded = load_backbone(dst, src.registry.state())
    assert set(loaded) == set(src.registry.names())
    np.testing.assert_array_equal(dst.registry.tensor("text.proj").data, src.registry.tensor("text.proj").data)
    np.testing.assert_array_equal(dst.registry.tensor("prompts.text.layer.1").data, before)
