import numpy as np
import pytest

from lafurca.gradcheck import MODEL_TOL, check_model, tiny_model
from lafurca.objective import pit_loss
from lafurca.separator import LaFurca, ModelSpecError, layer_norm, parse_model_spec
from lafurca.tensor import Tape, Tensor


@pytest.mark.parametrize("text,parallel,cross,stages", [
    ("LF(6)", False, False, [6]),
    ("LF(8,9)", False, False, [8, 9]),
    ("LF(C,2,6)", False, True, [2, 6]),
    ("LF(P,4,5)", True, False, [4, 5]),
    ("LaFurca(P, C, 1, 2, 3)", True, True, [1, 2, 3]),
    ("lf(c,2)", False, True, [2]),
])
def test_parse(text, parallel, cross, stages):
    spec = parse_model_spec(text)
    assert (spec.parallel, spec.cross, spec.stage_blocks) == (parallel, cross, stages)


@pytest.mark.parametrize("text", ["LF()", "LF(P)", "LF(X,2)", "LF(2", "LF(2,)", "LF(P,P,2)",
                                  "LF(2,P)", "LF(0)", "XX(2)", "LF(2) extra", "LF(2);Q=3"])
def test_parse_errors_carry_position(text):
    with pytest.raises(ModelSpecError) as info:
        parse_model_spec(text)
    assert 0 <= info.value.position <= len(text)
    assert "position" in str(info.value)


def test_to_string_round_trips():
    spec = parse_model_spec("LF(P,C,2,3)", n_filters=8, hidden=4, chunk_len=10, window=4, stride=2)
    again = parse_model_spec(spec.to_string())
    assert again == spec
    assert spec.notation() == "LF(P,C,2,3)"
    assert parse_model_spec("LF(2);N=16;hop=3").n_filters == 16


def test_spec_invariants():
    with pytest.raises(ValueError):
        parse_model_spec("LF(2);S=1")


def test_layer_norm_per_frame():
    x = np.random.default_rng(0).normal(2.0, 3.0, size=(6, 4))
    out = layer_norm(Tensor(x), np.ones((6, 1)), np.zeros((6, 1))).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), 1.0, atol=1e-6)


@pytest.mark.parametrize("notation", ["LF(2)", "LF(P,C,1,1)"])
def test_mask_simplex(notation):
    model = tiny_model(notation, seed=3)
    rng = np.random.default_rng(1)
    for stage in model.stages:
        for p in stage.parameters().values():
            p.data[:] = rng.normal(0, 1.0, p.shape)
    _, masks = model(rng.normal(size=45), with_masks=True)
    for m in masks:
        m = m.data
        np.testing.assert_allclose(m.sum(axis=0), 1.0, atol=1e-6)
        assert m.min() >= 0 and m.max() <= 1


@pytest.mark.parametrize("t", [57, 800, 4000])
def test_output_lengths(t):
    model = tiny_model("LF(1,1)", window=16, stride=8, chunk_len=10, hop=5)
    outs = model(np.random.default_rng(t).normal(size=t))
    assert len(outs) == 2
    assert all(o.shape == (2, t) for o in outs)


def test_mask_head_permutation_permutes_outputs():
    model = tiny_model("LF(2)", seed=4)
    x = np.random.default_rng(2).normal(size=40)
    before = model(x)[0].data
    stage = model.stages[0]
    n = model.spec.n_filters
    for p in (stage.mask_w, stage.mask_b):
        p.data[:] = np.concatenate([p.data[n:], p.data[:n]])
    after = model(x)[0].data
    np.testing.assert_array_equal(after, before[::-1])


def test_stage_input_channels():
    model = tiny_model("LF(1,1,1)")
    s = model.spec.n_sources
    assert model.stages[0].encoder.kernel.shape[1] == 1
    assert all(st.encoder.kernel.shape[1] == 1 + s for st in model.stages[1:])


def test_later_stage_validates_previous():
    model = tiny_model("LF(1,1)")
    with pytest.raises(ValueError):
        model.stages[1](np.zeros(20), np.zeros((3, 20)))
    with pytest.raises(ValueError):
        model.stages[1](np.zeros(20))


def test_single_stage_equals_stage_forward():
    model = tiny_model("LF(2)")
    x = np.random.default_rng(5).normal(size=33)
    np.testing.assert_array_equal(model(x)[0].data, model.stages[0](x)[0].data)


def test_stage_two_decodes_mixture_encoding():
    """Zeroing the estimate channels' taps must not change which encoding is masked."""
    model = tiny_model("LF(1,1)", seed=8)
    x = np.random.default_rng(6).normal(size=30)
    stage = model.stages[1]
    prev = model.stages[0](x)[0]
    _, masks = stage(x, prev)
    feats = stage.encoder.encode_channel(x, 0).values.data
    masked = masks.data * feats
    expected = stage.decoder(masked, length=30).data
    np.testing.assert_allclose(stage(x, prev)[0].data, expected, atol=1e-12)


def test_stage_one_gets_gradient_from_stage_two_loss():
    model = tiny_model("LF(1,1)", seed=9)
    rng = np.random.default_rng(7)
    src = rng.normal(size=(2, 30))
    mix = src.sum(axis=0)
    w = model.stages[0].decoder.weight

    def stage2_loss():
        return pit_loss(src, model(mix)[1]).loss

    with Tape() as tape:
        loss = stage2_loss()
    tape.backward(loss)
    assert np.any(w.grad != 0)
    h = 1e-5
    idx = (0, 0)
    orig = w.data[idx]
    w.data[idx] = orig + h
    up = stage2_loss().item()
    w.data[idx] = orig - h
    down = stage2_loss().item()
    w.data[idx] = orig
    numeric = (up - down) / (2 * h)
    assert numeric != 0
    assert w.grad[idx] == pytest.approx(numeric, rel=1e-4)


def test_end_to_end_gradcheck_lf22():
    report = check_model("LF(2,2)", seed=1)
    assert len(report.entries) >= 50
    assert report.max_rel_err < MODEL_TOL


def test_stages_do_not_share_parameters():
    model = tiny_model("LF(1,1)")
    a = model.stages[0].blocks[0].intra.branches[0].lstm.w_hh
    b = model.stages[1].blocks[0].intra.branches[0].lstm.w_hh
    assert a is not b and not np.array_equal(a.data, b.data)


def test_seeded_construction_is_deterministic():
    spec = parse_model_spec("LF(C,1,1)", n_filters=8, hidden=4, chunk_len=6)
    a, b = LaFurca(spec, seed=3).state_dict(), LaFurca(spec, seed=3).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert len(a) == len(set(a))
