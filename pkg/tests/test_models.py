import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tskd import autodiff as ad
from tskd.autodiff import DimensionError, Tensor
from tskd.losses import task_loss
from tskd.models import (
    EncoderSpec,
    Head,
    HeadSpec,
    Model,
    SpecError,
    build_encoder,
    build_head,
    checksum,
    forward,
    head_hidden_size,
    load_checkpoint,
    save_checkpoint,
    set_frozen,
)
from tskd.train import OptimizerSpec, optimizer_step


def small_model(seed=0, frozen=False):
    enc = build_encoder(EncoderSpec(4, [8], 4), seed)
    return Model(enc, build_head(HeadSpec("mlp", 4, 3, 4), seed + 1), encoder_frozen=frozen)


def test_parameter_count_matches_hand_arithmetic():
    enc = build_encoder(EncoderSpec(4, [8], 4), seed=0)
    assert enc.n_params == 4 * 8 + 8 + 8 * 4 + 4 == 76


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 9),
    st.lists(st.integers(1, 9), min_size=1, max_size=3),
    st.integers(1, 9),
)
def test_parameter_count_closed_form(d_in, widths, d_out):
    dims = [d_in, *widths, d_out]
    expected = sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))
    assert build_encoder(EncoderSpec(d_in, widths, d_out), 0).n_params == expected


def test_same_seed_is_bit_identical_and_seeds_differ():
    spec = EncoderSpec(4, [8], 4)
    a, b, c = build_encoder(spec, 3), build_encoder(spec, 3), build_encoder(spec, 4)
    assert checksum(a) == checksum(b)
    assert checksum(a) != checksum(c)


def test_init_scale_and_zero_bias():
    enc = build_encoder(EncoderSpec(10, [30], 5), 0)
    w, b = enc.params[0].data, enc.params[1].data
    assert np.abs(w).max() <= np.sqrt(6 / 40)
    assert not b.any()


@pytest.mark.parametrize("widths", [[], [0], [4, -1]])
def test_invalid_encoder_specs(widths):
    with pytest.raises(SpecError):
        build_encoder(EncoderSpec(4, widths, 4), 0)


@pytest.mark.parametrize(
    "n_in,n_out,regime,expected",
    [(1536, 200, "large-teacher", 554), (384, 200, "student", 384), (1, 1, "large-teacher", 1)],
)
def test_head_hidden_size(n_in, n_out, regime, expected):
    assert head_hidden_size(n_in, n_out, regime) == expected


def test_linear_and_mlp_head_shapes():
    assert [p.shape for p in build_head(HeadSpec("linear", 5, 3), 0).params] == [(5, 3), (3,)]
    assert [p.shape for p in build_head(HeadSpec("mlp", 5, 3, 7), 0).params] == [(5, 7), (7,), (7, 3), (3,)]


def test_forward_shapes_and_dimension_error():
    m = small_model()
    assert forward(m, np.ones((5, 4))).shape == (5, 3)
    with pytest.raises(DimensionError):
        forward(m, np.ones((5, 3)))
    with pytest.raises(DimensionError):
        Model(build_encoder(EncoderSpec(4, [8], 4), 0), Head(HeadSpec("linear", 5, 3), 0))


def test_bias_only_final_layer_gives_uniform_softmax():
    m = small_model()
    last_w, last_b = m.head.params[-2], m.head.params[-1]
    last_w.data = np.zeros_like(last_w.data)
    last_b.data = np.zeros_like(last_b.data)
    p = ad.softmax(forward(m, np.random.default_rng(0).normal(size=(4, 4)))).data
    assert np.allclose(p, 1 / 3, atol=1e-15)


def test_forward_is_pure():
    m = small_model()
    x = np.random.default_rng(1).normal(size=(6, 4))
    assert forward(m, x).data.tobytes() == forward(m, x).data.tobytes()


def test_freeze_toggles_trainable_set():
    m = small_model()
    set_frozen(m, True)
    assert sum(p.data.size for p in m.trainable_parameters()) == m.head.n_params
    set_frozen(m, False)
    assert sum(p.data.size for p in m.trainable_parameters()) == m.encoder.n_params + m.head.n_params


def _grads(model, x, y):
    for p in model.parameters:
        p.grad = None
    loss = task_loss(forward(model, x), np.eye(3)[y])
    ad.backward(loss)
    return model


def test_head_gradients_identical_frozen_or_not():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
    free = _grads(small_model(frozen=False), x, y)
    frozen = _grads(small_model(frozen=True), x, y)
    for a, b in zip(free.head.params, frozen.head.params):
        assert np.array_equal(a.grad, b.grad)
    assert all(p.grad is None for p in frozen.encoder.params)


def test_freezing_mid_training_keeps_encoder_constant():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
    m = small_model()
    spec = OptimizerSpec("sgd-momentum", lr=0.1)
    state = None
    for step in range(6):
        if step == 3:
            set_frozen(m, True)
            frozen_sum = checksum(m.encoder)
            state = None
        params = m.trainable_parameters()
        _grads(m, x, y)
        new, state = optimizer_step([p.data for p in params], [p.grad for p in params], spec, state, 0.1)
        for p, arr in zip(params, new):
            p.data = arr
    assert checksum(m.encoder) == frozen_sum


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = small_model(seed=5)
    m.meta["note"] = "x"
    path = save_checkpoint(m, tmp_path / "m.npz")
    back = load_checkpoint(path)
    assert checksum(back.parameters) == checksum(m.parameters)
    assert back.encoder.spec == m.encoder.spec and back.head.spec == m.head.spec
    assert back.meta == {"note": "x"}
    enc_path = save_checkpoint(m.encoder, tmp_path / "e.npz")
    assert checksum(load_checkpoint(enc_path)) == checksum(m.encoder)


def test_model_forward_matches_numpy_reference():
    m = small_model(seed=7)
    x = np.random.default_rng(4).normal(size=(3, 4))
    h = x
    for mlp in (m.encoder, m.head):
        ws = mlp.params
        for i in range(0, len(ws), 2):
            h = h @ ws[i].data + ws[i + 1].data
            if i < len(ws) - 2:
                h = np.maximum(h, 0)
    assert np.allclose(forward(m, Tensor(x)).data, h, rtol=0, atol=1e-14)
