import numpy as np
import pytest

from donet.errors import ConfigError, ContractError, ShapeError
from donet.model import DonetConfig, build, expected_parameter_count, forward, pyramid_arrays
from donet.rcem import MultiScaleSkip, RcemBlock, SkipBundle, check_rates, rcem_forward
from donet.tensor import Tensor, backward, make_rng, sum_all


def small(**kw):
    base = dict(input_size=(16, 16), base_channels=2, stages=2, dilation_rates=(1, 2))
    base.update(kw)
    return DonetConfig(**base)


def image(cfg, n=2, seed=0):
    return Tensor(make_rng(seed).random((n, cfg.input_channels, *cfg.input_size)).astype(np.float32))


def test_check_rates():
    assert check_rates([1, 2, 4, 8]) == (1, 2, 4, 8)
    for bad in ([], [0, 1], [2, 1], [1, 1]):
        with pytest.raises(ConfigError):
            check_rates(bad)


def test_rcem_returns_last_state_and_bundle():
    block = RcemBlock(3, (1, 2, 4), rng=make_rng(0))
    F = Tensor(make_rng(1).random((2, 3, 8, 8)).astype(np.float32))
    H, bundle = rcem_forward(block, F)
    assert isinstance(bundle, SkipBundle) and len(bundle) == 3
    assert bundle.shape == (2, 3, 8, 8)
    assert H is bundle.states[-1]
    with pytest.raises(ShapeError):
        rcem_forward(block, Tensor(np.zeros((1, 2, 8, 8), dtype=np.float32)))


def test_multi_scale_skip_channels_and_resolution_check():
    c = 3
    skip = MultiScaleSkip(c, (1, 2, 4, 8), rng=make_rng(0))
    bundle = SkipBundle([Tensor(np.ones((1, c, 8, 8), dtype=np.float32))] * 4)
    out = skip(bundle, Tensor(np.ones((1, 2 * c, 4, 4), dtype=np.float32)))
    assert out.shape == (1, 5 * c, 8, 8) == (1, skip.out_channels(), 8, 8)
    with pytest.raises(ShapeError):
        skip(bundle, Tensor(np.ones((1, 2 * c, 8, 8), dtype=np.float32)))
    with pytest.raises(ShapeError):
        skip(SkipBundle(bundle.states[:3]), Tensor(np.ones((1, 2 * c, 4, 4), dtype=np.float32)))


def test_config_validation():
    with pytest.raises(ConfigError):
        DonetConfig(input_size=(60, 64)).validate()
    with pytest.raises(ConfigError):
        DonetConfig(stages=0).validate()
    with pytest.raises(ConfigError):
        DonetConfig(dilation_rates=(2, 1)).validate()
    assert DonetConfig().channels() == [16, 32, 64, 128, 256]


@pytest.mark.parametrize("flags", [
    dict(), dict(use_rcem=False), dict(use_dual=False), dict(use_pyramid_inputs=False),
    dict(use_rcem=False, use_dual=False),
])
def test_parameter_count_matches_closed_form(flags):
    cfg = small(**flags)
    assert build(cfg).parameter_count() == expected_parameter_count(cfg)


def test_default_parameter_counts():
    # Closed-form counts for the default 64x64 configurations.
    assert expected_parameter_count(DonetConfig()) == 7197906
    assert expected_parameter_count(DonetConfig(use_rcem=False)) == 1925474
    full = build(DonetConfig(base_channels=8)).parameter_count()
    base = build(DonetConfig(base_channels=8, use_rcem=False, use_dual=False)).parameter_count()
    assert full == 1803770 and base < full


def test_forward_shapes_and_joint_product():
    cfg = small()
    triple = forward(build(cfg), image(cfg))
    for t in (triple.y1, triple.y2, triple.y_joint):
        assert t.shape == (2, 1, 16, 16)
        assert np.all((t.data >= 0) & (t.data <= 1))
    assert np.array_equal(triple.y_joint.data, triple.y1.data * triple.y2.data)


def test_single_decoder_joint_is_y1():
    cfg = small(use_dual=False)
    triple = build(cfg)(image(cfg))
    assert triple.y2 is None and triple.y_joint is triple.y1


def test_forward_rejects_bad_input():
    cfg = small()
    model = build(cfg)
    with pytest.raises(ShapeError):
        forward(model, Tensor(np.zeros((2, 1, 16, 16), dtype=np.float32)))
    with pytest.raises(ShapeError):
        forward(model, Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32)))
    with pytest.raises(ContractError):
        forward(model, image(cfg, n=1), train=True)


def test_same_seed_same_weights_and_outputs():
    cfg = small()
    a, b = build(cfg, seed=3), build(cfg, seed=3)
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb and np.array_equal(ta.data, tb.data)
    x = image(cfg)
    assert np.array_equal(a(x).y_joint.data, b(x).y_joint.data)
    c = build(cfg, seed=4)
    assert not np.array_equal(a.encoder.convs[0].weight.data, c.encoder.convs[0].weight.data)


def test_every_parameter_receives_a_gradient():
    cfg = small()
    model = build(cfg)
    triple = model(image(cfg), train=True)
    backward(sum_all(triple.y1) + sum_all(triple.y2))
    missing = [n for n, p in model.named_parameters() if p.grad is None]
    assert missing == []


def test_shared_encoder_gets_both_decoders_gradients():
    cfg = small()
    model = build(cfg)
    x = image(cfg)
    grads = []
    for pick in ("y1", "y2", "both"):
        model.zero_grad()
        triple = model(x, train=True)
        loss = {"y1": sum_all(triple.y1), "y2": sum_all(triple.y2),
                "both": sum_all(triple.y1) + sum_all(triple.y2)}[pick]
        backward(loss)
        grads.append(model.encoder.convs[0].weight.grad.astype(np.float64))
    np.testing.assert_allclose(grads[0] + grads[1], grads[2], rtol=1e-4, atol=1e-6)


def test_pyramid_arrays_average():
    x = make_rng(0).random((1, 3, 8, 8))
    levels = pyramid_arrays(x, 3)
    assert [lv.shape[-1] for lv in levels] == [4, 2, 1]
    np.testing.assert_allclose(levels[-1][..., 0, 0], x.mean(axis=(2, 3)))
