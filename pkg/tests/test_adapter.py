import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dyrank.adapter import (
    AdapterConfig,
    RankSelectiveAdapter,
    ThresholdSchedule,
    adapter_shapes,
    attach_adapters,
    count_low_rank_parameters,
    count_parameters,
    delta,
    merge,
    merge_adapters,
    parse_site_filter,
    proximal_step,
    prune,
    threshold_at,
)
from dyrank.config import VIT_B16
from dyrank.model import DualEncoderConfig, DualEncoderModel
from dyrank.tensor import no_grad

from conftest import tiny_model_config


def _random_adapter(rng, d=6, k=6, r=4, target=("vision", 0, "Q")):
    return RankSelectiveAdapter(target, rng.normal(size=(r, k)), rng.normal(size=(d, r)),
                                rng.uniform(-1, 1, r), r)


def _randomize_adapters(model, rng, scale=0.1):
    for ad in model.adapters():
        ad.A.data = rng.normal(0, scale, ad.A.shape)
        ad.B.data = rng.normal(0, scale, ad.B.shape)
        ad.w.data = rng.uniform(-1, 1, ad.w.shape)


def _outputs(model, imgs, txts):
    with no_grad():
        return model.encode_images(imgs).data, model.encode_texts(txts).data


# placement and counting

def test_attach_all_sites_on_two_layer_model():
    model = DualEncoderModel(DualEncoderConfig(), seed=0)
    ads = attach_adapters(model, AdapterConfig(), np.random.default_rng(0))
    assert len(ads) == 24
    assert all(not p.requires_grad for _, p in model.named_parameters())
    trainable = [p for ad in ads for p in ad.parameters()]
    assert all(p.requires_grad for p in trainable)


def test_attach_vision_attention_only():
    model = DualEncoderModel(DualEncoderConfig(), seed=0)
    ads = attach_adapters(model, AdapterConfig(site_filter=["vision-attn"]), np.random.default_rng(0))
    assert len(ads) == 8
    assert {a.target[2] for a in ads} == {"Q", "K", "V", "O"}


def test_attach_twice_is_rejected(tiny_model):
    attach_adapters(tiny_model, AdapterConfig(r_init=2), np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        attach_adapters(tiny_model, AdapterConfig(r_init=2), np.random.default_rng(0))


@pytest.mark.parametrize("bad", [[], ["nowhere"], ["vision.X"], ["audio-attn"]])
def test_bad_site_filters_rejected(bad):
    with pytest.raises(ValueError):
        parse_site_filter(bad)
    with pytest.raises(ValueError):
        AdapterConfig(site_filter=bad)


def test_site_filter_groups():
    assert len(parse_site_filter("all")) == 12
    assert len(parse_site_filter("mlp")) == 4
    assert parse_site_filter(["text", "text.Q"]) == parse_site_filter("text")


def test_vit_b16_parameter_count():
    shapes = adapter_shapes(VIT_B16, 16)
    assert len(shapes) == 144
    assert count_low_rank_parameters(shapes) == 4_423_680
    assert count_parameters(shapes) == 4_425_984
    assert round(count_parameters(shapes) / 1e6, 1) == 4.4


def test_count_single_and_empty():
    rng = np.random.default_rng(0)
    ad = RankSelectiveAdapter.initialize(("vision", 0, "Q"), 768, 768, 16, rng)
    assert count_parameters([ad]) == 24_592
    assert count_parameters([]) == 0


def test_count_matches_attached_adapters():
    cfg = DualEncoderConfig()
    model = DualEncoderModel(cfg, seed=0)
    ads = attach_adapters(model, AdapterConfig(r_init=5), np.random.default_rng(0))
    direct = sum(p.size for ad in ads for p in ad.parameters())
    assert count_parameters(ads) == direct == count_parameters(adapter_shapes(cfg, 5))


# delta

def test_fresh_adapter_has_zero_delta(rng):
    ad = RankSelectiveAdapter.initialize(("text", 1, "FC"), 12, 7, 16, rng)
    assert np.all(delta(ad) == 0)
    assert np.all((ad.w.data > 0) & (ad.w.data < 1))
    assert np.all(np.abs(ad.A.data) <= 1 / np.sqrt(7))


def test_delta_zero_weights(rng):
    ad = _random_adapter(rng)
    ad.w.data[:] = 0
    assert np.all(delta(ad) == 0)


def test_delta_masked_rank(rng):
    ad = _random_adapter(rng, r=2)
    ad.w.data = np.array([1.0, 0.0])
    expect = np.outer(ad.B.data[:, 0], ad.A.data[0])
    np.testing.assert_array_equal(delta(ad), expect)
    ad.B.data[:, 1] += 5.0
    np.testing.assert_array_equal(delta(ad), expect)


@pytest.mark.parametrize("shape", [(6, 6, 4), (3, 9, 1), (10, 4, 7)])
def test_delta_matches_dense_oracle(rng, shape):
    d, k, r = shape
    ad = _random_adapter(rng, d, k, r)
    oracle = ad.B.data @ np.diag(ad.w.data) @ ad.A.data
    assert np.max(np.abs(delta(ad) - oracle)) < 1e-12
    assert np.max(np.abs(ad.delta().data - oracle)) < 1e-12


def test_delta_linearity(rng):
    ad = _random_adapter(rng)
    base = delta(ad)
    ad.w.data = ad.w.data * 2.5
    np.testing.assert_allclose(delta(ad), 2.5 * base, rtol=1e-14, atol=1e-15)


# proximal step

@pytest.mark.parametrize("x,kappa,expect", [(0.012, 0.005, 0.007), (0.003, 0.005, 0.0), (-0.02, 0.005, -0.015)])
def test_shrink_examples(x, kappa, expect):
    assert abs(float(proximal_step(np.array([x]), kappa)[0]) - expect) < 1e-15


def test_paper_literal_mode():
    out = proximal_step(np.array([0.012, 0.003, -0.02]), 0.005, mode="paper_literal")
    np.testing.assert_allclose(out, [0.017, 0.0, -0.025], atol=1e-15)


def test_prox_rejects_negative_kappa_and_unknown_mode():
    with pytest.raises(ValueError):
        proximal_step(np.zeros(3), -1e-3)
    with pytest.raises(ValueError):
        proximal_step(np.zeros(3), 0.1, mode="hard")


def test_shrink_matches_brute_force_grid():
    rng = np.random.default_rng(2024)
    grid = np.arange(-0.06, 0.06 + 5e-6, 1e-5)
    for _ in range(100):
        w_hat = rng.uniform(-0.05, 0.05)
        kappa = rng.uniform(0.0, 0.01)
        objective = kappa * np.abs(grid) + 0.5 * (grid - w_hat) ** 2
        best = grid[np.argmin(objective)]
        assert abs(float(proximal_step(np.array([w_hat]), kappa)[0]) - best) <= 1e-5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(0, 5))
def test_shrink_contracts_toward_zero(xs, kappa):
    x = np.array(xs)
    y = proximal_step(x, kappa)
    assert np.all(np.abs(y) <= np.abs(x))
    assert np.all((np.sign(y) == 0) | (np.sign(y) == np.sign(x)))
    np.testing.assert_array_equal(proximal_step(x, 0.0), x)


# threshold schedule

def test_threshold_examples():
    s = ThresholdSchedule(100, 0.5, 0.005)
    assert threshold_at(s, 25) == 0.0
    assert threshold_at(s, 49) == 0.0
    assert threshold_at(s, 50) == 0.0
    assert threshold_at(s, 99) == 0.005
    assert abs(threshold_at(s, 74) - 0.005 * 24 / 49) < 1e-15
    assert s.is_dense(49) and not s.is_dense(50)


@pytest.mark.parametrize("t", [-1, 100])
def test_threshold_out_of_range(t):
    with pytest.raises(IndexError):
        threshold_at(ThresholdSchedule(100, 0.5, 0.005), t)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.floats(0, 0.99), st.floats(0, 1))
def test_threshold_schedule_invariants(T, rho, kmax):
    s = ThresholdSchedule(T, rho, kmax)
    ks = [s.threshold_at(t) for t in range(T)]
    assert all(k == 0 for k in ks[:s.dense_iters])
    assert all(b >= a for a, b in zip(ks, ks[1:]))
    assert ks[-1] == kmax


def test_schedule_rejects_bad_fields():
    for args in [(0, 0.5, 0.1), (10, 1.0, 0.1), (10, 0.5, -0.1)]:
        with pytest.raises(ValueError):
            ThresholdSchedule(*args)


# prune and merge

def test_prune_exact_zeros(rng):
    ad = _random_adapter(rng, r=3)
    ad.w.data = np.array([0.3, 0.0, 0.1])
    before = delta(ad)
    out, n = prune(ad, 0.0)
    assert n == 2 and out.r_init == 3
    assert out.A.shape == (2, 6) and out.B.shape == (6, 2)
    assert np.max(np.abs(delta(out) - before)) < 1e-12


def test_prune_everything(rng):
    ad = _random_adapter(rng)
    ad.w.data[:] = 0
    out, n = prune(ad)
    assert n == 0 and out.rank == 0
    assert np.all(delta(out) == 0) and delta(out).shape == (6, 6)


def test_prune_random_keeps_delta(rng):
    ad = _random_adapter(rng, 8, 5, 6)
    ad.w.data[[1, 4]] = 0
    out, n = prune(ad)
    assert n == 4 <= ad.r_init
    assert np.max(np.abs(delta(out) - delta(ad))) < 1e-12


def test_merge_identity_and_shape_check(rng):
    W0 = rng.normal(size=(6, 6))
    ad = RankSelectiveAdapter.initialize(("vision", 0, "Q"), 6, 6, 4, rng)
    np.testing.assert_array_equal(merge(W0, ad), W0)
    with pytest.raises(ValueError):
        merge(np.zeros((5, 6)), ad)


def test_merge_equivalence_on_random_inputs(rng):
    model = DualEncoderModel(tiny_model_config(), seed=3)
    attach_adapters(model, AdapterConfig(r_init=4), rng)
    _randomize_adapters(model, rng)
    imgs = rng.integers(0, 16, (32, 6))
    txts = rng.integers(0, 32, (32, 4))
    adapted = _outputs(model, imgs, txts)
    merge_adapters(model)
    assert model.adapters() == []
    merged = _outputs(model, imgs, txts)
    for a, m in zip(adapted, merged):
        assert np.max(np.abs(a - m)) < 1e-9


def test_zero_update_keeps_outputs_exact(rng):
    model = DualEncoderModel(tiny_model_config(), seed=3)
    imgs = rng.integers(0, 16, (8, 6))
    txts = rng.integers(0, 32, (8, 4))
    before = _outputs(model, imgs, txts)
    attach_adapters(model, AdapterConfig(r_init=4), rng)
    _randomize_adapters(model, rng)
    for ad in model.adapters():
        ad.w.data[:] = 0
    merge_adapters(model)
    after = _outputs(model, imgs, txts)
    for b, a in zip(before, after):
        assert b.tobytes() == a.tobytes()


def test_fresh_adapter_after_merge_reproduces_outputs(rng):
    model = DualEncoderModel(tiny_model_config(), seed=3)
    attach_adapters(model, AdapterConfig(r_init=4), rng)
    _randomize_adapters(model, rng)
    merge_adapters(model)
    imgs = rng.integers(0, 16, (8, 6))
    txts = rng.integers(0, 32, (8, 4))
    merged = _outputs(model, imgs, txts)
    attach_adapters(model, AdapterConfig(r_init=4), rng)
    again = _outputs(model, imgs, txts)
    for m, a in zip(merged, again):
        assert m.tobytes() == a.tobytes()
