import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meatvit import autograd as ag
from meatvit.autograd import Tensor, grad_check
from meatvit.errors import ConfigError, ContractError, FormatError
from meatvit.meat import (
    HEADER_BYTES,
    GumbelSampler,
    TaskMaskSet,
    binarize,
    binarize_logits,
    deserialize_masks,
    drop_control_loss,
    init_mask_params,
    overhead_report,
    sample_relaxed_mask,
    serialize_masks,
    total_loss,
)
from meatvit.vit import ViTConfig, ViTModel

DESK = ViTConfig()
SMALL = ViTConfig(image_size=8, patch_size=4, channels=3, embed_dim=8, heads=2, layers=2, ffn_hidden=12)


def random_mask_set(cfg, rng, task_id=1, classes=None):
    classes = classes or int(rng.integers(2, 12))
    n, d, h = cfg.num_tokens, cfg.embed_dim, cfg.ffn_hidden
    return TaskMaskSet(
        task_id=task_id,
        config=cfg,
        token_bits=[rng.random(n) < 0.7 for _ in range(cfg.layers)],
        ffn1_bits=[rng.random((d, h)) < 0.5 for _ in range(cfg.layers)],
        ffn2_bits=[rng.random((h, d)) < 0.5 for _ in range(cfg.layers)],
        head_weight=rng.normal(size=(d, classes)),
        head_bias=rng.normal(size=classes),
        seed=int(rng.integers(0, 2**63)),
        epochs=int(rng.integers(1, 100)),
    )


# ---------------------------------------------------------------- init


def test_init_logits_within_gamma():
    p = init_mask_params(DESK, gamma=4.0, seed=0)
    for t in p.tensors():
        assert t.data.min() >= -4.0 and t.data.max() <= 4.0


def test_init_same_seed_identical():
    a = init_mask_params(SMALL, 4.0, seed=5)
    b = init_mask_params(SMALL, 4.0, seed=5)
    for x, y in zip(a.tensors(), b.tensors()):
        np.testing.assert_array_equal(x.data, y.data)


def test_init_empirical_mean_near_zero():
    # the desk config holds 4 * (16 + 2 * 8192) * 2 > 1e5 logits
    p = init_mask_params(DESK, 4.0, seed=11)
    flat = np.concatenate([t.data.ravel() for t in p.tensors()])
    assert flat.size >= 100_000
    assert abs(flat[:100_000].mean()) < 0.05


@pytest.mark.parametrize("gamma", [0.0, -1.0])
def test_init_rejects_nonpositive_gamma(gamma):
    with pytest.raises(ConfigError):
        init_mask_params(SMALL, gamma, seed=0)


# ---------------------------------------------------------------- relaxed sampling


def test_relaxed_equal_logits_pinned_noise_is_half():
    m = sample_relaxed_mask(Tensor([0.3, 0.3]), 1.0, GumbelSampler(pinned=0.0))
    assert m.item() == 0.5


def test_relaxed_large_gap_close_to_one():
    m = sample_relaxed_mask(Tensor([10.0, -10.0]), 1.0, GumbelSampler(pinned=0.0)).item()
    assert 1 - 1e-8 < m < 1.0


@pytest.mark.parametrize("tau", [0.0, -0.5])
def test_relaxed_rejects_nonpositive_tau(tau):
    with pytest.raises(ConfigError):
        sample_relaxed_mask(Tensor([0.0, 0.0]), tau, GumbelSampler(0))


def test_sampler_same_seed_same_stream():
    a, b = GumbelSampler(42), GumbelSampler(42)
    np.testing.assert_array_equal(a.sample((5, 2)), b.sample((5, 2)))


@settings(max_examples=100, deadline=None)
@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(0.2, 5.0), st.integers(0, 2**32 - 1))
def test_relaxed_values_strictly_inside_unit_interval(l1, l2, tau, seed):
    m = sample_relaxed_mask(Tensor([l1, l2]), tau, GumbelSampler(seed)).item()
    assert 0.0 < m < 1.0


def test_relaxed_gradient_wrt_logits():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.uniform(-2, 2, size=(6, 2)))
    noise = GumbelSampler(3).sample((6, 2))
    proj = rng.normal(size=6)

    class Fixed(GumbelSampler):
        def sample(self, shape):
            return noise

    f = lambda t: ag.tensor_sum(ag.mul(sample_relaxed_mask(t, 0.7, Fixed()), proj))
    assert grad_check(f, logits) < 1e-6


def test_hard_decision_frequency_follows_logistic_law():
    l1, l2 = 0.8, -0.4
    sampler = GumbelSampler(7)
    draws = sample_relaxed_mask(Tensor(np.tile([l1, l2], (10_000, 1))), 0.1, sampler).data
    p = 1 / (1 + math.exp(-(l1 - l2)))
    se = math.sqrt(p * (1 - p) / 10_000)
    assert abs((draws > 0.5).mean() - p) < 3 * se


# ---------------------------------------------------------------- binarize


@pytest.mark.parametrize("pair, bit", [((0.3, -0.2), 1), ((-1.0, 2.0), 0), ((0.7, 0.7), 1)])
def test_binarize_argmax_and_tie_break(pair, bit):
    assert binarize_logits(np.array(pair)) == bit


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=20),
       st.floats(1e-3, 1e3))
def test_binarize_invariant_to_positive_rescaling(pairs, c):
    logits = np.array(pairs)
    np.testing.assert_array_equal(binarize_logits(logits), binarize_logits(logits * c))


def test_binarize_params_shapes_and_values():
    p = init_mask_params(SMALL, 4.0, seed=1)
    head = (Tensor(np.zeros((8, 3))), Tensor(np.zeros(3)))
    s = binarize(p, 1, head)
    assert [b.shape for b in s.token_bits] == [(4,), (4,)]
    assert s.ffn1_bits[0].shape == (8, 12) and s.ffn2_bits[1].shape == (12, 8)
    assert all(b.dtype == bool for b in s.token_bits + s.ffn1_bits + s.ffn2_bits)


# ---------------------------------------------------------------- losses


def test_drop_control_all_ones():
    for layers in (1, 4, 12):
        loss = drop_control_loss([np.ones(16)] * layers, 0.9).item()
        assert loss == (0.9 - 1.0) ** 2
        assert abs(loss - 0.01) < 1e-15


def test_drop_control_two_layers():
    masks = [np.full(16, 0.9), np.full(16, 0.7)]
    assert drop_control_loss(masks, 0.9).item() == pytest.approx(0.02, abs=1e-15)


def test_drop_control_zero_at_target():
    assert drop_control_loss([np.full(8, 0.9)] * 3, 0.9).item() == pytest.approx(0.0, abs=1e-30)


def test_drop_control_rejects_empty():
    with pytest.raises(ContractError):
        drop_control_loss([], 0.9)


def test_drop_control_gradient_pushes_mean_toward_lambda():
    low = Tensor(np.full(4, 0.5), requires_grad=True)
    high = Tensor(np.full(4, 0.99), requires_grad=True)
    ag.backward(drop_control_loss([low, high], 0.9))
    assert np.all(low.grad < 0)     # descending raises the low layer's mean
    assert np.all(high.grad > 0)


def test_total_loss_alpha_zero_is_cross_entropy():
    logits = Tensor(np.array([[0.2, -0.1, 0.5]]))
    ce = ag.cross_entropy(logits, [2]).item()
    assert total_loss(logits, [2], [np.full(4, 0.3)], alpha=0.0).item() == ce


def test_total_loss_weighted_sum():
    # a logit gap with L_ce = 0.5: softmax([x, 0])[0] = exp(-0.5)
    x = math.log(math.exp(-0.5) / (1 - math.exp(-0.5)))
    logits = Tensor(np.array([[x, 0.0]]))
    assert ag.cross_entropy(logits, [0]).item() == pytest.approx(0.5, abs=1e-14)
    masks = [np.ones(16)]       # L_dc = 0.01
    assert total_loss(logits, [0], masks, alpha=2.0, lam=0.9).item() == pytest.approx(0.52, abs=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_full_objective_gradient_small_model(seed):
    rng = np.random.default_rng(seed)
    model = ViTModel.init(SMALL, seed)
    model.freeze()
    head = (Tensor(rng.normal(size=(8, 3))), Tensor(rng.normal(size=3)))
    params = init_mask_params(SMALL, 4.0, seed=seed)
    x = rng.uniform(size=(2, 3, 8, 8))
    y = np.array([0, 2])
    noise = {id(t): GumbelSampler(seed + 100).sample(t.shape) for t in params.tensors()}

    class Fixed(GumbelSampler):
        def __init__(self):
            super().__init__(0)
            self.queue = []

        def sample(self, shape):
            return self.queue.pop(0)

    def objective(_):
        s = Fixed()
        s.queue = [noise[id(t)] for l in range(SMALL.layers)
                   for t in (params.token_logits[l], params.ffn1_logits[l], params.ffn2_logits[l])]
        views = params.relaxed(s)
        logits = model.forward(x, 1, views, head=head)
        return total_loss(logits, y, [v.token_weights for v in views], 2.0, 0.9)

    for target in (params.token_logits[0], params.ffn1_logits[1], params.ffn2_logits[0]):
        idx = [tuple(rng.integers(0, s) for s in target.shape) for _ in range(6)]
        assert grad_check(objective, target, step=1e-5, indices=idx) < 1e-4
        target.grad = None


# ---------------------------------------------------------------- serialization


def test_mask_roundtrip_bytes_identical():
    rng = np.random.default_rng(0)
    for _ in range(10):
        s = random_mask_set(SMALL, rng)
        raw = serialize_masks(s)
        back = deserialize_masks(raw, SMALL)
        assert serialize_masks(back) == raw
        for a, b in zip(s.ffn1_bits, back.ffn1_bits):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(back.head_weight, s.head_weight)


def test_token_bits_desk_config_take_eight_bytes():
    rng = np.random.default_rng(1)
    s = random_mask_set(DESK, rng, classes=10)
    raw = serialize_masks(s)
    # token block of layer l sits right after the header and the previous layers
    per_layer = 2 + 1024 + 1024
    token_bytes = sum(len(raw[HEADER_BYTES + l * per_layer: HEADER_BYTES + l * per_layer + 2])
                      for l in range(DESK.layers))
    assert token_bytes == 8
    assert len(raw) == HEADER_BYTES + 8200 + 8 * (64 * 10 + 10)
    back = deserialize_masks(raw, DESK)
    for a, b in zip(s.token_bits, back.token_bits):
        np.testing.assert_array_equal(a, b)


def test_corrupted_magic_rejected():
    raw = bytearray(serialize_masks(random_mask_set(SMALL, np.random.default_rng(2))))
    raw[3] ^= 0xFF
    with pytest.raises(FormatError, match="magic"):
        deserialize_masks(bytes(raw), SMALL)


def test_digest_mismatch_rejected():
    raw = serialize_masks(random_mask_set(SMALL, np.random.default_rng(3)))
    other = ViTConfig(image_size=8, patch_size=4, channels=3, embed_dim=8, heads=4, layers=2, ffn_hidden=12)
    with pytest.raises(FormatError, match="digest"):
        deserialize_masks(raw, other)


@pytest.mark.parametrize("cut", [1, 20, 100])
def test_truncated_mask_file_rejected(cut):
    raw = serialize_masks(random_mask_set(SMALL, np.random.default_rng(4)))
    with pytest.raises(FormatError):
        deserialize_masks(raw[:-cut], SMALL)


def test_trailing_bytes_rejected():
    raw = serialize_masks(random_mask_set(SMALL, np.random.default_rng(5)))
    with pytest.raises(FormatError, match="trailing"):
        deserialize_masks(raw + b"\0", SMALL)


def test_activation_ratio_popcount():
    rng = np.random.default_rng(6)
    s = random_mask_set(DESK, rng)
    bits = np.zeros(16, dtype=bool)
    bits[:12] = True
    s.token_bits = [bits.copy() for _ in range(4)]      # 48 of 64 bits set
    ratios = s.activation_ratios()["token"]
    assert np.mean(ratios) == 0.75


# ---------------------------------------------------------------- overhead


def test_overhead_desk_config():
    r = overhead_report(DESK, 3, [10, 10, 10])
    assert r.mask_bits_per_task == 4 * (16 + 8192 + 8192) == 65_600
    assert r.mask_payload_bytes_per_task == 8_200
    assert r.head_bytes == [8 * (640 + 10)] * 3


def test_overhead_predicts_serialized_size():
    rng = np.random.default_rng(7)
    s = random_mask_set(DESK, rng, classes=7)
    r = overhead_report(DESK, 1, [7])
    assert len(serialize_masks(s)) == r.mask_file_bytes[0]


def test_overhead_zero_tasks():
    r = overhead_report(DESK, 0, [])
    assert r.meat_total_bytes == r.backbone_bytes
    assert r.mask_bits_per_task == 0 and r.mask_file_bytes == []


def test_overhead_backbone_bytes_match_model():
    assert overhead_report(DESK, 0, []).backbone_bytes == ViTModel.init(DESK, 0).backbone_bytes()


def test_individual_multiplier_structure():
    r = overhead_report(DESK, 6, [10] * 6)
    expected = (7 * r.backbone_bytes + sum(r.head_bytes)) / (r.backbone_bytes + sum(r.head_bytes))
    assert r.individual_multiplier == pytest.approx(expected)
    assert 6.8 < r.individual_multiplier < 7.0


def test_large_backbone_mask_overhead_range():
    # 224px, 12-layer, 192-wide backbone with six new tasks: reference sizes are 23 MB
    # (heads only) and 25 MB (with masks), each rounded to whole MB, so the gap is in [1, 3] MB
    large = ViTConfig(image_size=224, patch_size=16, channels=3, embed_dim=192, heads=3,
                      layers=12, ffn_hidden=768)
    r = overhead_report(large, 6, [100] * 6)
    added_mb = (r.meat_total_bytes - r.classifier_total_bytes) / 2**20
    mask_mb = 6 * r.mask_payload_bytes_per_task / 2**20
    assert 1.0 <= mask_mb <= 3.0
    assert added_mb > mask_mb       # heads are stored inside the mask files too
