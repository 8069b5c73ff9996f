import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snaplabel.errors import DomainError
from snaplabel.mask_filter import (FilterConfig, filter_flags, filter_masks,
                                   mask_scoring_loss, stability_filter)
from snaplabel.scene_io import InstanceMask, MaskSet


def test_loss_hand_example():
    # gamma * 0.5^2 + (0.7 - 0.9)^2 = 0.1 * 0.25 + 0.04
    val = mask_scoring_loss([(0.7, 0.9)], [0.5], gamma=0.1)
    assert val == pytest.approx(0.065, abs=1e-12)


def test_loss_zero_at_perfect_prediction():
    assert mask_scoring_loss([(0.3, 0.3), (1.0, 1.0)], [], gamma=0.1) == 0.0
    assert mask_scoring_loss([(0.3, 0.3)], [0.0, 0.0], gamma=5.0) == 0.0


def test_loss_gamma_zero_drops_unmatched():
    with_unmatched = mask_scoring_loss([(0.5, 0.6)], [0.9, 0.8], gamma=0.0)
    without = mask_scoring_loss([(0.5, 0.6)], [], gamma=0.0)
    assert with_unmatched == without


def test_loss_no_unmatched_independent_of_gamma(rng):
    matched = [(rng.random(), rng.random()) for _ in range(5)]
    a = mask_scoring_loss(matched, [], gamma=0.0)
    b = mask_scoring_loss(matched, [], gamma=123.0)
    assert a == b


def test_loss_rejects_out_of_range():
    with pytest.raises(DomainError):
        mask_scoring_loss([(1.2, 0.5)], [], gamma=0.1)
    with pytest.raises(DomainError):
        mask_scoring_loss([], [-0.1], gamma=0.1)
    with pytest.raises(DomainError):
        mask_scoring_loss([], [], gamma=-1.0)


def test_loss_matches_hand_computation(rng):
    for _ in range(20):
        matched = [(rng.random(), rng.random()) for _ in range(rng.integers(0, 6))]
        unmatched = [rng.random() for _ in range(rng.integers(0, 6))]
        gamma = float(rng.random())
        expect = gamma * sum(u * u for u in unmatched) \
            + sum((m - g) ** 2 for m, g in matched)
        assert mask_scoring_loss(matched, unmatched, gamma) == pytest.approx(expect, abs=1e-12)


# ---------------------------------------------------------------------------
# stability

def _soft_mask(values):
    return InstanceMask(np.arange(len(values)), soft_values=np.asarray(values, dtype=float))


def test_stability_all_ones_is_stable():
    assert stability_filter(_soft_mask([1.0] * 10), alpha=0.05) is True


def test_stability_band_values_unstable():
    # all soft values inside (tau - alpha, tau + alpha): upper binarization empty
    m = _soft_mask([0.48, 0.5, 0.52])
    assert stability_filter(m, alpha=0.05, tau=0.5) is False


def test_stability_missing_soft_passes():
    m = InstanceMask(np.arange(5))
    assert stability_filter(m, alpha=0.05) is True


def test_stability_matches_set_oracle(rng):
    for _ in range(50):
        vals = rng.random(int(rng.integers(1, 40)))
        alpha, tau, thr = 0.1, 0.5, 0.8
        got = stability_filter(_soft_mask(vals), alpha=alpha, tau=tau, stability_iou=thr)
        lower = {i for i, v in enumerate(vals) if v >= tau - alpha}
        upper = {i for i, v in enumerate(vals) if v >= tau + alpha}
        if not upper:
            want = False
        else:
            want = len(lower & upper) / len(lower | upper) >= thr
        assert got == want


# ---------------------------------------------------------------------------
# filter_masks

def _mask(n, score=None, soft=None, offset=0):
    return InstanceMask(np.arange(offset, offset + n),
                        soft_values=soft, quality_score=score)


def test_beta_threshold():
    masks = MaskSet([_mask(100, score=0.4), _mask(100, score=0.6, offset=100)])
    kept = filter_masks(masks, FilterConfig(beta=0.5, n_min=1))
    assert len(kept) == 1
    assert kept.masks[0].quality_score == 0.6


def test_scoreless_masks_pass_beta():
    masks = MaskSet([_mask(100)])
    kept = filter_masks(masks, FilterConfig(beta=0.99, n_min=1))
    assert len(kept) == 1


def test_n_min_drops_small_masks():
    masks = MaskSet([_mask(5), _mask(50, offset=5)])
    kept = filter_masks(masks, FilterConfig(n_min=10))
    assert len(kept) == 1
    assert len(kept.masks[0]) == 50


def test_order_preserved():
    masks = MaskSet([_mask(60, score=0.9), _mask(5, offset=60), _mask(70, score=0.7, offset=65)])
    kept = filter_masks(masks, FilterConfig(beta=0.5, n_min=10))
    assert [m.quality_score for m in kept] == [0.9, 0.7]


def _random_mask_set(rng, n_masks=12):
    masks = []
    offset = 0
    for _ in range(n_masks):
        n = int(rng.integers(1, 120))
        soft = rng.random(n) if rng.random() < 0.5 else None
        score = float(rng.random()) if rng.random() < 0.7 else None
        masks.append(_mask(n, score=score, soft=soft, offset=offset))
        offset += n
    return MaskSet(masks)


def test_filter_is_conjunction_of_three(rng):
    cfg = FilterConfig(beta=0.45, alpha=0.07, stability_iou=0.75, n_min=30)
    for _ in range(10):
        masks = _random_mask_set(rng)
        flags = filter_flags(masks, cfg)
        for m, f in zip(masks, flags):
            a = m.quality_score is None or m.quality_score >= cfg.beta
            b = stability_filter(m, cfg.alpha, cfg.tau, cfg.stability_iou)
            c = len(m) >= cfg.n_min
            assert f == (a and b and c)


@given(beta1=st.floats(0, 1), beta2=st.floats(0, 1), n1=st.integers(0, 200),
       n2=st.integers(0, 200), seed=st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_raising_thresholds_never_grows_kept_set(beta1, beta2, n1, n2, seed):
    rng = np.random.default_rng(seed)
    masks = _random_mask_set(rng, n_masks=8)
    lo = FilterConfig(beta=min(beta1, beta2), n_min=min(n1, n2))
    hi = FilterConfig(beta=max(beta1, beta2), n_min=max(n1, n2))
    kept_lo = set(i for i, f in enumerate(filter_flags(masks, lo)) if f)
    kept_hi = set(i for i, f in enumerate(filter_flags(masks, hi)) if f)
    assert kept_hi <= kept_lo


def test_filter_idempotent(rng):
    cfg = FilterConfig(beta=0.5, n_min=20)
    masks = _random_mask_set(rng)
    once = filter_masks(masks, cfg)
    twice = filter_masks(once, cfg)
    assert len(once) == len(twice)
    for a, b in zip(once, twice):
        np.testing.assert_array_equal(a.point_indices, b.point_indices)


def test_config_validation():
    with pytest.raises(DomainError):
        FilterConfig(alpha=0.6)
    with pytest.raises(DomainError):
        FilterConfig(tau=0.96, alpha=0.05)
    with pytest.raises(DomainError):
        FilterConfig(beta=1.5)
    with pytest.raises(DomainError):
        FilterConfig(gamma=-0.1)
