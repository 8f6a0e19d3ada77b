import numpy as np
import pytest

from gsplab.audit import (
    AuditConfig,
    i_sic,
    monotonicity_metric,
    payment_error_rate,
    single_slot_world,
    spearman_rho,
)
from gsplab.auction import FEATURE_DIM, DeepGspMechanism, GspMechanism


class ConstantActor:
    """Bid-independent multiplier; the division price is exact."""

    def __init__(self, c=0.7):
        self.c = c

    def multiplier_batch(self, bids, feats):
        return np.full(np.asarray(bids, dtype=float).shape, self.c)


class DecayActor:
    """pi = exp(-b), so the rank score b * exp(-b) peaks at b = 1."""

    def multiplier_batch(self, bids, feats):
        return np.exp(-np.asarray(bids, dtype=float))


# ---------------------------------------------------------------------------
# Spearman correlation


def test_spearman_perfect_agreement():
    assert spearman_rho([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)


def test_spearman_perfect_reversal():
    assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)


def test_spearman_one_swap():
    assert spearman_rho([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8)


def test_spearman_constant_sequence_is_none():
    assert spearman_rho([1, 2, 3], [5, 5, 5]) is None
    assert spearman_rho([2, 2, 2], [1, 2, 3]) is None


def test_spearman_average_ranks_for_ties():
    # ys ranks: [1, 2.5, 2.5, 4]; centered dot with xs ranks gives 0.9487
    rho = spearman_rho([1, 2, 3, 4], [0.0, 1.0, 1.0, 2.0])
    rx = np.array([1, 2, 3, 4], dtype=float)
    ry = np.array([1.0, 2.5, 2.5, 4.0])
    rx -= rx.mean()
    ry -= ry.mean()
    expected = (rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry))
    assert rho == pytest.approx(expected)


def test_spearman_validation():
    with pytest.raises(ValueError):
        spearman_rho([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        spearman_rho([1], [1])


def test_audit_config_validation():
    with pytest.raises(ValueError):
        AuditConfig(bid_grid=1)
    with pytest.raises(ValueError):
        AuditConfig(alpha=0.0)
    with pytest.raises(ValueError):
        AuditConfig(alpha=1.0)
    with pytest.raises(ValueError):
        AuditConfig(bid_lo=1.5)


# ---------------------------------------------------------------------------
# Monotonicity metric


def _states(n=5):
    rng = np.random.default_rng(0)
    return [(float(b), rng.uniform(0, 1, FEATURE_DIM))
            for b in rng.uniform(0.5, 2.0, n)]


def test_monotonicity_constant_multiplier_is_one():
    result = monotonicity_metric(ConstantActor(), _states())
    assert result.t_m == pytest.approx(1.0)
    assert result.n_states == 5
    assert result.n_degenerate == 0


def test_monotonicity_matches_brute_force_grid():
    config = AuditConfig(bid_grid=20, bid_lo=0.1, bid_hi=10.0)
    states = _states(4)
    result = monotonicity_metric(DecayActor(), states, config)

    def rank(v):
        order = np.argsort(v)
        r = np.empty(v.size)
        r[order] = np.arange(1, v.size + 1)
        return r

    rhos = []
    for b, _x in states:
        grid = np.linspace(0.1 * b, 10.0 * b, 20)
        scores = grid * np.exp(-grid)
        rg, rs = rank(grid), rank(scores)
        rhos.append(np.corrcoef(rg, rs)[0, 1])
    assert result.t_m == pytest.approx(np.mean(rhos), abs=1e-12)
    assert result.t_m < 0.5  # the humped score is far from monotone


def test_monotonicity_counts_degenerate_states():
    class ZeroActor:
        def multiplier_batch(self, bids, feats):
            return np.zeros(np.asarray(bids).shape)

    result = monotonicity_metric(ZeroActor(), _states(3))
    assert result.n_degenerate == 3
    assert np.isnan(result.t_m)


def test_monotonicity_rejects_empty_test_set():
    with pytest.raises(ValueError):
        monotonicity_metric(ConstantActor(), [])


# ---------------------------------------------------------------------------
# Payment error rate


def test_per_constant_multiplier_is_exact(small_world):
    config = AuditConfig(per_rounds=50)
    mech = DeepGspMechanism(ConstantActor())
    result = payment_error_rate(small_world, mech, config)
    assert result.mean == pytest.approx(1.0, abs=1e-4)
    assert result.p05 == pytest.approx(1.0, abs=1e-4)
    assert result.p95 == pytest.approx(1.0, abs=1e-4)
    assert result.n_excluded == 0
    assert result.n_winners == 50 * small_world.slots


def test_per_gsp_is_exact(small_world):
    config = AuditConfig(per_rounds=50)
    result = payment_error_rate(small_world, GspMechanism(1.0), config)
    assert result.mean == pytest.approx(1.0, abs=1e-4)


def test_per_deterministic(small_world):
    config = AuditConfig(per_rounds=30, seed=7)
    a = payment_error_rate(small_world, GspMechanism(0.7), config)
    b = payment_error_rate(small_world, GspMechanism(0.7), config)
    assert a == b


# ---------------------------------------------------------------------------
# Incentive compatibility


@pytest.fixture(scope="module")
def one_slot(small_world):
    return single_slot_world(small_world)


def test_single_slot_world_shape(small_world, one_slot):
    assert one_slot.slots == 1
    assert one_slot.config.slot_ctr_factors == (
        small_world.config.slot_ctr_factors[0],)
    assert one_slot.n_advertisers == small_world.n_advertisers


def test_isic_gsp_is_truthful(one_slot):
    config = AuditConfig(alpha=0.01, isic_rounds=10_000)
    result = i_sic(GspMechanism(1.0), one_slot, config)
    assert result.value == pytest.approx(1.0, abs=0.02)
    assert result.n_samples == 10_000 * one_slot.n_advertisers


def test_isic_first_price_below_second_price(one_slot):
    config = AuditConfig(alpha=0.01, isic_rounds=4000)
    second = i_sic(GspMechanism(1.0), one_slot, config)
    first = i_sic(GspMechanism(1.0), one_slot, config, first_price=True)
    # paying the bid makes u(b) = 0 identically, so the score collapses
    assert first.value == pytest.approx(0.0, abs=1e-9)
    assert first.value < second.value


def test_isic_requires_single_slot(small_world):
    if small_world.slots == 1:
        pytest.skip("fixture world already has one slot")
    with pytest.raises(ValueError):
        i_sic(GspMechanism(1.0), small_world)


def test_isic_rejects_large_alpha(one_slot):
    with pytest.raises(ValueError):
        i_sic(GspMechanism(1.0), one_slot, AuditConfig(alpha=0.05001))


def test_isic_deterministic(one_slot):
    config = AuditConfig(alpha=0.01, isic_rounds=1000, seed=3)
    a = i_sic(GspMechanism(1.0), one_slot, config)
    b = i_sic(GspMechanism(1.0), one_slot, config)
    assert a.value == b.value
    assert np.array_equal(a.per_advertiser, b.per_advertiser,
                          equal_nan=True)
