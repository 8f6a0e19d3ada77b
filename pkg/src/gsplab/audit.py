"""Economic-property measurement.

Three black-box statistics over a mechanism or trained model:
  - T_m: mean Spearman correlation between a bid grid and the resulting
    rank scores (monotonicity of the learned score).
  - PER: ratio of the division-based approximate payment to the exact
    critical bid recovered by bisection.
  - i-SIC: finite-perturbation incentive-compatibility estimate from
    paired bid perturbations with common random numbers (single slot).
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace

import numpy as np

from gsplab.auction import (
    DeepGspMechanism,
    NoCriticalBidError,
    allocate_batch,
    price_exact_binary_search,
)


@dataclass
class AuditConfig:
    bid_grid: int = 20
    bid_lo: float = 0.1   # grid spans [lo*b, hi*b] around the observed bid
    bid_hi: float = 10.0
    alpha: float = 0.01   # i-SIC perturbation
    n_states: int = 200   # T_m test states
    per_rounds: int = 200
    isic_rounds: int = 2000  # paired samples = rounds * advertisers
    seed: int = 0

    def __post_init__(self):
        if self.bid_grid < 2:
            raise ValueError("bid grid needs at least two points")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.bid_lo < 1.0 < self.bid_hi:
            raise ValueError("bid grid must bracket the observed bid")


def _average_ranks(xs):
    xs = np.asarray(xs, dtype=float)
    order = np.argsort(xs, kind="mergesort")
    ranks = np.empty(xs.size)
    sorted_xs = xs[order]
    i = 0
    while i < xs.size:
        j = i
        while j + 1 < xs.size and sorted_xs[j + 1] == sorted_xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(xs, ys):
    """Spearman correlation with average-rank ties.

    Returns None for degenerate (constant) sequences, which callers must
    report separately rather than average in.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ValueError("need two equal-length 1-D sequences of length >= 2")
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        return None
    rx = _average_ranks(xs)
    ry = _average_ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


@dataclass
class MonotonicityResult:
    t_m: float
    n_states: int
    n_degenerate: int


def monotonicity_metric(actor, states, config=AuditConfig()):
    """Mean Spearman rho of rank score vs bid over a per-state bid grid.

    ``states`` is an iterable of (bid, features); the grid spans
    [lo*bid, hi*bid] with config.bid_grid uniform points.
    """
    states = list(states)
    if not states:
        raise ValueError("empty test set")
    rhos, degenerate = [], 0
    for b, x in states:
        bids = np.linspace(config.bid_lo * b, config.bid_hi * b,
                           config.bid_grid)
        pi = actor.multiplier_batch(bids, np.tile(np.asarray(x), (bids.size, 1)))
        rho = spearman_rho(bids, bids * pi)
        if rho is None:
            degenerate += 1
        else:
            rhos.append(rho)
    t_m = float(np.mean(rhos)) if rhos else float("nan")
    return MonotonicityResult(t_m=t_m, n_states=len(rhos),
                              n_degenerate=degenerate)


@dataclass
class PaymentErrorResult:
    mean: float
    p05: float
    p95: float
    n_winners: int
    n_excluded: int


def payment_error_rate(world, mechanism, config=AuditConfig(), tol=1e-6):
    """PER = approximate price / exact bisection price across winners.

    Winners whose exact oracle has no solution (bracketing failure) are
    excluded and counted.
    """
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x9E4)))
    rounds = world.sample_rounds(config.per_rounds, rng)
    scores, pi, off = mechanism.score_batch(rounds.bids, rounds.feats)
    order = allocate_batch(scores, rounds.bids)
    ratios, excluded = [], 0
    for r in range(rounds.n_rounds):
        ranked = order[r]
        for j in range(world.slots):
            i = ranked[j]
            if j + 1 >= len(ranked):
                continue  # no next score; both rules pay the reserve
            target = scores[r, ranked[j + 1]]
            if pi[r, i] <= 1e-9:
                excluded += 1
                continue
            approx = max(0.0, (target - off[r, i]) / pi[r, i])
            bid = rounds.bids[r, i]
            fn = _scalar_score_fn(mechanism, rounds.feats[r, i])
            try:
                exact = price_exact_binary_search(fn, target, max(bid, 1e-9),
                                                  tol_bid=tol * max(bid, 1e-9))
            except NoCriticalBidError:
                excluded += 1
                continue
            if exact <= tol:
                # critical bid at zero: both payments are (near) zero
                if approx <= tol:
                    ratios.append(1.0)
                else:
                    excluded += 1
                continue
            ratios.append(approx / exact)
    if not ratios:
        raise ValueError("no auditable winners")
    arr = np.asarray(ratios)
    return PaymentErrorResult(
        mean=float(arr.mean()),
        p05=float(np.percentile(arr, 5)),
        p95=float(np.percentile(arr, 95)),
        n_winners=arr.size,
        n_excluded=excluded,
    )


def _scalar_score_fn(mechanism, feats):
    if isinstance(mechanism, DeepGspMechanism):
        actor = mechanism.actor
        return lambda z: z * float(actor.multiplier_batch([z], [feats])[0])

    class _Cand:
        pass

    from gsplab.auction import F_PCTR, F_PCVR

    cand = _Cand()
    cand.bid = 0.0
    cand.features = feats
    cand.pctr = float(feats[F_PCTR])
    cand.pcvr = float(feats[F_PCVR])
    cand.ad_id = "audit"
    return mechanism.score_fn(cand)


@dataclass
class IsicResult:
    value: float
    per_advertiser: np.ndarray
    n_samples: int
    alpha: float


def i_sic(mechanism, world, config=AuditConfig(), rng=None, first_price=False):
    """Finite-alpha incentive-compatibility score on a single-slot world.

    For every (round, advertiser), the auction is replayed three times
    with that advertiser bidding v, (1+a)v, (1-a)v while everyone else is
    held fixed (common random numbers).  With u(b) = win(b) * (b - p(b)),

        i-SIC = E[u((1+a)v) - u((1-a)v)] / (2a * E[v * win(v)]).

    A truthful (critical-bid-priced, monotone) mechanism scores 1 up to
    Monte-Carlo error.
    """
    if world.slots != 1:
        raise ValueError("i-SIC is defined on single-slot worlds (K = 1)")
    if config.alpha > 0.05:
        raise ValueError("alpha must be <= 0.05")
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0x151C)))
    rounds = world.sample_rounds(config.isic_rounds, rng)
    values = rounds.values
    a = config.alpha
    n = world.n_advertisers
    util = {}
    win_v = None
    for label, mult in (("up", 1.0 + a), ("base", 1.0), ("down", 1.0 - a)):
        u = np.zeros((rounds.n_rounds, n))
        won = np.zeros((rounds.n_rounds, n), dtype=bool)
        scores, pi, off = mechanism.score_batch(rounds.bids, rounds.feats)
        for i in range(n):
            bids_i = mult * values[:, i]
            s_i, pi_i, off_i = mechanism.score_batch(
                bids_i, rounds.feats[:, i, :])
            sc = scores.copy()
            sc[:, i] = s_i
            bids = rounds.bids.copy()
            bids[:, i] = bids_i
            order = allocate_batch(sc, bids)
            winner = order[:, 0]
            is_win = winner == i
            runner = order[:, 1]
            next_score = sc[np.arange(rounds.n_rounds), runner]
            if first_price:
                price = bids_i
            else:
                with np.errstate(divide="ignore", invalid="ignore"):
                    price = np.maximum(
                        0.0, (next_score - off_i) / np.maximum(pi_i, 1e-300))
            u[:, i] = np.where(is_win, bids_i - price, 0.0)
            won[:, i] = is_win
        util[label] = u
        if label == "base":
            win_v = won
    denom = float(np.mean(values * win_v) * 2.0 * a)
    if abs(denom) < 1e-9:
        raise ZeroDivisionError("i-SIC denominator below 1e-9 (no wins?)")
    numer = util["up"] - util["down"]
    value = float(np.mean(numer) / denom)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_adv_denom = 2.0 * a * np.mean(values * win_v, axis=0)
        per_adv = np.where(per_adv_denom > 1e-12,
                           numer.mean(axis=0) / np.maximum(per_adv_denom, 1e-300),
                           np.nan)
    return IsicResult(value=value, per_advertiser=per_adv,
                      n_samples=rounds.n_rounds * n, alpha=a)


def single_slot_world(world):
    """A copy of the world restricted to one slot (for i-SIC)."""
    from gsplab.simulator import World

    cfg = dc_replace(world.config, slots=1,
                     slot_ctr_factors=(world.config.slot_ctr_factors[0],))
    return World(cfg)
