"""Synthetic ad market and feedback oracle.

Replaces proprietary auction logs with a seeded generative world:
advertisers carry ground-truth response rates (click, add-to-cart,
order), valuations are drawn per round from log-normal distributions,
and predicted rates are noisy versions of the truth.  User behavior is
realized with a click-gated funnel, and the five platform metrics (RPM,
CTR, ACR, CVR, GPM) are aggregated from the realized feedback and scaled
to [0,1] by normalizers calibrated on a benchmark-mechanism run.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from gsplab.auction import (
    FEATURE_DIM,
    F_BUDGET,
    F_CATEGORY,
    F_PACR,
    F_PCTR,
    F_PCVR,
    F_PRICE,
    F_USER,
    AdCandidate,
    AuctionRequest,
    GspMechanism,
    allocate_batch,
    price_batch,
)

METRIC_NAMES = ("rpm", "ctr", "acr", "cvr", "gpm")


@dataclass
class WorldConfig:
    """Synthetic market description; fully determines a World given a seed."""

    n_advertisers: int = 8
    slots: int = 3
    slot_ctr_factors: tuple = (1.0, 0.65, 0.45)
    # per-round valuation draw: lognormal(value_mu_i, value_sigma), where
    # value_mu_i is advertiser-specific around value_mu
    value_mu: float = 0.5
    value_sigma: float = 0.4
    value_mu_spread: float = 0.35
    # ground-truth response model
    ctr_alpha: float = 4.0
    ctr_beta: float = 16.0
    cart_given_click_alpha: float = 3.0
    cart_given_click_beta: float = 7.0
    order_given_click_alpha: float = 2.0
    order_given_click_beta: float = 8.0
    price_mu: float = 3.0
    price_sigma: float = 0.5
    # multiplicative log-normal noise on predicted rates
    prediction_noise: float = 0.15
    bidding_mode: str = "truthful"  # or "shaded"
    shade_factor: float = 1.0
    reserve_price: float = 0.0
    # headroom multiplier applied to benchmark metrics when calibrating
    # the [0,1] normalizers
    normalizer_margin: float = 4.0
    calibration_rounds: int = 500
    seed: int = 0

    def __post_init__(self):
        beta = tuple(float(b) for b in self.slot_ctr_factors)
        if len(beta) != self.slots:
            raise ValueError("slot_ctr_factors must have length slots")
        if any(b <= 0 or b > 1 for b in beta):
            raise ValueError("slot factors must lie in (0, 1]")
        if any(b2 > b1 for b1, b2 in zip(beta, beta[1:])):
            raise ValueError("slot factors must be non-increasing")
        if self.bidding_mode not in ("truthful", "shaded"):
            raise ValueError(f"unknown bidding mode {self.bidding_mode!r}")
        object.__setattr__(self, "slot_ctr_factors", beta)


@dataclass
class Rounds:
    """A batch of sampled auction rounds with sealed ground truth."""

    bids: np.ndarray    # (R, N)
    values: np.ndarray  # (R, N)
    feats: np.ndarray   # (R, N, FEATURE_DIM)

    @property
    def n_rounds(self):
        return self.bids.shape[0]


@dataclass
class FeedbackRecord:
    """Realized user behavior for one displayed (ad, slot)."""

    round_id: int
    ad_id: str
    slot: int
    bid: float
    value: float
    price_per_click: float
    clicked: int
    added_to_cart: int
    ordered: int
    merchandise_volume: float

    def __post_init__(self):
        if self.added_to_cart and not self.clicked:
            raise ValueError("cart requires a click")
        if self.ordered and not self.clicked:
            raise ValueError("order requires a click")

    @property
    def payment(self):
        return self.clicked * self.price_per_click


@dataclass
class MetricCounters:
    """Raw feedback counters; merging is plain addition."""

    impressions: int = 0
    clicks: int = 0
    carts: int = 0
    orders: int = 0
    revenue: float = 0.0
    gmv: float = 0.0

    def __add__(self, other):
        return MetricCounters(
            self.impressions + other.impressions,
            self.clicks + other.clicks,
            self.carts + other.carts,
            self.orders + other.orders,
            self.revenue + other.revenue,
            self.gmv + other.gmv,
        )

    def raw_metrics(self):
        """(rpm, ctr, acr, cvr, gpm) before [0,1] normalization."""
        if self.impressions == 0:
            return np.zeros(5)
        imp = float(self.impressions)
        return np.array([
            self.revenue / imp * 1000.0,
            self.clicks / imp,
            self.carts / imp,
            self.orders / imp,
            self.gmv / imp * 1000.0,
        ])


@dataclass
class MetricsRecord:
    """Normalized metrics in [0,1] plus the raw counters behind them."""

    rpm: float
    ctr: float
    acr: float
    cvr: float
    gpm: float
    impressions: int
    clicks: int
    orders: int
    degenerate: bool = False  # zero impressions

    def as_vector(self):
        return np.array([self.rpm, self.ctr, self.acr, self.cvr, self.gpm])


def compute_metrics(records, normalizers):
    """Aggregate a batch of FeedbackRecords into a MetricsRecord."""
    counters = MetricCounters()
    for r in records:
        counters = counters + MetricCounters(
            impressions=1, clicks=r.clicked, carts=r.added_to_cart,
            orders=r.ordered, revenue=r.clicked * r.price_per_click,
            gmv=r.merchandise_volume,
        )
    return metrics_from_counters(counters, normalizers)


def metrics_from_counters(counters, normalizers):
    raw = counters.raw_metrics()
    norm = np.minimum(raw / np.asarray(normalizers, dtype=float), 1.0)
    return MetricsRecord(
        *norm,
        impressions=counters.impressions,
        clicks=counters.clicks,
        orders=counters.orders,
        degenerate=counters.impressions == 0,
    )


def scalarize(metrics, weights):
    """F = sum_j w_j f_j over the five normalized metrics."""
    w = np.asarray(weights, dtype=float)
    if w.shape != (5,):
        raise ValueError("expected five metric weights")
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {w.sum()}")
    vec = metrics.as_vector() if isinstance(metrics, MetricsRecord) else np.asarray(metrics)
    return float(w @ vec)


def advertiser_utility(records):
    """Per-period utility sum over clicks of (value - price_per_click)."""
    return float(sum(r.clicked * (r.value - r.price_per_click) for r in records))


class World:
    """A sampled market: ground-truth rates per advertiser plus normalizers.

    Construction is fully determined by (config, config.seed): advertiser
    rates and metric normalizers never change afterwards, so two worlds
    built from equal configs behave identically.
    """

    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence(config.seed))
        n = config.n_advertisers
        self.n_advertisers = n
        self.slots = config.slots
        self.beta = np.asarray(config.slot_ctr_factors, dtype=float)
        self.true_ctr = rng.beta(config.ctr_alpha, config.ctr_beta, size=n)
        cart_cond = rng.beta(config.cart_given_click_alpha,
                             config.cart_given_click_beta, size=n)
        order_cond = rng.beta(config.order_given_click_alpha,
                              config.order_given_click_beta, size=n)
        self.true_acr = self.true_ctr * cart_cond
        self.true_cvr = self.true_ctr * order_cond
        self.price = rng.lognormal(config.price_mu, config.price_sigma, size=n)
        self.value_mu = config.value_mu + config.value_mu_spread * rng.standard_normal(n)
        self.ad_ids = [f"ad_{i:03d}" for i in range(n)]
        self.normalizers = np.ones(5)
        self._calibrate()

    # -- sampling -----------------------------------------------------------

    def sample_rounds(self, n_rounds, rng):
        """Draw valuations, bids, and noisy predictions for n_rounds."""
        cfg = self.config
        n = self.n_advertisers
        values = rng.lognormal(self.value_mu, cfg.value_sigma, size=(n_rounds, n))
        if cfg.bidding_mode == "shaded":
            bids = cfg.shade_factor * values
        else:
            bids = values.copy()
        feats = np.empty((n_rounds, n, FEATURE_DIM))
        for idx, true in ((F_PCTR, self.true_ctr), (F_PACR, self.true_acr),
                          (F_PCVR, self.true_cvr)):
            if cfg.prediction_noise > 0:
                noise = np.exp(cfg.prediction_noise * rng.standard_normal((n_rounds, n))
                               - 0.5 * cfg.prediction_noise**2)
            else:
                noise = 1.0
            feats[:, :, idx] = np.clip(true * noise, 0.0, 1.0)
        feats[:, :, F_PRICE] = self.price
        feats[:, :, F_BUDGET] = 1.0
        feats[:, :, F_CATEGORY] = np.arange(n) / max(n - 1, 1)
        feats[:, :, F_USER] = rng.standard_normal((n_rounds, 1))
        return Rounds(bids=bids, values=values, feats=feats)

    def sample_request(self, rng):
        """One auction request plus its sealed ground truth."""
        rounds = self.sample_rounds(1, rng)
        cands = [
            AdCandidate(self.ad_ids[i], float(rounds.bids[0, i]),
                        rounds.feats[0, i], value=float(rounds.values[0, i]))
            for i in range(self.n_advertisers)
        ]
        request = AuctionRequest(cands, self.slots, self.beta)
        truth = {
            "true_ctr": self.true_ctr, "true_acr": self.true_acr,
            "true_cvr": self.true_cvr, "price": self.price,
            "values": rounds.values[0],
        }
        return request, truth

    # -- feedback ------------------------------------------------------------

    def realize_batch(self, winners, rng):
        """Draw click/cart/order bits for (R, K) winner index array."""
        click_p = self.beta[None, :] * self.true_ctr[winners]
        clicks = rng.random(winners.shape) < click_p
        with np.errstate(divide="ignore", invalid="ignore"):
            cart_cond = np.minimum(
                np.where(self.true_ctr > 0, self.true_acr / np.maximum(self.true_ctr, 1e-300), 0.0), 1.0)
            order_cond = np.minimum(
                np.where(self.true_ctr > 0, self.true_cvr / np.maximum(self.true_ctr, 1e-300), 0.0), 1.0)
        carts = clicks & (rng.random(winners.shape) < cart_cond[winners])
        orders = clicks & (rng.random(winners.shape) < order_cond[winners])
        return clicks, carts, orders

    def simulate_feedback(self, outcome, truth, rng):
        """Object-level feedback for one AuctionOutcome (losers: no record)."""
        id_to_idx = {a: i for i, a in enumerate(self.ad_ids)}
        winners = np.array([[id_to_idx[ad] for ad, _s, _p in outcome.winners]])
        clicks, carts, orders = self.realize_batch(winners, rng)
        records = []
        for j, (ad, slot, price) in enumerate(outcome.winners):
            i = id_to_idx[ad]
            ordered = int(orders[0, j])
            records.append(FeedbackRecord(
                round_id=0, ad_id=ad, slot=slot,
                bid=float(truth["values"][i] if self.config.bidding_mode == "truthful"
                          else self.config.shade_factor * truth["values"][i]),
                value=float(truth["values"][i]),
                price_per_click=float(price),
                clicked=int(clicks[0, j]),
                added_to_cart=int(carts[0, j]),
                ordered=ordered,
                merchandise_volume=ordered * float(self.price[i]),
            ))
        return records

    # -- vectorized episode runner -------------------------------------------

    def play(self, rounds, mechanism, rng, collect_log=False):
        """Run the mechanism on sampled rounds and realize feedback.

        Returns a dict with counters, per-advertiser utilities and win
        counts, plus the allocation arrays (for reuse by trainer/audits).
        """
        scores, pi, off = mechanism.score_batch(rounds.bids, rounds.feats)
        order = allocate_batch(scores, rounds.bids)
        prices = price_batch(order, scores, pi, off, self.slots,
                             self.config.reserve_price)
        return self.settle(rounds, scores, order, prices, rng,
                           collect_log=collect_log)

    def settle(self, rounds, scores, order, prices, rng, collect_log=False):
        """Realize feedback for precomputed allocations and aggregate."""
        winners = order[:, :self.slots]
        clicks, carts, orders_ = self.realize_batch(winners, rng)
        rows = np.arange(rounds.n_rounds)[:, None]
        win_values = rounds.values[rows, winners]
        gmv = orders_ * self.price[winners]
        counters = MetricCounters(
            impressions=int(winners.size),
            clicks=int(clicks.sum()),
            carts=int(carts.sum()),
            orders=int(orders_.sum()),
            revenue=float((clicks * prices).sum()),
            gmv=float(gmv.sum()),
        )
        utility = np.zeros(self.n_advertisers)
        wins = np.zeros(self.n_advertisers, dtype=int)
        np.add.at(utility, winners.ravel(),
                  (clicks * (win_values - prices)).ravel())
        np.add.at(wins, winners.ravel(), 1)
        out = {
            "counters": counters, "utility": utility, "wins": wins,
            "scores": scores, "order": order, "prices": prices,
            "clicks": clicks, "carts": carts, "orders": orders_,
        }
        if collect_log:
            log = []
            for r in range(rounds.n_rounds):
                for j in range(self.slots):
                    i = winners[r, j]
                    log.append((r, self.ad_ids[i], j + 1,
                                rounds.bids[r, i], rounds.values[r, i],
                                rounds.feats[r, i, F_PCTR], scores[r, i],
                                prices[r, j], int(clicks[r, j]),
                                int(carts[r, j]), int(orders_[r, j]),
                                float(gmv[r, j])))
            out["log"] = log
        return out

    def evaluate(self, mechanism, n_rounds, seed):
        """Metrics and per-advertiser utilities over a fresh seeded episode."""
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        rounds = self.sample_rounds(n_rounds, rng)
        played = self.play(rounds, mechanism, rng)
        metrics = metrics_from_counters(played["counters"], self.normalizers)
        return metrics, played["utility"]

    def benchmark_utilities(self, mechanism, n_rounds, rng):
        """Mean per-round utility vector over n_rounds of the benchmark."""
        if n_rounds < 1:
            raise ValueError("need at least one benchmark round")
        rounds = self.sample_rounds(n_rounds, rng)
        played = self.play(rounds, mechanism, rng)
        return played["utility"] / n_rounds

    # -- calibration -----------------------------------------------------------

    def _calibrate(self):
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xCA11)))
        rounds = self.sample_rounds(cfg.calibration_rounds, rng)
        played = self.play(rounds, GspMechanism(sigma=1.0), rng)
        raw = played["counters"].raw_metrics()
        self.normalizers = np.maximum(cfg.normalizer_margin * raw, 1e-9)


# ---------------------------------------------------------------------------
# Config file and CSV I/O


def save_world_config(config, path):
    parser = configparser.ConfigParser()
    parser["world"] = {
        k: (",".join(str(x) for x in v) if isinstance(v, tuple) else str(v))
        for k, v in dataclasses.asdict(config).items()
    }
    with open(path, "w") as fh:
        parser.write(fh)


def load_world_config(path):
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    sect = parser["world"]
    kwargs = {}
    for f in dataclasses.fields(WorldConfig):
        if f.name not in sect:
            continue
        raw = sect[f.name]
        if f.name == "slot_ctr_factors":
            kwargs[f.name] = tuple(float(x) for x in raw.split(","))
        elif f.type in ("int", int):
            kwargs[f.name] = int(raw)
        elif f.type in ("float", float):
            kwargs[f.name] = float(raw)
        else:
            kwargs[f.name] = raw
    return WorldConfig(**kwargs)


EPISODE_COLUMNS = ("round", "ad_id", "slot", "bid", "value", "pctr", "score",
                   "ppc", "clicked", "carted", "ordered", "gmv")


def write_episode_csv(path, log_rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPISODE_COLUMNS)
        writer.writerows(log_rows)
