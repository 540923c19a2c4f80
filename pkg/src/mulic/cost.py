"""Interference-event probabilities and expected unlearning cost, with a Monte Carlo check.

Notation: ``K`` samples collected over ``t0`` equal time frames, so each
frame holds ``K / t0`` samples; ``M`` models; user ``i + 1`` is active in a
frame with probability ``probs[i]``.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

LOG_DOMAIN_FROM = 60


@dataclass(frozen=True)
class CostConfig:
    user_activity_probs: tuple
    K: int
    t0: int
    M: int = 1
    cleansed_history: tuple = ()
    nu: int = 0

    def __post_init__(self):
        object.__setattr__(self, "user_activity_probs", tuple(float(p) for p in self.user_activity_probs))
        object.__setattr__(self, "cleansed_history", tuple((float(k), float(t)) for k, t in self.cleansed_history))
        _check_probs(self.user_activity_probs)
        if self.K < 1 or self.t0 < 1 or self.M < 1:
            raise ValueError("K, t0 and M must be positive")
        history_terms(self.K, self.t0, self.cleansed_history, self.nu)

    @classmethod
    def from_dict(cls, doc):
        return cls(
            user_activity_probs=doc["user_activity_probs"],
            K=int(doc["K"]),
            t0=int(doc["t0"]),
            M=int(doc.get("M", 1)),
            cleansed_history=tuple(tuple(p) for p in doc.get("cleansed_history", ())),
            nu=int(doc.get("nu", 0)),
        )


@dataclass
class CostReport:
    p_event: float
    pmf: np.ndarray
    expected_A1: float
    expected_Anu: float
    expected_A1_floored: float
    expected_Anu_floored: float
    mc_estimates: dict = field(default_factory=dict)

    def rows(self):
        """(quantity, closed form, MC mean, MC standard error) rows."""
        out = [("P_EI", self.p_event) + tuple(self.mc_estimates.get("p_event", (np.nan, np.nan)))]
        mc_pmf, mc_se = self.mc_estimates.get("pmf", (None, None))
        for m, p in enumerate(self.pmf):
            out.append((f"P_X({m})", p, mc_pmf[m] if mc_pmf is not None else np.nan, mc_se[m] if mc_se is not None else np.nan))
        for key in ("expected_A1", "expected_A1_floored", "expected_Anu", "expected_Anu_floored"):
            out.append((key, getattr(self, key)) + tuple(self.mc_estimates.get(key, (np.nan, np.nan))))
        return out

    def to_json(self):
        def num(x):
            return None if not np.isfinite(x) else round(float(x), 12)

        mc = {}
        for key, val in self.mc_estimates.items():
            if key == "trials":
                continue
            mean, se = val
            if key == "pmf":
                mc[key] = {"mean": [num(v) for v in mean], "se": [num(v) for v in se]}
            else:
                mc[key] = {"mean": num(mean), "se": num(se)}
        doc = {
            "p_event": num(self.p_event),
            "pmf": [num(p) for p in self.pmf],
            "expected_A1": num(self.expected_A1),
            "expected_A1_floored": num(self.expected_A1_floored),
            "expected_Anu": num(self.expected_Anu),
            "expected_Anu_floored": num(self.expected_Anu_floored),
            "monte_carlo": mc,
            "trials": self.mc_estimates.get("trials"),
        }
        return json.dumps(doc, indent=2) + "\n"

    def table(self):
        lines = [f"{'quantity':<22}{'closed form':>16}{'monte carlo':>16}{'std err':>14}"]
        for name, closed, mc, se in self.rows():
            lines.append(f"{name:<22}{closed:>16.6f}{mc:>16.6f}{se:>14.6f}")
        return "\n".join(lines) + "\n"


def _check_probs(probs):
    for p in probs:
        if not 0.0 <= p <= 1.0 or not math.isfinite(p):
            raise ValueError(f"probability {p} outside [0, 1]")


def p_event_interference(probs):
    """Probability that at least one interfering user is active."""
    probs = [float(p) for p in probs]
    _check_probs(probs)
    return 1.0 - math.prod(1.0 - p for p in probs)


def pmf_interfered_models(M, p_event):
    """Binomial pmf of the number of interfered models out of ``M``."""
    if M < 1:
        raise ValueError("M must be >= 1")
    _check_probs([p_event])
    m = np.arange(M + 1)
    log_c = np.array([math.lgamma(M + 1) - math.lgamma(k + 1) - math.lgamma(M - k + 1) for k in m])
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = log_c + _xlogy(m, p_event) + _xlogy(M - m, 1.0 - p_event)
    return np.exp(logp)


def _xlogy(x, y):
    # x * log(y) with 0 * log(0) = 0
    x = np.asarray(x, dtype=np.float64)
    if y == 0.0:
        return np.where(x == 0, 0.0, -np.inf)
    return x * math.log(y)


def _binom_row(n, q):
    """pmf of Binomial(n, q) over j = 0..n; exact integers up to ``LOG_DOMAIN_FROM``."""
    j = np.arange(n + 1)
    if n <= LOG_DOMAIN_FROM:
        c = np.array([math.comb(n, int(k)) for k in j], dtype=np.float64)
        return c * np.power(q, j) * np.power(1.0 - q, n - j)
    log_c = math.lgamma(n + 1) - np.array([math.lgamma(k + 1) + math.lgamma(n - k + 1) for k in j])
    with np.errstate(divide="ignore"):
        return np.exp(log_c + _xlogy(j, q) + _xlogy(n - j, 1.0 - q))


def retrain_count_pmf(i, j, t_eff):
    """Probability that ``j`` of the ``i - 1`` earlier requests hit the same sub-model."""
    if t_eff < 1:
        raise ValueError("t_eff must be >= 1")
    if i < 1 or not 0 <= j <= i - 1:
        raise ValueError(f"need 0 <= j <= i - 1, got i={i}, j={j}")
    return float(_binom_row(i - 1, 1.0 / t_eff)[j])


def _expected_term(K_eff, t_eff, K_requests, floor):
    per_frame = K_eff / t_eff
    q = 1.0 / t_eff
    total = 0.0
    for i in range(1, K_requests + 1):
        pmf = _binom_row(i - 1, q)
        counts = per_frame - 1.0 - np.arange(i)
        if floor:
            counts = np.maximum(counts, 0.0)
        total += float(pmf @ counts)
    return total


def expected_unlearned_first(K, t0, floor=False):
    """Expected retrained samples for the first cancelled user, summed over requests ``i = 1..K``.

    ``floor=True`` clips each per-request count at zero.
    """
    if K < 1 or t0 < 1:
        raise ValueError("K and t0 must be >= 1")
    return _expected_term(K, t0, K, floor)


def history_terms(K, t0, history, nu):
    """Per-cancellation ``(K - K^(n), t0 - t0^(n))`` for ``n = 0..nu``.

    ``history`` lists the cleansed ``(K^(n), t0^(n))`` for ``n = 1..nu``;
    a leading ``(0, 0)`` entry for ``n = 0`` may be included or omitted.
    """
    history = [tuple(map(float, h)) for h in history]
    if nu < 0:
        raise ValueError("nu must be >= 0")
    if len(history) == nu + 1 and history[0] == (0.0, 0.0):
        history = history[1:]
    if len(history) != nu:
        raise ValueError(f"need {nu} cleansed (K, t0) pairs for nu={nu}, got {len(history)}")
    terms = [(float(K), float(t0))]
    for n, (Kn, tn) in enumerate(history, start=1):
        if not 0 <= Kn < K:
            raise ValueError(f"history entry {n}: cleansed samples {Kn} must lie in [0, K)")
        if t0 - tn < 1:
            raise ValueError(f"history entry {n}: t0 - t0^(n) = {t0 - tn} < 1")
        terms.append((K - Kn, t0 - tn))
    return terms


def expected_unlearned_after(cfg, nu=None, floor=False):
    """Expected retrained samples summed over cancellations ``n = 0..nu``."""
    nu = cfg.nu if nu is None else nu
    if not 0 <= nu <= cfg.nu:
        raise ValueError(f"nu={nu} outside 0..{cfg.nu}")
    terms = history_terms(cfg.K, cfg.t0, cfg.cleansed_history, cfg.nu)[:nu + 1]
    return sum(_expected_term(K_eff, t_eff, cfg.K, floor) for K_eff, t_eff in terms)


# -- Monte Carlo ----------------------------------------------------------------


def _mean_se(x):
    x = np.asarray(x, dtype=np.float64)
    return float(x.mean()), float(x.std(ddof=1) / np.sqrt(len(x)))


def _simulate_requests(rng, trials, K_eff, t_eff, K_requests, chunk=2000):
    """Per-trial retrained-sample totals, raw and floored at zero.

    Each request lands on one of ``t_eff`` equally likely sub-models; its
    cost is ``K_eff / t_eff - 1 - j`` where ``j`` counts earlier requests on
    the same sub-model.
    """
    t_int = int(round(t_eff))
    if abs(t_eff - t_int) > 1e-9:
        raise ValueError("Monte Carlo needs an integer number of frames")
    per_frame = K_eff / t_eff
    raw, floored = [], []
    for start in range(0, trials, chunk):
        n = min(chunk, trials - start)
        ids = rng.integers(0, t_int, size=(n, K_requests))
        onehot = ids[:, :, None] == np.arange(t_int)[None, None, :]
        before = np.cumsum(onehot, axis=1) - onehot
        j = np.take_along_axis(before, ids[:, :, None], axis=2)[:, :, 0]
        cost = per_frame - 1.0 - j
        raw.append(cost.sum(axis=1))
        floored.append(np.maximum(cost, 0.0).sum(axis=1))
    return np.concatenate(raw), np.concatenate(floored)


def monte_carlo_oracle(cfg, trials=100_000, seed=0):
    """Simulated estimates (mean, standard error) of every closed-form quantity."""
    if trials < 10_000:
        raise ValueError("use at least 10^4 trials")
    probs = np.array(cfg.user_activity_probs)
    out = {"trials": trials}

    rng = substream(seed, "cost/p_event")
    active = rng.random((trials, len(probs))) < probs
    out["p_event"] = _mean_se(active.any(axis=1))

    rng = substream(seed, "cost/pmf")
    interfered = np.zeros(trials, dtype=np.int64)
    for _ in range(cfg.M):
        interfered += (rng.random((trials, len(probs))) < probs).any(axis=1)
    counts = np.bincount(interfered, minlength=cfg.M + 1) / trials
    out["pmf"] = (counts, np.sqrt(counts * (1.0 - counts) / trials))

    raw, floored = _simulate_requests(substream(seed, "cost/A", 0), trials, cfg.K, cfg.t0, cfg.K)
    out["expected_A1"] = _mean_se(raw)
    out["expected_A1_floored"] = _mean_se(floored)

    raw_tot, floor_tot = raw.copy(), floored.copy()
    for n, (K_eff, t_eff) in enumerate(history_terms(cfg.K, cfg.t0, cfg.cleansed_history, cfg.nu)[1:], start=1):
        r, f = _simulate_requests(substream(seed, "cost/A", n), trials, K_eff, t_eff, cfg.K)
        raw_tot += r
        floor_tot += f
    out["expected_Anu"] = _mean_se(raw_tot)
    out["expected_Anu_floored"] = _mean_se(floor_tot)
    return out


def cost_report(cfg, trials=100_000, seed=0):
    p = p_event_interference(cfg.user_activity_probs)
    return CostReport(
        p_event=p,
        pmf=pmf_interfered_models(cfg.M, p),
        expected_A1=expected_unlearned_first(cfg.K, cfg.t0),
        expected_Anu=expected_unlearned_after(cfg),
        expected_A1_floored=expected_unlearned_first(cfg.K, cfg.t0, floor=True),
        expected_Anu_floored=expected_unlearned_after(cfg, floor=True),
        mc_estimates=monte_carlo_oracle(cfg, trials, seed) if trials else {},
    )
