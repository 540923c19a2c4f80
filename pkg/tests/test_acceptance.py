"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the session summary.
Criteria 4 and 5 share the canonical three-seed pipeline from ``conftest``.
"""
import hashlib
import json

import numpy as np
import pytest

from mulic import cli, nn
from mulic import dataset as siiq
from mulic.cost import (
    CostConfig,
    expected_unlearned_after,
    expected_unlearned_first,
    monte_carlo_oracle,
    p_event_interference,
    pmf_interfered_models,
)
from mulic.errors import BadMagicError, IntegrityError, TruncatedFileError, VersionMismatchError
from mulic.learn import TrainConfig, ensemble_unlearn, shard_dataset, train_ensemble
from mulic.mia import LossSamples, mia_score_from_losses
from mulic.phy import BlockConfig, qpsk_modulate, transmit_block
from mulic.rng import substream
from test_nn import max_rel_fd_error, naive_conv

CASES = ("case1", "case2", "case3", "case4")
MODELS = ("Q", "Q_rr", "Q_un")


# -- 1. gradients -------------------------------------------------------------------


def test_c1_gradient_correctness(acceptance):
    worst = 0.0
    for draw in range(10):
        rng = substream(2024, "acceptance/fd", draw)
        params = nn.init_params(rng)
        x = rng.standard_normal((2, 1, 28, 28))
        y = rng.integers(0, 5, 2)
        worst = max(worst, max_rel_fd_error(params, x, y, rng=rng))
    ok = acceptance("1", worst < 1e-6, f"max relative FD error over 10 draws = {worst:.2e} (< 1e-6)")
    assert ok


# -- 2. convolution oracle ------------------------------------------------------------


def test_c2_conv_oracle(acceptance):
    worst = pointwise = 0.0
    for case in range(20):
        rng = substream(2024, "acceptance/conv", case)
        x = rng.standard_normal((2, 1, 28, 28))
        w = rng.standard_normal((32, 1, 3, 3))
        b = rng.standard_normal(32)
        ref = naive_conv(x, w, b)
        got = nn.conv2d_forward(x, w, b)
        worst = max(worst, float(np.linalg.norm(got - ref) / np.linalg.norm(ref)))
        # entries near zero carry cancellation roundoff, so this one is reported only
        pointwise = max(pointwise, float(np.max(np.abs(got - ref) / np.abs(ref))))
    ok = acceptance("2", worst < 1e-12, f"max tensor relative conv error over 20 cases = {worst:.2e} (< 1e-12); "
                                        f"worst single entry {pointwise:.1e}")
    assert ok


# -- 3. cost closed forms vs Monte Carlo ---------------------------------------------

COST_GRID = (
    CostConfig([0.2, 0.3], K=50, t0=5, M=5),
    CostConfig([0.1, 0.1, 0.1], K=30, t0=3, M=10, cleansed_history=[(10, 1)], nu=1),
    CostConfig([0.5], K=20, t0=2, M=1),
    CostConfig([0.05, 0.1, 0.2, 0.4], K=100, t0=10, M=8, cleansed_history=[(20, 2), (40, 4)], nu=2),
    CostConfig([0.9], K=64, t0=4, M=3),
    CostConfig([0.3, 0.3], K=80, t0=8, M=6, cleansed_history=[(16, 2)], nu=1),
    CostConfig([0.01], K=40, t0=4, M=20),
    CostConfig([0.25] * 4, K=99, t0=9, M=4, cleansed_history=[(11, 1)], nu=1),
    CostConfig([0.6, 0.2], K=45, t0=3, M=2),
    CostConfig([0.15, 0.35, 0.05], K=72, t0=6, M=12, cleansed_history=[(12, 1), (24, 2), (36, 3)], nu=3),
)


def test_c3_cost_closed_forms(acceptance):
    trials = 100_000
    problems = []
    for n, cfg in enumerate(COST_GRID):
        mc = monte_carlo_oracle(cfg, trials=trials, seed=n)
        p = p_event_interference(cfg.user_activity_probs)
        se = np.sqrt(p * (1 - p) / trials)
        if abs(mc["p_event"][0] - p) > 3 * se:
            problems.append(f"cfg{n} p_event {mc['p_event'][0]:.5f} vs {p:.5f}")
        pmf = pmf_interfered_models(cfg.M, p)
        pmf_se = np.sqrt(pmf * (1 - pmf) / trials)
        bad = np.abs(mc["pmf"][0] - pmf) > 3 * pmf_se + 1e-15
        if bad.any():
            problems.append(f"cfg{n} pmf bins {np.flatnonzero(bad).tolist()}")
        for key, closed in (("expected_A1", expected_unlearned_first(cfg.K, cfg.t0)),
                            ("expected_Anu", expected_unlearned_after(cfg))):
            est = mc[key][0]
            if abs(est - closed) > 0.01 * abs(closed):
                problems.append(f"cfg{n} {key} MC {est:.3f} vs {closed:.3f}")
    hand = (p_event_interference([0.3]), p_event_interference([0.5, 0.5]), expected_unlearned_first(2, 1))
    if not (abs(hand[0] - 0.3) < 1e-15 and hand[1] == 0.75 and hand[2] == 1.0):
        problems.append(f"hand values {hand}")
    ok = acceptance("3", not problems, "10-config grid, 1e5 trials: " + ("all within tolerance" if not problems else "; ".join(problems)))
    assert ok


# -- 4. unlearning trend ----------------------------------------------------------------


def _per_seed(runs, fn):
    return {seed: fn(run) for seed, run in runs.items()}


def test_c4a_clean_gain(canonical_runs, acceptance):
    gains = _per_seed(canonical_runs, lambda r: r.accuracy("Q_un", "test_case4") - r.accuracy("Q", "test_case4"))
    ok = acceptance("4a", all(g >= 0.20 for g in gains.values()),
                    "Case-4 acc(Q') - acc(Q) per seed: " + ", ".join(f"{100 * g:+.1f}" for g in gains.values()) + " pts (>= +20)")
    assert ok


def test_c4b_unlearned_matches_relearned(canonical_runs, acceptance):
    diffs = _per_seed(canonical_runs, lambda r: max(abs(r.accuracy("Q_un", f"test_{c}") - r.accuracy("Q_rr", f"test_{c}")) for c in CASES))
    ok = acceptance("4b", all(d <= 0.03 for d in diffs.values()),
                    "max over cases |acc(Q') - acc(Q°)| per seed: " + ", ".join(f"{100 * d:.1f}" for d in diffs.values()) + " pts (<= 3)")
    assert ok


def test_c4c_retain_forget_gap(canonical_runs, acceptance):
    gaps = _per_seed(canonical_runs, lambda r: r.accuracy("Q_un", "retain") - r.accuracy("Q_un", "forget"))
    ok = acceptance("4c", all(g >= 0.30 for g in gaps.values()),
                    "Q' retain - forget per seed: " + ", ".join(f"{100 * g:.1f}" for g in gaps.values()) + " pts (>= 30)")
    assert ok


def test_c4d_heavy_interference(canonical_runs, acceptance):
    worst = _per_seed(canonical_runs, lambda r: max(r.accuracy(m, "test_case3") for m in MODELS))
    ok = acceptance("4d", all(w < 0.35 for w in worst.values()),
                    "max Case-3 accuracy over Q, Q°, Q' per seed: " + ", ".join(f"{100 * w:.1f}" for w in worst.values()) + "% (< 35)")
    assert ok


# -- 5. MIA trend ---------------------------------------------------------------------------


def test_c5a_mia_equivalence(canonical_runs, acceptance):
    diffs = _per_seed(canonical_runs, lambda r: {c: r.mia("Q_un", c) - r.mia("Q_rr", c) for c in CASES})
    worst = max(abs(d) for per in diffs.values() for d in per.values())
    detail = "; ".join(f"seed{s}: " + " ".join(f"{c[-1]}:{d:+.3f}" for c, d in per.items()) for s, per in diffs.items())
    ok = acceptance("5a", worst <= 0.02, f"MIA(Q') - MIA(Q°) by case, max |diff| {worst:.3f} (<= 0.02): {detail}")
    assert ok


def test_c5b_mia_rises(canonical_runs, acceptance):
    rises = _per_seed(canonical_runs, lambda r: {c: r.mia("Q_un", c) - r.mia("Q", c) for c in ("case2", "case4")})
    worst = min(d for per in rises.values() for d in per.values())
    detail = "; ".join(f"seed{s}: case2 {per['case2']:+.3f} case4 {per['case4']:+.3f}" for s, per in rises.items())
    ok = acceptance("5b", worst >= 0.1, f"MIA(Q') - MIA(Q), min {worst:+.3f} (>= 0.1): {detail}")
    assert ok


def test_c5c_null_calibration(acceptance):
    inside = 0
    for t in range(100):
        rng = substream(2024, "acceptance/null", t)
        loss = rng.gamma(2.0, 0.4, 1250)
        member = np.r_[np.zeros(625, int), np.ones(625, int)]
        inside += 0.45 <= mia_score_from_losses(LossSamples(loss, member), k=5, seed=t).score <= 0.55
    ok = acceptance("5c", inside >= 95, f"null MIA score in [0.45, 0.55] in {inside}/100 trials (>= 95)")
    assert ok


# -- 6. physical layer ------------------------------------------------------------------------


def test_c6_physical_layer(acceptance):
    rng = substream(2024, "acceptance/phy")
    x = qpsk_modulate(rng.integers(0, 2, 20_000))
    power_err = float(np.max(np.abs(np.abs(x) ** 2 - 1.0)))

    cfg = BlockConfig(392, 10.0, (-4.0,), noise_variance=0.01)
    ratios = []
    for i in range(10_000):
        blk = transmit_block(substream(2024, "acceptance/offset", i), cfg)
        ratios.append(np.mean(np.abs(blk.h_interferers[0] * blk.tx_symbols[1]) ** 2)
                      / np.mean(np.abs(blk.h_desired * blk.tx_symbols[0]) ** 2))
    offset_err = abs(10 * np.log10(np.mean(ratios)) + 4.0)

    degen = 0.0
    for i in range(1000):
        r = substream(2024, "acceptance/degen", i)
        snr = float(r.uniform(-5, 25))
        blk = transmit_block(r, BlockConfig(16, snr, (), noise_variance=float(r.uniform(0.01, 2))))
        degen = max(degen, abs(blk.realized_sinr_db - blk.realized_snr_db), abs(blk.realized_sinr_db - snr))
    ok = acceptance("6", power_err <= 4e-16 and offset_err < 0.2 and degen < 1e-12,
                    f"QPSK | |x|^2 - 1 | max {power_err:.1e}; offset error {offset_err:.3f} dB (< 0.2); "
                    f"no-interferer SINR vs SNR {degen:.1e} dB")
    assert ok


# -- 7. determinism and formats ------------------------------------------------------------------

DET_CONFIG = {
    "corpus": {"retain_count": 100, "forget_count": 25},
    "cases": [dict(c.to_dict(), sample_count=25) for c in siiq.CANONICAL_CASES],
    "train": {"epochs": 2},
    "finetune_epochs": 2,
    "cost_trials": 10000,
}


def _digest(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_c7_determinism_and_formats(tmp_path, acceptance):
    cfg_path = tmp_path / "det.json"
    cfg_path.write_text(json.dumps(DET_CONFIG))
    a, b = tmp_path / "a", tmp_path / "b"
    rc = [cli.main(["all", "--config", str(cfg_path), "--seed", "7", "--out", str(o)]) for o in (a, b)]
    identical = rc == [0, 0] and _digest(a) == _digest(b)

    ds = siiq.load(a / "siiq.bin")
    siiq.save(ds, tmp_path / "copy.bin")
    siiq_rt = (tmp_path / "copy.bin").read_bytes() == (a / "siiq.bin").read_bytes()
    params, adam = nn.load_checkpoint(a / "models" / "Q.mulc")
    nn.save_checkpoint(tmp_path / "copy.mulc", params, adam)
    ck_rt = (tmp_path / "copy.mulc").read_bytes() == (a / "models" / "Q.mulc").read_bytes()

    raw = (a / "siiq.bin").read_bytes()
    manifest = (a / "siiq.bin.manifest.json").read_text()
    probes = {
        BadMagicError: b"XXXX" + raw[4:],
        VersionMismatchError: raw[:4] + (9).to_bytes(2, "little") + raw[6:],
        TruncatedFileError: raw[:-1],
        IntegrityError: raw + b"\0",
    }
    raised = {}
    for expected, payload in probes.items():
        p = tmp_path / f"bad_{expected.__name__}.bin"
        p.write_bytes(payload)
        siiq.manifest_path(p).write_text(manifest)
        try:
            siiq.load(p)
            raised[expected.__name__] = None
        except Exception as exc:  # noqa: BLE001 - the type is what is checked
            raised[expected.__name__] = type(exc).__name__
    distinct = all(raised[k] == k for k in raised)
    ok = acceptance("7", identical and siiq_rt and ck_rt and distinct,
                    f"`all` twice identical={identical}; SIIQ round-trip={siiq_rt}; checkpoint round-trip={ck_rt}; "
                    f"corruption errors distinct={distinct}")
    assert ok


# -- 8. ensemble selectivity -----------------------------------------------------------------------


def test_c8_ensemble_selectivity(acceptance):
    cfg = siiq.CorpusConfig(retain_count=90, forget_count=15)
    ds = siiq.generate_corpus(cfg, (), seed=5)
    shards = shard_dataset(ds, 3, 1)
    tc = TrainConfig(epochs=1, batch_size=16, seed=2)
    ens = train_ensemble(shards, tc)
    before = [[a.tobytes() for a in m.params_.arrays()] for m in ens.submodels]
    after = ensemble_unlearn(ens, 1, shards, tc, epochs=1)
    now = [[a.tobytes() for a in m.params_.arrays()] for m in after.submodels]
    untouched = now[0] == before[0] and now[2] == before[2]
    changed = now[1] != before[1]
    ok = acceptance("8", untouched and changed, f"M=3, S=1: others byte-identical={untouched}, S modified={changed}")
    assert ok
