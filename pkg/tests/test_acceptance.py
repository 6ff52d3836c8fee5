"""Exit criteria. Each test prints one PASS/FAIL line; the lines are repeated in the terminal summary."""
import hashlib
import json
import math
import time

import numpy as np
import pytest
import scipy.special
import scipy.stats
from click.testing import CliRunner

from vqaug import kernels
from vqaug.cli import main
from vqaug.data import Dataset, Schema, plan_balance, stratified_split
from vqaug.drift import RecoveryConfig, compare_strategies, drifting_gaussians
from vqaug.evaluation import (
    Scorer,
    builtin_classifier,
    cv_reliability,
    dunn_test,
    kruskal_wallis,
    mark,
    rank_methods,
    run_trials,
)
from vqaug.evaluation.classifier import softmax_loss_and_grad
from vqaug.mtm import MtmConfig, MtmModel, random_masks, train_mtm, train_mtm_tokens, masked_cross_entropy
from vqaug.nn import finite_diff_check, serialize
from vqaug.synthesis import balance_nimai, balance_smote, nimai_c, nimai_s
from vqaug.vqvae import VqvaeConfig, VqvaeModel, codebook_usage, quantize, train_vqvae

from conftest import gaussian_dataset, make_cli_project

pytestmark = pytest.mark.acceptance


@pytest.mark.criterion(1)
def test_gradients(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    errors = {}

    m = VqvaeModel(VqvaeConfig(5, 3, latent_length=4, model_dim=8, n_heads=2, ff_width=16, codebook_size=8, code_dim=3), 0)
    x, c = rng.random((6, 5)), rng.integers(0, 3, 6)

    def vq(quantizer):
        def f():
            m.params.zero_grad()
            losses, *_ = m.forward_backward(x, c, quantizer=quantizer)
            return losses.total, m.params.grad
        return f

    # the encoder sees the loss through a straight-through quantizer; the identity
    # quantizer makes that path differentiable for the numeric check
    enc = np.arange(m.enc_in.param_range[0], m.enc_out.param_range[1])
    dec = np.arange(m.dec_in.param_range[0], m.dec_out.param_range[1])
    errors["encoder"] = finite_diff_check(vq("identity"), m.params.data, 1e-4, enc)
    errors["decoder"] = finite_diff_check(vq("nearest"), m.params.data, 1e-4, dec)

    mt = MtmModel(MtmConfig(4, 8, 3, model_dim=8, n_heads=2, ff_width=16, n_layers=1), 0)
    mt.params.data[:] += np.random.default_rng(3).normal(scale=0.3, size=mt.params.size)  # leave the zero head
    tok, y = rng.integers(0, 8, (5, 4)), rng.integers(0, 3, 5)
    mask = random_masks(rng, 5, 4, np.full(5, 0.5))
    seq = np.where(mask, mt.mask_id, tok)

    def prior():
        mt.params.zero_grad()
        return mt.forward_backward(seq, y, tok, mask), mt.params.grad

    errors["mtm"] = finite_diff_check(prior, mt.params.data, 1e-4)

    theta = rng.normal(size=5 * 3 + 3)
    xx, yy = rng.random((20, 5)), rng.integers(0, 3, 20)
    errors["classifier"] = finite_diff_check(lambda: softmax_loss_and_grad(theta, xx, yy, 3, 1e-4), theta, 1e-4)

    elapsed = time.perf_counter() - t0
    ok = max(errors.values()) < 1e-3 and elapsed < 60
    criterion(ok, ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f"; {elapsed:.1f}s")
    assert ok


@pytest.mark.criterion(2)
def test_quantizer_oracle(criterion):
    rng = np.random.default_rng(0)
    mismatches, n = 0, 0
    for K in (2, 8, 64):
        for _ in range(334 if K != 64 else 332):
            d = int(rng.integers(1, 6))
            z = rng.normal(size=(int(rng.integers(1, 12)), d))
            book = rng.normal(size=(K, d))
            brute = np.array([min(range(K), key=lambda k: (float(np.sum((row - book[k]) ** 2)), k)) for row in z])
            tok, *_ = quantize(z, book, beta=1.0)
            idx, _ = kernels.nearest_codes(z, book)
            ref, _ = kernels.pure_python().nearest_codes(z, book)
            mismatches += int(not (np.array_equal(tok, brute) and np.array_equal(idx, brute) and np.array_equal(ref, brute)))
            n += 1
    ok = n == 1000 and mismatches == 0
    criterion(ok, f"{n} instances, {mismatches} mismatches ({kernels.BACKEND} and numpy backends)")
    assert ok


@pytest.mark.criterion(3)
def test_full_ratio_identity(criterion, toy):
    rng = np.random.default_rng(3)
    rows = rng.choice(toy.train.n_samples, 50, replace=False)
    seeds = rng.integers(0, 2**31, 50)
    equal = 0
    for i, s in zip(rows, seeds):
        x, c = toy.train.features[i], int(toy.train.labels[i])
        equal += nimai_s(toy.vqvae, toy.mtm, x, c, 1.0, seed=int(s)).tobytes() == nimai_c(toy.vqvae, toy.mtm, c, seed=int(s)).tobytes()
    criterion(equal == 50, f"{equal}/50 anchor/seed pairs bitwise equal")
    assert equal == 50


@pytest.mark.criterion(4)
def test_balance_arithmetic(criterion):
    checks = {
        "BGP": (plan_balance({0: 163, 1: 17}).total, 146),
        "Tor": (plan_balance({0: 6932, 1: 1183}).total, 5749),
        "IoT": (plan_balance({0: 43866 - 1116, 1: 1116}).total, 41634),
    }
    # 9 classes, 434 training rows, largest class 117: any such split needs 9 * 117 - 434 rows
    rng = np.random.default_rng(0)
    for trial in range(20):
        rest = rng.multinomial(434 - 117 - 8, np.ones(8) / 8) + 1
        while rest.max() > 117:
            rest = rng.multinomial(434 - 117 - 8, np.ones(8) / 8) + 1
        counts = {0: 117, **{i + 1: int(v) for i, v in enumerate(rest)}}
        checks[f"MS-Malware#{trial}"] = (plan_balance(counts).total, 619)
    bad = {k: v for k, v in checks.items() if v[0] != v[1]}
    criterion(not bad, "BGP 146, Tor 5,749, IoT 41,634, MS-Malware 619" + (f"; mismatched {bad}" if bad else ""))
    assert not bad


# (method, dataset, mean, std, mark) with × for model failures, which the CV rule does not decide
STATIC_GAINS = [
    ("Nimai-S", "IoT", 17.37, 0.28, "↑"), ("Nimai-S", "BGP", 32.61, 3.76, "↑"), ("Nimai-S", "MS", 6.89, 6.47, "↑"),
    ("Nimai-C", "IoT", 3.93, 0.68, "↑"), ("Nimai-C", "BGP", 27.65, 0.81, "↑"), ("Nimai-C", "MS", 11.67, 5.15, "↑"),
    ("TVAE", "IoT", 2.02, 0.66, "↑"), ("TVAE", "BGP", -20.83, 3.22, "↓"), ("TVAE", "MS", 11.32, 5.86, "↑"),
    ("TabSyn", "IoT", -0.69, 1.21, "−"), ("TabSyn", "BGP", -2.78, 5.94, "−"), ("TabSyn", "MS", None, None, "×"),
    ("GReaT", "IoT", None, None, "×"), ("GReaT", "BGP", -71.7, 2.56, "↓"), ("GReaT", "MS", None, None, "×"),
    ("REaLTabFormer", "IoT", None, None, "×"), ("REaLTabFormer", "BGP", -15.35, 5.37, "↓"), ("REaLTabFormer", "MS", None, None, "×"),
    ("CTAB-GAN+", "IoT", 5.84, 1.18, "↑"), ("CTAB-GAN+", "BGP", 14.83, 4.07, "↑"), ("CTAB-GAN+", "MS", 13.53, 3.92, "↑"),
    ("TabDDPM", "IoT", -38.01, 0.00, "×"), ("TabDDPM", "BGP", 0.51, 6.76, "−"), ("TabDDPM", "MS", 14.34, 0.37, "↑"),
    ("SMOTE", "IoT", 14.23, 0.23, "↑"), ("SMOTE", "BGP", 12.63, 4.56, "↑"), ("SMOTE", "MS", -0.22, 0.38, "−"),
    ("MC-CCR", "IoT", 0.27, 0.37, "−"), ("MC-CCR", "BGP", -8.64, 0.66, "↓"), ("MC-CCR", "MS", -0.15, 0.18, "−"),
]
_MONTHS = (2, 3, 5, 6, 7, 9, 10, 11)
_T4 = {
    "Nimai-S": ("2.43 7.75 -", "-3.64 5.42 -", "36.68 21.60 ↑", "30.45 15.69 ↑", "2.10 4.41 -", "8.00 12.66 -", "6.84 5.27 ↑", "4.03 11.49 -"),
    "Nimai-C": ("6.88 3.16 ↑", "5.57 4.78 ↑", "59.42 8.69 ↑", "28.24 21.25 ↑", "4.34 3.47 ↑", "21.73 11.32 ↑", "10.23 2.60 ↑", "12.77 2.01 ↑"),
    "TVAE": ("-10.05 10.01 ↓", "-8.81 10.34 -", "52.09 18.00 ↑", "50.06 20.81 ↑", "-7.71 12.43 -", "19.65 9.06 ↑", "-4.70 15.67 -", "-16.64 17.09 -"),
    "TabSyn": ("-11.10 5.23 ↓", "-16.77 5.67 ↓", "15.77 10.86 ↑", "13.84 12.73 ↑", "-7.09 9.86 -", "-14.49 8.49 ↓", "-13.20 15.98 -", "-20.98 25.20 -"),
    "CTAB-GAN+": ("1.98 6.72 -", "0.39 7.37 -", "55.99 21.87 ↑", "45.45 33.85 ↑", "1.59 1.64 -", "14.09 15.36 -", "3.70 4.20 -", "-5.29 3.45 ↓"),
    "TabDDPM": ("-2.02 2.46 -", "-2.71 2.09 ↓", "27.20 9.81 ↑", "18.96 3.77 ↑", "2.57 0.45 ↑", "-0.63 1.05 -", "10.45 0.42 ↑", "0.03 0.37 -"),
    "SMOTE": ("-3.38 1.44 ↓", "-3.00 2.69 ↓", "10.96 11.77 -", "5.45 6.72 -", "1.78 0.96 ↑", "0.45 1.43 -", "3.27 4.29 -", "0.13 0.19 -"),
    "MC-CCR": ("-2.14 5.79 -", "-2.55 2.03 ↓", "-0.05 9.91 -", "1.70 5.56 -", "-1.39 5.35 -", "0.72 1.49 -", "-4.55 9.98 -", "-7.82 15.93 -"),
}
MONTHLY_GAINS = [
    (meth, f"month {mo}", float(cell.split()[0]), float(cell.split()[1]), cell.split()[2].replace("-", "−"))
    for meth, cells in _T4.items()
    for mo, cell in zip(_MONTHS, cells)
]


@pytest.mark.criterion(5)
def test_reliability_marks(criterion):
    decided = [r for r in STATIC_GAINS + MONTHLY_GAINS if r[4] != "×"]
    wrong = [(m, d, mu, s, want, mark(mu, s)) for m, d, mu, s, want in decided if mark(mu, s) != want]
    examples = [cv_reliability(17.37, 0.28)[1], cv_reliability(-0.69, 1.21)[1], cv_reliability(0.51, 6.76)[1]]
    ok = not wrong and examples == [True, False, False] and len(decided) == 24 + 64
    criterion(ok, f"{len(decided)} cells checked, {len(wrong)} mismatches" + (f": {wrong[:3]}" if wrong else ""))
    assert ok


@pytest.mark.criterion(6)
def test_vqvae_fit(criterion):
    data = gaussian_dataset((250, 250), n_features=8)
    train, valid = stratified_split(data, 0.8, seed=0)
    cfg = VqvaeConfig(8, 2, latent_length=8, model_dim=16, n_heads=2, ff_width=32, codebook_size=32, code_dim=4, max_epochs=2000)
    t0 = time.perf_counter()
    model, history = train_vqvae(train, valid, cfg, seed=0)
    elapsed = time.perf_counter() - t0
    recon = model.evaluate(valid).recon
    usage = codebook_usage(model, valid)
    epochs = len(history.split("valid"))
    ok = recon < 0.01 and epochs <= 2000 and elapsed < 300 and usage.perplexity >= 2 and not usage.collapsed
    criterion(ok, f"valid recon {recon:.5f} after {epochs} epochs in {elapsed:.0f}s, perplexity {usage.perplexity:.1f}")
    assert ok


@pytest.mark.criterion(7)
def test_mtm_learnability(criterion):
    K, L, C = 16, 8, 4
    rng = np.random.default_rng(0)

    def tokens(n):
        y = rng.integers(0, C, n)
        return (3 * y[:, None] + 5 * np.arange(L)[None]) % K, y

    (t, y), (vt, vy) = tokens(600), tokens(200)
    cfg = MtmConfig(L, K, C, model_dim=32, n_layers=1, max_epochs=60)
    fresh = MtmModel(cfg, 0)
    mask = random_masks(rng, len(vt), L, np.full(len(vt), 0.5))
    seq = np.where(mask, fresh.mask_id, vt)
    untrained, _ = masked_cross_entropy(fresh.logits(seq, vy), vt, mask)
    model, _ = train_mtm_tokens(t, y, vt, vy, cfg, seed=0)
    pred = model.logits(seq, vy).argmax(-1)
    acc = float((pred[mask] == vt[mask]).mean())
    gap = abs(untrained - math.log(K))
    ok = acc >= 0.95 and gap <= 1e-9
    criterion(ok, f"masked accuracy {acc:.3f}; untrained loss - ln K = {gap:.1e}")
    assert ok


def _imbalanced(n0, n1, seed, n_features=16, shift=0.1, scale=0.1):
    rng = np.random.default_rng(seed)
    y = np.r_[np.zeros(n0, int), np.ones(n1, int)]
    mu = np.where(y[:, None] == 0, 0.5 - shift / 2, 0.5 + shift / 2)
    x = np.clip(mu + rng.normal(scale=scale, size=(y.size, n_features)), 0, 1)
    return Dataset(x, y, Schema(tuple(f"f{i}" for i in range(n_features)), "label", ("majority", "minority")))


@pytest.mark.criterion(8)
def test_end_to_end_gain(criterion):
    t0 = time.perf_counter()
    train, test = _imbalanced(500, 25, seed=0), _imbalanced(500, 500, seed=1)
    tr, va = stratified_split(train, 0.8, seed=0)
    vqvae, _ = train_vqvae(tr, va, VqvaeConfig(16, 2, latent_length=8, model_dim=32, codebook_size=64, code_dim=4), seed=0, max_epochs=200)
    mtm, _ = train_mtm(vqvae, tr, va, MtmConfig(8, 64, 2, model_dim=32, n_layers=1), seed=0, max_epochs=100)
    plan = plan_balance(train.class_counts())
    scorer = Scorer(target_class=1)
    arms = {
        "Nimai-S": lambda d, s: balance_nimai(vqvae, mtm, d, plan, seed=s, mode="sample", ratio=0.5),
        "SMOTE": lambda d, s: balance_smote(d, plan, seed=s),
    }
    results = {k: run_trials(train, test, g, builtin_classifier, range(10), scorer) for k, g in arms.items()}
    report = rank_methods({k: r.gains for k, r in results.items()})
    elapsed = time.perf_counter() - t0
    s = results["Nimai-S"]
    # the report only carries a Dunn matrix after a significant omnibus test; build it regardless
    pairwise = report.pairwise if report.pairwise is not None else dunn_test([r.gains for r in results.values()], require_significant=False)
    dunn_ok = pairwise.shape == (2, 2) and np.allclose(pairwise, pairwise.T)
    ok = s.mean > 0 and s.cv < 1 and len(results["SMOTE"].gains) == 10 and "H" in report.text() and dunn_ok and elapsed < 1800
    mean, std = s.percent()
    sm, ss = results["SMOTE"].percent()
    criterion(ok, f"Nimai-S gain {mean:.1f}% ({std:.1f}), CV {s.cv:.2f}; SMOTE {sm:.1f}% ({ss:.1f}); KW p={report.p:.3f}, Dunn p={pairwise[0, 1]:.3f}; {elapsed:.0f}s")
    assert ok


def _reference_kw(groups):
    pooled = [v for g in groups for v in g]
    n = len(pooled)

    def rank(v):
        return sum(w < v for w in pooled) + (sum(w == v for w in pooled) + 1) / 2

    h = 12 / (n * (n + 1)) * sum(sum(rank(v) for v in g) ** 2 / len(g) for g in groups) - 3 * (n + 1)
    ties = [pooled.count(v) for v in set(pooled)]
    h /= 1 - sum(t**3 - t for t in ties) / (n**3 - n)
    return h, scipy.special.gammaincc((len(groups) - 1) / 2, h / 2)


@pytest.mark.criterion(9)
def test_statistical_oracles(criterion):
    rng = np.random.default_rng(0)
    worst, n = 0.0, 0
    while n < 100:
        groups = [list(rng.integers(0, 15, int(rng.integers(2, 9))).astype(float)) for _ in range(int(rng.integers(2, 6)))]
        if len({v for g in groups for v in g}) == 1:
            continue
        h, p = kruskal_wallis(groups)
        rh, rp = _reference_kw(groups)
        sh, sp = scipy.stats.kruskal(*groups)
        worst = max(worst, abs(h - rh), abs(p - rp), abs(h - sh), abs(p - sp))
        n += 1
    h, p = kruskal_wallis([[1, 2, 3], [101, 102, 103], [201, 202, 203]])
    hand = abs(h - 7.2) < 1e-12 and abs(p - math.exp(-3.6)) < 1e-12
    mat = dunn_test([rng.normal(size=8), rng.normal(3, 1, 8), rng.normal(6, 1, 8)])
    structure = np.allclose(mat, mat.T) and np.all(np.diag(mat) == 1.0)
    same = [1.0, 2.0, 3.0, 4.0, 5.0]
    ident = dunn_test([same, list(same), [50, 60, 70, 80, 90]])[0, 1]
    ok = worst < 1e-9 and hand and structure and abs(ident - 1.0) < 1e-9
    criterion(ok, f"100 KW instances, max deviation {worst:.1e}; H=7.2 p=e^-3.6 {hand}; Dunn symmetric/unit diagonal {structure}; identical pair p={ident:.6f}")
    assert ok


def _digest(model) -> str:
    return hashlib.sha256(serialize.to_bytes(model.to_model_file())).hexdigest()


@pytest.mark.criterion(10)
def test_drift_recovery(criterion, tmp_path):
    scenario = drifting_gaussians()
    train, valid = stratified_split(scenario.months[0], 0.8, seed=0)
    vqvae, _ = train_vqvae(train, valid, VqvaeConfig(8, 2, latent_length=8, model_dim=32, codebook_size=64, code_dim=4), seed=0, max_epochs=150)
    mtm, _ = train_mtm(vqvae, train, valid, MtmConfig(8, 64, 2, model_dim=32, n_layers=1), seed=0, max_epochs=100)
    vqvae.save(tmp_path / "vqvae.bin")
    mtm.save(tmp_path / "mtm.bin")
    before = [serialize.checksum(tmp_path / "vqvae.bin"), serialize.checksum(tmp_path / "mtm.bin")]
    config = RecoveryConfig(multiplier=5, budget=64)
    report = compare_strategies(scenario, config, range(10), builtin_classifier, {0: (vqvae, mtm)})
    after = [_digest(vqvae), _digest(mtm)]
    arms = {a.strategy: a for a in report.arms}
    gain = 100 * (arms["nimai-hybrid"].mean - arms["no-recovery"].mean)
    shared = arms["insomnia"].n_uncertain == arms["nimai-hybrid"].n_uncertain
    within = max(arms["nimai-hybrid"].n_uncertain) <= 64
    ok = gain >= 5 and shared and within and before == after
    criterion(
        ok,
        f"hybrid {100 * arms['nimai-hybrid'].mean:.1f} vs no-recovery {100 * arms['no-recovery'].mean:.1f} "
        f"(+{gain:.1f} points); labeled rows per seed {arms['nimai-hybrid'].n_uncertain}; "
        f"same set for insomnia {shared}; generator checksums unchanged {before == after}",
    )
    assert ok


@pytest.mark.criterion(11)
def test_cli_replay(criterion, tmp_path):
    root = tmp_path / "in"
    root.mkdir()
    make_cli_project(root)
    runs = [
        ("ingest", "m.json", []),
        ("train", "m.json", []),
        ("synth", "m.json", []),
        ("augment", "m.json", []),
        ("eval", "m.json", ["--workers", "2"]),
        ("drift", "drift.json", []),
        ("hpo", "hpo.json", []),
        ("report", "m.json", ["--table", str(root / "table.csv")]),
    ]
    runner = CliRunner()
    failures = []
    for cmd, manifest, extra in runs:
        out, again = tmp_path / cmd / "a", tmp_path / cmd / "b"
        r = runner.invoke(main, [cmd, "--manifest", str(root / manifest), "--out", str(out), *extra])
        if r.exit_code:
            failures.append(f"{cmd} exit {r.exit_code}")
            continue
        r = runner.invoke(main, ["replay", str(out / "run.json"), "--out", str(again)])
        recorded = json.loads((out / "run.json").read_text())["artifacts"]
        same = all((out / p).read_bytes() == (again / p).read_bytes() for p in recorded)
        same = same and (out / "run.json").read_bytes() == (again / "run.json").read_bytes()
        if r.exit_code or not same:
            failures.append(f"{cmd} replay differs")
    ok = not failures
    criterion(ok, f"{len(runs)} commands replayed byte-identically" if ok else "; ".join(failures))
    assert ok
