import hashlib

import numpy as np
import pytest

from vqaug.data import DataError, Dataset
from vqaug.drift import (
    STRATEGIES,
    ArmScores,
    DriftReport,
    DriftScenario,
    RecoveryConfig,
    compare_strategies,
    confidence,
    drifting_gaussians,
    load_scenario,
    recover,
    uncertainty_select,
    write_scenario,
)
from vqaug.evaluation import builtin_classifier
from vqaug.nn import serialize

from conftest import gaussian_dataset


class FixedProba:
    """Positive-class probability equals the first feature."""

    def fit(self, data, seed):
        return self

    def predict_proba(self, x):
        p = np.clip(x[:, 0], 0, 1)
        return np.c_[1 - p, p]


def ramp(n=623):
    d = gaussian_dataset((n - 10, 10))
    x = d.features.copy()
    x[:, 0] = np.linspace(0, 1, n)
    return Dataset(x, d.labels, d.schema)


def digest(model) -> str:
    return hashlib.sha256(serialize.to_bytes(model.to_model_file())).hexdigest()


def test_confidence():
    np.testing.assert_array_equal(confidence(np.array([[0.2, 0.8], [0.6, 0.4]])), [0.8, 0.4])
    np.testing.assert_array_equal(confidence(np.array([[0.2, 0.5, 0.3]])), [0.5])


class TestSelection:
    def test_probe_size(self):
        sel = uncertainty_select(FixedProba(), ramp(623), RecoveryConfig(), seed=0)
        assert sel.probe.size == 6 and len(set(sel.probe)) == 6

    def test_only_uncertain_rows(self):
        d = ramp(2000)
        sel = uncertainty_select(FixedProba(), d, RecoveryConfig(probe_fraction=0.5, budget=2000), seed=1)
        conf = d.features[sel.index, 0]
        assert np.all((conf >= 0.3) & (conf <= 0.7))
        inside = d.features[sel.probe, 0]
        assert sel.index.size == np.count_nonzero((inside >= 0.3) & (inside <= 0.7))

    def test_budget(self):
        sel = uncertainty_select(FixedProba(), ramp(2000), RecoveryConfig(probe_fraction=1.0, budget=64), seed=0)
        assert sel.uncertain.n_samples == 64
        # not simply the lowest-index uncertain rows
        assert sel.index.max() > 0.7 * 2000 - 64

    def test_empty_probe(self):
        with pytest.raises(DataError, match="empty"):
            uncertainty_select(FixedProba(), ramp(40), RecoveryConfig(), seed=0)

    @pytest.mark.parametrize("kw", [dict(probe_fraction=0), dict(lo=0.8, hi=0.2), dict(multiplier=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            RecoveryConfig(**kw)


def test_recover_leaves_generator_untouched(toy):
    before = digest(toy.vqvae), digest(toy.mtm)
    real = toy.train.subset(np.r_[np.flatnonzero(toy.train.labels == 0), np.flatnonzero(toy.train.labels == 1)[:30]])
    u = toy.valid.subset(np.flatnonzero(toy.valid.labels == 1)[:4])
    out = recover(toy.vqvae, toy.mtm, real, u, RecoveryConfig(), seed=0)
    n0 = real.class_counts()[0]
    assert out.class_counts() == {0: n0, 1: n0}
    np.testing.assert_array_equal(out.features[real.n_samples : real.n_samples + 4], u.features)
    assert (digest(toy.vqvae), digest(toy.mtm)) == before


def test_compare_strategies(toy):
    drifted = gaussian_dataset((400, 200), centers=(0.3, 0.55), seed=3)
    scenario = DriftScenario([toy.train, drifted])
    report = compare_strategies(scenario, RecoveryConfig(probe_fraction=0.2), [0, 1], lambda: builtin_classifier(epochs=50), {0: (toy.vqvae, toy.mtm)})
    assert [a.strategy for a in report.arms] == list(STRATEGIES)
    # every arm saw the same uncertain rows
    assert len({tuple(a.n_uncertain) for a in report.arms}) == 1
    assert all(len(a.scores) == 2 and 0 <= a.mean <= 1 for a in report.arms)


def test_best_prior_month(tmp_path):
    arms = [ArmScores("insomnia", 3, k, [v, v]) for k, v in [(0, 0.5), (1, 0.7), (2, 0.7)]]
    report = DriftReport(arms)
    assert report.best("insomnia", 3).prior == 1
    report.write_csv(tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "strategy,month,prior_month,mean_f,std_f"
    assert lines[1].startswith("insomnia,3,1,")
    assert "insomnia" in report.text()


class TestScenario:
    def test_minority_shift(self):
        sc = drifting_gaussians(month_sizes=((500, 500), (500, 500)), shift=0.2, scale=0.01)
        m0, m1 = (m.features[m.labels == 1].mean(axis=0) for m in sc.months)
        np.testing.assert_allclose(m0 - m1, [0.2] * 4 + [0] * 4, atol=0.01)
        b0, b1 = (m.features[m.labels == 0].mean(axis=0) for m in sc.months)
        np.testing.assert_allclose(b0, b1, atol=0.01)

    def test_roundtrip(self, tmp_path):
        sc = drifting_gaussians(month_sizes=((20, 5), (30, 5), (30, 5)))
        sc.recovery_month = 2
        back = load_scenario(write_scenario(sc, tmp_path))
        assert back.recovery_month == 2 and back.targets() == [2]
        for a, b in zip(sc.months, back.months):
            np.testing.assert_array_equal(a.features, b.features)

    def test_rejects_single_month(self):
        with pytest.raises(DataError):
            DriftScenario([gaussian_dataset((3, 3))])

    def test_rejects_mixed_schema(self):
        with pytest.raises(DataError):
            DriftScenario([gaussian_dataset((3, 3)), gaussian_dataset((3, 3), n_features=4)])
