import hashlib
import json
import math

import numpy as np
import pytest

from vqaug.hpo import (
    Choice,
    Interval,
    Outcome,
    SearchError,
    SearchSpace,
    asha_search,
    config_hash,
    fit_space,
    mtm_space,
    scaled_rungs,
    stage1_vqvae_objective,
    stage2_mtm_objective,
    token_mtm_objective,
    vqvae_space,
)
from vqaug.nn import serialize
from vqaug.vqvae import TrainingError


def test_default_space():
    dims = dict(vqvae_space().dims)
    assert dims["n_heads"].values == (2, 4, 8, 16)
    assert dims["ff_width"].values == (16, 32, 64, 128, 256, 512)
    assert dims["n_layers"].values == (1, 2, 4)
    assert dims["codebook_size"].values == (32, 64, 96, 128, 256, 512, 1024)
    assert dims["code_dim"].values == (2, 4, 6, 12, 16, 24, 32, 48)
    assert all(math.log2(v).is_integer() for v in dims["latent_length"].values)
    assert (dims["alpha"].lo, dims["alpha"].hi) == (1, 50) == (dims["beta"].lo, dims["beta"].hi)
    assert (dims["ema_decay"].lo, dims["ema_decay"].hi) == (0, 1)
    assert mtm_space().names() == ["n_heads", "ff_width", "n_layers"]


def test_interval_sampling():
    space = SearchSpace.of(a=Interval(1.0, 50.0, log=True), d=Interval(0.0, 1.0))
    draws = [space.sample(3, t) for t in range(2000)]
    a = np.array([d["a"] for d in draws])
    d = np.array([d["d"] for d in draws])
    assert a.min() > 1 and a.max() < 50 and d.min() > 0 and d.max() < 1
    # log-uniform: the median sits at the geometric mean
    assert abs(np.median(np.log(a)) - math.log(math.sqrt(50))) < 0.15
    assert abs(np.median(d) - 0.5) < 0.05


def test_fit_space_drops_bad_heads():
    assert dict(fit_space(vqvae_space(), 8).dims)["n_heads"].values == (2, 4, 8)


def test_scaled_rungs():
    assert scaled_rungs(1.0) == (10, 30, 90)
    assert scaled_rungs(0.1) == (1, 3, 9)


class TestAsha:
    grid = SearchSpace.of(x=Choice(tuple(range(21))))

    def test_single_trial(self):
        r = asha_search(self.grid, lambda c, b: 1.0, n_trials=1, seed=4)
        assert r.best == self.grid.sample(4, 0) and r.best_trial == 0

    def test_grid_argmin(self):
        r = asha_search(self.grid, lambda c, b: abs(c["x"] - 7), n_trials=81, seed=0)
        seen = {e.config["x"] for e in r.ledger}
        assert r.best["x"] == min(seen, key=lambda x: abs(x - 7)) == 7

    def test_promotion_arithmetic(self):
        r = asha_search(self.grid, lambda c, b: abs(c["x"] - 7), rungs=(10, 30, 90), eta=3, n_trials=9, seed=1)
        assert r.reached(0) == 9 and r.reached(1) <= 3 and r.reached(2) <= 1
        assert {e.budget for e in r.ledger} == {10, 30, 90}

    @pytest.mark.parametrize("seed", range(5))
    def test_promotions_come_from_rung_top(self, seed):
        # replay the ledger: each promotion must be in the top third of its rung at that moment
        space = SearchSpace.of(x=Interval(0.0, 1.0))
        r = asha_search(space, lambda c, b: c["x"], n_trials=27, seed=seed)
        seen = {0: [], 1: [], 2: []}
        for e in r.ledger:
            if e.rung > 0:
                below = sorted(seen[e.rung - 1])
                assert e.config["x"] in below[: len(below) // 3]
            seen[e.rung].append(e.config["x"])
        assert r.reached(1) == 9 and r.reached(2) == 3

    def test_budget_reaches_objective(self):
        seen = []
        asha_search(self.grid, lambda c, b: seen.append(b) or 0.0, rungs=(1, 3), n_trials=3)
        assert seen == [1, 1, 1, 3]

    def test_collapsed_never_best(self):
        # the lowest objectives are collapsed
        r = asha_search(self.grid, lambda c, b: Outcome(c["x"], collapsed=c["x"] < 10), n_trials=30, seed=2)
        assert r.best["x"] >= 10
        assert all(e.trial != r.best_trial for e in r.ledger if e.collapsed)

    def test_collapsed_not_promoted(self):
        r = asha_search(self.grid, lambda c, b: Outcome(c["x"], collapsed=b == 10 and c["x"] < 10), n_trials=30, seed=2)
        promoted = {e.trial for e in r.ledger if e.rung == 1}
        assert all(e.config["x"] >= 10 for e in r.ledger if e.trial in promoted)

    def test_all_collapsed(self):
        with pytest.raises(SearchError, match="collapsed or failed"):
            asha_search(self.grid, lambda c, b: Outcome(0.0, True), n_trials=4)

    def test_failures_recorded(self):
        def obj(c, b):
            if c["x"] % 2:
                raise TrainingError("diverged")
            return float(c["x"])

        r = asha_search(self.grid, obj, n_trials=12, seed=3)
        assert any(e.failed for e in r.ledger)
        assert r.best["x"] % 2 == 0

    def test_deterministic(self, tmp_path):
        space = SearchSpace.of(x=Interval(0.0, 1.0), y=Choice((1, 2, 3)))
        f = lambda c, b: (c["x"] - 0.3) ** 2 + c["y"] / b
        a, b = asha_search(space, f, n_trials=20, seed=9), asha_search(space, f, n_trials=20, seed=9)
        a.write_ledger(tmp_path / "a.csv")
        b.write_ledger(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_tie_break_by_hash(self):
        r = asha_search(self.grid, lambda c, b: 0.0, n_trials=9, seed=0)
        final = {e.trial: e.config for e in r.ledger}
        assert config_hash(r.best) == min(config_hash(c) for c in final.values())

    def test_outputs(self, tmp_path):
        r = asha_search(self.grid, lambda c, b: abs(c["x"] - 3), n_trials=9, seed=0)
        r.write_ledger(tmp_path / "l.csv")
        r.write_best(tmp_path / "b.json")
        lines = (tmp_path / "l.csv").read_text().splitlines()
        assert lines[0] == "trial,rung,budget,config,objective,collapsed,failed" and len(lines) == len(r.ledger) + 1
        assert json.loads((tmp_path / "b.json").read_text())["config"] == r.best

    def test_bad_args(self):
        with pytest.raises(ValueError):
            asha_search(self.grid, lambda c, b: 0.0, n_trials=0)


SMALL = SearchSpace.of(
    n_heads=Choice((2, 4)),
    ff_width=Choice((16, 32)),
    n_layers=Choice((1,)),
    codebook_size=Choice((8, 16)),
    code_dim=Choice((2, 4)),
    alpha=Interval(1.0, 50.0, log=True),
    ema_decay=Interval(0.0, 1.0),
)


def test_stage1(toy):
    base = dict(n_features=8, n_classes=2, latent_length=4, model_dim=16)
    obj = stage1_vqvae_objective(toy.train, toy.valid, base, seed=0)
    r = asha_search(SMALL, obj, rungs=(2, 6), n_trials=4, seed=0)
    usable = [e for e in r.ledger if e.usable]
    assert all(e.objective >= 0 and math.isfinite(e.objective) for e in usable)
    assert r.objective == min(e.objective for e in usable if e.rung == max(x.rung for x in r.ledger if x.trial == e.trial))


def test_stage1_flags_collapse(toy):
    # identical rows with one latent position can only ever use one code
    from vqaug.data import Dataset
    same = Dataset(np.full((40, 8), 0.5), np.zeros(40, int), toy.train.schema)
    obj = stage1_vqvae_objective(same, same, dict(n_features=8, n_classes=2, latent_length=1, model_dim=16, codebook_size=8), seed=0)
    assert obj({}, 1).collapsed


def test_stage2_leaves_stage1_alone(toy):
    before = hashlib.sha256(serialize.to_bytes(toy.vqvae.to_model_file())).hexdigest()
    space = fit_space(mtm_space(), 16)
    space = SearchSpace(tuple((n, Choice(d.values[:2])) for n, d in space.dims))
    r = asha_search(space, stage2_mtm_objective(toy.vqvae, toy.train, toy.valid, dict(model_dim=16), seed=0), rungs=(1, 3), n_trials=3)
    assert r.objective >= 0
    assert hashlib.sha256(serialize.to_bytes(toy.vqvae.to_model_file())).hexdigest() == before


def test_stage2_class_copy_reaches_near_zero():
    K, L, C = 16, 8, 4
    rng = np.random.default_rng(0)

    def tokens(n):
        y = rng.integers(0, C, n)
        return (3 * y[:, None] + 5 * np.arange(L)[None]) % K, y

    (t, y), (vt, vy) = tokens(512), tokens(128)
    base = dict(latent_length=L, codebook_size=K, n_classes=C, model_dim=16, lr=3e-3)
    space = SearchSpace.of(n_heads=Choice((2, 4)), ff_width=Choice((16, 32)), n_layers=Choice((1,)))
    r = asha_search(space, token_mtm_objective(t, y, vt, vy, base), rungs=(5, 15, 45), n_trials=3, seed=0)
    assert r.objective < 0.05
