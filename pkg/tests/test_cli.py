import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from vqaug.cli import EXIT_CONFIG, EXIT_DATA, EXIT_GENERATION, EXIT_REPLAY, main
from vqaug.data import Dataset, write_csv

from conftest import SMALL_VQ, gaussian_dataset, make_cli_project, scaled, write_manifest

@pytest.fixture(scope="module")
def project(tmp_path_factory):
    root = tmp_path_factory.mktemp("proj")
    return root, make_cli_project(root)


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def artifacts(out: Path) -> dict:
    return json.loads((out / "run.json").read_text())["artifacts"]


def test_help_lists_commands():
    r = invoke("--help")
    for c in ("ingest", "train", "synth", "augment", "eval", "drift", "hpo", "report", "replay"):
        assert c in r.output


def test_ingest(project, tmp_path):
    root, _ = project
    r = invoke("ingest", "--manifest", root / "m.json", "--out", tmp_path)
    assert r.exit_code == 0, r.output
    norm = json.loads((tmp_path / "data/normalizer.json").read_text())
    assert norm["format"] == "vqaug-normalizer"
    summary = json.loads((tmp_path / "data/summary.json").read_text())
    assert summary["balance_plan"] == {"0": 0, "1": 96}
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["command"] == "ingest" and run["seeds"] == [0, 1, 2]
    assert set(run["inputs"]) == {str(root / "train.csv"), str(root / "test.csv")}


@pytest.fixture(scope="module")
def trained(project, tmp_path_factory):
    root, _ = project
    out = tmp_path_factory.mktemp("trained")
    r = invoke("train", "--manifest", root / "m.json", "--out", out)
    assert r.exit_code == 0, r.output
    return out


def test_train_artifacts(trained):
    assert {"models/vqvae.bin", "models/mtm.bin", "models/vqvae_history.csv", "models/mtm_history.csv"} <= set(artifacts(trained))


def test_synth_and_augment(project, trained, tmp_path):
    root, _ = project
    r = invoke("synth", "--manifest", root / "m.json", "--out", tmp_path / "s", "--models", trained / "models")
    assert r.exit_code == 0, r.output
    doc = json.loads((tmp_path / "s/synthetic/synthetic.json").read_text())
    assert doc["n_rows"] == 96
    lines = (tmp_path / "s/synthetic/synthetic.csv").read_text().splitlines()
    assert len(lines) == 97
    # written back in original units
    x = np.array([[float(v) for v in l.split(",")[:-1]] for l in lines[1:]])
    assert x.min() >= 10 - 1e-9 and x.max() <= 50 + 1e-9 and x.max() > 1
    r = invoke("augment", "--manifest", root / "m.json", "--out", tmp_path / "a", "--models", trained / "models")
    assert r.exit_code == 0, r.output
    assert len((tmp_path / "a/augmented/augmented.csv").read_text().splitlines()) == 1 + 144 + 96


def test_eval_and_replay(project, trained, tmp_path):
    root, _ = project
    out = tmp_path / "e"
    r = invoke("eval", "--manifest", root / "m.json", "--out", out, "--models", trained / "models", "--workers", 2)
    assert r.exit_code == 0, r.output
    gains = (out / "eval/gains.csv").read_text().splitlines()
    assert gains[0] == "method,dataset,mean_gain_pct,std_gain_pct,mark" and len(gains) == 4
    assert len((out / "eval/trials.csv").read_text().splitlines()) == 1 + 9
    assert "Kruskal" in (out / "eval/report.txt").read_text() or "H =" in (out / "eval/report.txt").read_text()
    r = invoke("replay", out / "run.json", "--out", tmp_path / "again")
    assert r.exit_code == 0, r.output
    for rel in artifacts(out):
        assert (out / rel).read_bytes() == (tmp_path / "again" / rel).read_bytes()
    assert (out / "run.json").read_bytes() == (tmp_path / "again/run.json").read_bytes()


def test_eval_workers_do_not_change_results(project, trained, tmp_path):
    root, _ = project
    for w in (1, 3):
        r = invoke("eval", "--manifest", root / "m.json", "--out", tmp_path / str(w), "--models", trained / "models", "--workers", w)
        assert r.exit_code == 0
    assert (tmp_path / "1/eval/trials.csv").read_bytes() == (tmp_path / "3/eval/trials.csv").read_bytes()


def test_eval_zero_synthetic_gives_zero_gain(project, tmp_path):
    root, doc = project
    bal = scaled(gaussian_dataset((40, 40), centers=(0.4, 0.6), scale=0.1, seed=5))
    write_csv(bal, tmp_path / "bal.csv")
    m = write_manifest(tmp_path / "m.json", dict(doc, data={"train": str(tmp_path / "bal.csv"), "test": str(root / "test.csv")}, compare=["smote"]))
    r = invoke("eval", "--manifest", m, "--out", tmp_path / "o")
    assert r.exit_code == 0, r.output
    rows = (tmp_path / "o/eval/trials.csv").read_text().splitlines()[1:]
    assert [float(r.split(",")[-1]) for r in rows] == [0.0, 0.0, 0.0]


def test_seed_override(project, tmp_path):
    root, doc = project
    data = {"train": str(root / "train.csv"), "test": str(root / "test.csv")}
    m = write_manifest(tmp_path / "m.json", dict(doc, data=data, compare=["smote"]))
    r = invoke("eval", "--manifest", m, "--out", tmp_path / "o", "--seed-override", 7)
    assert r.exit_code == 0
    run = json.loads((tmp_path / "o/run.json").read_text())
    assert run["seed"] == 7 and run["seeds"] == [7, 8, 9]


def test_report_marks(project, tmp_path):
    root, _ = project
    r = invoke("report", "--manifest", root / "m.json", "--out", tmp_path, "--table", root / "table.csv")
    assert r.exit_code == 0, r.output
    marks = [l.split(",")[-1] for l in (tmp_path / "report/marks.csv").read_text().splitlines()[1:]]
    assert marks == ["↑", "−", "−", "×"]
    assert "17.37(0.28)↑" in (tmp_path / "report/table.txt").read_text()


def test_drift(project, tmp_path):
    root, _ = project
    r = invoke("drift", "--manifest", root / "drift.json", "--out", tmp_path)
    assert r.exit_code == 0, r.output
    rows = (tmp_path / "drift/report.csv").read_text().splitlines()
    assert rows[0] == "strategy,month,prior_month,mean_f,std_f"
    assert [r.split(",")[0] for r in rows[1:]] == ["no-recovery", "insomnia", "nimai-c", "nimai-hybrid"]
    u = json.loads((tmp_path / "drift/uncertain.json").read_text())
    assert u["insomnia"] == u["nimai-hybrid"]


def test_hpo(project, tmp_path):
    root, _ = project
    r = invoke("hpo", "--manifest", root / "hpo.json", "--out", tmp_path)
    assert r.exit_code == 0, r.output
    best = json.loads((tmp_path / "hpo/vqvae_best.json").read_text())
    assert best["config"]["codebook_size"] in (8, 16)
    assert (tmp_path / "hpo/mtm_ledger.csv").read_text().startswith("trial,rung,budget,config")


class TestErrors:
    def run(self, tmp_path, doc, cmd="ingest"):
        m = write_manifest(tmp_path / "bad.json", doc)
        r = CliRunner().invoke(main, [cmd, "--manifest", str(m), "--out", str(tmp_path / "o")])
        return r, (json.loads(r.stderr.strip().splitlines()[-1]) if r.exit_code else None)

    def test_unknown_key(self, project, tmp_path):
        _, doc = project
        r, err = self.run(tmp_path, dict(doc, colour="blue"))
        assert r.exit_code == EXIT_CONFIG and "colour" in err["message"]

    def test_unknown_nested_key(self, project, tmp_path):
        _, doc = project
        r, _ = self.run(tmp_path, dict(doc, vqvae=dict(SMALL_VQ, depth=3)))
        assert r.exit_code == EXIT_CONFIG

    def test_version(self, project, tmp_path):
        _, doc = project
        r, err = self.run(tmp_path, dict(doc, schema_version=2))
        assert r.exit_code == EXIT_CONFIG and err["error"] == "ConfigError"

    def test_duplicate_seeds(self, project, tmp_path):
        _, doc = project
        assert self.run(tmp_path, dict(doc, seeds=[1, 1]))[0].exit_code == EXIT_CONFIG

    def test_missing_file(self, project, tmp_path):
        _, doc = project
        r, _ = self.run(tmp_path, dict(doc, data={"train": "nope.csv"}))
        assert r.exit_code == EXIT_DATA

    def test_bad_data(self, project, tmp_path):
        root, doc = project
        (tmp_path / "t.csv").write_text((root / "train.csv").read_text().replace("c1\n", "zebra\n", 1))
        r, err = self.run(tmp_path, dict(doc, data={"train": str(tmp_path / "t.csv")}))
        assert r.exit_code == EXIT_DATA and "zebra" in err["message"]

    def test_hybrid_outside_drift(self, project, tmp_path):
        root, doc = project
        r, _ = self.run(tmp_path, dict(doc, data={"train": str(root / "train.csv")}, generator={"kind": "nimai-hybrid"}), cmd="synth")
        assert r.exit_code == EXIT_CONFIG

    def test_generation_failure(self, project, tmp_path):
        # a singleton minority class cannot be interpolated
        root, doc = project
        d = scaled(gaussian_dataset((30, 1)))
        write_csv(d, tmp_path / "one.csv")
        r, err = self.run(tmp_path, dict(doc, data={"train": str(tmp_path / "one.csv")}, generator={"kind": "smote"}), cmd="synth")
        assert r.exit_code == EXIT_GENERATION and err["error"] == "GenerationError"

    def test_replay_detects_changed_input(self, project, tmp_path):
        root, doc = project
        write_csv(scaled(gaussian_dataset((30, 10))), tmp_path / "t.csv")
        m = write_manifest(tmp_path / "m.json", dict(doc, data={"train": "t.csv"}))
        assert invoke("ingest", "--manifest", m, "--out", tmp_path / "o").exit_code == 0
        write_csv(scaled(gaussian_dataset((30, 10), seed=9)), tmp_path / "t.csv")
        r = CliRunner().invoke(main, ["replay", str(tmp_path / "o/run.json"), "--out", str(tmp_path / "p")])
        assert r.exit_code == EXIT_DATA

    def test_replay_mismatch_exit(self, project, tmp_path):
        root, doc = project
        write_csv(scaled(gaussian_dataset((30, 10))), tmp_path / "t.csv")
        m = write_manifest(tmp_path / "m.json", dict(doc, data={"train": "t.csv"}))
        invoke("ingest", "--manifest", m, "--out", tmp_path / "o")
        run = json.loads((tmp_path / "o/run.json").read_text())
        run["artifacts"]["data/train.csv"] = "0" * 64
        (tmp_path / "o/run.json").write_text(json.dumps(run))
        r = CliRunner().invoke(main, ["replay", str(tmp_path / "o/run.json"), "--out", str(tmp_path / "p")])
        assert r.exit_code == EXIT_REPLAY


def test_inputs_not_modified(project, tmp_path):
    root, _ = project
    before = {p.name: p.read_bytes() for p in root.glob("*.csv")}
    invoke("ingest", "--manifest", root / "m.json", "--out", tmp_path)
    assert before == {p.name: p.read_bytes() for p in root.glob("*.csv")}
