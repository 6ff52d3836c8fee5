"""``vqaug`` command line: ingest, train, synth, augment, eval, drift, hpo, report and replay.

Every command writes its artifacts under ``--out`` together with ``run.json``,
which embeds the effective manifest and the digests of inputs and outputs.
``vqaug replay run.json --out DIR`` re-executes the run and checks the digests.
"""
from __future__ import annotations

import csv
import functools
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import click
import numpy as np
import scipy

from . import __version__, kernels
from .data import (
    DataError,
    Dataset,
    Normalizer,
    apply_normalizer,
    denormalize,
    fit_normalizer,
    ingest_csv,
    plan_balance,
    stratified_split,
    stratified_subsample,
    write_csv,
)
from .drift import DriftScenario, RecoveryConfig, compare_strategies
from .evaluation import (
    ClassifierError,
    ExternalClassifier,
    LinearSoftmax,
    Scorer,
    TrialError,
    gain_table,
    rank_methods,
    run_trials,
    write_gain_csv,
)
from .hpo import Choice, Interval, SearchError, SearchSpace, asha_search, fit_space, mtm_space, scaled_rungs
from .hpo import stage1_vqvae_objective, stage2_mtm_objective, vqvae_space
from .manifest import ConfigError, Manifest, load_manifest, mtm_config, parse_manifest, vqvae_config
from .mtm import MtmModel, train_mtm
from .nn import serialize
from .synthesis import GenerationError, SyntheticBatch, augment, augment_manifest, balance_nimai, balance_smote
from .vqvae import TrainingError, VqvaeModel, train_vqvae

log = logging.getLogger("vqaug")

EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING, EXIT_GENERATION, EXIT_REPLAY = 1, 2, 3, 4, 5
RUN_FORMAT = "vqaug-run"


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, TrialError) and exc.__cause__ is not None:
        return exit_code(exc.__cause__)
    if isinstance(exc, DataError):
        return EXIT_DATA
    if isinstance(exc, (TrainingError, SearchError, ClassifierError)):
        return EXIT_TRAINING
    if isinstance(exc, GenerationError):
        return EXIT_GENERATION
    if isinstance(exc, (ConfigError, ValueError, KeyError)):
        return EXIT_CONFIG
    raise exc


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class Run:
    """What one command invocation reads and writes."""

    command: str
    manifest: Manifest
    out: Path
    options: dict
    workers: int = 1

    def __post_init__(self):
        self.inputs: dict[str, str] = {}
        self.artifacts: list[Path] = []

    def read(self, path: str | Path) -> Path:
        p = Path(path)
        self.inputs[str(p)] = sha256(p)
        return p

    def target(self, rel: str) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if p not in self.artifacts:
            self.artifacts.append(p)
        return p

    def metadata(self) -> dict:
        return {
            "format": RUN_FORMAT,
            "version": 1,
            "command": self.command,
            "options": self.options,
            "manifest": self.manifest.doc,
            "manifest_sha256": self.manifest.digest(),
            "seed": self.manifest["seed"],
            "seeds": self.manifest["seeds"],
            "inputs": dict(sorted(self.inputs.items())),
            "artifacts": {str(p.relative_to(self.out)): sha256(p) for p in sorted(self.artifacts)},
            "versions": {
                "vqaug": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
                "kernels": kernels.BACKEND,
            },
        }


# data ----------------------------------------------------------------------


def load_split(run: Run) -> tuple[Dataset, Dataset | None, Normalizer]:
    """Normalized train (and test, if named) with the scaler fitted on the training rows only."""
    m = run.manifest
    data = m["data"]
    if data["train"] is None:
        raise ConfigError("data.train is required for this command")
    train = ingest_csv(run.read(data["train"]), m.schema)
    test = ingest_csv(run.read(data["test"]), m.schema) if data["test"] else None
    norm = fit_normalizer(train) if m["normalize"] else Normalizer(np.zeros(m.schema.n_features), np.ones(m.schema.n_features))
    if not m["normalize"] and not all(d.is_normalized() for d in (train, test) if d is not None):
        raise DataError("normalize is off but the data has values outside [0, 1]")
    return apply_normalizer(norm, train), None if test is None else apply_normalizer(norm, test), norm


# models --------------------------------------------------------------------


def fit_generator(m: Manifest, train: Dataset, seed: int, out: Path | None = None, run: Run | None = None):
    tr, va = stratified_split(train, 1.0 - m["valid_fraction"], seed)
    vcfg = vqvae_config(m)
    log.info("training autoencoder on %d rows (%d held out)", tr.n_samples, va.n_samples)
    vqvae, vh = train_vqvae(tr, va, vcfg, seed)
    log.info("training prior")
    mtm, mh = train_mtm(vqvae, tr, va, mtm_config(m, vcfg), seed)
    if run is not None and out is not None:
        vqvae.save(run.target(f"{out}/vqvae.bin"))
        mtm.save(run.target(f"{out}/mtm.bin"))
        vh.write_csv(run.target(f"{out}/vqvae_history.csv"))
        with run.target(f"{out}/mtm_history.csv").open("w", encoding="utf-8") as fh:
            fh.write("epoch,train,valid\n")
            for i, (a, b) in enumerate(mh):
                fh.write(f"{i},{a!r},{b!r}\n")
    return vqvae, mtm


def models_for(run: Run, train: Dataset, models_dir: str | None):
    """Load the generator from ``models_dir`` or train it into ``<out>/models``."""
    if models_dir is not None:
        d = Path(models_dir)
        vq, mt = d / "vqvae.bin", d / "mtm.bin"
        if not (vq.is_file() and mt.is_file()):
            raise DataError(f"{d}: expected vqvae.bin and mtm.bin")
        return VqvaeModel.load(run.read(vq)), MtmModel.load(run.read(mt))
    return fit_generator(run.manifest, train, run.manifest["seed"], "models", run)


def needs_models(kinds) -> bool:
    return any(k.startswith("nimai") for k in kinds)


# picklable generator and classifier factories (used across worker processes)


@dataclass
class NimaiBalancer:
    vqvae: VqvaeModel
    mtm: MtmModel
    mode: str
    ratio: float
    steps: int | None

    def __call__(self, data: Dataset, seed: int) -> SyntheticBatch:
        plan = plan_balance(data.class_counts())
        if plan.total == 0:
            return SyntheticBatch.empty(data.schema)
        return balance_nimai(self.vqvae, self.mtm, data, plan, seed, mode=self.mode, ratio=self.ratio, steps=self.steps)


@dataclass
class SmoteBalancer:
    k: int

    def __call__(self, data: Dataset, seed: int) -> SyntheticBatch:
        plan = plan_balance(data.class_counts())
        if plan.total == 0:
            return SyntheticBatch.empty(data.schema)
        return balance_smote(data, plan, k=self.k, seed=seed)


def balancer(m: Manifest, kind: str, models):
    g = m["generator"]
    if kind == "smote":
        return SmoteBalancer(g["k"])
    if kind == "nimai-hybrid":
        raise ConfigError("nimai-hybrid needs labeled uncertain rows; use the drift command")
    vqvae, mtm = models
    return NimaiBalancer(vqvae, mtm, "sample" if kind == "nimai-s" else "class", g["ratio"], g["steps"])


def classifier_factory(m: Manifest, workdir: Path):
    c = m["classifier"]
    if c["kind"] == "external":
        return partial(ExternalClassifier, c["command"], workdir, c["timeout"])
    return partial(LinearSoftmax, l2=c["l2"], epochs=c["epochs"], lr=c["lr"], batch_size=c["batch_size"])


# commands --------------------------------------------------------------------


def cmd_ingest(run: Run) -> None:
    train, test, norm = load_split(run)
    write_csv(train, run.target("data/train.csv"))
    if test is not None:
        write_csv(test, run.target("data/test.csv"))
    norm.save(run.target("data/normalizer.json"))
    write_json(run.target("data/summary.json"), {
        "train_counts": train.class_counts(),
        "test_counts": None if test is None else test.class_counts(),
        "balance_plan": plan_balance(train.class_counts()).counts,
    })


def cmd_train(run: Run) -> None:
    train, _, _ = load_split(run)
    fit_generator(run.manifest, train, run.manifest["seed"], "models", run)


def _synthesize(run: Run, models_dir) -> tuple[Dataset, SyntheticBatch, Normalizer]:
    m = run.manifest
    train, _, norm = load_split(run)
    kind = m["generator"]["kind"]
    models = models_for(run, train, models_dir) if needs_models([kind]) else None
    batch = balancer(m, kind, models)(train, m["seed"])
    log.info("generated %d rows", len(batch))
    return train, batch, norm


def cmd_synth(run: Run, models_dir=None) -> None:
    _, batch, norm = _synthesize(run, models_dir)
    write_csv(denormalize(norm, batch.to_dataset()), run.target("synthetic/synthetic.csv"))
    write_json(run.target("synthetic/synthetic.json"), batch.manifest())


def cmd_augment(run: Run, models_dir=None) -> None:
    train, batch, norm = _synthesize(run, models_dir)
    write_csv(denormalize(norm, augment(train, batch)), run.target("augmented/augmented.csv"))
    write_json(run.target("augmented/augmented.json"), augment_manifest(train, batch))


def cmd_eval(run: Run, models_dir=None) -> None:
    m = run.manifest
    train, test, _ = load_split(run)
    if test is None:
        raise ConfigError("eval needs data.test")
    kinds = m.compare
    models = models_for(run, train, models_dir) if needs_models(kinds) else None
    sc = m["scoring"]
    scorer = Scorer(m.class_index(sc["target_class"]), sc["exclusion"], sc["threshold"])
    workers = 1 if m["classifier"]["kind"] == "external" else run.workers
    factory = classifier_factory(m, run.out / "classifier")
    results = {}
    for kind in kinds:
        log.info("evaluating %s over %d seeds", kind, len(m["seeds"]))
        results[kind] = run_trials(train, test, balancer(m, kind, models), factory, m["seeds"], scorer, workers=workers)
    table = {k: {m["name"]: r} for k, r in results.items()}
    write_gain_csv(table, run.target("eval/gains.csv"))
    with run.target("eval/trials.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "seed", "f_real", "f_aug", "gain"])
        for k, r in results.items():
            for row in zip(r.seeds, r.f_real, r.f_aug, r.gains):
                w.writerow([k, row[0], *(repr(float(v)) for v in row[1:])])
    text = gain_table(table)
    if len(kinds) > 1 and len(m["seeds"]) > 1:
        text += "\n" + rank_methods({k: r.gains for k, r in results.items()}).text()
    run.target("eval/report.txt").write_text(text, encoding="utf-8")


def cmd_drift(run: Run) -> None:
    m = run.manifest
    d = m["drift"]
    paths = m["data"]["months"]
    if len(paths) < 2:
        raise ConfigError("drift needs at least two entries in data.months")
    raw = [ingest_csv(run.read(p), m.schema) for p in paths]
    k = d["train_month"]
    if not 0 <= k < len(raw):
        raise ConfigError("drift.train_month out of range")
    norm = fit_normalizer(raw[k]) if m["normalize"] else None
    months = [apply_normalizer(norm, x) for x in raw] if norm else raw
    scenario = DriftScenario(months, k, d["recovery_month"])
    vqvae, mtm = fit_generator(m, months[k], m["seed"], "drift/models", run)
    before = {n: sha256(run.out / f"drift/models/{n}") for n in ("vqvae.bin", "mtm.bin")}
    config = RecoveryConfig(d["probe_fraction"], d["lo"], d["hi"], d["multiplier"], d["budget"], d["ratio"], m["seed"])
    report = compare_strategies(scenario, config, m["seeds"], classifier_factory(m, run.out / "classifier"), {k: (vqvae, mtm)})
    # the generator must come out of recovery untouched
    after = {}
    for n, model in (("vqvae.bin", vqvae), ("mtm.bin", mtm)):
        after[n] = hashlib.sha256(serialize.to_bytes(model.to_model_file())).hexdigest()
    if after != before:
        raise TrainingError("recovery modified the generator parameters")
    report.write_csv(run.target("drift/report.csv"))
    run.target("drift/report.txt").write_text(report.text(), encoding="utf-8")
    write_json(run.target("drift/uncertain.json"), {a.strategy: a.n_uncertain for a in report.arms})


def _space(base: SearchSpace, overrides: dict) -> SearchSpace:
    dims = dict(base.dims)
    for name, spec in overrides.items():
        if name not in dims:
            raise ConfigError(f"hpo.space: unknown dimension {name!r}")
        if isinstance(spec, list):
            dims[name] = Choice(tuple(spec))
        elif isinstance(spec, dict) and set(spec) <= {"lo", "hi", "log"}:
            dims[name] = Interval(float(spec["lo"]), float(spec["hi"]), bool(spec.get("log", False)))
        else:
            raise ConfigError(f"hpo.space.{name}: expected a list of choices or {{lo, hi, log}}")
    return SearchSpace(tuple(dims.items()))


def cmd_hpo(run: Run) -> None:
    m = run.manifest
    h = m["hpo"]
    train, _, _ = load_split(run)
    train = stratified_subsample(train, h["subsample"], m["seed"])
    tr, va = stratified_split(train, 1.0 - m["valid_fraction"], m["seed"])
    rungs = scaled_rungs(h["rung_scale"])
    spaces = h["space"]
    _reject = set(spaces) - {"vqvae", "mtm"}
    if _reject:
        raise ConfigError(f"hpo.space: unknown stage(s) {sorted(_reject)}")
    vbase = vqvae_config(m)
    s1 = _space(fit_space(vqvae_space(), vbase.model_dim), spaces.get("vqvae", {}))
    obj1 = stage1_vqvae_objective(tr, va, {**m["vqvae"], "n_features": vbase.n_features, "n_classes": vbase.n_classes}, m["seed"])
    log.info("stage 1: %d trials, rungs %s", h["n_trials"], rungs)
    r1 = asha_search(s1, obj1, rungs, h["eta"], h["n_trials"], m["seed"])
    r1.write_ledger(run.target("hpo/vqvae_ledger.csv"))
    r1.write_best(run.target("hpo/vqvae_best.json"))
    vcfg = vqvae_config(m, **r1.best)
    vqvae, _ = train_vqvae(tr, va, vcfg, m["seed"], max_epochs=rungs[-1])
    s2 = _space(fit_space(mtm_space(), mtm_config(m, vcfg).model_dim), spaces.get("mtm", {}))
    log.info("stage 2: %d trials", h["mtm_trials"])
    r2 = asha_search(s2, stage2_mtm_objective(vqvae, tr, va, m["mtm"], m["seed"]), rungs, h["eta"], h["mtm_trials"], m["seed"])
    r2.write_ledger(run.target("hpo/mtm_ledger.csv"))
    r2.write_best(run.target("hpo/mtm_best.json"))


def _read_table(path: Path) -> dict[str, dict[str, tuple[float, float]]]:
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: no rows")
    cols = set(rows[0])
    if {"mean", "std"} <= cols:
        mk, sk = "mean", "std"
    elif {"mean_gain_pct", "std_gain_pct"} <= cols:
        mk, sk = "mean_gain_pct", "std_gain_pct"
    else:
        raise DataError(f"{path}: need method, dataset, mean and std columns")
    table: dict[str, dict] = {}
    for i, r in enumerate(rows, start=2):
        try:
            cell = None if r[mk] in ("", None) else (float(r[mk]), float(r[sk]))
        except ValueError:
            raise DataError(f"{path}: line {i}: cannot parse mean/std") from None
        table.setdefault(r["method"], {})[r["dataset"]] = cell
    return table


def cmd_report(run: Run, table: str | None = None) -> None:
    path = table or run.manifest["report"]["table"]
    if path is None:
        raise ConfigError("report needs --table or report.table")
    t = _read_table(run.read(Path(path).resolve()))
    datasets = list(dict.fromkeys(d for row in t.values() for d in row))
    write_gain_csv(t, run.target("report/marks.csv"))
    run.target("report/table.txt").write_text(gain_table(t, datasets), encoding="utf-8")


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "synth": cmd_synth,
    "augment": cmd_augment,
    "eval": cmd_eval,
    "drift": cmd_drift,
    "hpo": cmd_hpo,
    "report": cmd_report,
}


def execute(command: str, manifest: Manifest, out: Path, options: dict, workers: int = 1) -> Run:
    out.mkdir(parents=True, exist_ok=True)
    run = Run(command, manifest, out, options, workers)
    COMMANDS[command](run, **options)
    write_json(out / "run.json", run.metadata())
    return run


def fail(exc: BaseException) -> None:
    code = exit_code(exc)
    click.echo(json.dumps({"error": type(exc).__name__, "exit_code": code, "message": str(exc)}), err=True)
    sys.exit(code)


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*a, **kw):
        try:
            return fn(*a, **kw)
        except SystemExit:
            raise
        except Exception as exc:  # mapped to exit codes; unknown errors re-raise
            fail(exc)

    return wrapper


def common(fn):
    fn = click.option("--verbose", "-v", is_flag=True, help="Log progress to stderr.")(fn)
    fn = click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True, help="Processes for per-seed trials.")(fn)
    fn = click.option("--seed-override", type=int, default=None, help="Replace the manifest seed (trial seeds shift with it).")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True, help="Output directory.")(fn)
    fn = click.option("--manifest", type=click.Path(dir_okay=False, path_type=Path), required=True, help="Experiment manifest (JSON).")(fn)
    return fn


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")


def _invoke(command: str, manifest: Path, out: Path, seed_override, workers: int, verbose: bool, **options) -> None:
    setup_logging(verbose)
    m = load_manifest(manifest)
    if seed_override is not None:
        m = m.with_seed(seed_override)
    execute(command, m, out, options, workers)
    click.echo(str(out / "run.json"))


@click.group()
@click.version_option(__version__, prog_name="vqaug")
def main():
    """Discrete-latent augmentation for imbalanced tabular classifiers."""


def _simple(name: str, help: str, models: bool = False):
    def cmd(manifest, out, seed_override, workers, verbose, **kw):
        guarded(_invoke)(name, manifest, out, seed_override, workers, verbose, **kw)

    cmd.__doc__ = help
    cmd = common(cmd)
    if models:
        cmd = click.option("--models", "models_dir", type=click.Path(file_okay=False), default=None,
                           help="Directory with vqvae.bin and mtm.bin (default: train into OUT/models).")(cmd)
    return main.command(name)(cmd)


_simple("ingest", "Validate the data, fit the scaler on the training rows and write normalized CSVs.")
_simple("train", "Train the autoencoder and the masked-token prior.")
_simple("synth", "Generate the rows that balance the training set.", models=True)
_simple("augment", "Write the training set plus balancing rows.", models=True)
_simple("eval", "Multi-seed gain of each generator against real-only training.", models=True)
_simple("drift", "Compare recovery strategies on a month-by-month scenario.")
_simple("hpo", "Two-stage successive-halving search for the autoencoder and the prior.")


@main.command("report")
@common
@click.option("--table", type=click.Path(dir_okay=False), default=None, help="CSV with method, dataset, mean and std columns.")
def report_cmd(manifest, out, seed_override, workers, verbose, table):
    """Reliability marks for a table of mean/std gains."""
    options = {"table": None if table is None else str(Path(table).resolve())}
    guarded(_invoke)("report", manifest, out, seed_override, workers, verbose, **options)


def replay(run_json: Path, out: Path, workers: int = 1) -> list[str]:
    """Re-execute a recorded run into ``out``; returns the artifacts whose digest changed."""
    try:
        doc = json.loads(Path(run_json).read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{run_json}: not a readable run record ({exc})") from None
    if doc.get("format") != RUN_FORMAT or doc.get("command") not in COMMANDS:
        raise ConfigError(f"{run_json}: not a run record")
    for p, digest in doc["inputs"].items():
        if not Path(p).is_file() or sha256(Path(p)) != digest:
            raise DataError(f"{p}: input changed since the recorded run")
    m = parse_manifest(doc["manifest"], ".", check_files=True)
    run = execute(doc["command"], m, Path(out), doc["options"], workers)
    now = run.metadata()["artifacts"]
    return sorted(k for k in set(now) | set(doc["artifacts"]) if now.get(k) != doc["artifacts"].get(k))


@main.command("replay")
@click.argument("run_json", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--out", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--workers", type=click.IntRange(min=1), default=1)
@click.option("--verbose", "-v", is_flag=True)
@guarded
def replay_cmd(run_json, out, workers, verbose):
    """Re-run a recorded command and verify its artifacts are byte-identical."""
    setup_logging(verbose)
    changed = replay(run_json, out, workers)
    if changed:
        click.echo(json.dumps({"error": "ReplayMismatch", "exit_code": EXIT_REPLAY, "artifacts": changed}), err=True)
        sys.exit(EXIT_REPLAY)
    click.echo(f"replayed {out / 'run.json'}: all artifacts identical")


if __name__ == "__main__":  # pragma: no cover
    main()
