"""Experiment configuration, end-to-end runs and the alpha/beta sweep."""
from __future__ import annotations

import csv
import datetime as _dt
import itertools
import json
import logging
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import idx
from .errors import ConfigError, NTMLError, UsageError
from .losses import der
from .model import ArchSpec, ModelCheckpoint, load_checkpoint, save_checkpoint
from .pipeline import (MetricsReport, TrainConfig, build_soft_dataset, evaluate, fine_tune,
                       mutual_learning, train_nt, train_tt)
from .poisoning import (Dataset, TriggerSpec, build_poisoned_testset, count_for_fraction,
                        gen_synthetic, poison_clean_label, poison_poisoned_label)
from .rng import Rng, derive_seed

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
POISON_MODES = ("poisoned-label", "clean-label")


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"malformed {cls.__name__}: {exc}") from exc


@dataclass
class DataConfig:
    num_classes: int = 4
    train_per_class: int = 500
    test_per_class: int = 100
    val_ratio: float = 0.1
    channels: int = 1
    side: int = 16
    noise: float = 0.04
    jitter: float = 1.0


@dataclass
class PoisonConfig:
    mode: str = "poisoned-label"
    gamma: float | None = 0.1
    frac_of_target: float | None = None

    def validate(self) -> None:
        if self.mode not in POISON_MODES:
            raise ConfigError(f"unknown poison mode {self.mode!r}")
        if (self.gamma is None) == (self.frac_of_target is None):
            raise ConfigError("set exactly one of gamma and frac_of_target")
        if self.mode == "poisoned-label" and self.gamma is None:
            raise ConfigError("poisoned-label mode needs gamma")
        if self.mode == "clean-label" and self.frac_of_target is None:
            raise ConfigError("clean-label mode needs frac_of_target")


@dataclass
class StageConfig:
    """TrainConfig minus the seed, which each run derives from the master seed."""

    epochs: int
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    early_stop_patience: int | None = None

    def resolve(self, seed: int) -> TrainConfig:
        cfg = TrainConfig(self.epochs, self.batch_size, self.lr, self.momentum, seed,
                          self.early_stop_patience)
        cfg.validate()
        return cfg


def _default_stages() -> dict[str, StageConfig]:
    return {
        "tt": StageConfig(epochs=30, lr=0.01, early_stop_patience=5),
        "nt": StageConfig(epochs=15, lr=0.01),
        "ml": StageConfig(epochs=200, lr=0.03),
        "ft": StageConfig(epochs=200, lr=0.03),
    }


@dataclass
class DefenseConfig:
    alpha: float = 0.6
    beta: float = 2.0
    temperature: float = 2.0
    clean_ratio: float = 0.05
    structure: str = "ml"
    representation: str = "fm"
    t2_scaling: bool = False
    run_ft: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchSpec = field(default_factory=ArchSpec)
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    poison: PoisonConfig = field(default_factory=PoisonConfig)
    train: dict[str, StageConfig] = field(default_factory=_default_stages)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    topk: tuple[int, ...] = (1, 2)
    output_dir: str | None = None

    def validate(self) -> None:
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        self.poison.validate()
        self.trigger.validate((self.data.channels, self.data.side, self.data.side))
        if not 0.0 < self.defense.clean_ratio <= 0.5:
            raise ConfigError(f"clean_ratio must lie in (0, 0.5], got {self.defense.clean_ratio}")
        if not 0 <= self.trigger.target_class < self.data.num_classes:
            raise ConfigError("target class outside [0, K)")
        if (self.arch.num_classes, self.arch.input_channels, self.arch.input_size) != (
                self.data.num_classes, self.data.channels, self.data.side):
            raise ConfigError("architecture does not match the data shape / class count")
        missing = {"tt", "nt", "ml", "ft"} - set(self.train)
        if missing:
            raise ConfigError(f"missing stage configs: {sorted(missing)}")
        for name, st in self.train.items():
            st.resolve(0)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "data": asdict(self.data),
            "arch": self.arch.to_dict(),
            "trigger": self.trigger.to_dict(),
            "poison": asdict(self.poison),
            "train": {k: asdict(v) for k, v in self.train.items()},
            "defense": asdict(self.defense),
            "topk": list(self.topk),
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        base = cls()
        train = dict(base.train)
        for k, v in d.get("train", {}).items():
            train[k] = _from_dict(StageConfig, v)
        try:
            cfg = cls(
                seed=int(d.get("seed", base.seed)),
                data=_from_dict(DataConfig, d["data"]) if "data" in d else base.data,
                arch=ArchSpec.from_dict(d["arch"]) if "arch" in d else base.arch,
                trigger=TriggerSpec.from_dict(d["trigger"]) if "trigger" in d else base.trigger,
                poison=_from_dict(PoisonConfig, d["poison"]) if "poison" in d else base.poison,
                train=train,
                defense=_from_dict(DefenseConfig, d["defense"]) if "defense" in d else base.defense,
                topk=tuple(d.get("topk", base.topk)),
                output_dir=d.get("output_dir", base.output_dir),
            )
        except (TypeError, KeyError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def stage(self, name: str) -> TrainConfig:
        return self.train[name].resolve(derive_seed(self.seed, "train", name))


@dataclass
class SweepSpec:
    alpha_range: tuple[float, float] = (0.1, 0.9)
    beta_range: tuple[float, float] = (1.0, 5.0)
    strategy: str = "random"
    trials: int = 50
    alpha_grid: tuple[float, ...] = (0.2, 0.4, 0.6, 0.8)
    beta_grid: tuple[float, ...] = (1.0, 2.0, 3.0)
    objective: str = "der"
    workers: int = 1

    def validate(self) -> None:
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.strategy not in ("grid", "random"):
            raise ConfigError(f"unknown sweep strategy {self.strategy!r}")
        if self.objective != "der":
            raise ConfigError("the only supported objective is der")
        lo, hi = self.alpha_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"bad alpha range {self.alpha_range}")
        lo, hi = self.beta_range
        if not 0.0 <= lo <= hi:
            raise ConfigError(f"bad beta range {self.beta_range}")

    def points(self, seed: int) -> list[tuple[float, float]]:
        self.validate()
        if self.strategy == "grid":
            return list(itertools.product(self.alpha_grid, self.beta_grid))[:self.trials]
        rng = Rng(derive_seed(seed, "sweep"))
        return [(float(rng.uniform(*self.alpha_range)), float(rng.uniform(*self.beta_range)))
                for _ in range(self.trials)]


# ---------------------------------------------------------------- data preparation

@dataclass
class Splits:
    train: Dataset          # poisoned D1
    val: Dataset            # held out from the same untrusted source
    clean: Dataset          # defender's trusted benign split
    test: Dataset           # benign test set
    poisoned_test: Dataset  # triggered, target class removed


def _balanced(cfg: ExperimentConfig, n: int, rng: Rng) -> Dataset:
    k = cfg.data.num_classes
    per_class = -(-n // k)
    ds = gen_synthetic(k, per_class, cfg.data.channels, cfg.data.side, rng,
                       cfg.data.noise, cfg.data.jitter)
    return ds.subset(np.arange(n)) if len(ds) > n else ds


def _poison(cfg: ExperimentConfig, ds: Dataset, rng: Rng) -> Dataset:
    if cfg.poison.mode == "poisoned-label":
        return poison_poisoned_label(ds, cfg.trigger, cfg.poison.gamma, rng)
    return poison_clean_label(ds, cfg.trigger, cfg.poison.frac_of_target, rng)


def generate_data(cfg: ExperimentConfig) -> Splits:
    """Benign train / val / clean / test splits; ``poisoned_test`` is left empty."""
    cfg.validate()
    root = Rng(derive_seed(cfg.seed, "data"))
    d, k = cfg.data, cfg.data.num_classes
    train = gen_synthetic(k, d.train_per_class, d.channels, d.side, root.child("train"),
                          d.noise, d.jitter)
    test = gen_synthetic(k, d.test_per_class, d.channels, d.side, root.child("test"),
                         d.noise, d.jitter)
    n_val = count_for_fraction(d.val_ratio, len(train))
    val = _balanced(cfg, n_val, root.child("val")) if n_val else train.subset([])
    clean = _balanced(cfg, max(1, count_for_fraction(cfg.defense.clean_ratio, len(train))),
                      root.child("clean"))
    return Splits(train, val, clean, test, test.subset([]))


def poison_data(cfg: ExperimentConfig, benign: Splits) -> Splits:
    """Poison train and val per ``cfg.poison`` and build the triggered test set."""
    cfg.validate()
    for name in ("train", "val", "test"):
        if np.any(getattr(benign, name).poisoned):
            raise UsageError(f"{name} split is already poisoned")
    prng = Rng(derive_seed(cfg.seed, "poison"))
    train = _poison(cfg, benign.train, prng.child("train"))
    val = _poison(cfg, benign.val, prng.child("val")) if len(benign.val) else benign.val
    return Splits(train, val, benign.clean, benign.test,
                  build_poisoned_testset(benign.test, cfg.trigger))


def prepare_data(cfg: ExperimentConfig) -> Splits:
    """Every split for ``cfg``; a pure function of the config."""
    return poison_data(cfg, generate_data(cfg))


SPLIT_NAMES = ("train", "val", "clean", "test", "poisoned_test")


def save_splits(splits: Splits, directory) -> None:
    for name in SPLIT_NAMES:
        ds = getattr(splits, name)
        if len(ds) or name != "poisoned_test":
            idx.write_idx(ds, Path(directory) / name)


def load_splits(directory) -> Splits:
    d = Path(directory)
    if not (d / "train").is_dir():
        raise UsageError(f"no dataset directory under {d}; run gen-data first")
    parts = {}
    for name in SPLIT_NAMES:
        if (d / name).is_dir():
            parts[name] = idx.read_idx(d / name)
        elif name == "poisoned_test":
            parts[name] = parts["test"].subset([])
        else:
            raise UsageError(f"split {name!r} missing under {d}")
    return Splits(**parts)


# ---------------------------------------------------------------- runs

@dataclass
class RunResult:
    reports: dict[str, MetricsReport]
    checkpoints: dict[str, ModelCheckpoint]


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except NTMLError as exc:
        raise type(exc)(f"[stage {name}] {exc}") from exc


def report_document(report: MetricsReport, cfg: ExperimentConfig, run_id: str) -> dict:
    doc = {"schema_version": SCHEMA_VERSION, "run_id": run_id,
           "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
           "seed": cfg.seed, "config": cfg.to_dict()}
    doc.update(report.to_dict())
    return doc


def write_report(path, report: MetricsReport, cfg: ExperimentConfig, run_id: str) -> None:
    Path(path).write_text(json.dumps(report_document(report, cfg, run_id), indent=2,
                                     sort_keys=True) + "\n")


def read_report(path) -> MetricsReport:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported report schema_version")
    return MetricsReport.from_dict(doc)


def run_experiment(cfg: ExperimentConfig, splits: Splits | None = None) -> RunResult:
    """gen -> poison -> TT -> D2 -> NT -> ML (-> FT), evaluating every stage.

    DER of each defended stage is measured against the TT model.  When
    ``cfg.output_dir`` is set, datasets, checkpoints and one JSON report per
    stage are written there.
    """
    cfg.validate()
    splits = splits or _stage("data", prepare_data, cfg)
    y_t = cfg.trigger.target_class
    history: dict[str, list[float]] = {}
    ck: dict[str, ModelCheckpoint] = {}

    ck["tt"] = _stage("tt", train_tt, cfg.arch, splits.train, splits.val, cfg.stage("tt"), history)
    d2 = _stage("d2", build_soft_dataset, ck["tt"], splits.train)
    ck["nt"] = _stage("nt", train_nt, cfg.arch, d2, cfg.stage("nt"), history)
    df = cfg.defense
    ck["ml-teacher"], ck["ml-student"] = _stage(
        "ml", mutual_learning, ck["tt"], ck["nt"], splits.clean, df.alpha, df.beta,
        df.temperature, cfg.stage("ml"), structure=df.structure,
        representation=df.representation, t2_scaling=df.t2_scaling, history=history)
    if df.run_ft:
        ck["ft"] = _stage("ft", fine_tune, ck["tt"], splits.clean, cfg.stage("ft"), history)

    reports = {}
    for name, model in ck.items():
        r = _stage("eval", evaluate, model, splits.test, splits.poisoned_test, y_t, cfg.topk)
        r.stage = name
        r.loss_curves = {k: v for k, v in history.items() if k == name}
        reports[name] = r
    base = reports["tt"]
    for name, r in reports.items():
        if name != "tt":
            r.der = der(base.asr, r.asr, base.ba, r.ba)

    if cfg.output_dir:
        _persist(cfg, splits, ck, reports)
    return RunResult(reports, ck)


def _persist(cfg: ExperimentConfig, splits: Splits, ck, reports) -> None:
    out = Path(cfg.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    save_splits(splits, out / "data")
    run_id = uuid.uuid4().hex
    for name, model in ck.items():
        save_checkpoint(model, out / "checkpoints" / f"{name}.ckpt")
    for name, r in reports.items():
        write_report(out / "reports" / f"{name}.json", r, cfg, run_id)


# ---------------------------------------------------------------- sweep

@dataclass
class Trial:
    trial: int
    alpha: float
    beta: float
    asr: float
    ba: float
    pa: float
    der: float


@dataclass
class SweepResult:
    best: Trial
    trials: list[Trial]
    baseline: MetricsReport


TRIAL_COLUMNS = ("trial", "alpha", "beta", "asr", "ba", "pa", "der")


def _run_trial(args) -> Trial:
    i, alpha, beta, f_tt, f_nt, cfg, splits, base = args
    df = cfg.defense
    _, student = mutual_learning(f_tt, f_nt, splits.clean, alpha, beta, df.temperature,
                                 cfg.stage("ml"),
                                 structure=df.structure, representation=df.representation,
                                 t2_scaling=df.t2_scaling)
    r = evaluate(student, splits.test, splits.poisoned_test, cfg.trigger.target_class, cfg.topk)
    return Trial(i, alpha, beta, r.asr, r.ba, r.pa, der(base.asr, r.asr, base.ba, r.ba))


def write_trials(path, trials: list[Trial]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRIAL_COLUMNS)
        for t in trials:
            w.writerow([t.trial] + [repr(float(getattr(t, c))) for c in TRIAL_COLUMNS[1:]])


def read_trials(path) -> list[Trial]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [Trial(int(r["trial"]), *(float(r[c]) for c in TRIAL_COLUMNS[1:])) for r in rows]


def load_frozen(cfg: ExperimentConfig) -> tuple[ModelCheckpoint, ModelCheckpoint]:
    if not cfg.output_dir:
        raise UsageError("no frozen checkpoints given and no output_dir to load them from")
    ckdir = Path(cfg.output_dir) / "checkpoints"
    paths = [ckdir / "tt.ckpt", ckdir / "nt.ckpt"]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise UsageError(f"frozen checkpoints missing: {missing}")
    return tuple(load_checkpoint(p, cfg.arch) for p in paths)


def sweep(cfg: ExperimentConfig, spec: SweepSpec,
          frozen: tuple[ModelCheckpoint, ModelCheckpoint] | None = None,
          splits: Splits | None = None) -> SweepResult:
    """Search alpha/beta for the highest DER of the ML student.

    Every trial reruns only the mutual-learning stage from the same frozen
    (TT, NT) pair with the same stage seed, so trials differ only in
    (alpha, beta).
    The trial table goes to ``output_dir/sweep_trials.csv`` when set.
    """
    cfg.validate()
    spec.validate()
    if frozen is None:
        frozen = load_frozen(cfg)
    f_tt, f_nt = frozen
    if f_tt is None or f_nt is None:
        raise UsageError("frozen TT/NT checkpoints missing")
    splits = splits or prepare_data(cfg)
    base = evaluate(f_tt, splits.test, splits.poisoned_test, cfg.trigger.target_class, cfg.topk)
    jobs = [(i, a, b, f_tt, f_nt, cfg, splits, base)
            for i, (a, b) in enumerate(spec.points(cfg.seed))]
    if spec.workers > 1:
        with ProcessPoolExecutor(spec.workers) as pool:
            trials = list(pool.map(_run_trial, jobs))
    else:
        trials = [_run_trial(j) for j in jobs]
    best = max(trials, key=lambda t: (t.der, -t.trial))
    if cfg.output_dir:
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        write_trials(Path(cfg.output_dir) / "sweep_trials.csv", trials)
    return SweepResult(best, trials, base)
