"""``rad`` command line: synth, run, experiment and eval.

Exit codes: 0 success, 1 internal error, 2 config or validation error,
3 phase-ordering error.  Paths are resolved against ``--workdir``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import data as rdata
from .data import Dataset, SynthConfig, TemporalSplit
from .models import load_model, save_model
from .pipeline import (
    ExperimentReport,
    PhaseError,
    PhaseOrderError,
    PhaseRecord,
    RADModels,
    TrainConfig,
    build_models,
    distill_kd,
    evaluate,
    finetune_distill,
    finetune_retrieval,
    fit_binary,
    original_builder,
    pretrain_teacher,
    run_invariance_experiment,
    run_shift_curve,
    run_rad,
    timing_report,
)
from .retrieval import load_index, save_index

log = logging.getLogger("rad")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_ORDER = 0, 1, 2, 3

PHASES = ("original", "pretrain", "retrieval", "pretrain-distill", "kd", "distill", "evaluate")
EXPERIMENTS = ("invariance", "shift-curve", "timing")

# checkpoint each phase writes, and the checkpoints it needs first
PHASE_OUTPUT = {"original": "original", "pretrain": "teacher", "retrieval": "retrieval",
                "pretrain-distill": "teacher_distill", "kd": "student", "distill": "distill"}
PHASE_NEEDS = {"retrieval": ("teacher",), "kd": ("teacher_distill",), "distill": ("student",)}
# the teacher shares its relevance tables with the retrieval framework, so
# evaluation loads each checkpoint right before scoring that model
REPORTED = ("original", "teacher", "retrieval", "teacher_distill", "distill")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config


def default_config_path() -> Path:
    return Path(str(resources.files("rad") / "configs" / "synthetic.toml"))


def _read_config(path: Path) -> dict:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode("utf-8"))
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_override(item: str) -> tuple[list[str], object]:
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects section.key=value, got {item!r}")
    try:
        parsed = tomllib.loads(f"v = {value}")["v"]
    except tomllib.TOMLDecodeError:
        parsed = value
    return key.split("."), parsed


def _build(cls, table: dict, seed: int):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} field(s): {', '.join(unknown)}")
    try:
        return cls(**{**table, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


class Settings:
    """Config file merged with environment and flag overrides (flags win)."""

    def __init__(self, args: argparse.Namespace):
        self.workdir = Path(args.workdir).resolve()
        self.config_path = Path(args.config) if args.config else default_config_path()
        if not self.config_path.is_absolute():
            self.config_path = self.workdir / self.config_path
        raw = _read_config(self.config_path)
        for item in args.set or []:
            keys, value = _parse_override(item)
            node = raw
            for k in keys[:-1]:
                node = node.setdefault(k, {})
            node[keys[-1]] = value
        seed = raw.get("seed", 0)
        if os.environ.get("RAD_SEED"):
            try:
                seed = int(os.environ["RAD_SEED"])
            except ValueError as exc:
                raise ConfigError(f"RAD_SEED must be an integer, got {os.environ['RAD_SEED']!r}") from exc
        if getattr(args, "seed", None) is not None:
            seed = args.seed
        self.seed = int(seed)
        train = dict(raw.get("train", {}))
        if getattr(args, "freeze_relevance", False):
            train["freeze_relevance"] = True
        self.synth = _build(SynthConfig, dict(raw.get("synth", {})), self.seed)
        self.train = _build(TrainConfig, train, self.seed)
        self.data = dict(raw.get("data", {}))
        self.experiment = dict(raw.get("experiment", {}))

    def path(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def rel(self, p: Path) -> str:
        try:
            return str(p.relative_to(self.workdir))
        except ValueError:
            return str(p)

    def resolved(self) -> dict:
        return {"config": str(self.config_path), "seed": self.seed, "synth": asdict(self.synth),
                "train": asdict(self.train), "data": self.data}


def load_data(settings: Settings, override: str | None = None, synth: SynthConfig | None = None) -> Dataset:
    """Dataset named by ``--data`` or ``[data]``, otherwise a synthetic one."""
    spec = dict(settings.data)
    if override:
        spec = {**spec, "path": override}
    path = spec.get("path")
    if path is None:
        return rdata.generate_synthetic_shift(synth or settings.synth)
    path = settings.path(path)
    if not path.exists():
        raise ConfigError(f"data file {path} does not exist")
    if path.suffix == ".csv":
        if "features" not in spec:
            raise ConfigError("CSV input needs [data] features = [...] naming the feature columns")
        return rdata.load_csv(path, spec["features"], spec.get("label", "label"), spec.get("timestamp", "timestamp"))
    return rdata.load_dataset(path)


# ---------------------------------------------------------------- manifest


class RunManifest:
    def __init__(self, path: Path):
        self.path = path
        self.body = json.loads(path.read_text()) if path.exists() else {"outputs": [], "checkpoints": {}}

    def update(self, **items) -> None:
        self.body.update(items)

    def output(self, settings: Settings, p: Path) -> None:
        rel = settings.rel(p)
        if rel not in self.body["outputs"]:
            self.body["outputs"].append(rel)

    def write(self) -> None:
        self.path.write_text(json.dumps(self.body, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- synth


def cmd_synth(args, settings: Settings) -> int:
    out = settings.path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    d = rdata.generate_synthetic_shift(settings.synth)
    cache, table = out / f"{args.name}.radd", out / f"{args.name}.csv"
    rdata.save_dataset(d, cache)
    rdata.write_csv(d, table)
    manifest = RunManifest(out / f"{args.name}.manifest.json")
    manifest.update(command="synth", resolved=settings.resolved(), rows=len(d))
    for p in (cache, table):
        manifest.output(settings, p)
    manifest.write()
    print(f"wrote {len(d)} rows to {settings.rel(cache)} and {settings.rel(table)}")
    return EXIT_OK


# ---------------------------------------------------------------- run


def _arch(name: str, m: RADModels, cfg: TrainConfig) -> dict:
    return {"kind": name, "cardinalities": list(m.original.config["cardinalities"]), "dim": cfg.dim,
            "hidden": cfg.hidden, "k": cfg.k}


def _module(m: RADModels, name: str):
    return getattr(m, name)


def _mark_pretrained(m: RADModels, name: str) -> None:
    if name in ("teacher", "teacher_distill"):
        t = _module(m, name)
        t.pretrained = True
        t.extract_relevance().pretrained = True
    elif name == "student":
        m.student.pretrained = True


class RunState:
    """Models for one run directory plus checkpoint bookkeeping."""

    def __init__(self, settings: Settings, out: Path, data_arg: str | None):
        self.settings = settings
        self.cfg = settings.train
        self.out = out
        self.ckpt_dir = out / "checkpoints"
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        d = load_data(settings, data_arg)
        try:
            self.split = rdata.split_temporal(d, self.cfg.train_days, self.cfg.test_days)
        except rdata.SplitError as exc:
            raise ConfigError(str(exc)) from exc
        self.models = build_models(self.split, self.cfg)
        self.manifest = RunManifest(out / "manifest.json")
        self.manifest.update(command="run", resolved=settings.resolved(),
                             sizes={"shifting": len(self.split.shifting), "train": len(self.split.train),
                                    "test": len(self.split.test)})
        search, index = out / "search_space.radd", out / "index.radi"
        rdata.save_dataset(self.split.shifting, search)
        save_index(self.models.index, index)
        self.manifest.output(settings, search)
        self.manifest.output(settings, index)

    def ckpt(self, name: str) -> Path:
        return self.ckpt_dir / f"{name}.radw"

    def save(self, name: str) -> None:
        path = self.ckpt(name)
        save_model(_module(self.models, name), path, _arch(name, self.models, self.cfg))
        self.manifest.body["checkpoints"][name] = self.settings.rel(path)
        self.manifest.output(self.settings, path)

    def load(self, name: str) -> None:
        path = self.ckpt(name)
        if not path.exists():
            raise PhaseOrderError(f"missing checkpoint {self.settings.rel(path)}; run the phase that produces it first")
        load_model(_module(self.models, name), path, _arch(name, self.models, self.cfg))
        _mark_pretrained(self.models, name)

    def log_losses(self, phase: str, losses) -> None:
        path = self.out / "losses" / f"{phase}.json"
        path.parent.mkdir(exist_ok=True)
        path.write_text(json.dumps(losses) + "\n")
        self.manifest.output(self.settings, path)

    def run_phase(self, phase: str) -> None:
        for need in PHASE_NEEDS.get(phase, ()):
            self.load(need)
        m, cfg, split = self.models, self.cfg, self.split
        log.info("phase %s", phase)
        if phase == "original":
            losses = fit_binary(m.original, split.train.features, split.train.labels, cfg.finetune_epochs, cfg,
                                "original")
        elif phase == "pretrain":
            losses = pretrain_teacher(m.teacher, split, cfg)
        elif phase == "retrieval":
            losses = finetune_retrieval(m.retrieval, split, cfg)
        elif phase == "pretrain-distill":
            losses = pretrain_teacher(m.teacher_distill, split, cfg)
        elif phase == "kd":
            losses = distill_kd(m.student, m.teacher_distill, split.shifting, cfg, holdout=split.train)
        elif phase == "distill":
            losses = finetune_distill(m.distill, split.train, cfg)
        else:
            self.write_report()
            return
        self.log_losses(phase, losses)
        self.save(PHASE_OUTPUT[phase])

    def write_report(self) -> ExperimentReport:
        m = self.models
        report = ExperimentReport("RAD comparison")
        for name in REPORTED:
            self.load(name)
            model = _module(m, name)
            c0 = m.neighbors.requests
            auc, ll = evaluate(model, self.split.test)
            calls = m.neighbors.requests - c0
            report.add(PhaseRecord(name, "test", auc, ll, None, calls))
        losses = {}
        for phase in PHASE_OUTPUT:
            path = self.out / "losses" / f"{phase}.json"
            if path.exists():
                losses[phase] = json.loads(path.read_text())
        report.extras["epoch_losses"] = losses
        report.extras["sizes"] = self.manifest.body["sizes"]
        report.extras["freeze_relevance"] = self.cfg.freeze_relevance
        for p in report.write(self.out / "report"):
            self.manifest.output(self.settings, p)
        print(report.to_tsv(), end="")
        return report


def cmd_run(args, settings: Settings) -> int:
    out = settings.path(args.out)
    state = RunState(settings, out, args.data)
    phases = (args.phase,) if args.phase else PHASES
    try:
        for phase in phases:
            state.run_phase(phase)
    finally:
        state.manifest.update(phases_run=sorted(set(state.manifest.body.get("phases_run", [])) | set(phases)))
        state.manifest.write()
    return EXIT_OK


# ---------------------------------------------------------------- experiments


def _seeds(settings: Settings) -> list[int]:
    n = int(settings.experiment.get("seeds", 1))
    if n < 1:
        raise ConfigError(f"experiment.seeds must be positive, got {n}")
    return [settings.seed + i for i in range(n)]


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _split_for(settings: Settings, seed: int, data_arg: str | None, **synth_changes) -> TemporalSplit:
    synth = replace(settings.synth, seed=seed, **synth_changes)
    d = load_data(settings, data_arg, synth)
    return rdata.split_temporal(d, settings.train.train_days, settings.train.test_days)


def _arms(settings: Settings) -> list[tuple[str, dict]]:
    arms = [("drift", {})]
    if settings.experiment.get("control", False):
        arms.append(("control", {"drift_strength": 0.0}))
    return arms


def exp_invariance(settings: Settings, out: Path, data_arg: str | None) -> tuple[ExperimentReport, Path]:
    report = ExperimentReport("relevance pretraining: shifting vs train (frozen relevance)")
    rows, summary = [], {}
    for arm, changes in _arms(settings):
        gaps = []
        for seed in _seeds(settings):
            cfg = replace(settings.train, seed=seed)
            sub = run_invariance_experiment(_split_for(settings, seed, data_arg, **changes), cfg)
            for r in sub.records:
                report.add(replace(r, role=f"{arm}/seed={seed}"))
                rows.append([arm, seed, r.name, f"{r.auc:.6f}"])
            gaps.append(sub.extras["auc_gap"])
            if not all(sub.extras["relevance_frozen"].values()):
                raise PhaseError("relevance parameters changed during a frozen finetune")
        a = float(np.mean([r.auc for r in report.records if r.role.startswith(arm + "/")
                           and r.name == "pretrained_shifting"]))
        b = float(np.mean([r.auc for r in report.records if r.role.startswith(arm + "/")
                           and r.name == "pretrained_train"]))
        summary[arm] = {"mean_auc_pretrained_shifting": a, "mean_auc_pretrained_train": b,
                        "mean_gap": float(np.mean(gaps)),
                        "winner": "pretrained_shifting" if a > b else "pretrained_train"}
    report.extras["summary"] = summary
    table = out / "invariance.csv"
    _write_csv(table, ["arm", "seed", "pretrained_on", "auc"], rows)
    return report, table


def exp_shift_curve(settings: Settings, out: Path, data_arg: str | None) -> tuple[ExperimentReport, Path]:
    report = ExperimentReport("shift curve: fresh original model per training window")
    cfg = settings.train
    rows = []
    for arm, changes in _arms(settings):
        synth = replace(settings.synth, **changes)
        d = load_data(settings, data_arg, synth)
        last_train = int(d.days().max()) - cfg.test_days
        windows = settings.experiment.get("windows") or list(range(last_train, -1, -5))
        windows = [int(w) for w in windows]
        if any(w > last_train or w < 0 for w in windows):
            raise ConfigError(f"shift-curve windows must lie in [0, {last_train}], got {windows}")
        curve = run_shift_curve(d, original_builder(cfg), windows, cfg)
        for start, auc in curve:
            rows.append([arm, start, f"{auc:.6f}"])
            report.add(PhaseRecord(f"window_{start}", arm, auc, None))
        best = max(curve, key=lambda t: t[1])
        report.extras[arm] = {"curve": curve, "best_start": best[0]}
    table = out / "shift_curve.csv"
    _write_csv(table, ["arm", "start_day", "auc"], rows)
    return report, table


def exp_timing(settings: Settings, out: Path, data_arg: str | None) -> tuple[ExperimentReport, Path]:
    cfg = settings.train
    split = _split_for(settings, settings.seed, data_arg)
    rad_report, m = run_rad(split, cfg)
    repeats = int(settings.experiment.get("timing_repeats", 3))
    report = ExperimentReport("inference timing (median ms per 1000 rows)")
    rows = []
    timings = timing_report({"original": m.original, "retrieval": m.retrieval, "distill": m.distill},
                            split.test, repeats=repeats)
    for name, t in timings.items():
        rows.append([name, cfg.k, f"{t['ms_per_1k']:.3f}", t["retrieval_calls"]])
        report.add(PhaseRecord(name, f"k={cfg.k}", rad_report.get(name).auc, rad_report.get(name).logloss,
                               t["ms_per_1k"], t["retrieval_calls"]))
    base_k = m.neighbors.k
    for k in settings.experiment.get("timing_k", []):
        m.neighbors.k = int(k)
        t = timing_report({"retrieval": m.retrieval}, split.test, repeats=repeats)["retrieval"]
        rows.append(["retrieval", int(k), f"{t['ms_per_1k']:.3f}", t["retrieval_calls"]])
    m.neighbors.k = base_k
    report.extras["distill_over_original"] = timings["distill"]["ms_per_1k"] / timings["original"]["ms_per_1k"]
    table = out / "timing.csv"
    _write_csv(table, ["model", "k", "ms_per_1k", "retrieval_calls"], rows)
    return report, table


def cmd_experiment(args, settings: Settings) -> int:
    out = settings.path(args.out or f"experiments/{args.name}")
    out.mkdir(parents=True, exist_ok=True)
    runner = {"invariance": exp_invariance, "shift-curve": exp_shift_curve, "timing": exp_timing}[args.name]
    report, table = runner(settings, out, args.data)
    stem = out / args.name.replace("-", "_")
    manifest = RunManifest(out / "manifest.json")
    manifest.update(command=f"experiment {args.name}", resolved=settings.resolved(),
                    experiment=settings.experiment)
    for p in (*report.write(stem), table):
        manifest.output(settings, p)
    manifest.write()
    print(report.to_tsv(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def cmd_eval(args, settings: Settings) -> int:
    ckpt = settings.path(args.checkpoint)
    manifest_path = ckpt.with_name(ckpt.name + ".manifest.json")
    if not ckpt.exists() or not manifest_path.exists():
        raise ConfigError(f"checkpoint {ckpt} or its manifest is missing")
    arch = json.loads(manifest_path.read_text())
    kind = arch.get("kind")
    if kind not in ("original", "teacher", "retrieval", "teacher_distill", "distill"):
        raise ConfigError(f"checkpoint kind {kind!r} cannot be evaluated as a click model")
    run_dir = ckpt.parent.parent
    search_path = run_dir / "search_space.radd"
    if not search_path.exists():
        raise ConfigError(f"search space {search_path} next to the checkpoint is missing")
    shifting = rdata.load_dataset(search_path)
    index_path = run_dir / "index.radi"
    index = load_index(index_path, shifting) if index_path.exists() else None
    if list(shifting.schema.cardinalities) != arch["cardinalities"]:
        raise ConfigError("checkpoint vocabulary does not match its search space")
    target = settings.path(args.data)
    if not target.exists():
        raise ConfigError(f"data file {target} does not exist")
    test = rdata.encode_csv(target, shifting.schema) if target.suffix == ".csv" else rdata.load_dataset(target)
    if test.schema.cardinalities != shifting.schema.cardinalities:
        raise ConfigError("evaluation data vocabulary differs from the checkpoint's")
    cfg = replace(settings.train, dim=arch["dim"], hidden=arch["hidden"], k=arch["k"])
    empty = shifting.subset(np.zeros(len(shifting), dtype=bool))
    models = build_models(TemporalSplit(shifting, empty, empty, (0, 0, 0)), cfg, index=index)
    model = _module(models, kind)
    load_model(model, ckpt, arch)
    auc, ll = evaluate(model, test)
    print(f"{kind}\tauc={auc:.4f}\tlogloss={ll:.4f}\trows={len(test)}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="base directory for every relative path")
    common.add_argument("--config", help="TOML or JSON config (default: the shipped synthetic config)")
    common.add_argument("--seed", type=int, help="overrides the config seed and RAD_SEED")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value, e.g. train.lr=0.01")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rad", description="Retrieval-and-distill CTR experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--out", default="data")
    p.add_argument("--name", default="synthetic")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("run", parents=[common], help="train and evaluate all phases")
    p.add_argument("--data", help="dataset file (.radd or .csv); default: [data] or a fresh synthetic set")
    p.add_argument("--out", default="run")
    p.add_argument("--phase", choices=PHASES, help="run one phase, loading its prerequisites from checkpoints")
    p.add_argument("--freeze-relevance", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("experiment", parents=[common], help="invariance, shift-curve or timing study")
    p.add_argument("name", choices=EXPERIMENTS)
    p.add_argument("--data")
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("eval", parents=[common], help="evaluate a saved checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        settings = Settings(args)
        return args.func(args, settings)
    except PhaseOrderError as exc:
        print(f"rad: phase order: {exc}", file=sys.stderr)
        return EXIT_ORDER
    except (ConfigError, rdata.SchemaError, rdata.RowParseError, rdata.EmptyDatasetError,
            rdata.SplitError) as exc:
        print(f"rad: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - reported as an internal error
        log.debug("internal error", exc_info=True)
        print(f"rad: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
