"""Training phases and experiments.

Phase order: pretrain a teacher on the shifting window, finetune a
retrieval framework on the train window, distill the teacher's relevance
path into a retrieval-free student, finetune the distill framework, and
evaluate everything on the test window.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nncore as nn
from .data import Dataset, TemporalSplit
from .metrics import UndefinedAUCError, log_loss, roc_auc
from .models import (
    DistillFramework,
    Module,
    OriginalModel,
    RelevanceHead,
    RelevanceNetwork,
    RetrievalFramework,
    SearchDistillModule,
    TeacherDistill,
    TeacherRetrieval,
    predict_proba,
)
from .retrieval import InvertedIndex, NeighborCache, build_index

log = logging.getLogger(__name__)


class PhaseError(RuntimeError):
    pass


class PhaseOrderError(PhaseError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 5
    finetune_epochs: int = 5
    kd_epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    k: int = 10
    dim: int = 16
    hidden: int = 64
    freeze_relevance: bool = False
    train_days: int = 10
    test_days: int = 2

    def __post_init__(self):
        for name in ("batch_size", "k", "dim", "hidden", "train_days", "test_days"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("pretrain_epochs", "finetune_epochs", "kd_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


def _seed(cfg: TrainConfig, tag: str) -> int:
    """Per-component seed derived from the run seed and a fixed tag."""
    return int(np.random.SeedSequence([cfg.seed, *tag.encode()]).generate_state(1)[0])


# ---------------------------------------------------------------- reports


@dataclass
class PhaseRecord:
    name: str
    role: str
    auc: float
    logloss: float | None
    ms: float | None = None
    retrieval_calls: int = 0


@dataclass
class ExperimentReport:
    title: str
    records: list[PhaseRecord] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def add(self, record: PhaseRecord) -> PhaseRecord:
        self.records.append(record)
        return record

    def get(self, name: str) -> PhaseRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_tsv(self) -> str:
        lines = [f"# {self.title}", "name\trole\tauc\tlogloss\tms\tretrieval_calls"]
        for r in self.records:
            ms = "-" if r.ms is None else f"{r.ms:.1f}"
            ll = "-" if r.logloss is None else f"{r.logloss:.4f}"
            lines.append(f"{r.name}\t{r.role}\t{r.auc:.4f}\t{ll}\t{ms}\t{r.retrieval_calls}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"title": self.title, "records": [asdict(r) for r in self.records],
                           "extras": self.extras}, indent=2, sort_keys=True) + "\n"

    def write(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        tsv, js = stem.with_suffix(".tsv"), stem.with_suffix(".json")
        tsv.write_text(self.to_tsv())
        js.write_text(self.to_json())
        return tsv, js


# ---------------------------------------------------------------- training


def _trainable(model: Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def fit_binary(model, X: np.ndarray, y: np.ndarray, epochs: int, cfg: TrainConfig, tag: str,
               exclude_ids: np.ndarray | None = None) -> list[float]:
    """Mini-batch Adam on mean BCE; returns the mean loss of each epoch."""
    params = _trainable(model)
    opt = nn.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(_seed(cfg, tag))
    yf = y.astype(np.float64)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            ex = None if exclude_ids is None else exclude_ids[b]
            with nn.Tape() as tape:
                loss = nn.bce_loss(nn.sigmoid(model.logits(X[b], ex)), yf[b])
                tape.backward(loss)
            opt.step()
            total += float(loss.data) * len(b)
        history.append(total / len(X))
        log.debug("%s epoch %d loss %.5f", tag, epoch, history[-1])
    return history


def pretrain_teacher(teacher: TeacherRetrieval | TeacherDistill, split: TemporalSplit, cfg: TrainConfig,
                     data: Dataset | None = None) -> list[float]:
    """Fit the teacher on the shifting window (or ``data``) with self-exclusion."""
    d = split.shifting if data is None else data
    if len(d) == 0:
        raise PhaseError("pretraining needs a non-empty shifting dataset")
    hist = fit_binary(teacher, d.features, d.labels, cfg.pretrain_epochs, cfg,
                      f"pretrain-{type(teacher).__name__}", exclude_ids=d.row_ids)
    teacher.extract_relevance().pretrained = True
    teacher.pretrained = True
    return hist


def _require_pretrained(module, what: str) -> None:
    if not getattr(module, "pretrained", False):
        raise PhaseOrderError(f"{what} needs a pretrained teacher (run pretraining or load its checkpoint)")


def finetune_retrieval(fw: RetrievalFramework, split: TemporalSplit, cfg: TrainConfig) -> list[float]:
    _require_pretrained(fw.relevance, "retrieval finetuning")
    if len(split.train) == 0:
        raise PhaseError("finetuning needs a non-empty train dataset")
    if cfg.freeze_relevance:
        fw.relevance.freeze()
    d = split.train
    return fit_binary(fw, d.features, d.labels, cfg.finetune_epochs, cfg, "finetune-retrieval")


def distill_targets(teacher: TeacherDistill, d: Dataset, batch_size: int = 4096) -> np.ndarray:
    head = teacher.extract_relevance()
    out = np.empty((len(d), head.dim))
    for start in range(0, len(d), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = head(d.features[sl], d.row_ids[sl]).data
    return out


def distill_kd(student: SearchDistillModule, teacher: TeacherDistill, shifting: Dataset, cfg: TrainConfig,
               holdout: Dataset | None = None) -> dict:
    """Regress the student's logit vector onto the teacher's relevance output (MSE)."""
    _require_pretrained(teacher, "distillation")
    if len(shifting) == 0:
        raise PhaseError("distillation needs a non-empty shifting dataset")
    if student.dim != teacher.extract_relevance().dim:
        raise nn.ShapeError(f"student dim {student.dim} != relevance dim {teacher.extract_relevance().dim}")
    teacher.freeze()
    targets = distill_targets(teacher, shifting)
    hold_targets = None if holdout is None else distill_targets(teacher, holdout)
    params = _trainable(student)
    opt = nn.Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(_seed(cfg, "distill-kd"))
    X = shifting.features
    history, hold_history = [], []

    def holdout_mse():
        pred = student(holdout.features).data
        return float(np.mean((pred - hold_targets) ** 2))

    if holdout is not None:
        hold_history.append(holdout_mse())
    for _ in range(cfg.kd_epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), cfg.batch_size):
            b = order[start:start + cfg.batch_size]
            with nn.Tape() as tape:
                loss = nn.mse_loss(student(X[b]), targets[b])
                tape.backward(loss)
            opt.step()
            total += float(loss.data) * len(b)
        history.append(total / len(X))
        if holdout is not None:
            hold_history.append(holdout_mse())
    student.pretrained = True
    return {"epoch_mse": history, "holdout_mse": hold_history}


def finetune_distill(fw: DistillFramework, train: Dataset, cfg: TrainConfig) -> list[float]:
    _require_pretrained(fw.student, "distill finetuning")
    if len(train) == 0:
        raise PhaseError("finetuning needs a non-empty train dataset")
    if cfg.freeze_relevance:
        fw.student.freeze()
    return fit_binary(fw, train.features, train.labels, cfg.finetune_epochs, cfg, "finetune-distill")


def evaluate(model, test: Dataset) -> tuple[float, float]:
    """(AUC, LogLoss) on ``test``; AUC raises when only one class is present."""
    if len(test) == 0:
        raise PhaseError("cannot evaluate on an empty dataset")
    p = predict_proba(model, test.features)
    ll = log_loss(test.labels, p)
    try:
        auc = roc_auc(test.labels, p)
    except UndefinedAUCError as exc:
        exc.logloss = ll
        raise
    return auc, ll


def _record(report: ExperimentReport, name: str, role: str, model, d: Dataset,
            counter: Callable[[], int] | None = None, timing: float | None = None) -> PhaseRecord:
    """Evaluate and append; ``retrieval_calls`` counts lookups made by this evaluation only."""
    c0 = 0 if counter is None else counter()
    auc, ll = evaluate(model, d)
    calls = 0 if counter is None else counter() - c0
    return report.add(PhaseRecord(name, role, auc, ll, timing, calls))


# ---------------------------------------------------------------- end-to-end


@dataclass
class RADModels:
    index: InvertedIndex
    neighbors: NeighborCache
    original: OriginalModel
    teacher: TeacherRetrieval
    retrieval: RetrievalFramework
    teacher_distill: TeacherDistill
    student: SearchDistillModule
    distill: DistillFramework


def build_models(split: TemporalSplit, cfg: TrainConfig, index: InvertedIndex | None = None) -> RADModels:
    card = split.shifting.schema.cardinalities
    index = build_index(split.shifting) if index is None else index
    neighbors = NeighborCache(index, cfg.k)
    teacher = TeacherRetrieval(card, neighbors, cfg.dim, _seed(cfg, "teacher"))
    teacher_d = TeacherDistill(card, neighbors, cfg.dim, _seed(cfg, "teacher-distill"))
    student = SearchDistillModule(card, cfg.dim, cfg.hidden, _seed(cfg, "student"))
    retrieval = RetrievalFramework(OriginalModel(card, cfg.dim, cfg.hidden, _seed(cfg, "fw-original"),
                                                 prefix="retrieval_fw.original"),
                                   teacher.extract_relevance(), cfg.hidden, _seed(cfg, "fw-retrieval"))
    distill = DistillFramework(OriginalModel(card, cfg.dim, cfg.hidden, _seed(cfg, "fw-original"),
                                             prefix="distill_fw.original"),
                               student, cfg.hidden, _seed(cfg, "fw-distill"))
    original = OriginalModel(card, cfg.dim, cfg.hidden, _seed(cfg, "original"))
    return RADModels(index, neighbors, original, teacher, retrieval, teacher_d, student, distill)


def run_rad(split: TemporalSplit, cfg: TrainConfig, models: RADModels | None = None,
            timing: bool = False) -> tuple[ExperimentReport, RADModels]:
    """Every phase in order; returns the comparison report and trained models."""
    m = build_models(split, cfg) if models is None else models
    report = ExperimentReport("RAD comparison")
    counter = lambda: m.neighbors.requests  # noqa: E731
    losses = {}

    def timed(fn):
        t0 = time.perf_counter()
        out = fn()
        return out, (time.perf_counter() - t0) * 1e3 if timing else None

    losses["original"], ms = timed(lambda: fit_binary(m.original, split.train.features, split.train.labels,
                                                      cfg.finetune_epochs, cfg, "original"))
    _record(report, "original", "test", m.original, split.test, counter, ms)

    losses["teacher"], ms = timed(lambda: pretrain_teacher(m.teacher, split, cfg))
    _record(report, "teacher", "test", m.teacher, split.test, counter, ms)

    losses["retrieval"], ms = timed(lambda: finetune_retrieval(m.retrieval, split, cfg))
    _record(report, "retrieval", "test", m.retrieval, split.test, counter, ms)

    losses["teacher_distill"], ms = timed(lambda: pretrain_teacher(m.teacher_distill, split, cfg))
    _record(report, "teacher_distill", "test", m.teacher_distill, split.test, counter, ms)

    kd, ms = timed(lambda: distill_kd(m.student, m.teacher_distill, split.shifting, cfg, holdout=split.train))
    losses["kd"] = kd["epoch_mse"]
    report.extras["kd_holdout_mse"] = kd["holdout_mse"]

    c0 = counter()
    losses["distill"], ms2 = timed(lambda: finetune_distill(m.distill, split.train, cfg))
    report.extras["distill_phase_retrieval_calls"] = counter() - c0
    _record(report, "distill", "test", m.distill, split.test, counter, None if ms is None else ms + ms2)
    report.extras["epoch_losses"] = losses
    report.extras["sizes"] = {"shifting": len(split.shifting), "train": len(split.train), "test": len(split.test)}
    return report, m


# ---------------------------------------------------------------- experiments


def run_invariance_experiment(split: TemporalSplit, cfg: TrainConfig,
                              index: InvertedIndex | None = None) -> ExperimentReport:
    """Frozen relevance networks pretrained on the shifting vs the train window.

    The search space is the shifting window in both arms.
    """
    cfg = replace(cfg, freeze_relevance=True)
    card = split.shifting.schema.cardinalities
    index = build_index(split.shifting) if index is None else index
    neighbors = NeighborCache(index, cfg.k)
    report = ExperimentReport("relevance pretraining: shifting vs train")
    checks = {}
    for arm, data in (("pretrained_shifting", split.shifting), ("pretrained_train", split.train)):
        teacher = TeacherRetrieval(card, neighbors, cfg.dim, _seed(cfg, "teacher"))
        pretrain_teacher(teacher, split, cfg, data=data)
        fw = RetrievalFramework(OriginalModel(card, cfg.dim, cfg.hidden, _seed(cfg, "fw-original"),
                                              prefix="retrieval_fw.original"),
                                teacher.extract_relevance(), cfg.hidden, _seed(cfg, "fw-retrieval"))
        before = fw.relevance.state()
        finetune_retrieval(fw, split, cfg)
        after = fw.relevance.state()
        checks[arm] = all(np.array_equal(before[k], after[k]) for k in before)
        _record(report, arm, "test", fw, split.test, lambda: neighbors.requests)
    a, b = report.get("pretrained_shifting").auc, report.get("pretrained_train").auc
    report.extras["winner"] = "pretrained_shifting" if a > b else "pretrained_train"
    report.extras["auc_gap"] = a - b
    report.extras["relevance_frozen"] = checks
    return report


def original_builder(cfg: TrainConfig) -> Callable[[Sequence[int]], OriginalModel]:
    return lambda card: OriginalModel(card, cfg.dim, cfg.hidden, _seed(cfg, "original"))


def run_shift_curve(d: Dataset, builder: Callable[[Sequence[int]], Module], windows: Sequence[int],
                    cfg: TrainConfig) -> list[tuple[int, float]]:
    """AUC on the fixed test window of a fresh model trained on days ``[start, train_end)``.

    The test window is the newest ``cfg.test_days`` days.
    """
    days = d.days()
    test_start = int(days.max()) - cfg.test_days + 1
    test = d.subset(days >= test_start)
    curve = []
    for start in windows:
        train = d.subset((days >= start) & (days < test_start))
        if len(train) == 0:
            raise PhaseError(f"window starting at day {start} holds no rows")
        model = builder(d.schema.cardinalities)
        fit_binary(model, train.features, train.labels, cfg.finetune_epochs, cfg, f"shift-curve-{start}")
        curve.append((int(start), evaluate(model, test)[0]))
    return curve


def timing_report(models: dict[str, Module], test: Dataset, repeats: int = 3,
                  batch_size: int = 256) -> dict[str, dict]:
    """Median inference ms per 1000 rows and retrieval calls per model.

    Each model gets one untimed warm-up pass, then the timed passes
    alternate between models so background load hits all of them alike.
    Retrieval memos are bypassed so every pass pays for its searches.
    """
    caches = {name: getattr(getattr(m, "relevance", None), "neighbors", None) for name, m in models.items()}
    memos = {}
    for name, neighbors in caches.items():
        if neighbors is not None:
            memos[name], neighbors.memo = neighbors.memo, False

    def calls(name: str) -> int:
        return caches[name].requests if caches[name] is not None else 0

    for model in models.values():
        predict_proba(model, test.features, batch_size=batch_size)
    calls0 = {name: calls(name) for name in models}
    times: dict[str, list[float]] = {name: [] for name in models}
    for _ in range(repeats):
        for name, model in models.items():
            t0 = time.perf_counter()
            predict_proba(model, test.features, batch_size=batch_size)
            times[name].append((time.perf_counter() - t0) * 1e3)
    out = {name: {"ms_per_1k": float(np.median(times[name])) * 1000.0 / len(test),
                  "retrieval_calls": int(calls(name) - calls0[name])} for name in models}
    for name, neighbors in caches.items():
        if neighbors is not None:
            neighbors.memo = memos[name]
    if "distill" in out and out["distill"]["retrieval_calls"] != 0:
        raise PhaseError("distill framework issued retrieval calls")
    if "retrieval" in out and out["retrieval"]["retrieval_calls"] == 0:
        raise PhaseError("retrieval framework issued no retrieval calls")
    return out
