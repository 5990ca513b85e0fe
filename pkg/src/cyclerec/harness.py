"""Continual train-then-evaluate protocol.

For each update cycle the current model is grown to the new vocabulary,
trained with the method's loss recipe, early-stopped on validation
recall, evaluated on the *next* cycle's data, and the exemplar store is
refreshed. Cycles are strictly sequential; method x seed runs are
independent and may be dispatched to worker processes.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .data import CycleDataset, ItemRegistry, TrainingExample
from .exemplars import ExemplarSet, SelectionStrategy, select_exemplars
from .losses import adaptive_lambda, fisher_diagonal, teacher_probabilities
from .metrics import CycleReport, mrr_at_k, rank_of_target, recall_at_k
from .model import (
    BatchSpec,
    DivergenceError,
    ModelConfig,
    ModelState,
    extract_features_batch,
    grow_vocabulary,
    init_model,
    loss_and_gradients,
    adam_step,
)

logger = logging.getLogger(__name__)


class MethodKind(str, Enum):
    FINETUNE = "Finetune"
    DROPOUT = "Dropout"
    EWC = "EWC"
    JOINT = "Joint"
    ADER = "ADER"
    ADER_EQUAL = "ADER_equal"
    ADER_FIX = "ADER_fix"
    ER_HERDING = "ER_herding"
    ER_RANDOM = "ER_random"
    ER_LOSS = "ER_loss"

    @classmethod
    def parse(cls, name: str) -> "MethodKind":
        for kind in cls:
            if name.lower() in (kind.name.lower(), kind.value.lower()):
                return kind
        raise ValueError(f"unknown method '{name}' (choose from {[k.value for k in cls]})")


KD_KINDS = {MethodKind.ADER, MethodKind.ADER_EQUAL, MethodKind.ADER_FIX}
ER_KINDS = {MethodKind.ER_HERDING, MethodKind.ER_RANDOM, MethodKind.ER_LOSS}
EXEMPLAR_KINDS = KD_KINDS | ER_KINDS | {MethodKind.EWC}

_SELECTION = {
    MethodKind.EWC: SelectionStrategy.HERDING,
    MethodKind.ADER: SelectionStrategy.HERDING,
    MethodKind.ADER_FIX: SelectionStrategy.HERDING,
    MethodKind.ADER_EQUAL: SelectionStrategy.EQUAL_HERDING,
    MethodKind.ER_HERDING: SelectionStrategy.HERDING,
    MethodKind.ER_RANDOM: SelectionStrategy.RANDOM,
    MethodKind.ER_LOSS: SelectionStrategy.LOSS,
}


@dataclass
class MethodSpec:
    """A continual-learning method and its hyperparameters."""

    kind: MethodKind
    lambda_base: float = 0.8
    fixed_lambda: float = 0.8
    exemplar_capacity: int = 1000
    dropout_rate: float | None = None  # None resolves to the kind's default
    ewc_strength: float = 100.0
    normalize_herding: bool = False

    def __post_init__(self) -> None:
        self.kind = MethodKind(self.kind)
        if self.dropout_rate is None:
            self.dropout_rate = 0.0 if self.kind in (MethodKind.FINETUNE, MethodKind.EWC) else 0.3
        if self.kind in (MethodKind.FINETUNE, MethodKind.EWC) and self.dropout_rate != 0.0:
            raise ValueError(f"{self.kind.value}: dropout must be 0 (the dropout variant is its own baseline)")
        if self.kind in EXEMPLAR_KINDS and self.exemplar_capacity < 1:
            raise ValueError(f"{self.kind.value}: exemplar_capacity must be positive")

    @property
    def selection_strategy(self) -> SelectionStrategy | None:
        return _SELECTION.get(self.kind)

    @property
    def name(self) -> str:
        return self.kind.value


@dataclass
class TrainLoopConfig:
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = 128
    learning_rate: float = 5e-4
    seed: int = 0
    kd_batch_size: int | None = None
    eval_batch_size: int = 512
    early_stop_k: int = 20

    def __post_init__(self) -> None:
        if self.patience >= self.max_epochs:
            raise ValueError("train loop: patience must be < max_epochs")
        if min(self.max_epochs, self.patience, self.batch_size) < 1:
            raise ValueError("train loop: counts must be positive")


@dataclass
class EpochRecord:
    cycle: int
    epoch: int
    ce: float
    kd: float
    ewc: float
    total: float
    lambda_t: float
    val_recall: float


@dataclass
class ExperimentState:
    """Everything carried across cycles for one method run."""

    model: ModelState
    previous_model: ModelState | None = None
    exemplars: ExemplarSet | None = None
    registry: ItemRegistry | None = None
    history: list[CycleReport] = field(default_factory=list)
    joint_buffer: list[TrainingExample] = field(default_factory=list)
    ewc_anchor: dict[str, np.ndarray] | None = None
    ewc_fisher: dict[str, np.ndarray] | None = None
    last_cycle: int = -1


class EarlyStopper:
    """Strict-improvement patience counter with best-payload snapshots."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_payload = None
        self.best_epoch = 0
        self.streak = 0

    def update(self, value: float, epoch: int, payload_fn) -> bool:
        """Record one epoch's validation value; True means stop now."""
        if value > self.best:
            self.best = value
            self.best_epoch = epoch
            self.best_payload = payload_fn()
            self.streak = 0
        else:
            self.streak += 1
        return self.streak >= self.patience


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def evaluate_model(
    model: ModelState,
    examples: Sequence[TrainingExample],
    item_range: int,
    ks: Sequence[int] = (10, 20),
    batch_size: int = 512,
) -> tuple[dict[int, float], dict[int, float], float]:
    """Full-ranking recall/MRR of ``model`` over the first ``item_range`` items.

    Targets outside the range cannot be ranked and count as misses; prefix
    items outside the range are dropped (a fully-unseen prefix is a miss).
    """
    if not examples:
        raise ValueError("evaluate_model: empty test set")
    ranks: list[float] = []
    unseen = 0
    rankable: list[tuple[tuple[int, ...], int]] = []
    for ex in examples:
        prefix = tuple(i for i in ex.prefix if i < item_range)
        if ex.target >= item_range or not prefix:
            unseen += 1
            ranks.append(np.inf)
        else:
            rankable.append((prefix, ex.target))
    emb = model.params["item_emb"][:item_range]
    for lo in range(0, len(rankable), batch_size):
        chunk = rankable[lo : lo + batch_size]
        feats = extract_features_batch(model, [p for p, _ in chunk], batch_size=batch_size)
        logits = feats @ emb.T
        for row, (_, target) in enumerate(chunk):
            ranks.append(float(rank_of_target(logits[row], target)))
    recall = {k: recall_at_k(ranks, k) for k in ks}
    mrr = {k: mrr_at_k(ranks, k) for k in ks}
    return recall, mrr, unseen / len(examples)


def _validation_recall(model: ModelState, examples, k: int, batch_size: int) -> float:
    recall, _, _ = evaluate_model(model, examples, model.item_count, ks=(k,), batch_size=batch_size)
    return recall[k]


def update_model(
    state: ExperimentState,
    cycle_data: CycleDataset,
    method: MethodSpec,
    loop_cfg: TrainLoopConfig,
    audit: list | None = None,
) -> list[EpochRecord]:
    """Train one cycle per the method's recipe and refresh the exemplar store."""
    t = cycle_data.cycle_id
    if t != state.last_cycle + 1:
        raise ValueError(f"update_model: expected cycle {state.last_cycle + 1}, got {t}")
    if not cycle_data.train:
        raise ValueError(f"update_model: cycle {t} has no training data")
    if audit is not None:
        audit.append(("train", t, len(cycle_data.train)))

    model = state.model
    old_item_count = model.item_count
    grow_vocabulary(model, cycle_data.item_count_after, seed=_derived_seed(loop_cfg.seed, t, 101))
    if state.ewc_anchor is not None:
        extra = model.item_count - state.ewc_anchor["item_emb"].shape[0]
        if extra > 0:  # new rows carry zero Fisher weight, so their anchor value is inert
            pad = np.zeros((extra, model.config.embed_dim))
            state.ewc_anchor["item_emb"] = np.concatenate([state.ewc_anchor["item_emb"], pad])
            state.ewc_fisher["item_emb"] = np.concatenate([state.ewc_fisher["item_emb"], pad])

    exemplar_examples = state.exemplars.all_examples() if state.exemplars else []
    ce_pool: list[TrainingExample] = list(cycle_data.train)
    if method.kind is MethodKind.JOINT:
        ce_pool = list(state.joint_buffer) + ce_pool
    if method.kind in ER_KINDS and exemplar_examples:
        ce_pool = ce_pool + exemplar_examples

    lambda_t = 0.0
    kd_examples: list[TrainingExample] = []
    teacher_probs = None
    if method.kind in KD_KINDS and state.previous_model is not None and exemplar_examples:
        if method.kind is MethodKind.ADER_FIX:
            lambda_t = method.fixed_lambda
        else:
            lambda_t = adaptive_lambda(
                method.lambda_base, old_item_count, model.item_count,
                len(exemplar_examples), len(cycle_data.train),
            )
        if lambda_t != 0.0:
            kd_examples = exemplar_examples
            teacher_probs = teacher_probabilities(
                state.previous_model, kd_examples, old_item_count,
                batch_size=loop_cfg.eval_batch_size,
            )

    ewc_active = method.kind is MethodKind.EWC and state.ewc_anchor is not None

    kd_bs = loop_cfg.kd_batch_size or loop_cfg.batch_size
    kd_cursor = 0
    stopper = EarlyStopper(loop_cfg.patience)
    records: list[EpochRecord] = []
    has_validation = bool(cycle_data.validation)
    if not has_validation:
        logger.warning("cycle %d has no validation examples; early stopping disabled", t)

    for epoch in range(1, loop_cfg.max_epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([loop_cfg.seed, t, epoch, 7]))
        order = rng.permutation(len(ce_pool))
        sums = {"ce": 0.0, "kd": 0.0, "ewc": 0.0, "total": 0.0}
        steps = 0
        for lo in range(0, len(order), loop_cfg.batch_size):
            batch = [ce_pool[i] for i in order[lo : lo + loop_cfg.batch_size]]
            spec = BatchSpec(
                ce_examples=batch,
                ce_item_range=model.item_count,
                train_mode=method.dropout_rate > 0.0,
                dropout_seed=_derived_seed(loop_cfg.seed, t, epoch, steps),
            )
            if kd_examples:
                sel = [(kd_cursor + j) % len(kd_examples) for j in range(min(kd_bs, len(kd_examples)))]
                kd_cursor = (kd_cursor + len(sel)) % len(kd_examples)
                spec.kd_examples = [kd_examples[j] for j in sel]
                spec.kd_teacher_probs = teacher_probs[sel]
                spec.kd_item_range = old_item_count
                spec.kd_weight = lambda_t
            if ewc_active:
                spec.ewc_anchor = state.ewc_anchor
                spec.ewc_fisher = state.ewc_fisher
                spec.ewc_weight = method.ewc_strength
            try:
                breakdown, grads = loss_and_gradients(model, spec)
            except DivergenceError as err:
                raise DivergenceError(f"cycle {t} epoch {epoch} step {steps}: {err}") from err
            adam_step(model, grads, lr=loop_cfg.learning_rate)
            for key, val in (("ce", breakdown.ce), ("kd", breakdown.kd),
                             ("ewc", breakdown.ewc), ("total", breakdown.total)):
                sums[key] += val
            steps += 1
        val = (
            _validation_recall(model, cycle_data.validation, loop_cfg.early_stop_k, loop_cfg.eval_batch_size)
            if has_validation
            else 0.0
        )
        records.append(EpochRecord(t, epoch, sums["ce"] / steps, sums["kd"] / steps,
                                   sums["ewc"] / steps, sums["total"] / steps, lambda_t, val))
        logger.debug("cycle %d epoch %d: total=%.4f val_recall@%d=%.4f",
                     t, epoch, sums["total"] / steps, loop_cfg.early_stop_k, val)
        if has_validation and stopper.update(val, epoch, model.copy):
            break

    if has_validation and stopper.best_payload is not None:
        state.model = stopper.best_payload
        model = state.model
        logger.info("cycle %d: stopped after %d epochs, restored epoch %d (val %.4f)",
                    t, records[-1].epoch, stopper.best_epoch, stopper.best)

    if method.kind in EXEMPLAR_KINDS:
        pool = list(cycle_data.train) + exemplar_examples
        state.exemplars = select_exemplars(
            model, pool, method.exemplar_capacity, method.selection_strategy,
            seed=_derived_seed(loop_cfg.seed, t, 55), created_cycle=t,
            normalize_features=method.normalize_herding, batch_size=loop_cfg.eval_batch_size,
        )
        if audit is not None:
            audit.append(("exemplars", t, state.exemplars.total_count))
    if method.kind is MethodKind.EWC and state.exemplars is not None:
        state.ewc_anchor = {k: v.copy() for k, v in model.params.items()}
        state.ewc_fisher = fisher_diagonal(model, state.exemplars.all_examples())
    if method.kind is MethodKind.JOINT:
        state.joint_buffer.extend(cycle_data.train)

    state.previous_model = model.copy()
    state.last_cycle = t
    return records


@dataclass
class RunResult:
    """Per-cycle reports plus diagnostics for one (method, seed) run."""

    method: MethodSpec
    seed: int
    reports: list[CycleReport]
    epoch_log: list[EpochRecord]
    audit: list[tuple]
    means: dict[str, float]


def run_experiment(
    datasets: Sequence[CycleDataset],
    method: MethodSpec,
    loop_cfg: TrainLoopConfig,
    model_cfg: ModelConfig,
    ks: Sequence[int] = (10, 20),
    registry: ItemRegistry | None = None,
) -> RunResult:
    """Train on cycles 0..T-2, evaluating each trained model on the next cycle.

    The final cycle is used only as test data. Reports are indexed by the
    update cycle (the cycle trained on).
    """
    from .metrics import aggregate

    if len(datasets) < 2:
        raise ValueError("run_experiment: need at least 2 cycles (last one is test-only)")
    cfg = dataclasses.replace(model_cfg, dropout_rate=method.dropout_rate)
    state = ExperimentState(
        model=init_model(cfg, datasets[0].item_count_after, seed=_derived_seed(loop_cfg.seed, 11)),
        registry=registry,
    )
    audit: list[tuple] = []
    epoch_log: list[EpochRecord] = []
    reports: list[CycleReport] = []
    for t in range(len(datasets) - 1):
        records = update_model(state, datasets[t], method, loop_cfg, audit=audit)
        epoch_log.extend(records)
        nxt = datasets[t + 1]
        audit.append(("eval", t + 1, len(nxt.train) + len(nxt.validation)))
        test = nxt.examples
        recall, mrr, unseen = evaluate_model(
            state.model, test, state.model.item_count, ks=ks, batch_size=loop_cfg.eval_batch_size
        )
        mean_losses = {
            key: float(np.mean([getattr(r, key) for r in records])) for key in ("ce", "kd", "ewc", "total")
        }
        report = CycleReport(
            cycle_id=t,
            recall_at=recall,
            mrr_at=mrr,
            test_example_count=len(test),
            unseen_target_fraction=unseen,
            mean_losses=mean_losses,
            lambda_t=records[-1].lambda_t,
            epochs_trained=len(records),
        )
        reports.append(report)
        state.history.append(report)
        logger.info("%s seed=%d cycle %d: recall@20=%.4f epochs=%d",
                    method.name, loop_cfg.seed, t, recall.get(20, max(recall.values())), len(records))
    return RunResult(method, loop_cfg.seed, reports, epoch_log, audit, aggregate(reports))


@dataclass
class ComparisonResult:
    """All runs of a method x seed grid plus seed-level summaries."""

    runs: list[RunResult]
    ks: tuple[int, ...]

    def methods(self) -> list[str]:
        seen: list[str] = []
        for run in self.runs:
            if run.method.name not in seen:
                seen.append(run.method.name)
        return seen

    def runs_for(self, method_name: str) -> list[RunResult]:
        return [r for r in self.runs if r.method.name == method_name]

    def summary(self) -> dict[str, dict[str, tuple[float, float]]]:
        """method -> metric -> (mean over seeds, population stdev over seeds)."""
        out: dict[str, dict[str, tuple[float, float]]] = {}
        for name in self.methods():
            rows = [r.means for r in self.runs_for(name)]
            metrics: dict[str, tuple[float, float]] = {}
            for key in rows[0]:
                vals = np.array([row[key] for row in rows])
                metrics[key] = (float(vals.mean()), float(vals.std()))
            out[name] = metrics
        return out


def _run_job(args) -> RunResult:
    datasets, method, loop_cfg, model_cfg, ks = args
    return run_experiment(datasets, method, loop_cfg, model_cfg, ks=ks)


def compare_methods(
    datasets: Sequence[CycleDataset],
    methods: Sequence[MethodSpec],
    seeds: Sequence[int],
    loop_cfg: TrainLoopConfig,
    model_cfg: ModelConfig,
    ks: Sequence[int] = (10, 20),
    workers: int = 1,
) -> ComparisonResult:
    """Run every method with every seed; order of results is deterministic."""
    if not seeds:
        raise ValueError("compare_methods: need at least one seed")
    if not methods:
        raise ValueError("compare_methods: need at least one method")
    jobs = [
        (list(datasets), method, dataclasses.replace(loop_cfg, seed=seed), model_cfg, tuple(ks))
        for method in methods
        for seed in seeds
    ]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(job) for job in jobs]
    return ComparisonResult(runs=results, ks=tuple(ks))
