"""Fine-tuning loop, evaluation, and the learning-rate grid search.

Training is single-writer and bit-reproducible: the seed drives batch order
and every init, and torch runs single-threaded inside the loop. Only
parameters flagged trainable by the model's mask ever change; the suite
asserts frozen tensors bit-identical after training.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import torch
from torch import nn

from . import metrics
from .data import TAG_VOCAB
from .encoder import AdaptedModel, encode_classification, encode_token_sentences

logger = logging.getLogger(__name__)

LR_GRID = (1e-5, 2e-5, 3e-5, 4e-5, 5e-5)
POSITIVE_LABELS = {"spam": "spam", "dga": "DGA"}
TASK_LABELS = {"spam": ("ham", "spam"), "dga": ("Non-DGA", "DGA")}
MAX_SEQ_LEN = {"spam": 512, "dga": 128, "cti": 128}


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    epochs: int = 3
    batch_size: int = 8
    max_seq_len: int = 128
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class MetricsReport:
    f1: float
    accuracy: float = 0.0
    trainable_fraction: float | None = None
    wall_time_seconds: float | None = None
    relative_time_vs_full: float | None = None
    loss_trace: list[float] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    TIMING_KEYS = ("wall_time_seconds", "relative_time_vs_full")

    def to_dict(self) -> dict:
        return {
            "f1": self.f1,
            "accuracy": self.accuracy,
            "trainable_fraction": self.trainable_fraction,
            "wall_time_seconds": self.wall_time_seconds,
            "relative_time_vs_full": self.relative_time_vs_full,
            "loss_trace": list(self.loss_trace),
            "extras": dict(self.extras),
        }

    def comparable_dict(self) -> dict:
        """Report content minus wall-clock fields (those can never repeat exactly)."""
        d = self.to_dict()
        for key in self.TIMING_KEYS:
            d.pop(key)
        return d


@dataclass
class EncodedDataset:
    """Tensors ready for the loop, plus enough metadata to decode predictions."""

    task: str  # spam | dga | cti
    ids: torch.Tensor
    mask: torch.Tensor
    labels: torch.Tensor  # (b,) class ids, or (b, L) tag ids with -100 padding
    label_names: list[str]
    texts: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def token_level(self) -> bool:
        return self.labels.dim() == 2


def encode_dataset(task: str, examples, tokenizer, max_seq_len: int | None = None) -> EncodedDataset:
    """Turn task examples into padded tensors; truncation per task, never an error."""
    max_len = max_seq_len or MAX_SEQ_LEN[task]
    if task in ("spam", "dga"):
        names = list(TASK_LABELS[task])
        index = {n: i for i, n in enumerate(names)}
        unknown = sorted({ex.label for ex in examples} - set(names))
        if unknown:
            raise ValueError(f"labels outside the {task} vocabulary: {unknown}")
        ids, mask = encode_classification([ex.text for ex in examples], tokenizer, max_len)
        labels = torch.tensor([index[ex.label] for ex in examples], dtype=torch.long)
        return EncodedDataset(task, ids, mask, labels, names, [ex.text for ex in examples])
    if task == "cti":
        names = list(TAG_VOCAB)
        bad = sorted({t for s in examples for t in s.tags} - set(names))
        if bad:
            raise ValueError(f"tags outside the vocabulary: {bad[:5]}")
        ids, mask, tags = encode_token_sentences(examples, tokenizer, names, max_len)
        return EncodedDataset(task, ids, mask, tags, names, [list(s.tokens) for s in examples])
    raise ValueError(f"unknown task {task!r}")


def _optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        segments = name.split(".")
        if name.endswith(".bias") or "norm" in segments or segments[0] == "shared_phm":
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]
    return torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.eps)


def _loss_fn(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    if labels.dim() == 2:  # token task: average over non-padding positions
        return nn.functional.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=-100
        )
    return nn.functional.cross_entropy(logits, labels)


@dataclass
class TrainResult:
    model: AdaptedModel
    report: MetricsReport


def train(model: AdaptedModel, data: EncodedDataset, cfg: TrainConfig) -> TrainResult:
    """Run the loop; returns the (mutated) model and a report with the loss trace."""
    if len(data) == 0:
        raise ValueError("empty training dataset")
    if model.mask is None:
        raise ValueError("model has no trainable mask")
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        optimizer = _optimizer(model, cfg)
        gen = torch.Generator().manual_seed(cfg.seed)
        trace: list[float] = []
        model.train()
        start = time.perf_counter()
        for epoch in range(cfg.epochs):
            order = torch.randperm(len(data), generator=gen)
            epoch_losses = []
            for lo in range(0, len(data), cfg.batch_size):
                batch = order[lo: lo + cfg.batch_size]
                logits = model(data.ids[batch], data.mask[batch])
                loss = _loss_fn(logits, data.labels[batch])
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} step {lo // cfg.batch_size}: {loss.item()}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                epoch_losses.append(loss.item())
            trace.append(sum(epoch_losses) / len(epoch_losses))
            logger.debug("epoch %d mean loss %.4f", epoch, trace[-1])
        wall = time.perf_counter() - start
    finally:
        torch.set_num_threads(n_threads)
    model.eval()
    report = MetricsReport(
        f1=0.0,
        trainable_fraction=model.mask.trainable_fraction,
        wall_time_seconds=wall,
        loss_trace=trace,
        extras={"seed": cfg.seed, "learning_rate": cfg.learning_rate, "epochs": cfg.epochs},
    )
    return TrainResult(model, report)


def predict(model: AdaptedModel, data: EncodedDataset, batch_size: int = 64) -> torch.Tensor:
    """Logits for the whole dataset, batched, no grad."""
    outs = []
    model.eval()
    with torch.no_grad():
        for lo in range(0, len(data), batch_size):
            outs.append(model(data.ids[lo: lo + batch_size], data.mask[lo: lo + batch_size]))
    if not outs:
        return torch.zeros(0)
    return torch.cat(outs)


def evaluate(model: AdaptedModel, data: EncodedDataset,
             trained_report: MetricsReport | None = None) -> MetricsReport:
    """Binary F1 of the positive class for spam/dga; weighted F1 over tags for cti."""
    if len(data) == 0:
        raise ValueError("empty evaluation dataset")
    logits = predict(model, data)
    if data.token_level:
        keep = data.labels.reshape(-1) != -100
        flat_pred = logits.argmax(-1).reshape(-1)[keep]
        flat_gold = data.labels.reshape(-1)[keep]
        gold = [data.label_names[i] for i in flat_gold.tolist()]
        pred = [data.label_names[i] for i in flat_pred.tolist()]
        f1 = metrics.weighted_f1(gold, pred)
    else:
        pred_ids = logits.argmax(-1).tolist()
        gold = [data.label_names[i] for i in data.labels.tolist()]
        pred = [data.label_names[i] for i in pred_ids]
        f1 = metrics.binary_f1(gold, pred, POSITIVE_LABELS[data.task])
    report = MetricsReport(f1=f1, accuracy=metrics.accuracy(gold, pred))
    if trained_report is not None:
        report.trainable_fraction = trained_report.trainable_fraction
        report.wall_time_seconds = trained_report.wall_time_seconds
        report.loss_trace = trained_report.loss_trace
        report.extras = dict(trained_report.extras)
    return report


@dataclass
class GridPoint:
    learning_rate: float
    report: MetricsReport


@dataclass
class GridResult:
    best: GridPoint
    table: list[GridPoint]


def grid_search(model_factory, train_data: EncodedDataset, eval_data: EncodedDataset,
                lr_grid=LR_GRID, epochs: int = 3, base_config: TrainConfig | None = None) -> GridResult:
    """Train one fresh model per learning rate; ties break to the lowest rate."""
    if not lr_grid:
        raise ValueError("empty learning-rate grid")
    base = base_config or TrainConfig()
    table: list[GridPoint] = []
    best: GridPoint | None = None
    for lr in sorted(lr_grid):
        cfg = TrainConfig(learning_rate=lr, epochs=epochs, batch_size=base.batch_size,
                          max_seq_len=base.max_seq_len, seed=base.seed,
                          weight_decay=base.weight_decay, betas=base.betas, eps=base.eps)
        model = model_factory()
        result = train(model, train_data, cfg)
        report = evaluate(model, eval_data, result.report)
        point = GridPoint(lr, report)
        table.append(point)
        if best is None or report.f1 > best.report.f1:
            best = point
    return GridResult(best, table)


@dataclass
class TimingComparison:
    compfreeze_seconds: list[float]
    full_seconds: list[float]

    @staticmethod
    def _median(values: list[float]) -> float:
        ordered = sorted(values)
        return ordered[len(ordered) // 2]

    @property
    def relative_time_vs_full(self) -> float:
        """Signed fraction: negative when the adapter run is faster."""
        full = self._median(self.full_seconds)
        return (self._median(self.compfreeze_seconds) - full) / full


def compare_training_time(compfreeze_factory, full_factory, data: EncodedDataset,
                          cfg: TrainConfig, repetitions: int = 3) -> TimingComparison:
    """Back-to-back same-process runs, median of `repetitions` per variant."""
    cf, full = [], []
    for _ in range(repetitions):
        cf.append(train(compfreeze_factory(), data, cfg).report.wall_time_seconds)
        full.append(train(full_factory(), data, cfg).report.wall_time_seconds)
    return TimingComparison(cf, full)


def parameter_fingerprint(model: nn.Module, only_frozen: bool = False) -> dict[str, bytes]:
    """Raw bytes per parameter, for bit-identity checks across training."""
    out = {}
    for name, p in model.named_parameters():
        if only_frozen and p.requires_grad:
            continue
        out[name] = p.detach().cpu().numpy().tobytes()
    return out
