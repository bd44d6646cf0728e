"""Mini-batch training with AdamW, SRCC-driven early stopping, and k-fold cross-validation."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses
from .data import PredictionSet, UtteranceRecord
from .errors import ConfigError, DivergenceError, ValidationError
from .features import FeatureExtractor
from .losses import LossConfig
from .metrics import MetricReport, full_report, spearman, system_aggregate
from .model import Checkpoint, ModelConfig, ScoreModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    patience_steps: int = 2000
    validate_every: int = 100
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    max_steps: int = 50000
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1 or self.validate_every < 1 or self.max_steps < 1:
            raise ConfigError("batch_size, validate_every and max_steps must be >= 1")
        if self.patience_steps < self.validate_every:
            raise ConfigError("patience_steps must be >= validate_every")


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


def optimizer_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor | None],
                   state: AdamWState, cfg: TrainConfig, exempt=frozenset()):
    """One AdamW update, in place. Names in `exempt` get no weight decay.

    p <- p * (1 - lr*wd);  m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - cfg.beta1**t
    bias2 = 1.0 - cfg.beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            m, v = state.exp_avg[name], state.exp_avg_sq[name]
            if name not in exempt and cfg.weight_decay:
                p.mul_(1.0 - cfg.learning_rate * cfg.weight_decay)
            m.mul_(cfg.beta1).add_(g, alpha=1.0 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1.0 - cfg.beta2)
            denom = (v / bias2).sqrt_().add_(cfg.adam_eps)
            p.addcdiv_(m / bias1, denom, value=-cfg.learning_rate)
    return params, state


# -- early stopping -----------------------------------------------------------

class EarlyStopping:
    """Tracks the first step with the highest score; stops `patience` steps after it."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_step: int | None = None
        self.best_value = -math.inf

    def update(self, step: int, value: float) -> bool:
        """Record a validation score; True when it is a new best."""
        if value > self.best_value:
            self.best_value = value
            self.best_step = step
            return True
        return False

    def should_stop(self, step: int) -> bool:
        return self.best_step is not None and step - self.best_step >= self.patience


@dataclass
class HistoryRow:
    step: int
    train_loss: float
    dev_sys_srcc: float
    is_best: bool
    best_step: int


@dataclass
class TrainHistory:
    rows: list[HistoryRow] = field(default_factory=list)
    stop_step: int = 0

    @property
    def best_step(self) -> int | None:
        best = [r for r in self.rows if r.is_best]
        return best[-1].step if best else None

    @property
    def best_value(self) -> float:
        return max((r.dev_sys_srcc for r in self.rows), default=-math.inf)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "train_loss", "dev_sys_srcc", "is_best"])
            for r in self.rows:
                w.writerow([r.step, f"{r.train_loss:.9f}", f"{r.dev_sys_srcc:.9f}", int(r.is_best)])


# -- training -----------------------------------------------------------------

class _BatchLoss(torch.autograd.Function):
    """Evaluates a numpy loss and hands its analytic gradient to autograd."""

    @staticmethod
    def forward(ctx, preds, labels, loss_cfg):
        p = preds.detach().cpu().double().numpy()
        value = losses.loss_value(loss_cfg, p, labels)
        ctx.save_for_backward(torch.as_tensor(losses.gradient(loss_cfg, p, labels), dtype=preds.dtype))
        return preds.new_tensor(value)

    @staticmethod
    def backward(ctx, grad_out):
        (g,) = ctx.saved_tensors
        return grad_out * g, None, None


def batch_loss(preds: torch.Tensor, labels, loss_cfg: LossConfig) -> torch.Tensor:
    return _BatchLoss.apply(preds, np.asarray(labels, dtype=np.float64), loss_cfg)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless shuffled mini-batches; a short final chunk of each epoch is dropped."""
    size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield perm[start:start + size]


def dev_criterion(scores, records: list[UtteranceRecord]) -> float:
    """System-level SRCC on the dev set, or utterance-level SRCC when it has fewer than two systems."""
    preds = PredictionSet.from_records(records, scores)
    pred_means, true_means = system_aggregate(preds, records)
    if len(pred_means) >= 2:
        return spearman(list(pred_means.values()), list(true_means.values())).value
    return spearman(list(preds.entries.values()), [r.mos for r in records]).value


def _score(model: ScoreModel, bundles) -> np.ndarray:
    with torch.no_grad():
        return model.score_bundles(bundles).double().numpy()


def train(train_records: list[UtteranceRecord], dev_records: list[UtteranceRecord], cfg: TrainConfig,
          extractor: FeatureExtractor, meta: dict | None = None) -> tuple[Checkpoint, TrainHistory]:
    """Train until dev SRCC has not improved for cfg.patience_steps steps; return the best checkpoint."""
    if not train_records or not dev_records:
        raise ValidationError("train and dev splits must be non-empty")
    if len(train_records) < cfg.loss.min_batch:
        raise ValidationError(f"loss {cfg.loss.name} needs at least {cfg.loss.min_batch} training records")
    if len({r.system_id for r in dev_records}) < 2:
        warnings.warn("dev split spans fewer than 2 systems; early stopping uses utterance-level SRCC",
                      stacklevel=2)
    train_bundles = extractor.bundles(train_records)
    dev_bundles = extractor.bundles(dev_records)
    labels = np.array([r.mos for r in train_records])

    model = ScoreModel(cfg.model, seed=cfg.seed)
    model.train()
    params = dict(model.named_parameters())
    exempt = model.decay_exempt()
    opt_state = AdamWState()
    rng = np.random.default_rng(cfg.seed)
    stopper = EarlyStopping(cfg.patience_steps)
    history = TrainHistory()
    best_state = None
    running: list[float] = []

    batches = _batches(len(train_records), cfg.batch_size, rng)
    for step in range(1, cfg.max_steps + 1):
        idx = next(batches)
        model.zero_grad(set_to_none=True)
        preds = model.score_bundles([train_bundles[i] for i in idx])
        loss = batch_loss(preds, labels[idx], cfg.loss)
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        loss.backward()
        optimizer_step(params, {k: p.grad for k, p in params.items()}, opt_state, cfg, exempt)
        running.append(value)

        if step % cfg.validate_every == 0 or step == cfg.max_steps:
            srcc = dev_criterion(_score(model, dev_bundles), dev_records)
            improved = stopper.update(step, srcc)
            if improved:
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            history.rows.append(HistoryRow(step, float(np.mean(running)), srcc, improved, stopper.best_step))
            log.debug("step %d loss %.5f dev srcc %.4f", step, np.mean(running), srcc)
            running = []
            if stopper.should_stop(step):
                break
    history.stop_step = step
    model.load_state_dict(best_state)
    ckpt = Checkpoint.from_model(model, seed=cfg.seed, step=stopper.best_step,
                                 feature_hash=extractor.config_hash, meta=meta)
    return ckpt, history


def predict(checkpoint: Checkpoint, records: list[UtteranceRecord], extractor: FeatureExtractor,
            model: ScoreModel | None = None) -> PredictionSet:
    if checkpoint.feature_hash != extractor.config_hash:
        raise ConfigError(f"checkpoint features {checkpoint.feature_hash} do not match "
                          f"extractor features {extractor.config_hash}")
    if not records:
        return PredictionSet()
    model = model or checkpoint.build_model()
    scores = _score(model, extractor.bundles(records))
    return PredictionSet.from_records(records, scores)


@dataclass
class CVResult:
    checkpoints: list[Checkpoint]
    pooled: PredictionSet
    fold_metrics: list[MetricReport]
    histories: list[TrainHistory]
    dev_scores: list[float]

    @property
    def best_fold(self) -> int:
        # np.argmax returns the first maximum, i.e. the lowest fold index on ties
        return int(np.argmax(self.dev_scores))


def cross_validate(records: list[UtteranceRecord], cfg: TrainConfig, extractor: FeatureExtractor,
                   k: int = 5, meta: dict | None = None) -> CVResult:
    """Train one model per held-out fold and pool the held-out predictions."""
    if any(r.fold is None for r in records):
        raise ValidationError("every record needs a fold; run kfold_split first")
    folds = sorted({r.fold for r in records})
    if folds != list(range(k)):
        raise ValidationError(f"expected folds 0..{k - 1}, found {folds}")
    checkpoints, reports, histories, scores = [], [], [], []
    held_out: dict[str, float] = {}
    for fold in range(k):
        tr = [r for r in records if r.fold != fold]
        dev = [r for r in records if r.fold == fold]
        log.info("fold %d: %d train / %d dev", fold, len(tr), len(dev))
        ckpt, hist = train(tr, dev, cfg, extractor, meta=meta)
        dev_preds = predict(ckpt, dev, extractor)
        held_out.update(dev_preds.entries)
        checkpoints.append(ckpt)
        histories.append(hist)
        reports.append(full_report(dev_preds, dev))
        scores.append(hist.best_value)
    pooled = PredictionSet({r.utterance_id: held_out[r.utterance_id] for r in records},
                           {r.utterance_id: r.system_id for r in records})
    return CVResult(checkpoints, pooled, reports, histories, scores)
