"""
Training: the dynamic batch controller, the epoch loop over the weighted
multi-head triplet objective, the tab-separated training log and run
orchestration (splits, checkpoints, validation).
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, TextIO

import numpy as np
from tqdm import tqdm

from config import BatchConfig, LossConfig, RunConfig, dump_run_config, get_config
from dataset.dataset import Dataset, run_split
from errors import NumericError
from models.checkpoint import save_checkpoint
from models.network import PlaceRecognitionNet
from models.tensor import backward
from services.batching import PlaceGroupSampler, collate, load_samples, positions_of
from services.evaluator import evaluate_held_out
from services.losses import HEADS, LossBreakdown, head_loss, multi_head_loss, similarity_masks
from services.optimizer import Adam

logger = logging.getLogger(__name__)

LOG_COLUMNS = ('epoch', 'batch', 'batch_size', 'L_F', 'L_PC', 'L_RGB',
               'active_F', 'active_PC', 'active_RGB', 'lr_main', 'lr_image')
FINAL_CHECKPOINT = 'model.flc'
LOG_FILE = 'train.tsv'


class BatchController:
    """Grows the batch by `growth` whenever too few triplets are active; never shrinks."""

    def __init__(self, cfg: Optional[BatchConfig] = None):
        self.cfg = cfg or BatchConfig()
        self.current_size = self.cfg.initial_size

    def update(self, active: int) -> int:
        if active < self.cfg.active_threshold * self.current_size:
            grown = int(math.floor(self.current_size * self.cfg.growth + 0.5))
            self.current_size = min(max(grown, self.current_size), self.cfg.max_size)
        return self.current_size


def training_heads(model: PlaceRecognitionNet) -> tuple:
    return HEADS if model.modality == 'fused' else ('fused',)


def training_loss_config(model: PlaceRecognitionNet, loss: LossConfig) -> LossConfig:
    """Unimodal models train their single descriptor with the full weight."""
    if model.modality == 'fused':
        return loss
    return loss.model_copy(update={'alpha': 0.0, 'beta': 0.0})


class TrainingLog:
    """One tab-separated line per batch, preceded by the run configuration as # lines."""

    def __init__(self, stream: TextIO, cfg: RunConfig):
        self.stream = stream
        stream.write('# waymark training log\n')
        for line in dump_run_config(cfg).splitlines():
            stream.write(f"# {line}\n")
        stream.write('\t'.join(LOG_COLUMNS) + '\n')

    def batch(self, epoch: int, batch: int, size: int, losses: LossBreakdown, lr_main: float,
              lr_image: Optional[float] = None) -> None:
        """lr_image is written as - when the model has no image branch."""
        image = '-' if lr_image is None else f"{lr_image:.6g}"
        self.stream.write(
            f"{epoch}\t{batch}\t{size}\t{losses.l_f:.6f}\t{losses.l_pc:.6f}\t{losses.l_rgb:.6f}\t"
            f"{losses.active_f}\t{losses.active_pc}\t{losses.active_rgb}\t{lr_main:.6g}\t{image}\n")

    def validation(self, epoch: int, recall_at_1: float) -> None:
        self.stream.write(f"# val\tepoch\t{epoch}\trecall@1\t{recall_at_1:.6f}\n")
        self.stream.flush()


@dataclass
class EpochSummary:
    epoch: int
    batches: int = 0
    skipped: int = 0
    l_f: float = 0.0
    l_pc: float = 0.0
    l_rgb: float = 0.0
    total: float = 0.0
    active_f: float = 0.0
    active_pc: float = 0.0
    active_rgb: float = 0.0
    batch_size: int = 0

    def add(self, losses: LossBreakdown) -> None:
        self.batches += 1
        self.l_f += losses.l_f
        self.l_pc += losses.l_pc
        self.l_rgb += losses.l_rgb
        self.total += losses.total
        self.active_f += losses.active_f
        self.active_pc += losses.active_pc
        self.active_rgb += losses.active_rgb

    def finish(self, batch_size: int) -> 'EpochSummary':
        n = max(self.batches, 1)
        for name in ('l_f', 'l_pc', 'l_rgb', 'total', 'active_f', 'active_pc', 'active_rgb'):
            setattr(self, name, getattr(self, name) / n)
        self.batch_size = batch_size
        return self


def train_step(model: PlaceRecognitionNet, samples, cfg: RunConfig, loss_cfg: LossConfig,
               optimizer: Adam, epoch: int) -> LossBreakdown:
    """Forward, mine per head, weighted objective, backward and one Adam step.

    Batches without any mined triplet leave the parameters untouched.
    """
    descriptors = model(collate(samples, cfg.quantization))
    positive, negative = similarity_masks(positions_of(samples), loss_cfg.positive_radius_m,
                                          loss_cfg.negative_radius_m)
    heads = {name: head_loss(descriptors.head(name), positive, negative, loss_cfg.margin)
             for name in training_heads(model)}
    losses = multi_head_loss(heads, loss_cfg)
    if not math.isfinite(losses.total):
        raise NumericError(f"non-finite loss {losses.total} at epoch {epoch}")
    if not any(head.triplets for head in heads.values()):
        return losses
    optimizer.zero_grad()
    backward(losses.objective, model.parameters())
    optimizer.step(epoch)
    return losses


def train_epoch(model: PlaceRecognitionNet, dataset: Dataset, sampler: PlaceGroupSampler,
                controller: BatchController, optimizer: Adam, cfg: RunConfig, epoch: int,
                log: Optional[TrainingLog] = None) -> EpochSummary:
    """One pass over roughly len(dataset) elements in place-group batches."""
    model.train()
    loss_cfg = training_loss_config(model, cfg.loss)
    rng = np.random.default_rng([cfg.seed, epoch])
    summary = EpochSummary(epoch)
    seen = batch = 0
    while seen < len(dataset):
        size = min(controller.current_size, len(dataset))
        indices = sampler.sample(size, rng)
        samples = load_samples(dataset, indices, model.uses_clouds, model.uses_images, cfg.augmentation,
                               seed=cfg.seed, epoch=epoch, batch=batch, threads=cfg.threads)
        losses = train_step(model, samples, cfg, loss_cfg, optimizer, epoch)
        if log is not None:
            lr_image = optimizer.lr('image', epoch) if 'image' in optimizer.groups else None
            log.batch(epoch, batch, len(indices), losses, optimizer.lr('main', epoch), lr_image)
        if losses.triplets_f + losses.triplets_pc + losses.triplets_rgb == 0:
            summary.skipped += 1
        summary.add(losses)
        controller.update(losses.active_f)
        seen += len(indices)
        batch += 1
    return summary.finish(controller.current_size)


@dataclass
class TrainingResult:
    checkpoint: str
    log_path: str
    history: List[EpochSummary] = field(default_factory=list)
    validation: Dict[int, float] = field(default_factory=dict)
    digest: str = ''


def checkpoint_name(epoch: int) -> str:
    return f"checkpoint_e{epoch:03d}.flc"


def run_training(cfg: RunConfig, dataset: Dataset, out_dir: str, progress: bool = False) -> TrainingResult:
    """Train on the run's training split; checkpoints and the log go under out_dir.

    On a numeric failure the exception propagates and the last checkpoint
    written (if any) is left in place.
    """
    os.makedirs(out_dir, exist_ok=True)
    train_set, eval_set = run_split(dataset, cfg.data.query_traversal, cfg.data.test_region)
    logger.info("training on %d elements, evaluating on %d", len(train_set), len(eval_set))
    model = PlaceRecognitionNet.from_run_config(cfg)
    optimizer = Adam.for_model(model, cfg.optimizer)
    sampler = PlaceGroupSampler(train_set.positions(), cfg.loss.positive_radius_m, get_config().MAX_BATCH_RETRIES)
    controller = BatchController(cfg.batch)
    log_path = os.path.join(out_dir, LOG_FILE)
    result = TrainingResult(os.path.join(out_dir, FINAL_CHECKPOINT), log_path)
    last_good: Optional[str] = None

    with open(log_path, 'w', encoding='utf-8') as stream:
        log = TrainingLog(stream, cfg)
        epochs = tqdm(range(cfg.optimizer.epochs), desc='train', disable=not progress)
        for epoch in epochs:
            try:
                summary = train_epoch(model, train_set, sampler, controller, optimizer, cfg, epoch, log)
            except NumericError:
                stream.flush()
                logger.error("numeric failure in epoch %d; last good checkpoint: %s", epoch, last_good or 'none')
                raise
            result.history.append(summary)
            epochs.set_postfix(loss=f"{summary.total:.4f}", batch=controller.current_size)
            logger.info("epoch %d: loss %.4f (F %.4f, PC %.4f, RGB %.4f), batch size %d",
                        epoch, summary.total, summary.l_f, summary.l_pc, summary.l_rgb, summary.batch_size)
            done = epoch + 1
            if cfg.val_every and done % cfg.val_every == 0:
                recall = evaluate_held_out(model, eval_set, cfg.evaluation, cfg.data.query_traversal,
                                           quantization=cfg.quantization, threads=cfg.threads).recalls
                result.validation[done] = recall.get(1, 0.0)
                log.validation(done, result.validation[done])
            if cfg.save_every and done % cfg.save_every == 0 and done != cfg.optimizer.epochs:
                last_good = os.path.join(out_dir, checkpoint_name(done))
                save_checkpoint(model, cfg, last_good)
    result.digest = save_checkpoint(model, cfg, result.checkpoint)
    return result
