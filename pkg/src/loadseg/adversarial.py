"""Real-network side of LoAd: adversarial generator ticks, discriminator
retraining on the aggregated maps, and the trainer the controller drives."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, no_grad
from .controller import AggregationBuffer, ControllerConfig, LoadResult, MapSet, run_load
from .data import Dataset, derive_seed, flip_decision, rng_for
from .losses import discriminator_loss, hybrid_generator_loss
from .metrics import evaluate_model_miou, predict_dataset
from .models import (
    Discriminator,
    DiscriminatorSpec,
    Segmentor,
    build_model,
    class_split_stack,
    one_hot,
    restore,
    same_weights,
    snapshot,
)
from .optim import adagrad_step, frozen, sgd_momentum_step

log = logging.getLogger(__name__)


def _flip_batch(images: np.ndarray, maps: np.ndarray, seeds) -> tuple[np.ndarray, np.ndarray]:
    images = images.copy()
    maps = maps.copy()
    for j, s in enumerate(seeds):
        if flip_decision(s):
            images[j] = images[j, :, ::-1]
            maps[j] = maps[j, :, ::-1]
    return images, maps


def adversarial_tick(
    generator: Segmentor,
    discriminator: Discriminator,
    train: Dataset,
    config: ControllerConfig,
    tick_index: int,
) -> list[float]:
    """``steps_per_tick`` momentum-SGD updates of the generator on the hybrid loss.

    The generator's softmax output is the (soft) class weighting fed to the
    frozen discriminator, so the adversarial term reaches the generator
    weights. Returns the per-step loss values.
    """
    rng = rng_for(config.seed, "adv-tick", tick_index)
    m = len(train)
    batch = min(config.adv_batch_size, m)
    losses = []
    with frozen(discriminator.params):
        for step in range(config.steps_per_tick):
            idx = np.sort(rng.choice(m, size=batch, replace=False))
            base = (tick_index * config.steps_per_tick + step) * batch
            seeds = [derive_seed(config.seed, "adv-flip", base + j) for j in range(batch)]
            images, labels = _flip_batch(train.images[idx], train.labels[idx], seeds)
            dtype = generator.params["head.w"].dtype
            x = ad.Tensor(images, dtype=dtype)
            logits = generator.forward(x)
            scores = None
            if config.lam > 0:
                probs = ad.softmax(logits, axis=-1)
                scores = discriminator.forward(class_split_stack(x, probs))
            loss = hybrid_generator_loss(logits, labels, scores, config.lam)
            ad.backward_gradients(loss.total, generator.params)
            sgd_momentum_step(generator.params, config.lr_a, config.momentum)
            losses.append(loss.value)
    return losses


@dataclass
class DiscTrainReport:
    epochs: int
    accuracy: float
    stopped_by: str  # target | plateau | cap
    history: list[float] = field(default_factory=list)
    real_pairs: int = 0
    fake_pairs: int = 0


def discriminator_training_pairs(train: Dataset, buffer: AggregationBuffer) -> list[tuple[int, int]]:
    """(source, sample) pairs: source -1 is ground truth, otherwise a buffer slot."""
    if len(buffer) == 0:
        raise ContractError("buffer is empty")
    m = len(train)
    pairs = [(-1, i) for i in range(m)]
    for s, mapset in enumerate(buffer.sets):
        if len(mapset) != m:
            raise ContractError(f"buffer set {s} has {len(mapset)} maps for {m} training images")
        pairs.extend((s, i) for i in range(m))
    return pairs


def _stack(images: np.ndarray, maps: np.ndarray, num_classes: int, dtype) -> ad.Tensor:
    return class_split_stack(ad.Tensor(images, dtype=dtype), one_hot(maps, num_classes, dtype))


def holdout_accuracy(discriminator: Discriminator, holdout: Dataset, buffer: AggregationBuffer) -> float:
    """Balanced real-vs-fake accuracy on hold-out images (threshold 0.5)."""
    k = holdout.num_classes
    dtype = discriminator.params["fc.w"].dtype
    with no_grad():
        real = discriminator.forward(_stack(holdout.images, holdout.labels, k, dtype)).data
        fake_hits = []
        for mapset in buffer.sets:
            if mapset.holdout_maps is None:
                raise ContractError("buffer set has no hold-out maps")
            s = discriminator.forward(_stack(holdout.images, mapset.holdout_maps, k, dtype)).data
            fake_hits.append(s < 0.5)
    real_acc = float(np.mean(real >= 0.5))
    fake_acc = float(np.mean(np.concatenate(fake_hits)))
    return 0.5 * (real_acc + fake_acc)


def train_discriminator_sufficient(
    discriminator: Discriminator,
    train: Dataset,
    buffer: AggregationBuffer,
    holdout: Dataset,
    config: ControllerConfig,
    call_index: int = 0,
) -> DiscTrainReport:
    """Train D on ground truth vs buffered maps until hold-out accuracy suffices.

    Fake terms are weighted by ``1/|B|`` so fake and real mass match. Stops at
    ``disc_target_accuracy``, after ``disc_patience`` epochs without
    improvement, or at ``disc_max_epochs``; outside the target case the best
    hold-out parameters are kept. Adagrad state starts fresh on each call
    while the weights carry over.
    """
    pairs = discriminator_training_pairs(train, buffer)
    fake_weight = 1.0 / len(buffer)
    k = train.num_classes
    dtype = discriminator.params["fc.w"].dtype
    rng = rng_for(config.seed, "disc-train", call_index)
    discriminator.params.reset_slots()
    src = np.array([p[0] for p in pairs])
    idx = np.array([p[1] for p in pairs])
    best_acc, best, since = -1.0, None, 0
    history: list[float] = []
    stopped_by = "cap"
    for epoch in range(config.disc_max_epochs):
        order = rng.permutation(len(pairs))
        for start in range(0, len(order), config.disc_batch_size):
            chunk = order[start : start + config.disc_batch_size]
            seeds = [derive_seed(config.seed, f"disc-flip-{call_index}", epoch * len(pairs) + int(c)) for c in chunk]
            maps = np.stack([train.labels[idx[c]] if src[c] < 0 else buffer.sets[src[c]].maps[idx[c]] for c in chunk])
            images, maps = _flip_batch(train.images[idx[chunk]], maps, seeds)
            is_real = src[chunk] < 0
            real_scores = fake_scores = None
            if is_real.any():
                real_scores = discriminator.forward(_stack(images[is_real], maps[is_real], k, dtype))
            if (~is_real).any():
                fake_scores = discriminator.forward(_stack(images[~is_real], maps[~is_real], k, dtype))
            loss = discriminator_loss(real_scores, fake_scores, fake_weight)
            total = ad.mul(loss.total, 1.0 / len(chunk))
            ad.backward_gradients(total, discriminator.params)
            adagrad_step(discriminator.params, config.lr_d)
        acc = holdout_accuracy(discriminator, holdout, buffer)
        history.append(acc)
        if acc > best_acc:
            best_acc, best, since = acc, snapshot(discriminator, "disc"), 0
        else:
            since += 1
        if acc >= config.disc_target_accuracy:
            stopped_by = "target"
            break
        if since >= config.disc_patience:
            stopped_by = "plateau"
            break
    if stopped_by != "target":
        if stopped_by == "cap":
            log.warning("discriminator hit the %d-epoch cap at accuracy %.3f", config.disc_max_epochs, best_acc)
        restore(best, discriminator)
    return DiscTrainReport(len(history), best_acc if stopped_by != "target" else history[-1], stopped_by,
                           history, real_pairs=len(train), fake_pairs=len(pairs) - len(train))


def generate_map_set(generator_snapshot, train: Dataset, holdout: Dataset | None, tag: str) -> MapSet:
    model = build_model(json.loads(generator_snapshot.descriptor))
    restore(generator_snapshot, model)
    maps = predict_dataset(model, train.images)
    hold = predict_dataset(model, holdout.images) if holdout is not None and len(holdout) else None
    return MapSet(maps, generator_snapshot.id, tag, hold, name=f"{tag}:{generator_snapshot.id}")


def buffer_init(generator: Segmentor, train: Dataset, holdout: Dataset | None = None,
                capacity: int = 3) -> AggregationBuffer:
    """Fresh buffer holding the generator's hard predictions on every training image."""
    if len(train) == 0:
        raise ContractError("training set is empty")
    buffer = AggregationBuffer(capacity)
    buffer.init(generate_map_set(snapshot(generator, "initial"), train, holdout, "initial"))
    return buffer


class SegmentationTrainer:
    """Trainer backend for :func:`loadseg.controller.run_load` on real networks."""

    def __init__(self, generator: Segmentor, discriminator: Discriminator, train: Dataset,
                 holdout: Dataset, config: ControllerConfig):
        if len(train) == 0 or len(holdout) == 0:
            raise ContractError("training and hold-out sets must be non-empty")
        self.generator = generator
        self.discriminator = discriminator
        self.train = train
        self.holdout = holdout
        self.config = config
        self.ticks = 0
        self.disc_calls = 0
        self.disc_reports: list[DiscTrainReport] = []
        self.tick_losses: list[float] = []
        # cycle-start snapshot -> was the generator restored bit-exactly?
        self.restores: list[tuple[int, bool]] = []

    def snapshot(self, tag: str):
        return snapshot(self.generator, tag)

    def restore(self, snap) -> None:
        restore(snap, self.generator)
        self.restores.append((snap.id, same_weights(self.generator, snap)))

    def tick(self) -> None:
        self.tick_losses.extend(adversarial_tick(self.generator, self.discriminator, self.train, self.config, self.ticks))
        self.ticks += 1

    def evaluate(self) -> float:
        return evaluate_model_miou(self.generator, self.holdout)

    def generate_maps(self, snap, tag: str) -> MapSet:
        return generate_map_set(snap, self.train, self.holdout, tag)

    def train_discriminator(self, buffer: AggregationBuffer) -> DiscTrainReport:
        report = train_discriminator_sufficient(self.discriminator, self.train, buffer, self.holdout,
                                                self.config, self.disc_calls)
        self.disc_calls += 1
        self.disc_reports.append(report)
        return report


def run_load_on_data(generator: Segmentor, config: ControllerConfig, train: Dataset, holdout: Dataset,
                     discriminator: Discriminator | None = None) -> tuple[LoadResult, SegmentationTrainer]:
    """Stage-2 entry point: wraps the networks in a trainer and runs the controller."""
    if discriminator is None:
        spec = DiscriminatorSpec(generator.spec.height, generator.spec.width, generator.spec.num_classes)
        discriminator = Discriminator(spec, seed=config.seed)
    trainer = SegmentationTrainer(generator, discriminator, train, holdout, config)
    return run_load(trainer, config), trainer
