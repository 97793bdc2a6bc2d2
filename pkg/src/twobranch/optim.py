"""Adam and the staged training loop."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .branches import EmbeddingModel, SimilarityModel, similarity_score
from .dataset import GroundedDataset
from .geometry import RegionLabeling
from .losses import TERMS, LossWeights, logistic_loss, ranking_loss
from .sampling import (
    build_pair_batch,
    build_pair_batch_sentences,
    build_sentence_batch,
    build_triplet_batch,
    shard_pairs,
)

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Inconsistent training or model configuration."""

    category = "config"


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Every parameter must have a gradient of the same shape; moments are
    created lazily on the first step.
    """
    if set(params) != set(grads):
        raise ValueError(f"gradient names do not match parameters: {sorted(set(params) ^ set(grads))}")
    for name, p in params.items():
        if np.shape(grads[name]) != p.shape:
            raise ValueError(f"gradient shape {np.shape(grads[name])} does not match parameter "
                             f"{name!r} of shape {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass(frozen=True)
class SamplingOptions:
    batch_pairs: int = 100
    k: int = 30
    augment: bool = True
    neighborhood: bool = False
    labeling: RegionLabeling = RegionLabeling()


@dataclass(frozen=True)
class TrainSchedule:
    """Epoch plan. Constraint weights ``weights_after`` take over after ``activation_epoch`` epochs."""

    total_epochs: int = 10
    activation_epoch: int | None = 8
    weights_before: LossWeights = LossWeights(0.05, 1.0, 4.0, 0.0, 0.0)
    weights_after: LossWeights | None = LossWeights(0.05, 1.0, 4.0, 0.1, 0.1)
    seed: int = 0
    dropout: float = 0.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if self.total_epochs < 0:
            raise ConfigError("total_epochs must be nonnegative")
        if self.activation_epoch is not None and not 0 <= self.activation_epoch <= self.total_epochs:
            raise ConfigError("activation_epoch must lie within the epoch range")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout rate must lie in [0, 1)")

    def weights_for(self, epoch: int) -> LossWeights:
        """Loss weights for 1-based ``epoch``."""
        if self.activation_epoch is not None and self.weights_after is not None and epoch > self.activation_epoch:
            return self.weights_after
        return self.weights_before


@dataclass
class StepInfo:
    """What a step hook sees: the batch and the parameters before the update."""

    epoch: int
    step: int
    batch: object
    weights: LossWeights
    model_before: object
    loss: float
    dropout_seed: tuple


def check_setup(model, ds: GroundedDataset, schedule: TrainSchedule, sampling: SamplingOptions) -> None:
    active = [schedule.weights_before]
    if schedule.activation_epoch is not None and schedule.weights_after is not None:
        active.append(schedule.weights_after)
    neighborhood_terms = any(w.uses_neighborhood for w in active)
    if isinstance(model, SimilarityModel):
        if neighborhood_terms:
            raise ConfigError("neighborhood terms are undefined for the similarity network")
        if sampling.neighborhood:
            raise ConfigError("neighborhood sampling only applies to the embedding network")
    elif neighborhood_terms and not sampling.neighborhood:
        raise ConfigError("neighborhood constraints require neighborhood sampling")
    if ds.task == "retrieval":
        if any(w.l3 > 0 for w in active):
            raise ConfigError("image-image constraints cannot be applied to image-sentence data")
        if any(im.global_feature is None for im in ds.images):
            raise ConfigError("retrieval training needs a global feature for every image")
    elif not ds.phrases:
        raise ConfigError("localization training needs phrases")


def _step_rng(seed: int, epoch: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, step, stream])


def _clip(grads: dict, max_norm: float | None) -> dict:
    if max_norm is None:
        return grads
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


def _embedding_step(model, ds, shard, weights, schedule, sampling, epoch, step):
    batch_rng = _step_rng(schedule.seed, epoch, step, 1)
    constraint = (weights.l3 > 0, weights.l4 > 0)
    if ds.task == "localization":
        batch = build_triplet_batch(shard, ds, model, augment=sampling.augment,
                                    neighborhood=sampling.neighborhood, k=sampling.k,
                                    margin=weights.margin, constraint_terms=constraint,
                                    labeling=sampling.labeling, seed=batch_rng)
    else:
        batch = build_sentence_batch(shard, ds, model, neighborhood=sampling.neighborhood,
                                     k=sampling.k, margin=weights.margin,
                                     constraint_terms=constraint, seed=batch_rng)
    return batch


def _pair_step(model, ds, shard, schedule, sampling, epoch, step):
    batch_rng = _step_rng(schedule.seed, epoch, step, 1)
    if ds.task == "localization":
        return build_pair_batch(shard, ds, batch_rng, augment=sampling.augment, labeling=sampling.labeling)
    return build_pair_batch_sentences(shard, ds, batch_rng)


def batch_loss(model, batch, weights: LossWeights, dropout_rate: float, dropout_seed, bound=None):
    """Training-mode loss of one batch; returns ``(loss tensor, per-term values)``."""
    rng = np.random.default_rng(list(dropout_seed)) if dropout_rate > 0 else None
    if isinstance(model, EmbeddingModel):
        return ranking_loss(model, batch.x_features, batch.y_features, batch.triplets, weights,
                            training=True, bound=bound, dropout=dropout_rate, rng=rng,
                            return_terms=True)
    scores = similarity_score(model, batch.x_features, batch.y_features, training=True,
                              bound=bound, dropout=dropout_rate, rng=rng)
    loss = logistic_loss(scores, batch.labels)
    return loss, {"logistic": loss.item()}


def _batch_usable(model, batch) -> bool:
    if len(batch) == 0:
        return False
    # training-mode batch norm needs two rows per branch
    if (model.nonlinear and (batch.x_features.shape[0] < 2 or batch.y_features.shape[0] < 2)):
        return False
    return True


def train(
    model,
    ds: GroundedDataset,
    schedule: TrainSchedule,
    sampling: SamplingOptions = SamplingOptions(),
    *,
    metrics_path: str | os.PathLike | None = None,
    checkpoint_dir: str | os.PathLike | None = None,
    checkpoint_header: dict | None = None,
    step_hook: Callable[[StepInfo], None] | None = None,
):
    """Train a copy of ``model`` on ``ds``; returns ``(trained model, epoch records)``.

    Embedding models are trained on mined triplet batches with the ranking
    loss, similarity models on balanced pair batches with the logistic loss.
    Each epoch record holds the loss decomposition, batch and triplet
    counts, skipped pairs and wall time; records are also appended to
    ``metrics_path`` as JSON lines when given.
    """
    check_setup(model, ds, schedule, sampling)
    model = model.copy()
    state = AdamState(lr=schedule.lr, beta1=schedule.beta1, beta2=schedule.beta2, eps=schedule.adam_eps)
    records = []
    if metrics_path is not None and os.path.exists(metrics_path):
        os.remove(metrics_path)
    for epoch in range(1, schedule.total_epochs + 1):
        start = time.perf_counter()
        weights = schedule.weights_for(epoch)
        shards = shard_pairs(ds, sampling.batch_pairs, np.random.default_rng([schedule.seed, epoch, 0]))
        sums: dict[str, float] = {}
        counts = {t: 0 for t in TERMS}
        provenance: dict[str, int] = {}
        steps = skipped_batches = skipped_pairs = pairs = 0
        for step, shard in enumerate(shards):
            if isinstance(model, EmbeddingModel):
                batch = _embedding_step(model, ds, shard, weights, schedule, sampling, epoch, step)
                for term, c in batch.triplets.counts().items():
                    counts[term] += c
                for tags in batch.provenance.values():
                    for tag in tags:
                        provenance[tag] = provenance.get(tag, 0) + 1
            else:
                batch = _pair_step(model, ds, shard, schedule, sampling, epoch, step)
                skipped_pairs += batch.skipped
                pairs += len(batch)
            if not _batch_usable(model, batch):
                skipped_batches += 1
                continue
            before = model.copy() if step_hook is not None else None
            dropout_seed = (schedule.seed, epoch, step, 2)
            bound = model.bind()
            loss, terms = batch_loss(model, batch, weights, schedule.dropout, dropout_seed, bound)
            grads = ad.backward(loss, bound.values())
            named = _clip({name: grads[t] for name, t in bound.items()}, schedule.grad_clip)
            adam_step(model.parameters(), named, state)
            value = loss.item()
            for term, v in terms.items():
                sums[term] = sums.get(term, 0.0) + v
            sums["total"] = sums.get("total", 0.0) + value
            steps += 1
            if step_hook is not None:
                step_hook(StepInfo(epoch, step, batch, weights, before, value, dropout_seed))
        record = {
            "epoch": epoch,
            "network": model.kind,
            "task": ds.task,
            "loss": sums.get("total", 0.0),
            "terms": {k: v for k, v in sums.items() if k != "total"},
            "weights": list(weights.lambdas),
            "margin": weights.margin,
            "steps": steps,
            "skipped_batches": skipped_batches,
            "skipped_pairs": skipped_pairs,
            "wall_time": time.perf_counter() - start,
        }
        if isinstance(model, EmbeddingModel):
            record["triplets"] = counts
            record["provenance"] = dict(sorted(provenance.items()))
        else:
            record["pairs"] = pairs
        records.append(record)
        logger.info("epoch %d loss %.6f (%d steps)", epoch, record["loss"], steps)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if checkpoint_dir is not None:
            from .checkpoint import save_checkpoint

            os.makedirs(checkpoint_dir, exist_ok=True)
            save_checkpoint(model, os.path.join(checkpoint_dir, f"epoch-{epoch:03d}.ckpt"),
                            header=checkpoint_header)
    return model, records
