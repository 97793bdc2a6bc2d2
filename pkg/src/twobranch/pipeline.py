"""Config-driven training and evaluation used by the CLI and the benchmarks."""

from __future__ import annotations

import os
from typing import Sequence

import numpy as np

from . import config as C
from .branches import EmbeddingModel, init_model
from .checkpoint import save_checkpoint
from .dataset import DatasetError, GroundedDataset
from .evaluation import (
    combined_distance_matrix,
    evaluate_localization,
    evaluate_retrieval,
    pairwise_distances,
    retrieval_recall,
)
from .optim import ConfigError, train


def as_task(ds: GroundedDataset, task: str) -> GroundedDataset:
    """View ``ds`` under another task kind (re-validated)."""
    if ds.task == task:
        return ds
    return GroundedDataset(task, ds.images, ds.phrases, ds.sentences)


def input_dims(ds: GroundedDataset) -> tuple[int, int]:
    if ds.task == "localization":
        if not ds.phrases or not any(im.proposals or im.regions for im in ds.images):
            raise DatasetError("localization needs phrases and regions")
        im = next(im for im in ds.images if im.proposals or im.regions)
        region = (im.regions or im.proposals)[0].feature
        return int(np.shape(region)[0]), int(ds.phrase_features.shape[1])
    if not ds.sentences or any(im.global_feature is None for im in ds.images):
        raise DatasetError("retrieval needs sentences and a global feature for every image")
    return int(ds.image_features.shape[1]), int(ds.sentence_features.shape[1])


def build_model(cfg: C.RunConfig, ds: GroundedDataset):
    dims = C.model_dims(cfg, *input_dims(ds))
    seed = cfg.model.init_seed if cfg.model.init_seed is not None else cfg.train.seed
    model = init_model(cfg.model.network, dims, seed)
    model.bn_eps, model.bn_momentum = cfg.model.bn_eps, cfg.model.bn_momentum
    return model


def checkpoint_header(cfg: C.RunConfig) -> dict:
    return {"task": cfg.task, "config": cfg.to_dict(), "config_hash": cfg.hash()}


def fit(cfg: C.RunConfig, ds: GroundedDataset, split: str | None = "train", *,
        metrics_path=None, checkpoint_dir=None, out=None):
    """Resolve ``cfg``, train on ``split`` of ``ds``; returns ``(model, epoch records, resolved cfg)``."""
    cfg = C.resolve(cfg)
    ds = as_task(ds, cfg.task)
    data = ds if split is None else ds.split(split)
    model = build_model(cfg, data)
    header = checkpoint_header(cfg)
    trained, records = train(model, data, C.schedule(cfg), C.sampling_options(cfg),
                             metrics_path=metrics_path, checkpoint_dir=checkpoint_dir,
                             checkpoint_header=header)
    if out is not None:
        save_checkpoint(trained, out, header=header)
    return trained, records, cfg


def evaluate(model, ds: GroundedDataset, task: str, ks: Sequence[int] = (1, 5, 10),
             directions: Sequence[str] | None = None, max_proposals: int = 200,
             labeling=None):
    """Recall reports for every requested direction; returns ``[(direction, report)]``."""
    ds = as_task(ds, task)
    if task == "localization":
        kw = {} if labeling is None else {"labeling": labeling}
        return [("localization", evaluate_localization(model, ds, ks, max_proposals, **kw))]
    if directions is None:
        directions = ("i2s", "s2i", "s2s") if isinstance(model, EmbeddingModel) else ("i2s", "s2i")
    out = []
    for d in directions:
        if d == "s2s" and not isinstance(model, EmbeddingModel):
            raise ConfigError("sentence-to-sentence retrieval needs an embedding network")
        out.append((d, evaluate_retrieval(model, ds, d, ks)))
    return out


def phrase_region_minima(region_model: EmbeddingModel, ds: GroundedDataset,
                         max_proposals: int = 200) -> np.ndarray:
    """``images x phrases``: each phrase's distance to its best-matching proposal in each image."""
    ep = region_model.embed_texts(ds.phrase_features).data
    out = np.full((len(ds.images), len(ds.phrases)), np.inf)
    for i, im in enumerate(ds.images):
        props = im.proposals[:max_proposals]
        if not props:
            continue
        er = region_model.embed_images(np.array([p.feature for p in props])).data
        out[i] = pairwise_distances(ep, er).min(axis=1)
    return out


def combined_reports(global_model: EmbeddingModel, region_model: EmbeddingModel, ds: GroundedDataset,
                     alpha: float = 0.3, ks: Sequence[int] = (1, 5, 10), max_proposals: int = 200):
    """Image-sentence retrieval ranked by the weighted global + region-phrase distance."""
    if not isinstance(global_model, EmbeddingModel) or not isinstance(region_model, EmbeddingModel):
        raise ConfigError("the combined distance needs two embedding networks")
    ds = as_task(ds, "retrieval")
    g = pairwise_distances(global_model.embed_images(ds.image_features).data,
                           global_model.embed_texts(ds.sentence_features).data)
    sent_index = {s.sentence_id: k for k, s in enumerate(ds.sentences)}
    phrases_of = [[] for _ in ds.sentences]
    for k, p in enumerate(ds.phrases):
        if p.sentence_id is not None:
            phrases_of[sent_index[p.sentence_id]].append(k)
    minima = phrase_region_minima(region_model, ds, max_proposals) if ds.phrases else None

    def region_phrase(i, s):
        return [[minima[i, k]] for k in phrases_of[s] if np.isfinite(minima[i, k])]

    d = combined_distance_matrix(g, region_phrase, alpha)
    return [(f"combined-{direction}", retrieval_recall(-d, ds.sentence_image, direction, ks))
            for direction in ("i2s", "s2i")]


def ensure_parent(path) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
