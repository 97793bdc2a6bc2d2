"""Planted-correspondence synthetic datasets.

Each item draws a latent ``z``. Image-side features are ``A z + noise`` and
text-side features ``B (z + jitter) + noise`` for fixed random full-rank
``A`` and ``B``, so the correspondence is recoverable by a linear map.
With ``clusters > 0`` latents are drawn around shared category centers, so
most items have near neighbors that only hard negatives teach apart.

For region data every item also gets a ground-truth box and a set of
proposals: a near-ground-truth cluster (IoU >= 0.7), mid-IoU distractors and
background boxes (IoU < 0.3). A proposal's feature mixes the item latent with
a fresh background latent in proportion to its IoU and adds proposal-only
clutter, so region quality is learnable from features and ground-truth crops
differ in distribution from proposals.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dataset import (
    GroundedDataset,
    GroundTruthRegion,
    ImageRecord,
    PhraseRecord,
    Proposal,
    SentenceRecord,
)
from .geometry import Box, iou

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    task: str = "retrieval"
    latent_dim: int = 16
    image_dim: int = 64
    text_dim: int = 48
    train_items: int = 600
    val_items: int = 100
    test_items: int = 100
    texts_per_item: int = 5
    proposals_per_item: int = 20
    noise: float = 0.25
    text_jitter: float = 0.35
    clutter: float = 1.0
    near_fraction: float = 0.2
    mid_fraction: float = 0.3
    image_size: float = 200.0
    box_min: float = 24.0
    box_max: float = 48.0
    clusters: int = 0
    cluster_spread: float = 0.5
    with_regions: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.task not in ("localization", "retrieval"):
            raise ValueError(f"unknown task kind {self.task!r}")
        if self.latent_dim > min(self.image_dim, self.text_dim):
            raise ValueError("latent_dim must not exceed either feature dim")
        if min(self.noise, self.text_jitter, self.clutter, self.cluster_spread) < 0 or self.clusters < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.texts_per_item < 1 or min(self.train_items, self.val_items, self.test_items) < 0:
            raise ValueError("item counts must be nonnegative and texts_per_item positive")
        if self.train_items + self.val_items + self.test_items < 2:
            raise ValueError("need at least two items")
        if self.regions and self.proposals_per_item < 2:
            raise ValueError("need at least two proposals per item (one near, one background)")
        if not (0 < self.near_fraction and self.near_fraction + self.mid_fraction < 1):
            raise ValueError("proposal fractions must leave room for background boxes")
        if not 0 < self.box_min <= self.box_max or 3 * self.box_max > self.image_size:
            raise ValueError("box sizes must satisfy 0 < box_min <= box_max <= image_size / 3")

    @property
    def regions(self) -> bool:
        return self.task == "localization" or self.with_regions

    def to_dict(self) -> dict:
        return asdict(self)


def _shifted(gt: Box, target_iou: float, rng: np.random.Generator) -> Box:
    """Copy of ``gt`` translated along one axis so its IoU with ``gt`` is exactly ``target_iou``."""
    w, h = gt.x_max - gt.x_min, gt.y_max - gt.y_min
    axis = rng.integers(2)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    size = w if axis == 0 else h
    d = sign * size * (1.0 - target_iou) / (1.0 + target_iou)
    if axis == 0:
        return Box(gt.x_min + d, gt.y_min, gt.x_max + d, gt.y_max)
    return Box(gt.x_min, gt.y_min + d, gt.x_max, gt.y_max + d)


def _background_box(gt: Box, spec: SyntheticSpec, rng: np.random.Generator) -> Box:
    for _ in range(100):
        w, h = rng.uniform(spec.box_min, spec.box_max, size=2)
        x, y = rng.uniform(0, spec.image_size - w), rng.uniform(0, spec.image_size - h)
        box = Box(x, y, x + w, y + h)
        if iou(gt, box) < 0.3:
            return box
    w = gt.x_max - gt.x_min
    return Box(gt.x_min + w + 1.0, gt.y_min, gt.x_max + w + 1.0, gt.y_max)


def _proposal_boxes(gt: Box, spec: SyntheticSpec, rng: np.random.Generator) -> list[tuple[Box, float]]:
    """``(box, target IoU)`` for every proposal; at least one near and one background box."""
    n = spec.proposals_per_item
    n_near = max(1, int(round(spec.near_fraction * n)))
    n_mid = min(int(round(spec.mid_fraction * n)), n - n_near - 1)
    out = [(_shifted(gt, t, rng), t) for t in rng.uniform(0.72, 0.95, size=n_near)]
    out += [(_shifted(gt, t, rng), t) for t in rng.uniform(0.32, 0.68, size=n_mid)]
    for _ in range(n - n_near - n_mid):
        out.append((_background_box(gt, spec, rng), 0.0))
    return [out[i] for i in rng.permutation(len(out))]


def generate_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> GroundedDataset:
    """Build the dataset described by ``spec``; bit-identical for a fixed seed."""
    rng = np.random.default_rng(spec.seed)
    A = rng.standard_normal((spec.image_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    B = rng.standard_normal((spec.text_dim, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    centers = rng.standard_normal((spec.clusters, spec.latent_dim)) if spec.clusters else None
    counts = (spec.train_items, spec.val_items, spec.test_items)
    images, phrases, sentences = [], [], []
    item = 0
    for split, count in zip(SPLITS, counts):
        for _ in range(count):
            iid = f"img{item:05d}"
            if centers is None:
                z = rng.standard_normal(spec.latent_dim)
            else:
                z = centers[rng.integers(spec.clusters)] + spec.cluster_spread * rng.standard_normal(spec.latent_dim)
            text_latents = z + spec.text_jitter * rng.standard_normal((spec.texts_per_item, spec.latent_dim))
            text_feats = text_latents @ B.T + spec.noise * rng.standard_normal((spec.texts_per_item, spec.text_dim))
            record = ImageRecord(iid, split=split)
            if spec.task == "retrieval":
                record.global_feature = A @ z + spec.noise * rng.standard_normal(spec.image_dim)
                for k in range(spec.texts_per_item):
                    sid = f"{iid}-s{k}"
                    sentences.append(SentenceRecord(sid, text_feats[k], iid))
                    record.sentences.append(sid)
            if spec.regions:
                chain = f"{iid}-c0"
                w, h = rng.uniform(spec.box_min, spec.box_max, size=2)
                lo, hi = spec.box_max, spec.image_size - 2 * spec.box_max
                x, y = rng.uniform(lo, hi, size=2)
                gt = Box(x, y, x + w, y + h)
                record.regions.append(GroundTruthRegion(
                    chain, gt, A @ z + spec.noise * rng.standard_normal(spec.image_dim)))
                for box, _ in _proposal_boxes(gt, spec, rng):
                    q = iou(gt, box)
                    mixed = q * z + (1.0 - q) * rng.standard_normal(spec.latent_dim)
                    feat = (A @ mixed + spec.clutter * rng.standard_normal(spec.image_dim)
                            + spec.noise * rng.standard_normal(spec.image_dim))
                    record.proposals.append(Proposal(box, feat))
                phrase_feats = text_feats
                if spec.task == "retrieval":
                    # one phrase per sentence, describing the same object
                    phrase_feats = text_feats + spec.noise * rng.standard_normal(text_feats.shape)
                for k in range(spec.texts_per_item):
                    sid = f"{iid}-s{k}" if spec.task == "retrieval" else None
                    phrases.append(PhraseRecord(f"{iid}-p{k}", phrase_feats[k], iid, chain, sid))
            images.append(record)
            item += 1
    return GroundedDataset(spec.task, images, phrases, sentences)
