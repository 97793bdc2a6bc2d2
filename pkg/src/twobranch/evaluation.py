"""Recall@K evaluation for phrase localization and cross-modal / within-modal retrieval.

Every ranking is by descending score (ascending distance) with ties broken by
ascending candidate id, so reports are deterministic. A query's outcome is
the 1-based rank of its first correct candidate, or ``None`` when no
candidate is correct.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .branches import EmbeddingModel, SimilarityModel, similarity_score
from .dataset import GroundedDataset
from .geometry import Box, RegionLabeling, iou

DEFAULT_KS = (1, 5, 10)
DEFAULT_ALPHA = 0.3
DEFAULT_MAX_PROPOSALS = 200
DIRECTIONS = ("i2s", "s2i", "s2s")


@dataclass
class RankedResult:
    query_id: object
    candidate_ids: list
    scores: list


@dataclass
class RecallReport:
    recalls: dict[int, float]
    query_count: int
    upper_bound: float
    hits: dict[int, int] = field(default_factory=dict)

    def records(self, task: str, direction: str) -> list[dict]:
        return [
            {"task": task, "direction": direction, "k": k, "recall": r,
             "query_count": self.query_count, "upper_bound": self.upper_bound}
            for k, r in sorted(self.recalls.items())
        ]


def rank_candidates(query_id, candidate_ids: Sequence, scores) -> RankedResult:
    """Order candidates by descending score, ties by ascending candidate id."""
    s = np.asarray(scores, dtype=np.float64)
    ids = np.asarray(candidate_ids)
    order = np.lexsort((ids, -s))
    return RankedResult(query_id, [candidate_ids[i] for i in order], [float(s[i]) for i in order])


def first_hit_ranks(scores: np.ndarray, relevant: np.ndarray,
                    valid: np.ndarray | None = None) -> list[int | None]:
    """Rank of the first relevant candidate for each query row.

    ``scores`` and ``relevant`` are ``queries x candidates``; candidate ids
    are the column indices. Columns with ``valid`` False are removed from
    that query's candidate pool.
    """
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(relevant, dtype=bool)
    if valid is None:
        valid = np.ones_like(relevant)
    relevant = relevant & valid
    out: list[int | None] = []
    cols = np.arange(scores.shape[1])
    for s, rel, ok in zip(scores, relevant, valid):
        if not rel.any():
            out.append(None)
            continue
        best_score = s[rel].max()
        best_id = cols[rel & (s == best_score)].min()
        ahead = ok & ((s > best_score) | ((s == best_score) & (cols < best_id)))
        out.append(int(ahead.sum()) + 1)
    return out


def recall_at_k(outcomes: Sequence[int | None], ks: Sequence[int] = DEFAULT_KS) -> RecallReport:
    """Fraction of queries whose first correct candidate has rank <= K."""
    if len(outcomes) == 0:
        raise ValueError("recall_at_k needs at least one query")
    if any(int(k) < 1 for k in ks):
        raise ValueError("K must be >= 1")
    n = len(outcomes)
    hits = {int(k): sum(1 for r in outcomes if r is not None and r <= k) for k in ks}
    return RecallReport(
        recalls={k: h / n for k, h in hits.items()},
        query_count=n,
        upper_bound=sum(1 for r in outcomes if r is not None) / n,
        hits=hits,
    )


# -- phrase localization -------------------------------------------------


def localize_phrase(scorer: Callable[[np.ndarray, np.ndarray], np.ndarray], phrase: np.ndarray,
                    proposals: Sequence[tuple[Box, np.ndarray]], gt_box: Box,
                    ks: Sequence[int] = DEFAULT_KS,
                    eval_threshold: float = RegionLabeling().eval_threshold) -> dict[int, bool]:
    """Per-K correctness: does any top-K proposal reach IoU >= ``eval_threshold``?

    ``scorer(phrase_feature, proposal_features)`` returns one score per
    proposal, higher meaning a better match.
    """
    if not proposals:
        raise ValueError("localize_phrase needs at least one proposal")
    rank = _localization_rank(scorer, phrase, proposals, gt_box, eval_threshold)
    return {int(k): rank is not None and rank <= k for k in ks}


def _localization_rank(scorer, phrase, proposals, gt_box, eval_threshold) -> int | None:
    feats = np.array([f for _, f in proposals])
    scores = np.asarray(scorer(phrase, feats), dtype=np.float64)
    correct = np.array([iou(gt_box, b) >= eval_threshold for b, _ in proposals])
    return first_hit_ranks(scores[None, :], correct[None, :])[0]


def model_scorer(model) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Scorer for :func:`localize_phrase`: negated distance or raw similarity score."""

    def embedding(phrase, feats):
        ey = model.embed_texts(np.atleast_2d(phrase)).data
        ex = model.embed_images(feats).data
        diff = ex - ey
        return -np.sqrt((diff * diff).sum(axis=1))

    def similarity(phrase, feats):
        ys = np.repeat(np.atleast_2d(phrase), len(feats), axis=0)
        return similarity_score(model, feats, ys).data

    if isinstance(model, EmbeddingModel):
        return embedding
    if isinstance(model, SimilarityModel):
        return similarity
    raise TypeError(f"no scorer for {type(model).__name__}")


def evaluate_localization(model, ds: GroundedDataset, ks: Sequence[int] = DEFAULT_KS,
                          max_proposals: int = DEFAULT_MAX_PROPOSALS,
                          labeling: RegionLabeling = RegionLabeling()) -> RecallReport:
    """Localization Recall@K over every phrase of ``ds`` (first ``max_proposals`` proposals per image)."""
    scorer = model_scorer(model)
    outcomes = []
    for k, p in enumerate(ds.phrases):
        props = ds.images[ds.phrase_image(k)].proposals[:max_proposals]
        if not props:
            outcomes.append(None)
            continue
        pairs = [(pr.box, pr.feature) for pr in props]
        outcomes.append(_localization_rank(scorer, p.feature, pairs, ds.gt_box(k), labeling.eval_threshold))
    return recall_at_k(outcomes, ks)


def localization_ranking(model, ds: GroundedDataset, phrase: int,
                         max_proposals: int = DEFAULT_MAX_PROPOSALS) -> RankedResult:
    props = ds.images[ds.phrase_image(phrase)].proposals[:max_proposals]
    scores = model_scorer(model)(ds.phrases[phrase].feature, np.array([pr.feature for pr in props]))
    return rank_candidates(ds.phrases[phrase].phrase_id, list(range(len(props))), scores)


# -- image-sentence retrieval --------------------------------------------


def pairwise_distances(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Euclidean distance between every row of ``a`` and every row of ``b``."""
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(0, a.shape[0], chunk):
        diff = a[i:i + chunk, None, :] - b[None, :, :]
        out[i:i + chunk] = np.sqrt((diff * diff).sum(axis=2))
    return out


def score_matrix(model, image_features: np.ndarray, sentence_features: np.ndarray) -> np.ndarray:
    """``images x sentences`` similarity: negated embedding distance or raw similarity score."""
    if isinstance(model, EmbeddingModel):
        ex = model.embed_images(image_features).data
        ey = model.embed_texts(sentence_features).data
        return -pairwise_distances(ex, ey)
    if isinstance(model, SimilarityModel):
        n_i, n_s = len(image_features), len(sentence_features)
        out = np.empty((n_i, n_s))
        for i in range(n_i):
            xs = np.repeat(image_features[i:i + 1], n_s, axis=0)
            out[i] = similarity_score(model, xs, sentence_features).data
        return out
    raise TypeError(f"no scorer for {type(model).__name__}")


def _sentence_map(sentence_image: Sequence[int], n_images: int) -> np.ndarray:
    owner = np.asarray(sentence_image, dtype=np.int64)
    if owner.size and (owner.min() < 0 or owner.max() >= n_images):
        bad = int(owner[(owner < 0) | (owner >= n_images)][0])
        raise ValueError(f"sentence refers to unknown image {bad}")
    if np.any(np.bincount(owner, minlength=n_images) == 0):
        raise ValueError("every image needs at least one sentence")
    return owner


def retrieval_recall(scores: np.ndarray, sentence_image: Sequence[int], direction: str,
                     ks: Sequence[int] = DEFAULT_KS) -> RecallReport:
    """Bi-directional retrieval recall from an ``images x sentences`` score matrix."""
    owner = _sentence_map(sentence_image, scores.shape[0])
    relevant = owner[None, :] == np.arange(scores.shape[0])[:, None]
    if direction == "i2s":
        return recall_at_k(first_hit_ranks(scores, relevant), ks)
    if direction == "s2i":
        return recall_at_k(first_hit_ranks(scores.T, relevant.T), ks)
    raise ValueError(f"unknown direction {direction!r}; expected 'i2s' or 's2i'")


def cross_modal_retrieval(model, image_features: np.ndarray, sentence_features: np.ndarray,
                          sentence_image: Sequence[int], direction: str,
                          ks: Sequence[int] = DEFAULT_KS) -> RecallReport:
    """Image-to-sentence (``i2s``) or sentence-to-image (``s2i``) Recall@K."""
    _sentence_map(sentence_image, len(image_features))
    return retrieval_recall(score_matrix(model, image_features, sentence_features),
                            sentence_image, direction, ks)


def sentence_recall(distances: np.ndarray, sentence_image: Sequence[int],
                    ks: Sequence[int] = DEFAULT_KS) -> RecallReport:
    """Sentence-to-sentence recall from a square distance matrix.

    The query itself is excluded from its candidates; queries without another
    sentence of the same image are left out of the denominator.
    """
    owner = np.asarray(sentence_image)
    n = len(owner)
    same = owner[:, None] == owner[None, :]
    valid = ~np.eye(n, dtype=bool)
    keep = (same & valid).any(axis=1)
    if not keep.any():
        raise ValueError("no sentence has another sentence of the same image")
    ranks = first_hit_ranks(-distances[keep], same[keep], valid[keep])
    return recall_at_k(ranks, ks)


def sentence_to_sentence(model: EmbeddingModel, sentence_features: np.ndarray,
                         sentence_image: Sequence[int], ks: Sequence[int] = DEFAULT_KS) -> RecallReport:
    ey = model.embed_texts(sentence_features).data
    return sentence_recall(pairwise_distances(ey, ey), sentence_image, ks)


def evaluate_retrieval(model, ds: GroundedDataset, direction: str,
                       ks: Sequence[int] = DEFAULT_KS) -> RecallReport:
    if direction == "s2s":
        return sentence_to_sentence(model, ds.sentence_features, ds.sentence_image, ks)
    return cross_modal_retrieval(model, ds.image_features, ds.sentence_features,
                                 ds.sentence_image, direction, ks)


# -- weighted region-phrase + image-sentence distance -------------------------


def combined_distance(d_global: float, phrase_region_distances: Sequence[Sequence[float]],
                      alpha: float = DEFAULT_ALPHA) -> float:
    """``(1 - alpha) * d_global + alpha * d_rp``.

    ``d_rp`` averages, over the sentence's phrases, each phrase's distance to
    its best-matching region. A sentence without phrases falls back to
    ``d_global``.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if len(phrase_region_distances) == 0 or alpha == 0.0:
        return float(d_global)
    best = [min(ds) for ds in phrase_region_distances]
    d_rp = sum(best) / len(best)
    return (1.0 - alpha) * float(d_global) + alpha * d_rp


def combined_distance_matrix(global_distances: np.ndarray, region_phrase: Callable[[int, int], list],
                             alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Apply :func:`combined_distance` to every (image, sentence) cell.

    ``region_phrase(i, s)`` returns, for each phrase of sentence ``s``, its
    distances to the regions of image ``i``.
    """
    out = np.empty_like(global_distances, dtype=np.float64)
    for i in range(global_distances.shape[0]):
        for s in range(global_distances.shape[1]):
            out[i, s] = combined_distance(global_distances[i, s], region_phrase(i, s), alpha)
    return out
