"""Bi-directional triplet ranking loss with neighborhood terms, and the logistic pair loss.

Both losses are sums (not means) over triplets / pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TERMS = ("x2y", "y2x", "xx", "yy")


@dataclass(frozen=True)
class LossWeights:
    """Margin and the four term weights (image->text, text->image, image-image, text-text)."""

    margin: float = 0.05
    l1: float = 1.0
    l2: float = 1.0
    l3: float = 0.0
    l4: float = 0.0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be nonnegative, got {self.margin}")
        lams = self.lambdas
        if any(v < 0 for v in lams) or not any(v > 0 for v in lams):
            raise ValueError(f"lambdas must be nonnegative with at least one positive, got {lams}")

    @property
    def lambdas(self) -> tuple[float, float, float, float]:
        return (self.l1, self.l2, self.l3, self.l4)

    def weight(self, term: str) -> float:
        return self.lambdas[TERMS.index(term)]

    @property
    def uses_neighborhood(self) -> bool:
        return self.l3 > 0 or self.l4 > 0

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.margin, self.l1 * c, self.l2 * c, self.l3 * c, self.l4 * c)


# Weight presets from the localization and image-sentence experiments.
LOCALIZATION_WEIGHTS = LossWeights(0.05, 1.0, 4.0, 0.0, 0.0)
LOCALIZATION_NEIGHBORHOOD_WEIGHTS = LossWeights(0.05, 1.0, 4.0, 0.1, 0.1)
RETRIEVAL_WEIGHTS = LossWeights(0.05, 1.0, 1.5, 0.0, 0.0)
RETRIEVAL_NEIGHBORHOOD_WEIGHTS = LossWeights(0.05, 1.0, 1.5, 0.0, 0.05)


def _triplets(rows) -> np.ndarray:
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    return arr


@dataclass
class TripletSet:
    """Index triplets ``(target, positive, negative)`` into batch feature rows.

    * ``x2y``: image row, positive text row, negative text row
    * ``y2x``: text row, positive image row, negative image row
    * ``xx`` / ``yy``: within-modality neighborhood triplets
    """

    x2y: np.ndarray = field(default_factory=lambda: _triplets([]))
    y2x: np.ndarray = field(default_factory=lambda: _triplets([]))
    xx: np.ndarray = field(default_factory=lambda: _triplets([]))
    yy: np.ndarray = field(default_factory=lambda: _triplets([]))

    def __post_init__(self):
        for name in TERMS:
            arr = _triplets(getattr(self, name))
            if arr.size and np.any(arr[:, 1] == arr[:, 2]):
                raise ValueError(f"{name} triplet with identical positive and negative")
            setattr(self, name, arr)

    def __len__(self) -> int:
        return sum(len(getattr(self, t)) for t in TERMS)

    def counts(self) -> dict[str, int]:
        return {t: int(len(getattr(self, t))) for t in TERMS}


def hinge(margin: float, d_pos: float, d_neg: float) -> float:
    if margin < 0:
        raise ValueError("margin must be nonnegative")
    return max(0.0, margin + d_pos - d_neg)


def _hinge_sum(target: Tensor, pos_side: Tensor, neg_side: Tensor, idx: np.ndarray,
               margin: float) -> Tensor:
    t = ad.gather_rows(target, idx[:, 0])
    d_pos = ad.row_distance(t, ad.gather_rows(pos_side, idx[:, 1]))
    d_neg = ad.row_distance(t, ad.gather_rows(neg_side, idx[:, 2]))
    return ad.total(ad.relu(d_pos - d_neg + margin))


def ranking_loss(
    model,
    x_features,
    y_features,
    triplets: TripletSet,
    weights: LossWeights,
    training: bool = True,
    bound=None,
    dropout: float = 0.0,
    rng=None,
    return_terms: bool = False,
):
    """Weighted sum of hinge terms over all triplets.

    Terms with zero weight are skipped entirely (their distances are never
    computed). With ``return_terms`` the weighted per-term values are
    returned alongside the loss tensor.
    """
    ex = model.embed_images(x_features, training, bound, dropout, rng)
    ey = model.embed_texts(y_features, training, bound, dropout, rng)
    sides = {"x2y": (ex, ey, ey), "y2x": (ey, ex, ex), "xx": (ex, ex, ex), "yy": (ey, ey, ey)}
    loss: Tensor | None = None
    terms = {t: 0.0 for t in TERMS}
    for term in TERMS:
        lam = weights.weight(term)
        idx = getattr(triplets, term)
        if lam == 0.0 or len(idx) == 0:
            continue
        target, pos_side, neg_side = sides[term]
        for col, side in zip(range(3), (target, pos_side, neg_side)):
            if idx[:, col].max() >= side.shape[0] or idx[:, col].min() < 0:
                raise IndexError(f"{term} triplet id out of range for {side.shape[0]} rows")
        part = ad.scale(_hinge_sum(target, pos_side, neg_side, idx, weights.margin), lam)
        terms[term] = part.item()
        loss = part if loss is None else loss + part
    if loss is None:
        loss = Tensor(0.0)
    return (loss, terms) if return_terms else loss


def _check_labels(labels) -> np.ndarray:
    z = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not np.all((z == 1.0) | (z == -1.0)):
        raise ValueError("labels must be +1 or -1")
    return z


def logistic_loss(scores: Tensor, labels) -> Tensor:
    """``sum_i log(1 + exp(-z_i p_i))`` evaluated stably."""
    z = _check_labels(labels)
    scores = ad.as_tensor(scores)
    if scores.shape != z.shape:
        raise ad.ShapeError(f"{scores.shape[0] if scores.shape else 1} scores for {z.size} labels")
    return ad.total(ad.softplus(ad.elementwise_product(scores, Tensor(-z))))
