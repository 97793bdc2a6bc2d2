"""Two-branch embedding and similarity networks.

A branch maps input features to the unit sphere:

* nonlinear: FC1 -> ReLU -> [dropout] -> FC2 -> batch-norm -> L2-normalize
* linear:    FC1 -> L2-normalize

The embedding network compares branch outputs by Euclidean distance. The
similarity network fuses them by element-wise product and regresses a raw
score through three FC layers (ReLU between them, none after the last).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormStats, Tensor


@dataclass(frozen=True)
class ModelDims:
    """Layer sizes. Defaults are the region-phrase sizes (4096/6000 -> 1024 -> 512)."""

    image_in: int = 4096
    text_in: int = 6000
    image_hidden: int = 1024
    text_hidden: int = 1024
    embed: int = 512
    head_hidden: tuple[int, int] = (512, 256)
    nonlinear: bool = True

    def __post_init__(self):
        sizes = [self.image_in, self.text_in, self.image_hidden, self.text_hidden,
                 self.embed, *self.head_hidden]
        if any(int(s) < 1 for s in sizes) or len(self.head_hidden) != 2:
            raise ValueError(f"invalid model dims: {self}")


@dataclass
class BranchParams:
    fc1_w: np.ndarray
    fc1_b: np.ndarray
    fc2_w: np.ndarray | None = None
    fc2_b: np.ndarray | None = None
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn: BatchNormStats | None = None

    @property
    def nonlinear(self) -> bool:
        return self.fc2_w is not None

    @property
    def in_dim(self) -> int:
        return self.fc1_w.shape[0]

    @property
    def embed_dim(self) -> int:
        return (self.fc2_w if self.nonlinear else self.fc1_w).shape[1]

    def learnable(self) -> dict[str, np.ndarray]:
        out = {"fc1_w": self.fc1_w, "fc1_b": self.fc1_b}
        if self.nonlinear:
            out.update(fc2_w=self.fc2_w, fc2_b=self.fc2_b,
                       bn_gamma=self.bn_gamma, bn_beta=self.bn_beta)
        return out

    def state(self) -> dict[str, np.ndarray]:
        if not self.nonlinear:
            return {}
        return {"bn_mean": self.bn.mean, "bn_var": self.bn.var}

    def check(self) -> None:
        hidden = self.fc1_w.shape[1]
        if self.fc1_b.shape != (hidden,):
            raise ValueError("fc1 bias does not match fc1 weight")
        if self.nonlinear:
            embed = self.fc2_w.shape[1]
            if self.fc2_w.shape[0] != hidden or self.fc2_b.shape != (embed,):
                raise ValueError(f"fc2 shape {self.fc2_w.shape} does not chain from hidden {hidden}")
            for arr in (self.bn_gamma, self.bn_beta, self.bn.mean, self.bn.var):
                if arr.shape != (embed,):
                    raise ValueError("batch-norm vectors must have embed-dim length")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_branch(rng: np.random.Generator, in_dim: int, hidden: int, embed: int,
                nonlinear: bool = True) -> BranchParams:
    if not nonlinear:
        return BranchParams(_glorot(rng, in_dim, embed), np.zeros(embed))
    return BranchParams(
        fc1_w=_glorot(rng, in_dim, hidden),
        fc1_b=np.zeros(hidden),
        fc2_w=_glorot(rng, hidden, embed),
        fc2_b=np.zeros(embed),
        bn_gamma=np.ones(embed),
        bn_beta=np.zeros(embed),
        bn=BatchNormStats(embed),
    )


def _bind_or_const(arrays: Mapping[str, np.ndarray], bound: Mapping[str, Tensor] | None):
    if bound is not None:
        return bound
    return {k: Tensor(v) for k, v in arrays.items()}


def branch_forward(
    p: BranchParams,
    x,
    training: bool = False,
    nonlinear: bool | None = None,
    *,
    bound: Mapping[str, Tensor] | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    bn_eps: float = ad.BN_EPS,
    bn_momentum: float = ad.BN_MOMENTUM,
) -> Tensor:
    """Map a ``batch x in_dim`` feature matrix to unit-norm embeddings.

    ``bound`` supplies tape leaves for the learnable arrays (keys as in
    :meth:`BranchParams.learnable`); without it the parameters enter the
    tape as constants.
    """
    if nonlinear is not None and nonlinear != p.nonlinear:
        raise ValueError(f"branch is {'non' if p.nonlinear else ''}linear but nonlinear={nonlinear}")
    x = ad.as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] != p.in_dim:
        raise ad.ShapeError(f"branch expects input with {p.in_dim} columns, got shape {x.shape}")
    t = _bind_or_const(p.learnable(), bound)
    h = x @ t["fc1_w"] + t["fc1_b"]
    if p.nonlinear:
        h = ad.relu(h)
        h = ad.dropout(h, dropout, training, rng)
        h = h @ t["fc2_w"] + t["fc2_b"]
        h = ad.batch_norm(h, t["bn_gamma"], t["bn_beta"], p.bn, training,
                          eps=bn_eps, momentum=bn_momentum)
    return ad.l2_normalize(h)


def _sub(bound: Mapping[str, Tensor] | None, prefix: str):
    if bound is None:
        return None
    n = len(prefix) + 1
    return {k[n:]: v for k, v in bound.items() if k.startswith(prefix + ".")}


@dataclass
class _TwoBranch:
    image: BranchParams
    text: BranchParams
    bn_eps: float = ad.BN_EPS
    bn_momentum: float = ad.BN_MOMENTUM

    def _branch_parameters(self) -> dict[str, np.ndarray]:
        out = {f"image.{k}": v for k, v in self.image.learnable().items()}
        out.update({f"text.{k}": v for k, v in self.text.learnable().items()})
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        """Learnable arrays by dotted name. The arrays are live: in-place edits update the model."""
        return self._branch_parameters()

    def state(self) -> dict[str, np.ndarray]:
        out = {f"image.{k}": v for k, v in self.image.state().items()}
        out.update({f"text.{k}": v for k, v in self.text.state().items()})
        return out

    def bind(self) -> dict[str, Tensor]:
        """Fresh gradient-tracking leaves for every learnable array."""
        return {k: Tensor(v, requires_grad=True) for k, v in self.parameters().items()}

    @property
    def nonlinear(self) -> bool:
        return self.image.nonlinear

    def embed_images(self, x, training: bool = False, bound=None, dropout: float = 0.0,
                     rng=None) -> Tensor:
        return branch_forward(self.image, x, training, bound=_sub(bound, "image"),
                              dropout=dropout, rng=rng, bn_eps=self.bn_eps,
                              bn_momentum=self.bn_momentum)

    def embed_texts(self, y, training: bool = False, bound=None, dropout: float = 0.0,
                    rng=None) -> Tensor:
        return branch_forward(self.text, y, training, bound=_sub(bound, "text"),
                              dropout=dropout, rng=rng, bn_eps=self.bn_eps,
                              bn_momentum=self.bn_momentum)

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class EmbeddingModel(_TwoBranch):
    kind = "embedding"

    def __post_init__(self):
        self.image.check()
        self.text.check()
        if self.image.embed_dim != self.text.embed_dim:
            raise ValueError("image and text branches must share the embedding dimension")
        if self.image.nonlinear != self.text.nonlinear:
            raise ValueError("both branches must be linear or both nonlinear")


@dataclass
class SimilarityModel(_TwoBranch):
    head: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    kind = "similarity"

    def __post_init__(self):
        self.image.check()
        self.text.check()
        if self.image.embed_dim != self.text.embed_dim:
            raise ValueError("image and text branches must share the embedding dimension")
        if len(self.head) != 3:
            raise ValueError("the similarity head has exactly three FC layers")
        prev = self.image.embed_dim
        for w, b in self.head:
            if w.shape[0] != prev or b.shape != (w.shape[1],):
                raise ValueError(f"head layer {w.shape} does not chain from {prev}")
            prev = w.shape[1]
        if prev != 1:
            raise ValueError("the similarity head must end in a single output")

    def parameters(self) -> dict[str, np.ndarray]:
        out = self._branch_parameters()
        for i, (w, b) in enumerate(self.head):
            out[f"head.{i}.w"] = w
            out[f"head.{i}.b"] = b
        return out


def embed_distance(model: EmbeddingModel, x, y, training: bool = False, bound=None,
                   dropout: float = 0.0, rng=None) -> Tensor:
    """Row-wise Euclidean distance between the two branch outputs."""
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if x.shape[0] != y.shape[0]:
        raise ad.ShapeError(f"row counts differ: {x.shape[0]} image rows vs {y.shape[0]} text rows")
    ex = model.embed_images(x, training, bound, dropout, rng)
    ey = model.embed_texts(y, training, bound, dropout, rng)
    return ad.row_distance(ex, ey)


def similarity_head(model: SimilarityModel, fused: Tensor, training: bool = False, bound=None,
                    dropout: float = 0.0, rng=None) -> Tensor:
    params = model.parameters() if bound is None else None
    h = fused
    for i in range(3):
        w = bound[f"head.{i}.w"] if bound is not None else Tensor(params[f"head.{i}.w"])
        b = bound[f"head.{i}.b"] if bound is not None else Tensor(params[f"head.{i}.b"])
        h = h @ w + b
        if i < 2:
            h = ad.relu(h)
            h = ad.dropout(h, dropout, training, rng)
    return ad.reshape(h, (h.shape[0],))


def similarity_score(model: SimilarityModel, x, y, training: bool = False, bound=None,
                     dropout: float = 0.0, rng=None) -> Tensor:
    """Raw (pre-sigmoid) match score per row pair."""
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    if x.shape[0] != y.shape[0]:
        raise ad.ShapeError(f"row counts differ: {x.shape[0]} image rows vs {y.shape[0]} text rows")
    ex = model.embed_images(x, training, bound, dropout, rng)
    ey = model.embed_texts(y, training, bound, dropout, rng)
    return similarity_head(model, ad.elementwise_product(ex, ey), training, bound, dropout, rng)


def match_probability(scores) -> np.ndarray:
    """Sigmoid view of raw similarity scores."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    e = np.exp(-np.abs(s))
    return np.where(s >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def init_model(kind: str, dims: ModelDims, seed: int):
    """Glorot-uniform weights, zero biases, unit gamma; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    image = init_branch(rng, dims.image_in, dims.image_hidden, dims.embed, dims.nonlinear)
    text = init_branch(rng, dims.text_in, dims.text_hidden, dims.embed, dims.nonlinear)
    if kind == "embedding":
        return EmbeddingModel(image, text)
    if kind == "similarity":
        sizes = [dims.embed, *dims.head_hidden, 1]
        head = [(_glorot(rng, a, b), np.zeros(b)) for a, b in zip(sizes[:-1], sizes[1:])]
        return SimilarityModel(image, text, head=head)
    raise ValueError(f"unknown network kind {kind!r}; expected 'embedding' or 'similarity'")
