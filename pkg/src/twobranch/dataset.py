"""In-memory grounded dataset: images, proposals, ground-truth regions, phrases, sentences."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import Box, iou


class DatasetError(ValueError):
    """Base class for dataset validation and loading failures."""

    category = "dataset"


class DanglingIdError(DatasetError):
    category = "dangling-id"


class DimensionError(DatasetError):
    category = "dimension"


class ChecksumError(DatasetError):
    category = "checksum"


class MissingFileError(DatasetError):
    category = "missing-file"


TASKS = ("localization", "retrieval")


@dataclass
class Proposal:
    box: Box
    feature: np.ndarray


@dataclass
class GroundTruthRegion:
    """A ground-truth box. Every phrase in ``chain_id`` refers to it."""

    chain_id: str
    box: Box
    feature: np.ndarray


@dataclass
class ImageRecord:
    image_id: str
    global_feature: np.ndarray | None = None
    proposals: list[Proposal] = field(default_factory=list)
    regions: list[GroundTruthRegion] = field(default_factory=list)
    sentences: list[str] = field(default_factory=list)
    split: str = "train"


@dataclass
class PhraseRecord:
    phrase_id: str
    feature: np.ndarray
    image_id: str
    chain_id: str
    sentence_id: str | None = None


@dataclass
class SentenceRecord:
    sentence_id: str
    feature: np.ndarray
    image_id: str


@dataclass(frozen=True)
class RegionKey:
    """A region of one image: ground-truth region ``index`` or proposal ``index``."""

    image: int
    source: str  # "gt" | "proposal"
    index: int


class GroundedDataset:
    """Validated, immutable-by-convention collection of records.

    Index structures are derived lazily; records should not be edited after
    construction.
    """

    def __init__(self, task: str, images: list[ImageRecord], phrases: list[PhraseRecord] = (),
                 sentences: list[SentenceRecord] = ()):
        if task not in TASKS:
            raise DatasetError(f"unknown task kind {task!r}")
        self.task = task
        self.images = list(images)
        self.phrases = list(phrases)
        self.sentences = list(sentences)
        self.validate()

    # -- validation -----------------------------------------------------
    def validate(self) -> None:
        seen: set[str] = set()
        for im in self.images:
            if im.image_id in seen:
                raise DatasetError(f"duplicate image id {im.image_id!r}")
            seen.add(im.image_id)
        chains: dict[str, str] = {}
        for im in self.images:
            for r in im.regions:
                if r.chain_id in chains:
                    raise DatasetError(f"duplicate coreference chain {r.chain_id!r}")
                chains[r.chain_id] = im.image_id
        for p in self.phrases:
            if p.image_id not in seen:
                raise DanglingIdError(f"phrase {p.phrase_id!r} references unknown image {p.image_id!r}")
            if chains.get(p.chain_id) != p.image_id:
                raise DanglingIdError(
                    f"phrase {p.phrase_id!r} references chain {p.chain_id!r} not in image {p.image_id!r}")
        sent_ids = set()
        for s in self.sentences:
            if s.image_id not in seen:
                raise DanglingIdError(f"sentence {s.sentence_id!r} references unknown image {s.image_id!r}")
            sent_ids.add(s.sentence_id)
        for im in self.images:
            for sid in im.sentences:
                if sid not in sent_ids:
                    raise DanglingIdError(f"image {im.image_id!r} lists unknown sentence {sid!r}")
        for p in self.phrases:
            if p.sentence_id is not None and p.sentence_id not in sent_ids:
                raise DanglingIdError(f"phrase {p.phrase_id!r} references unknown sentence {p.sentence_id!r}")
        if self.task == "retrieval":
            for im in self.images:
                if not self.sentences_of_image[self.image_index[im.image_id]]:
                    raise DatasetError(f"image {im.image_id!r} has no sentences")
        self._check_dims()

    def _check_dims(self) -> None:
        def uniform(vectors, what):
            dims = {np.shape(v) for v in vectors}
            if len(dims) > 1:
                raise DimensionError(f"{what} features have inconsistent shapes {sorted(dims)}")

        region_feats = [pr.feature for im in self.images for pr in im.proposals]
        region_feats += [r.feature for im in self.images for r in im.regions]
        uniform(region_feats, "region")
        uniform([im.global_feature for im in self.images if im.global_feature is not None], "image")
        uniform([p.feature for p in self.phrases], "phrase")
        uniform([s.feature for s in self.sentences], "sentence")

    # -- indices ----------------------------------------------------------
    @cached_property
    def image_index(self) -> dict[str, int]:
        return {im.image_id: i for i, im in enumerate(self.images)}

    @cached_property
    def chain_region(self) -> dict[str, tuple[int, int]]:
        """chain id -> (image index, region index)."""
        return {r.chain_id: (i, j) for i, im in enumerate(self.images) for j, r in enumerate(im.regions)}

    @cached_property
    def chain_phrases(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for k, p in enumerate(self.phrases):
            out.setdefault(p.chain_id, []).append(k)
        return out

    @cached_property
    def sentences_of_image(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.images]
        for k, s in enumerate(self.sentences):
            out[self.image_index[s.image_id]].append(k)
        return out

    @cached_property
    def sentence_image(self) -> np.ndarray:
        return np.array([self.image_index[s.image_id] for s in self.sentences], dtype=np.int64)

    def phrase_image(self, phrase: int) -> int:
        return self.image_index[self.phrases[phrase].image_id]

    def gt_box(self, phrase: int) -> Box:
        i, j = self.chain_region[self.phrases[phrase].chain_id]
        return self.images[i].regions[j].box

    def gt_key(self, phrase: int) -> RegionKey:
        i, j = self.chain_region[self.phrases[phrase].chain_id]
        return RegionKey(i, "gt", j)

    def region_box(self, key: RegionKey) -> Box:
        im = self.images[key.image]
        return (im.regions[key.index] if key.source == "gt" else im.proposals[key.index]).box

    def region_feature(self, key: RegionKey) -> np.ndarray:
        im = self.images[key.image]
        return (im.regions[key.index] if key.source == "gt" else im.proposals[key.index]).feature

    def chain_proposal_iou(self, chain_id: str) -> np.ndarray:
        """IoU of every proposal of the chain's image with the chain's ground-truth box."""
        cache = self.__dict__.setdefault("_iou_cache", {})
        if chain_id not in cache:
            i, j = self.chain_region[chain_id]
            gt = self.images[i].regions[j].box
            cache[chain_id] = np.array([iou(gt, p.box) for p in self.images[i].proposals])
        return cache[chain_id]

    def proposal_features(self, image: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_prop_cache", {})
        if image not in cache:
            props = self.images[image].proposals
            cache[image] = np.array([p.feature for p in props]) if props else np.zeros((0, 0))
        return cache[image]

    @cached_property
    def phrase_features(self) -> np.ndarray:
        return np.array([p.feature for p in self.phrases])

    @cached_property
    def sentence_features(self) -> np.ndarray:
        return np.array([s.feature for s in self.sentences])

    @cached_property
    def image_features(self) -> np.ndarray:
        return np.array([im.global_feature for im in self.images])

    # -- subsets ---------------------------------------------------------
    @property
    def splits(self) -> list[str]:
        return sorted({im.split for im in self.images})

    def split(self, name: str) -> "GroundedDataset":
        keep = [im for im in self.images if im.split == name]
        if not keep:
            raise DatasetError(f"no images in split {name!r}")
        ids = {im.image_id for im in keep}
        return GroundedDataset(
            self.task, keep,
            [p for p in self.phrases if p.image_id in ids],
            [s for s in self.sentences if s.image_id in ids],
        )
