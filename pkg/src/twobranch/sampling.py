"""Mini-batch construction for the embedding and similarity networks.

Region-phrase batches follow the three-step procedure: shard the
ground-truth pairs, optionally augment the positive region, then mine the
hardest in-batch triplets in both directions (with optional neighborhood
sampling). Image-sentence batches use the same mining with images and
sentences in place of regions and phrases.

Mining uses inference-mode embeddings of the current parameters. Ties
between equal hinge values are broken by ascending dataset index.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataset import GroundedDataset, RegionKey
from .geometry import RegionLabeling, iou
from .losses import TERMS, TripletSet

logger = logging.getLogger(__name__)

LOCALIZATION_SHARD = 100
RETRIEVAL_SHARD = 500
LOCALIZATION_K = 30
RETRIEVAL_K = 10

# provenance tags
STEP_X2Y = "3a"
STEP_Y2X = "3b"
STEP_NEIGHBOR_X = "3c-i"
STEP_NEIGHBOR_Y = "3c-ii"
STEP_CONSTRAINT_X = "nc-x"
STEP_CONSTRAINT_Y = "nc-y"


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def units(ds: GroundedDataset) -> int:
    """Number of ground-truth pairs: phrases for localization, sentences for retrieval."""
    return len(ds.phrases) if ds.task == "localization" else len(ds.sentences)


def shard_pairs(ds: GroundedDataset, batch_pairs: int, seed) -> list[np.ndarray]:
    """Shuffle all ground-truth pairs and cut them into shards of ``batch_pairs``.

    The last shard may be short. Pairs are indexed by phrase (localization)
    or sentence (retrieval).
    """
    if batch_pairs < 1:
        raise ValueError(f"batch_pairs must be >= 1, got {batch_pairs}")
    n = units(ds)
    if n == 0:
        raise ValueError("cannot shard an empty dataset")
    perm = _rng(seed).permutation(n)
    return [perm[i:i + batch_pairs] for i in range(0, n, batch_pairs)]


def qualifying_positives(ds: GroundedDataset, phrase: int,
                         threshold: float = RegionLabeling().positive_threshold) -> list[RegionKey]:
    """Ground-truth region followed by every proposal with IoU >= threshold."""
    chain = ds.phrases[phrase].chain_id
    gt = ds.gt_key(phrase)
    ious = ds.chain_proposal_iou(chain)
    return [gt] + [RegionKey(gt.image, "proposal", int(j)) for j in np.flatnonzero(ious >= threshold)]


def negative_regions(ds: GroundedDataset, phrase: int,
                     threshold: float = RegionLabeling().negative_threshold) -> list[RegionKey]:
    """Proposals of the phrase's image with IoU < threshold against its ground truth."""
    chain = ds.phrases[phrase].chain_id
    image = ds.phrase_image(phrase)
    ious = ds.chain_proposal_iou(chain)
    return [RegionKey(image, "proposal", int(j)) for j in np.flatnonzero(ious < threshold)]


def augment_positive_single(phrase: int, ds: GroundedDataset, seed=None,
                            threshold: float = RegionLabeling().positive_threshold) -> RegionKey:
    """One region drawn uniformly from the ground truth and its high-overlap proposals."""
    cands = qualifying_positives(ds, phrase, threshold)
    return cands[int(_rng(seed).integers(len(cands)))]


def augment_positive_all(phrase: int, ds: GroundedDataset,
                         threshold: float = RegionLabeling().positive_threshold) -> list[tuple[RegionKey, int]]:
    """Every (region, phrase) positive pair: ground truth first, then proposals by index."""
    return [(key, phrase) for key in qualifying_positives(ds, phrase, threshold)]


# --------------------------------------------------------------------------
# triplet batches


@dataclass
class TripletBatch:
    """Features and index triplets for one embedding-network update.

    ``x_keys`` / ``y_keys`` name the dataset item behind each feature row
    (``RegionKey`` or image index; phrase or sentence index).
    ``provenance[term]`` tags each triplet with the step that produced it and
    ``mining_hinge[term]`` records its hinge value at mining time.
    """

    x_features: np.ndarray
    y_features: np.ndarray
    x_keys: list
    y_keys: list[int]
    triplets: TripletSet
    provenance: dict[str, np.ndarray]
    mining_hinge: dict[str, np.ndarray]
    positives: list[tuple] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.triplets)


def _distances(anchor: np.ndarray, others: np.ndarray) -> np.ndarray:
    diff = anchor[None, :] - others
    return np.sqrt((diff * diff).sum(axis=1))


def top_k_violators(hinges: np.ndarray, k: int) -> np.ndarray:
    """Positions of at most ``k`` strictly positive hinges, largest first, ties by position."""
    pos = np.flatnonzero(hinges > 0)
    order = np.lexsort((pos, -hinges[pos]))
    return pos[order[:k]]


class _Assembler:
    """Accumulates feature rows and tagged triplets for one batch."""

    def __init__(self, x_feature, y_feature):
        self._x_feature = x_feature
        self._y_feature = y_feature
        self.x_rows: dict = {}
        self.y_rows: dict = {}
        self.rows = {t: [] for t in TERMS}
        self.tags = {t: [] for t in TERMS}
        self.hinges = {t: [] for t in TERMS}

    def x(self, key) -> int:
        return self.x_rows.setdefault(key, len(self.x_rows))

    def y(self, key) -> int:
        return self.y_rows.setdefault(key, len(self.y_rows))

    def emit(self, term: str, target, pos, neg, tag: str, hinge_value: float) -> None:
        side = {"x2y": (self.x, self.y, self.y), "y2x": (self.y, self.x, self.x),
                "xx": (self.x, self.x, self.x), "yy": (self.y, self.y, self.y)}[term]
        self.rows[term].append((side[0](target), side[1](pos), side[2](neg)))
        self.tags[term].append(tag)
        self.hinges[term].append(float(hinge_value))

    def keys(self, term: str, col: int) -> list:
        table = {"x2y": "xyy", "y2x": "yxx", "xx": "xxx", "yy": "yyy"}[term][col]
        inv = list(self.x_rows) if table == "x" else list(self.y_rows)
        return [inv[r[col]] for r in self.rows[term]]

    def build(self, positives) -> TripletBatch:
        x_keys, y_keys = list(self.x_rows), list(self.y_rows)
        x_feat = np.array([self._x_feature(k) for k in x_keys]) if x_keys else np.zeros((0, 0))
        y_feat = np.array([self._y_feature(k) for k in y_keys]) if y_keys else np.zeros((0, 0))
        return TripletBatch(
            x_features=x_feat,
            y_features=y_feat,
            x_keys=x_keys,
            y_keys=y_keys,
            triplets=TripletSet(**{t: self.rows[t] for t in TERMS}),
            provenance={t: np.array(self.tags[t], dtype=object) for t in TERMS},
            mining_hinge={t: np.array(self.hinges[t]) for t in TERMS},
            positives=positives,
        )


def _mine(asm: _Assembler, term: str, tag: str, target, pos, negs: list, d_pos: float,
          d_negs: np.ndarray, margin: float, k: int) -> None:
    if not negs:
        return
    h = margin + d_pos - d_negs
    for j in top_k_violators(h, k):
        asm.emit(term, target, pos, negs[j], tag, h[j])


def _positives_by_target(asm: _Assembler, term: str) -> dict:
    out: dict = {}
    for t, p in zip(asm.keys(term, 0), asm.keys(term, 1)):
        out.setdefault(t, set()).add(p)
    return out


def _hardest(h: np.ndarray) -> int:
    # argmax returns the first maximum, i.e. the lowest candidate position
    return int(np.argmax(h))


def _embed_lookup(model, keys: list, features: np.ndarray, image_side: bool) -> dict:
    if not keys:
        return {}
    emb = (model.embed_images if image_side else model.embed_texts)(features, training=False).data
    return dict(zip(keys, emb))


def _neighbor_constraints(asm: _Assembler, groups: dict, term: str, tag: str, emb: dict,
                          negatives_for, margin: float, k: int) -> None:
    """Within-modality triplets: members of one group vs batch items outside it."""
    for group, members in groups.items():
        if len(members) < 2:
            continue
        negs = negatives_for(group, set(members))
        if not negs:
            continue
        neg_emb = np.array([emb[n] for n in negs])
        for a in members:
            d_negs = _distances(emb[a], neg_emb)
            for b in members:
                if b == a:
                    continue
                d_pos = float(_distances(emb[a], emb[b][None, :])[0])
                _mine(asm, term, tag, a, b, negs, d_pos, d_negs, margin, k)


def build_triplet_batch(
    shard,
    ds: GroundedDataset,
    model,
    *,
    augment: bool = True,
    neighborhood: bool = False,
    k: int = LOCALIZATION_K,
    margin: float = 0.05,
    constraint_terms: tuple[bool, bool] = (False, False),
    labeling: RegionLabeling = RegionLabeling(),
    seed=None,
) -> TripletBatch:
    """Region-phrase triplet batch for the embedding network.

    ``constraint_terms`` switches emission of within-modality (image-image,
    text-text) triplets; it is only meaningful together with neighborhood
    sampling.
    """
    rng = _rng(seed)
    shard = [int(p) for p in shard]
    phrases = ds.phrases
    chain_of = lambda p: phrases[p].chain_id  # noqa: E731

    images = sorted({ds.phrase_image(p) for p in shard})
    x_cands = [RegionKey(i, "gt", j) for i in images for j in range(len(ds.images[i].regions))]
    x_cands += [RegionKey(i, "proposal", j) for i in images for j in range(len(ds.images[i].proposals))]
    chains = sorted({chain_of(p) for p in shard})
    y_cands = sorted(set(shard) | {q for c in chains for q in ds.chain_phrases[c]})
    ex = _embed_lookup(model, x_cands, np.array([ds.region_feature(key) for key in x_cands]), True)
    ey = _embed_lookup(model, y_cands, ds.phrase_features[y_cands] if y_cands else None, False)

    asm = _Assembler(ds.region_feature, lambda p: phrases[p].feature)
    pos_x = {}
    for p in shard:
        pos_x[p] = (augment_positive_single(p, ds, rng, labeling.positive_threshold)
                    if augment else ds.gt_key(p))
    positives = [(pos_x[p], p) for p in shard]

    batch_phrases = sorted(shard)
    batch_y_emb = np.array([ey[q] for q in batch_phrases])
    neg_regions = {p: negative_regions(ds, p, labeling.negative_threshold) for p in shard}

    # 3a: phrase negatives from the shard outside the coreference chain
    for p in shard:
        x = pos_x[p]
        mask = [chain_of(q) != chain_of(p) for q in batch_phrases]
        negs = [q for q, m in zip(batch_phrases, mask) if m]
        d_pos = float(_distances(ex[x], ey[p][None, :])[0])
        d_negs = _distances(ex[x], batch_y_emb[np.array(mask, dtype=bool)]) if negs else np.zeros(0)
        _mine(asm, "x2y", STEP_X2Y, x, p, negs, d_pos, d_negs, margin, k)

    # 3b: low-overlap regions of the same image
    for p in shard:
        x = pos_x[p]
        negs = neg_regions[p]
        if not negs:
            continue
        d_pos = float(_distances(ey[p], ex[x][None, :])[0])
        d_negs = _distances(ey[p], np.array([ex[n] for n in negs]))
        _mine(asm, "y2x", STEP_Y2X, p, x, negs, d_pos, d_negs, margin, k)

    if neighborhood:
        # 3c-i: every target region gets at least two distinct positive phrases
        targets: dict = {}
        for p in shard:
            targets.setdefault(pos_x[p], []).append(p)
        used_by = _positives_by_target(asm, "x2y")
        for x, own in targets.items():
            used = set(used_by.get(x, ()))
            chain = chain_of(own[0])
            mates = [q for q in ds.chain_phrases[chain] if q not in own]
            cands = own + [mates[i] for i in rng.permutation(len(mates))]
            negs = [q for q in batch_phrases if chain_of(q) != chain]
            if not negs:
                continue
            neg_emb = np.array([ey[q] for q in negs])
            d_negs = _distances(ex[x], neg_emb)
            for y2 in cands:
                if len(used) >= 2:
                    break
                if y2 in used:
                    continue
                h = margin + float(_distances(ex[x], ey[y2][None, :])[0]) - d_negs
                j = _hardest(h)
                asm.emit("x2y", x, y2, negs[j], STEP_NEIGHBOR_X, h[j])
                used.add(y2)

        # 3c-ii: every target phrase gets at least two distinct positive regions
        used_by = _positives_by_target(asm, "y2x")
        for p in shard:
            used = set(used_by.get(p, ()))
            negs = neg_regions[p]
            if not negs:
                continue
            others = [r for r in qualifying_positives(ds, p, labeling.positive_threshold) if r != pos_x[p]]
            cands = [pos_x[p]] + [others[i] for i in rng.permutation(len(others))]
            d_negs = _distances(ey[p], np.array([ex[n] for n in negs]))
            for x2 in cands:
                if len(used) >= 2:
                    break
                if x2 in used:
                    continue
                h = margin + float(_distances(ey[p], ex[x2][None, :])[0]) - d_negs
                j = _hardest(h)
                asm.emit("y2x", p, x2, negs[j], STEP_NEIGHBOR_Y, h[j])
                used.add(x2)

    emit_xx, emit_yy = constraint_terms
    if emit_xx:
        groups: dict = {}
        for t, y in zip(asm.keys("x2y", 0), asm.keys("x2y", 1)):
            groups.setdefault(chain_of(y), [])
            if t not in groups[chain_of(y)]:
                groups[chain_of(y)].append(t)
        for t, x in zip(asm.keys("y2x", 0), asm.keys("y2x", 1)):
            groups.setdefault(chain_of(t), [])
            if x not in groups[chain_of(t)]:
                groups[chain_of(t)].append(x)
        batch_regions = list(asm.x_rows)

        def region_negatives(chain, members):
            image, region = ds.chain_region[chain]
            gt = ds.images[image].regions[region].box
            return [r for r in batch_regions if r not in members
                    and (r.image != image or iou(gt, ds.region_box(r)) < labeling.negative_threshold)]

        _neighbor_constraints(asm, groups, "xx", STEP_CONSTRAINT_X, ex, region_negatives, margin, k)
    if emit_yy:
        groups = {}
        for q in asm.y_rows:
            groups.setdefault(chain_of(q), []).append(q)
        batch_text = list(asm.y_rows)
        _neighbor_constraints(
            asm, groups, "yy", STEP_CONSTRAINT_Y, ey,
            lambda chain, members: [q for q in batch_text if chain_of(q) != chain], margin, k)

    return asm.build(positives)


def build_sentence_batch(
    shard,
    ds: GroundedDataset,
    model,
    *,
    neighborhood: bool = False,
    k: int = RETRIEVAL_K,
    margin: float = 0.05,
    constraint_terms: tuple[bool, bool] = (False, False),
    seed=None,
) -> TripletBatch:
    """Image-sentence triplet batch.

    Negatives are shard items not associated with the target. Neighborhood
    sampling and constraints act on the sentence side only; image-image
    triplets are never produced.
    """
    rng = _rng(seed)
    shard = [int(s) for s in shard]
    img_of = ds.sentence_image
    images = sorted({int(img_of[s]) for s in shard})
    y_cands = sorted(set(shard) | {q for i in images for q in ds.sentences_of_image[i]})
    ex = _embed_lookup(model, images, ds.image_features[images], True)
    ey = _embed_lookup(model, y_cands, ds.sentence_features[y_cands], False)

    asm = _Assembler(lambda i: ds.images[i].global_feature, lambda s: ds.sentences[s].feature)
    positives = [(int(img_of[s]), s) for s in shard]
    batch_sents = sorted(shard)
    batch_sent_img = img_of[batch_sents]
    batch_y_emb = np.array([ey[s] for s in batch_sents])
    img_emb = np.array([ex[i] for i in images])

    for s in shard:
        x = int(img_of[s])
        mask = batch_sent_img != x
        negs = [q for q, m in zip(batch_sents, mask) if m]
        d_pos = float(_distances(ex[x], ey[s][None, :])[0])
        _mine(asm, "x2y", STEP_X2Y, x, s, negs, d_pos, _distances(ex[x], batch_y_emb[mask]), margin, k)

    for s in shard:
        x = int(img_of[s])
        mask = np.array(images) != x
        negs = [i for i, m in zip(images, mask) if m]
        d_pos = float(_distances(ey[s], ex[x][None, :])[0])
        _mine(asm, "y2x", STEP_Y2X, s, x, negs, d_pos, _distances(ey[s], img_emb[mask]), margin, k)

    if neighborhood:
        used_by = _positives_by_target(asm, "x2y")
        own_of: dict[int, list[int]] = {}
        for s in shard:
            own_of.setdefault(int(img_of[s]), []).append(s)
        for x, own in own_of.items():
            used = set(used_by.get(x, ()))
            mates = [q for q in ds.sentences_of_image[x] if q not in own]
            cands = own + [mates[i] for i in rng.permutation(len(mates))]
            mask = batch_sent_img != x
            negs = [q for q, m in zip(batch_sents, mask) if m]
            if not negs:
                continue
            d_negs = _distances(ex[x], batch_y_emb[mask])
            for y2 in cands:
                if len(used) >= 2:
                    break
                if y2 in used:
                    continue
                h = margin + float(_distances(ex[x], ey[y2][None, :])[0]) - d_negs
                j = _hardest(h)
                asm.emit("x2y", x, y2, negs[j], STEP_NEIGHBOR_X, h[j])
                used.add(y2)

    if constraint_terms[1]:
        groups: dict = {}
        for q in asm.y_rows:
            groups.setdefault(int(img_of[q]), []).append(q)
        batch_text = list(asm.y_rows)
        _neighbor_constraints(
            asm, groups, "yy", STEP_CONSTRAINT_Y, ey,
            lambda image, members: [q for q in batch_text if int(img_of[q]) != image], margin, k)

    return asm.build(positives)


# --------------------------------------------------------------------------
# pair batches


@dataclass
class PairBatch:
    x_features: np.ndarray
    y_features: np.ndarray
    labels: np.ndarray
    x_keys: list
    y_keys: list[int]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.labels)


def _pair_batch(rows: list, x_feature, y_feature, skipped: int) -> PairBatch:
    if not rows:
        return PairBatch(np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0), [], [], skipped)
    xk, yk, z = zip(*rows)
    return PairBatch(
        x_features=np.array([x_feature(k) for k in xk]),
        y_features=np.array([y_feature(k) for k in yk]),
        labels=np.array(z, dtype=np.float64),
        x_keys=list(xk),
        y_keys=list(yk),
        skipped=skipped,
    )


def build_pair_batch(
    shard,
    ds: GroundedDataset,
    seed=None,
    *,
    augment: bool = True,
    labeling: RegionLabeling = RegionLabeling(),
) -> PairBatch:
    """Balanced region-phrase pairs: one random low-overlap negative region per positive.

    Phrases whose image has no proposal with IoU below the negative
    threshold are dropped; ``skipped`` counts the dropped positives.
    """
    rng = _rng(seed)
    rows = []
    skipped = 0
    for p in (int(q) for q in shard):
        pos = augment_positive_all(p, ds, labeling.positive_threshold) if augment else [(ds.gt_key(p), p)]
        negs = negative_regions(ds, p, labeling.negative_threshold)
        if not negs:
            skipped += len(pos)
            continue
        for key, _ in pos:
            rows.append((key, p, 1.0))
            rows.append((negs[int(rng.integers(len(negs)))], p, -1.0))
    if skipped:
        logger.info("dropped %d positives without a qualifying negative region", skipped)
    return _pair_batch(rows, ds.region_feature, lambda q: ds.phrases[q].feature, skipped)


def build_pair_batch_sentences(shard, ds: GroundedDataset, seed=None) -> PairBatch:
    """Balanced image-sentence pairs with a random unrelated sentence as the negative."""
    if len(ds.images) < 2:
        raise ValueError("negative sentences need at least two images")
    rng = _rng(seed)
    img_of = ds.sentence_image
    n = len(ds.sentences)
    rows = []
    for s in (int(q) for q in shard):
        x = int(img_of[s])
        own = ds.sentences_of_image[x]
        # uniform over sentences of other images: draw an index into the complement
        r = int(rng.integers(n - len(own)))
        for q in sorted(own):
            if r >= q:
                r += 1
            else:
                break
        rows.append((x, s, 1.0))
        rows.append((x, r, -1.0))
    return _pair_batch(rows, lambda i: ds.images[i].global_feature, lambda q: ds.sentences[q].feature, 0)
