"""Synthetic end-to-end experiments comparing training variants on a shared seed.

Each experiment trains two or more variants on the same generated data and
test split and returns plain-dict results that the CLI renders and the
acceptance suite checks.
"""

from __future__ import annotations

import time
from dataclasses import replace

from . import config as C
from .pipeline import evaluate, fit
from .synthetic import SyntheticSpec, generate_synthetic


def desk_config(task: str, network: str = "embedding", seed: int = 0, **loss) -> C.RunConfig:
    cfg = C.load_preset(f"desk-{task}")
    cfg = replace(cfg, model=replace(cfg.model, network=network),
                  train=replace(cfg.train, seed=seed))
    if loss:
        cfg = replace(cfg, loss=replace(cfg.loss, **loss))
    if network == "similarity":
        cfg = replace(cfg, loss=replace(cfg.loss, lambdas_after=None),
                      sampling=replace(cfg.sampling, neighborhood=False))
    return cfg


def _run(cfg: C.RunConfig, ds, directions=None) -> dict:
    start = time.perf_counter()
    model, records, cfg = fit(cfg, ds, "train")
    results = evaluate(model, ds.split("test"), cfg.task, cfg.eval.ks, directions,
                       cfg.eval.max_proposals, C.labeling(cfg))
    return {
        "recall": {d: {int(k): v for k, v in r.recalls.items()} for d, r in results},
        "upper_bound": {d: r.upper_bound for d, r in results},
        "losses": [r["loss"] for r in records],
        "records": records,
        "seconds": time.perf_counter() - start,
    }


def retrieval_directions(seed: int = 0, spec: SyntheticSpec | None = None) -> dict:
    """Bi-directional (1, 1.5) vs image-to-text-only (1, 0) ranking loss on retrieval.

    Both variants use standard triplet sampling; neighborhood sampling is a
    separate ablation.
    """
    spec = spec or SyntheticSpec(task="retrieval", seed=seed)
    ds = generate_synthetic(spec)
    out = {"spec": spec.to_dict()}
    for name, lams in (("bi-directional", [1.0, 1.5, 0.0, 0.0]), ("single-directional", [1.0, 0.0, 0.0, 0.0])):
        # same weights throughout so the later epochs cannot reintroduce text-to-image terms
        cfg = desk_config("retrieval", seed=seed, lambdas=lams, lambdas_after=lams)
        cfg = replace(cfg, sampling=replace(cfg.sampling, neighborhood=False))
        out[name] = _run(cfg, ds, ("i2s", "s2i"))
    return out


def localization_augmentation(seed: int = 0, spec: SyntheticSpec | None = None,
                              network: str = "similarity") -> dict:
    """Augmented positives (IoU >= 0.7 proposals) vs ground-truth-only positives."""
    spec = spec or SyntheticSpec(task="localization", seed=seed)
    ds = generate_synthetic(spec)
    out = {"spec": spec.to_dict()}
    for name, augment in (("augmented", True), ("single-positive", False)):
        cfg = desk_config("localization", network=network, seed=seed)
        cfg = replace(cfg, sampling=replace(cfg.sampling, augment=augment))
        out[name] = _run(cfg, ds)
    return out


NEIGHBORHOOD_JITTER = 0.6


def neighborhood_constraints(seeds=(0, 1, 2), text_jitter: float = NEIGHBORHOOD_JITTER) -> dict:
    """Sentence-to-sentence recall with and without the text-text neighborhood term.

    Both runs use neighborhood sampling and the same staged schedule; they
    differ only in the text-text weight switched on at the activation epoch.
    """
    out = {"text_jitter": text_jitter, "seeds": {}}
    for seed in seeds:
        ds = generate_synthetic(SyntheticSpec(task="retrieval", seed=seed, text_jitter=text_jitter))
        runs = {}
        for name, after in (("with-constraint", [1.0, 1.5, 0.0, 0.05]), ("without-constraint", [1.0, 1.5, 0.0, 0.0])):
            cfg = desk_config("retrieval", seed=seed, lambdas_after=after)
            runs[name] = _run(cfg, ds, ("s2s",))
        out["seeds"][seed] = runs
    return out


CLUSTERED_SPEC = dict(clusters=20, cluster_spread=0.5)


def network_comparison(seed: int = 0, spec: SyntheticSpec | None = None) -> dict:
    """Embedding vs similarity network on image-sentence retrieval.

    The similarity network only sees uniformly drawn negative sentences.
    """
    spec = spec or SyntheticSpec(task="retrieval", seed=seed)
    ds = generate_synthetic(spec)
    out = {"spec": spec.to_dict()}
    for network in ("embedding", "similarity"):
        cfg = desk_config("retrieval", network=network, seed=seed, lambdas_after=None)
        out[network] = _run(cfg, ds, ("i2s", "s2i"))
    return out


def summary_rows(name: str, result: dict, metric_dirs=None) -> list[dict]:
    """Flatten one experiment into ``{experiment, variant, direction, k, recall}`` rows."""
    rows = []
    for variant, run in result.items():
        if not isinstance(run, dict) or "recall" not in run:
            continue
        for direction, recalls in run["recall"].items():
            if metric_dirs and direction not in metric_dirs:
                continue
            for k, v in sorted(recalls.items()):
                rows.append({"experiment": name, "variant": variant, "direction": direction,
                             "k": k, "recall": v})
    return rows
