"""Desk-scale experiment helpers shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .audio import preprocess_corpus
from .dataset_io import LABEL_INDEX, FeatureRecord
from .model import ModelConfig
from .synth import SyntheticSpec, generate_synthetic
from .train import FoldPlan, TrainConfig, evaluate, make_folds, train_model

log = logging.getLogger(__name__)


def synthetic_records(spec: SyntheticSpec, jobs: int = 1) -> tuple[list[FeatureRecord], tuple[int, int]]:
    corpus = generate_synthetic(spec)
    feats, medians = preprocess_corpus([u.clip for u in corpus], [u.utterance_id for u in corpus], jobs=jobs)
    recs = [
        FeatureRecord(
            u.utterance_id,
            LABEL_INDEX[u.label],
            f.mfcc.values.astype(np.float32),
            f.s1.values.astype(np.float32),
            f.s2.values.astype(np.float32),
        )
        for u, f in zip(corpus, feats)
    ]
    return recs, medians


def mean_logmel(r: FeatureRecord) -> np.ndarray:
    return np.concatenate([r.s1.mean(axis=1), r.s2.mean(axis=1)])


def nearest_centroid_accuracy(records: list[FeatureRecord], plan: FoldPlan) -> float:
    """Cross-validated accuracy of a nearest-class-mean rule on time-averaged log-mel vectors."""
    by_id = {r.utterance_id: r for r in records}
    correct = total = 0
    for train_ids, test_ids in plan.folds:
        X = np.stack([mean_logmel(by_id[i]) for i in train_ids])
        y = np.array([by_id[i].label for i in train_ids])
        classes = np.unique(y)
        centroids = np.stack([X[y == c].mean(axis=0) for c in classes])
        for i in test_ids:
            d = np.linalg.norm(centroids - mean_logmel(by_id[i]), axis=1)
            correct += int(classes[d.argmin()] == by_id[i].label)
            total += 1
    return correct / total


@dataclass
class ComparisonProtocol:
    """Reduced protocol: one stratified holdout per seed, short training."""

    variants: tuple[str, ...] = ("base2", "base3", "ds_only", "dual")
    seeds: tuple[int, ...] = (0, 1, 2)
    corpus: SyntheticSpec = field(default_factory=lambda: SyntheticSpec(per_class=20, duration=(1.0, 2.0)))
    folds: int = 4
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=8, patience=8))


def compare_variants(protocol: ComparisonProtocol) -> dict[str, list[float]]:
    """UA per seed for each variant; seed ``s`` sets the corpus, the split and the initialization."""
    out: dict[str, list[float]] = {v: [] for v in protocol.variants}
    for seed in protocol.seeds:
        spec = SyntheticSpec(protocol.corpus.per_class, protocol.corpus.duration, protocol.corpus.sample_rate, seed)
        records, _ = synthetic_records(spec)
        plan = make_folds([r.utterance_id for r in records], [r.label for r in records], protocol.folds, seed=seed)
        by_id = {r.utterance_id: r for r in records}
        train_ids, test_ids = plan.folds[0]
        for v in protocol.variants:
            model, _ = train_model(ModelConfig(variant=v), protocol.train, [by_id[i] for i in train_ids], seed)
            ua = evaluate(model, [by_id[i] for i in test_ids]).ua
            log.info("seed %d %s UA %.4f", seed, v, ua)
            out[v].append(ua)
    return out
