#!/usr/bin/env python3
"""
Zero-shot prediction in the visual space.

A candidate class with semantic vector a is mapped to the visual space as
x~ = U_vis^T (U_sem a); a test instance x_t is assigned the candidate with the
highest cosine similarity, or the highest weighted sum of cosines when several
semantic modalities are fused.
"""
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .base import BaseService
from .datasets import assemble_dataset
from .exceptions import ValidationError
from .matrices import ModalityMatrix, PrototypeMatrix
from .modelstore import load_model

logger = logging.getLogger('lse')


@dataclass(frozen=True, eq=False)
class ReconstructedPrototypes:
    class_ids: tuple
    vectors: np.ndarray
    source_modality: str

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64, copy=True)
        class_ids = tuple(int(c) for c in self.class_ids)
        if vectors.ndim != 2 or vectors.shape[1] != len(class_ids):
            raise ValidationError(f"{len(class_ids)} class ids for reconstructed matrix of shape {vectors.shape}",
                                  contract="prototype-columns")
        if not np.all(np.isfinite(vectors)):
            raise ValidationError("reconstructed prototypes contain non-finite values", contract="finite-values")
        vectors.setflags(write=False)
        object.__setattr__(self, 'vectors', vectors)
        object.__setattr__(self, 'class_ids', class_ids)

    def restricted(self, class_ids):
        index = {c: j for j, c in enumerate(self.class_ids)}
        missing = [c for c in class_ids if int(c) not in index]
        if missing:
            raise ValidationError(f"candidate classes {missing} have no reconstructed prototype", contract="candidate-set")
        columns = [index[int(c)] for c in class_ids]
        return ReconstructedPrototypes(tuple(class_ids), self.vectors[:, columns], self.source_modality)


@dataclass(frozen=True)
class FusionWeights:
    weights: tuple

    def __post_init__(self):
        weights = tuple((str(name), float(alpha)) for name, alpha in self.weights)
        if not weights:
            raise ValidationError("fusion weights must not be empty", contract="fusion-weights")
        negative = [name for name, alpha in weights if alpha < 0]
        if negative:
            raise ValidationError(f"negative fusion weight for {negative}", contract="fusion-weights")
        if not any(alpha > 0 for _, alpha in weights):
            raise ValidationError("at least one fusion weight must be positive", contract="fusion-weights")
        names = [name for name, _ in weights]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate modalities in fusion weights {names}", contract="fusion-weights")
        object.__setattr__(self, 'weights', weights)

    @classmethod
    def one_hot(cls, names, chosen):
        return cls(tuple((n, 1.0 if n == chosen else 0.0) for n in names))

    def as_dict(self):
        return dict(self.weights)

    def names(self):
        return [name for name, _ in self.weights]


def reconstruct_prototypes(model, protos, visual_modality=None, semantic_modality=None):
    """Visual-space prototypes U_vis^T U_sem A for every column of protos"""
    visual_modality = visual_modality or model.modality_names[0]
    semantic_modality = semantic_modality or protos.modality_name
    u_vis = model.encoder(visual_modality)
    u_sem = model.encoder(semantic_modality)
    if protos.dim != u_sem.shape[1]:
        raise ValidationError(f"prototype dimensionality {protos.dim} does not match encoder {semantic_modality} "
                              f"({u_sem.shape[1]} features)", contract="prototype dimensionality")
    latent = u_sem @ model.prepare(semantic_modality, protos.vectors)
    return ReconstructedPrototypes(protos.class_ids, u_vis.T @ latent, semantic_modality)


def cosine_scores(x, vectors, norms=None):
    """Cosine of x against every column; zero columns score -inf"""
    x = np.asarray(x, dtype=np.float64).ravel()
    x_norm = np.linalg.norm(x)
    if x_norm == 0.0:
        raise ValidationError("test instance is the zero vector", contract="non-zero instance")
    if vectors.shape[0] != x.size:
        raise ValidationError(f"instance has {x.size} features, prototypes have {vectors.shape[0]}",
                              contract="instance dimensionality")
    if norms is None:
        norms = np.linalg.norm(vectors, axis=0)
    dots = vectors.T @ x
    scores = np.full(vectors.shape[1], -np.inf)
    valid = norms > 0
    scores[valid] = dots[valid] / (norms[valid] * x_norm)
    return scores


def pick(scores, class_ids):
    """Arg-max with ties broken by the lowest class id"""
    best = np.max(scores)
    if best == -np.inf:
        raise ValidationError("no valid candidate: every candidate prototype is zero", contract="no valid candidate")
    tied = [int(class_ids[j]) for j in np.flatnonzero(scores == best)]
    return min(tied)


def classify(instance, protos, norms=None):
    scores = cosine_scores(instance, protos.vectors, norms)
    return pick(scores, protos.class_ids), scores


def _check_fusion(protos_list, weights):
    if not protos_list:
        raise ValidationError("fusion needs at least one prototype set", contract="fusion-weights")
    order = protos_list[0].class_ids
    for protos in protos_list[1:]:
        if protos.class_ids != order:
            raise ValidationError("class-id order mismatch between fused prototype sets", contract="class-id order")
    sources = [p.source_modality for p in protos_list]
    if sorted(sources) != sorted(weights.names()):
        raise ValidationError(f"fusion weights cover {weights.names()} but prototypes come from {sources}",
                              contract="fusion-weights")


def fused_scores(instance, protos_list, weights, norms_list=None):
    """Per-class sum of alpha_k * cos(x, x~_j^k); zero-weight modalities are skipped"""
    alphas = weights.as_dict()
    total = np.zeros(len(protos_list[0].class_ids))
    for k, protos in enumerate(protos_list):
        alpha = alphas[protos.source_modality]
        if alpha == 0.0:
            continue
        norms = norms_list[k] if norms_list is not None else None
        total = total + alpha * cosine_scores(instance, protos.vectors, norms)
    return total


def classify_fused(instance, protos_list, weights):
    _check_fusion(protos_list, weights)
    scores = fused_scores(instance, protos_list, weights)
    return pick(scores, protos_list[0].class_ids), scores


@dataclass(frozen=True, eq=False)
class Predictions:
    labels: np.ndarray
    scores: np.ndarray
    class_ids: tuple

    def top_k(self, k):
        """Candidate column indices per instance ranked by score, ties by lowest id"""
        k = min(int(k), len(self.class_ids))
        order = np.argsort(-self.scores, axis=1, kind='stable')[:, :k]
        return order

    def to_text(self, k=5, indices=None):
        """Delimited text: index, predicted id, then k (id, score) pairs per line"""
        k = min(int(k), len(self.class_ids))
        indices = range(len(self.labels)) if indices is None else indices
        out = io.StringIO()
        header = ["index", "predicted"]
        for r in range(1, k + 1):
            header += [f"rank{r}_id", f"rank{r}_score"]
        out.write(",".join(header) + "\n")
        ranked = self.top_k(k)
        for row, index in enumerate(indices):
            fields = [str(int(index)), str(int(self.labels[row]))]
            for j in ranked[row]:
                fields += [str(self.class_ids[j]), repr(float(self.scores[row, j]))]
            out.write(",".join(fields) + "\n")
        return out.getvalue()


def _instance_values(model, instances, visual_modality):
    values = instances.values if isinstance(instances, ModalityMatrix) else np.asarray(instances, dtype=np.float64)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    return model.prepare(visual_modality, values)


def predict_batch(model, instances, candidates, candidate_ids, visual_modality=None, weights=None, threads=1):
    """
    Classify every instance column against the candidate classes

    Args:
        model (LseModel): Trained model
        instances (ModalityMatrix | ndarray): Visual features, one column per instance
        candidates (PrototypeMatrix | list): One prototype set, or several for fusion
        candidate_ids (list): Class ids the prediction is restricted to
        weights (FusionWeights): Required when several prototype sets are given

    Returns:
        Predictions: labels, instance x candidate score matrix, candidate ids (ascending)
    """
    candidate_ids = tuple(sorted(int(c) for c in candidate_ids))
    if not candidate_ids:
        raise ValidationError("candidate class ids must be non-empty", contract="candidate-set")
    visual_modality = visual_modality or model.modality_names[0]
    proto_sets = list(candidates) if isinstance(candidates, (list, tuple)) else [candidates]
    recon = []
    for protos in proto_sets:
        if isinstance(protos, PrototypeMatrix):
            protos = reconstruct_prototypes(model, protos.restricted(candidate_ids), visual_modality)
        recon.append(protos.restricted(candidate_ids))
    if len(recon) > 1 and weights is None:
        raise ValidationError("fusion weights are required for several prototype sets", contract="fusion-weights")
    if weights is not None:
        _check_fusion(recon, weights)
    values = _instance_values(model, instances, visual_modality)
    norms_list = [np.linalg.norm(r.vectors, axis=0) for r in recon]

    def one(j):
        x = values[:, j]
        if weights is None:
            scores = cosine_scores(x, recon[0].vectors, norms_list[0])
        else:
            scores = fused_scores(x, recon, weights, norms_list)
        return pick(scores, candidate_ids), scores

    n = values.shape[1]
    if threads > 1 and n > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(j) for j in range(n)]
    labels = np.array([r[0] for r in results], dtype=np.int64)
    scores = np.vstack([r[1] for r in results]) if results else np.zeros((0, len(candidate_ids)))
    return Predictions(labels, scores, candidate_ids)


def duplicate_prototypes(protos):
    """Pairs of class ids whose (reconstructed or semantic) prototype columns coincide"""
    vectors = protos.vectors
    pairs = []
    for a in range(vectors.shape[1]):
        for b in range(a + 1, vectors.shape[1]):
            if np.array_equal(vectors[:, a], vectors[:, b]):
                pairs.append((protos.class_ids[a], protos.class_ids[b]))
    return pairs


class PredictionService(BaseService):
    """Handler for batch prediction with a saved model"""

    def predict(self, model_path, manifest, test_source="unseen", candidates="unseen", top_k=5,
                semantic=None, weights=None):
        """Predict labels for the manifest's test instances and return delimited text"""
        def run():
            model = load_model(model_path)
            dataset = assemble_dataset(manifest)
            indices = dataset.indices_of(dataset.split.candidates(test_source))
            if indices.size == 0:
                raise ValidationError(f"no {test_source} instances to predict", contract="test-set")
            names = semantic or [n for n, k in zip(model.modality_names, model.modality_kinds) if k == "semantic"][:1]
            proto_sets = [dataset.prototypes_for(n) for n in names]
            fusion = FusionWeights(tuple(weights.items())) if weights else None
            if len(proto_sets) > 1 and fusion is None:
                fusion = FusionWeights(tuple((n, 1.0 / len(names)) for n in names))
            preds = predict_batch(model, dataset.visual.select(indices), proto_sets,
                                  dataset.split.candidates(candidates), weights=fusion, threads=self.threads)
            return {"text": preds.to_text(top_k, indices), "count": int(indices.size)}
        return self._run(f"predicting with model {model_path}", run)
