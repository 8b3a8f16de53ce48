#!/usr/bin/env python3
"""
Planted linear latent-model datasets.

Every class c owns a latent code z_c in R^d. Seen-class codes are the columns
of a matrix with orthonormal rows (orthonormal columns when there are fewer
seen classes than d), unseen-class codes are random unit vectors. Each
modality has a decoder G with orthonormal columns:

    visual instance      x = G1 z_c + noise
    attribute prototype  a_c = G2 z_c
    word-vector proto    w_c = G3 z_c          (optional)
    noise prototype      random, unrelated to z_c (optional)

Unseen classes are the last ``unseen`` class ids.
"""
import logging

import numpy as np

from .base import BaseService
from .datasets import ClassSplit, Dataset, LabelVector, expand_prototypes, write_dataset
from .exceptions import ValidationError
from .matrices import ModalityMatrix, PrototypeMatrix

logger = logging.getLogger('lse')

DEFAULT_UNSEEN = 4


def _orthonormal_columns(rng, rows, cols):
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q


def _seen_codes(rng, d, n_seen):
    if n_seen >= d:
        return _orthonormal_columns(rng, n_seen, d).T
    return _orthonormal_columns(rng, d, n_seen)


def generate_synthetic(classes, per_class, f1, f2, d_true, noise_sigma=0.0, seed=0, unseen=DEFAULT_UNSEEN,
                       f3=None, noise_dim=None):
    """
    Build a Dataset with a planted latent model

    Args:
        classes (int): Total number of classes
        per_class (int): Instances per class
        f1 (int): Visual dimensionality
        f2 (int): Attribute dimensionality
        d_true (int): Planted latent dimensionality, <= min(f1, f2)
        noise_sigma (float): Standard deviation of Gaussian noise on visual features
        seed (int): Seed for numpy's default generator
        unseen (int): Number of unseen classes (the highest ids)
        f3 (int): Dimensionality of an optional second planted semantic modality
        noise_dim (int): Dimensionality of an optional pure-noise semantic modality
    """
    dims = [f1, f2] + ([f3] if f3 is not None else [])
    if d_true < 1 or d_true > min(dims):
        raise ValidationError(f"d_true must satisfy 1 <= d_true <= {min(dims)}, got {d_true}", contract="infeasible dims")
    if unseen < 1 or classes - unseen < 2:
        raise ValidationError(f"need >= 2 seen and >= 1 unseen classes, got classes={classes}, unseen={unseen}",
                              contract="infeasible dims")
    if per_class < 1:
        raise ValidationError(f"per_class must be >= 1, got {per_class}", contract="infeasible dims")
    if noise_sigma < 0:
        raise ValidationError(f"noise_sigma must be >= 0, got {noise_sigma}", contract="noise")
    if noise_dim is not None and noise_dim < 1:
        raise ValidationError(f"noise_dim must be >= 1, got {noise_dim}", contract="infeasible dims")

    rng = np.random.default_rng(seed)
    n_seen = classes - unseen
    unseen_codes = rng.standard_normal((d_true, unseen))
    unseen_codes /= np.linalg.norm(unseen_codes, axis=0)
    codes = np.hstack([_seen_codes(rng, d_true, n_seen), unseen_codes])
    g1 = _orthonormal_columns(rng, f1, d_true)
    g2 = _orthonormal_columns(rng, f2, d_true)
    g3 = _orthonormal_columns(rng, f3, d_true) if f3 is not None else None

    labels = LabelVector(np.repeat(np.arange(classes), per_class))
    visual = g1 @ codes[:, labels.labels]
    if noise_sigma > 0:
        visual = visual + noise_sigma * rng.standard_normal(visual.shape)

    class_ids = tuple(range(classes))
    prototypes = [PrototypeMatrix("attributes", class_ids, g2 @ codes)]
    if g3 is not None:
        prototypes.append(PrototypeMatrix("wordvec", class_ids, g3 @ codes))
    if noise_dim is not None:
        prototypes.append(PrototypeMatrix("noise", class_ids, rng.standard_normal((noise_dim, classes))))

    modalities = [ModalityMatrix("visual", visual, "visual")]
    modalities += [expand_prototypes(p, labels) for p in prototypes]
    split = ClassSplit(tuple(range(n_seen)), tuple(range(n_seen, classes)))
    dataset = Dataset(tuple(modalities), labels, split, tuple(prototypes),
                      {c: f"class{c:02d}" for c in class_ids})
    logger.info(f"Generated synthetic dataset: {classes} classes x {per_class} instances, d_true={d_true}, "
                f"noise_sigma={noise_sigma}, seed={seed}")
    return dataset


class SyntheticService(BaseService):
    """Handler for synthetic dataset generation"""

    def generate(self, out, classes, per_class, f1, f2, d_true, noise_sigma=0.0, unseen=DEFAULT_UNSEEN,
                 f3=None, noise_dim=None):
        """Generate a planted dataset and write it with its manifest to out"""
        def run():
            dataset = generate_synthetic(classes, per_class, f1, f2, d_true, noise_sigma, self.seed, unseen,
                                         f3, noise_dim)
            manifest = write_dataset(dataset, out, name=f"synthetic-{self.seed}")
            return {"manifest": str(manifest), "dataset": dataset.summary()}
        return self._run(f"generating synthetic dataset in {out}", run)
