import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from services.base import new_config, write_ini  # noqa: E402
from services.datasets import write_labels  # noqa: E402
from services.matrices import save_matrix  # noqa: E402
from services.synthetic import generate_synthetic  # noqa: E402


def write_manifest(directory, visual, labels, seen, unseen, attributes=None, prototypes=None, proto_ids=None,
                   class_names=None):
    """Write matrices, labels and manifest.ini into directory; returns the manifest path"""
    directory.mkdir(parents=True, exist_ok=True)
    config = new_config()
    config["dataset"] = {"labels": "labels.txt"}
    config["split"] = {"seen": ", ".join(str(c) for c in seen), "unseen": ", ".join(str(c) for c in unseen)}
    write_labels(labels, directory / "labels.txt")
    save_matrix(np.asarray(visual, dtype=float), directory / "visual.lsem")
    config["modality:visual"] = {"kind": "visual", "path": "visual.lsem"}
    if prototypes is not None:
        section = {"kind": "semantic"}
        if attributes is not None:
            save_matrix(np.asarray(attributes, dtype=float), directory / "attributes.lsem")
            section["path"] = "attributes.lsem"
        config["modality:attributes"] = section
        save_matrix(np.asarray(prototypes, dtype=float), directory / "protos.lsem")
        config["prototypes:attributes"] = {"path": "protos.lsem",
                                           "class_ids": ", ".join(str(c) for c in proto_ids)}
    if class_names:
        config["class_names"] = {str(k): v for k, v in class_names.items()}
    manifest = directory / "manifest.ini"
    write_ini(config, manifest)
    return manifest


@pytest.fixture
def minimal_manifest(tmp_path):
    """Two modalities of 4 instances, labels [0, 0, 1, 1], seen {0, 1}, unseen {2}"""
    visual = np.array([[1.0, 2.0, 0.0, 0.5], [0.0, 1.0, 3.0, 2.0], [1.0, 0.0, 1.0, 1.0]])
    prototypes = np.array([[1.0, 0.0, 0.5], [0.0, 1.0, 0.5]])
    attributes = prototypes[:, [0, 0, 1, 1]]
    return write_manifest(tmp_path / "minimal", visual, [0, 0, 1, 1], [0, 1], [2], attributes, prototypes, [0, 1, 2],
                          {0: "zebra", 1: "horse", 2: "donkey"})


@pytest.fixture(scope="session")
def planted():
    """Noiseless planted dataset: 8 seen / 4 unseen classes, 20 instances each, F1=30, F2=10, d=8"""
    return generate_synthetic(classes=12, per_class=20, f1=30, f2=10, d_true=8, noise_sigma=0.0, seed=7)


@pytest.fixture(scope="session")
def planted_noisy():
    return generate_synthetic(classes=12, per_class=20, f1=30, f2=10, d_true=8, noise_sigma=0.05, seed=11)


def random_orthonormal_rows(rng, d, n):
    q, _ = np.linalg.qr(rng.standard_normal((n, d)))
    return q.T
