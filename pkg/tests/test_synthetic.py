import numpy as np
import pytest

from services.datasets import assemble_dataset
from services.exceptions import ValidationError
from services.synthetic import SyntheticService, generate_synthetic


def _rank(values, tol=1e-9):
    sigma = np.linalg.svd(values, compute_uv=False)
    return int(np.sum(sigma > tol * sigma[0]))


def test_noiseless_features_have_planted_rank(planted):
    assert _rank(planted.visual.values) == 8
    assert _rank(planted.prototypes_for("attributes").vectors) == 8


def test_noise_fills_visual_rank(planted_noisy):
    assert _rank(planted_noisy.visual.values) > 8


def test_layout(planted):
    assert planted.n_instances == 240
    assert planted.modality_names == ["visual", "attributes"]
    assert planted.split.seen == tuple(range(8))
    assert planted.split.unseen == (8, 9, 10, 11)
    assert planted.class_name(3) == "class03"


def test_seen_prototypes_orthonormal_and_unseen_unit(planted):
    protos = planted.prototypes_for("attributes")
    seen = protos.columns_for(planted.split.seen)
    np.testing.assert_allclose(seen.T @ seen, np.eye(8), atol=1e-10)
    unseen = protos.columns_for(planted.split.unseen)
    np.testing.assert_allclose(np.linalg.norm(unseen, axis=0), 1.0, atol=1e-12)


def test_same_seed_is_bit_identical():
    a = generate_synthetic(6, 3, 5, 4, 2, noise_sigma=0.1, seed=3, unseen=2)
    b = generate_synthetic(6, 3, 5, 4, 2, noise_sigma=0.1, seed=3, unseen=2)
    c = generate_synthetic(6, 3, 5, 4, 2, noise_sigma=0.1, seed=4, unseen=2)
    for ma, mb in zip(a.modalities, b.modalities):
        assert ma.values.tobytes() == mb.values.tobytes()
    assert a.visual.values.tobytes() != c.visual.values.tobytes()


def test_optional_modalities():
    ds = generate_synthetic(10, 2, 12, 6, 3, seed=1, f3=5, noise_dim=7)
    assert ds.modality_names == ["visual", "attributes", "wordvec", "noise"]
    assert ds.prototypes_for("wordvec").dim == 5
    assert ds.prototypes_for("noise").dim == 7
    assert _rank(ds.prototypes_for("wordvec").vectors) == 3


@pytest.mark.parametrize("kwargs", [
    dict(d_true=7),
    dict(d_true=0),
    dict(unseen=0),
    dict(classes=5, unseen=4),
    dict(f3=2),
])
def test_infeasible_dims(kwargs):
    args = dict(classes=8, per_class=2, f1=6, f2=6, d_true=3, unseen=2)
    args.update(kwargs)
    with pytest.raises(ValidationError) as excinfo:
        generate_synthetic(**args)
    assert excinfo.value.contract == "infeasible dims"


def test_service_writes_manifest(tmp_path):
    result = SyntheticService(threads=1, seed=5).generate(tmp_path / "syn", 6, 4, 8, 5, 3, unseen=2)
    assert result["status"] == "success"
    loaded = assemble_dataset(result["manifest"])
    direct = generate_synthetic(6, 4, 8, 5, 3, seed=5, unseen=2)
    np.testing.assert_array_equal(loaded.visual.values, direct.visual.values)


def test_service_reports_infeasible(tmp_path):
    result = SyntheticService(threads=1).generate(tmp_path / "syn", 6, 4, 3, 5, 4, unseen=2)
    assert result["status"] == "error"
    assert result["contract"] == "infeasible dims"
