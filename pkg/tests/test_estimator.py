import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from modalfuse.errors import ConfigError, StructuralError
from modalfuse.estimator import MultimodalFusionRetriever
from modalfuse.synth import generate, preset


@pytest.fixture(scope="module")
def ds():
    return generate(preset(dim=16, n_topics=4, n_queries=24, items_per_query=6))


def test_params_and_clone():
    est = MultimodalFusionRetriever(variant="MoE", epochs=3)
    assert est.get_params()["variant"] == "MoE"
    c = clone(est)
    assert c.get_params() == est.get_params()
    est.set_params(k=5)
    assert est.k == 5


def test_fit_transform_predict_score(ds):
    est = MultimodalFusionRetriever(epochs=2).fit(ds)
    h = est.transform(ds)
    assert h.shape == (len(ds.items), ds.dim)
    X = np.hstack([ds.text_matrix(), ds.image_matrix()])
    np.testing.assert_array_equal(est.transform(X), h)
    top = est.predict(ds.query_matrix()[:3])
    assert len(top) == 3 and all(len(t) == 10 for t in top)
    assert 0.0 <= est.score(ds) <= 1.0
    again = MultimodalFusionRetriever(epochs=2).fit(ds)
    np.testing.assert_array_equal(again.transform(ds), h)


def test_curriculum_flag(ds):
    est = MultimodalFusionRetriever(epochs=1, curriculum=False).fit(ds)
    assert est.params_.stages == ["FusionAlign"]
    est = MultimodalFusionRetriever(epochs=1, stage2_epochs=1).fit(ds)
    assert est.params_.stages == ["QueryTextAlign", "QueryImageAlign", "FusionAlign"]


def test_validation(ds):
    with pytest.raises(NotFittedError):
        MultimodalFusionRetriever().transform(np.zeros((1, 32)))
    est = MultimodalFusionRetriever(epochs=1).fit(ds)
    with pytest.raises(StructuralError):
        est.transform(np.zeros((2, 5)))
    with pytest.raises(StructuralError):
        est.predict(np.ones((1, 3)))
    with pytest.raises(ValueError):
        est.predict(np.array([[np.nan] * 16]))
    with pytest.raises(ConfigError):
        MultimodalFusionRetriever().fit(np.zeros((3, 32)))
