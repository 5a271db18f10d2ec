import numpy as np
import pytest

from fdreg.deformation import DeformationField
from fdreg.evaluation import EvaluationError, aggregate, dice, mae, tre
from fdreg.volume import GridGeometry, Volume

GEOM = GridGeometry((6, 6, 6), np.eye(4))


def test_tre_cases(rng):
    truth = DeformationField(rng.standard_normal((3, 6, 6, 6)), GEOM)
    assert tre(truth, truth)["max"] == 0
    shift = np.zeros((3, 6, 6, 6))
    shift[1] = 2.0
    stats = tre(DeformationField.identity(GEOM), DeformationField(shift, GEOM))
    assert stats["mean"] == stats["max"] == pytest.approx(2.0)
    pred = rng.standard_normal((3, 6, 6, 6))
    mask = rng.random((6, 6, 6)) > 0.5
    ref = np.array([np.linalg.norm(pred[:, i, j, k] - truth.displacement[:, i, j, k])
                    for i, j, k in zip(*np.nonzero(mask))])
    stats = tre(pred, truth, mask, clip=0.1)
    assert stats["mean"] == pytest.approx(ref.mean(), rel=1e-12)
    assert stats["median"] == pytest.approx(np.median(ref))
    assert stats["mean_clipped"] == 0.1
    assert tre(truth, pred, mask)["mean"] == stats["mean"]


def test_tre_errors():
    with pytest.raises(EvaluationError):
        tre(np.zeros((3, 2, 2, 2)), np.zeros((3, 2, 2, 2)), np.zeros((2, 2, 2), bool))
    with pytest.raises(EvaluationError):
        tre(np.zeros((3, 2, 2, 2)), np.zeros((3, 3, 2, 2)))


def test_dice_cases():
    a = np.zeros((10, 10, 10), int)
    a[:4] = 1
    a[6:] = 2
    assert dice(a, a)["mean"] == 1.0
    b = np.where(a == 1, 2, np.where(a == 2, 1, 0))
    assert dice(a, b)["per_label"] == {1: 0.0, 2: 0.0}
    c1 = np.zeros((10, 10, 10), int)
    c2 = np.zeros((10, 10, 10), int)
    c1[2:6, 2:6, 2:6] = 3
    c2[4:8, 2:6, 2:6] = 3
    assert dice(c1, c2)["per_label"][3] == pytest.approx(0.5)
    assert dice(c1, c2) == dice(c2, c1)
    with pytest.raises(EvaluationError):
        dice(c1, a * 0 + 5 * (a == 1))


def test_mae_cases(rng):
    a = Volume(rng.random((5, 5, 5)))
    assert mae(a, a) == 0.0
    assert mae(a, a.replace(data=a.data + 5)) == pytest.approx(5.0)
    b = rng.random((5, 5, 5))
    mask = b > 0.3
    assert mae(a.data[0], b, mask) == pytest.approx(np.abs(a.data[0] - b)[mask].mean(), rel=1e-12)
    assert mae(a.data[0], b + 200, clip=120.0) == 120.0
    with pytest.raises(EvaluationError):
        mae(a.data[0], b, np.zeros_like(mask))


def test_aggregate_clips_each_case():
    s = aggregate([0.5, 1.0, 10.0], clip=3.0)
    assert s["mean"] == pytest.approx(1.5) and s["median"] == 1.0 and s["n"] == 3
