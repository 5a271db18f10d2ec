"""Registration accuracy metrics."""
import numpy as np

from fdreg.volume import Volume

TRE_CLIP = 3.0
MAE_CLIP = 120.0


class EvaluationError(ValueError):
    pass


def _disp(d):
    return d.displacement if hasattr(d, "displacement") else np.asarray(d)


def tre(predicted, truth, mask=None, clip=None):
    """Per-voxel displacement error in voxels over ``mask``.

    Returns mean, std, median, 95th percentile and max. With ``clip`` the
    mean is also reported clipped (``mean_clipped``), as used when
    aggregating cases.
    """
    p, t = _disp(predicted), _disp(truth)
    if p.shape != t.shape:
        raise EvaluationError(f"deformation shapes differ: {p.shape} vs {t.shape}")
    mask = np.ones(p.shape[1:], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EvaluationError("TRE mask is empty")
    err = np.sqrt(np.sum((p - t) ** 2, axis=0))[mask]
    stats = {
        "mean": float(err.mean()),
        "std": float(err.std()),
        "median": float(np.median(err)),
        "p95": float(np.percentile(err, 95)),
        "max": float(err.max()),
        "n": int(err.size),
    }
    if clip is not None:
        stats["mean_clipped"] = min(stats["mean"], float(clip))
    return stats


def dice(labels_a, labels_b):
    """Dice per label present in either map (background 0 excluded)."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise EvaluationError(f"label shapes differ: {a.shape} vs {b.shape}")
    present_a = set(np.unique(a).tolist()) - {0}
    present_b = set(np.unique(b).tolist()) - {0}
    if not present_a & present_b:
        raise EvaluationError("no common labels")
    labels = sorted(present_a | present_b)
    per = {}
    for lab in labels:
        sa, sb = a == lab, b == lab
        per[int(lab)] = float(2.0 * np.count_nonzero(sa & sb) / (np.count_nonzero(sa) + np.count_nonzero(sb)))
    return {"per_label": per, "mean": float(np.mean(list(per.values())))}


def _values(v):
    return v.data if isinstance(v, Volume) else np.asarray(v, dtype=np.float64)


def mae(a, b, mask=None, clip=None):
    """Mean absolute difference over ``mask``; optionally clipped at ``clip``."""
    x, y = _values(a), _values(b)
    if x.shape != y.shape:
        raise EvaluationError(f"shapes differ: {x.shape} vs {y.shape}")
    diff = np.abs(x - y)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if not m.any():
            raise EvaluationError("MAE mask is empty")
        diff = diff[..., m]
    value = float(diff.mean())
    return min(value, float(clip)) if clip is not None else value


def aggregate(values, clip=None):
    """Mean, std and median across cases, each case clipped at ``clip`` first."""
    vals = np.asarray(values, dtype=np.float64)
    if clip is not None:
        vals = np.minimum(vals, clip)
    return {"mean": float(vals.mean()), "std": float(vals.std()), "median": float(np.median(vals)),
            "n": int(vals.size)}
