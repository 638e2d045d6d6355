"""Flow benchmark metrics: end-point error, Fl outlier rate, per-region reports."""

from __future__ import annotations

import csv
import io
import math
from typing import Mapping, Optional

import numpy as np

from .engine import Tensor

REPORT_COLUMNS = ("region", "pixels", "aee", "fl", "status")


class EmptyMaskError(ValueError):
    pass


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _norms(u, u_gt):
    u = _arr(u).astype(np.float64)
    g = _arr(u_gt).astype(np.float64)
    if u.shape != g.shape:
        raise ValueError(f"flow shapes differ: {u.shape} vs {g.shape}")
    epe = np.sqrt(((u - g) ** 2).sum(axis=1))
    mag = np.sqrt((g ** 2).sum(axis=1))
    return epe, mag


def _mask(mask, like: np.ndarray) -> np.ndarray:
    if mask is None:
        return np.ones(like.shape, dtype=bool)
    m = _arr(mask)
    if m.dtype == bool:
        return np.broadcast_to(m[:, 0] if m.ndim == 4 else m, like.shape)
    if m.ndim == 4:
        m = m[:, 0]
    vals = np.unique(m)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError("evaluation masks must contain only 0 and 1")
    return np.broadcast_to(m.astype(bool), like.shape)


def aee(u, u_gt, mask=None) -> float:
    epe, _ = _norms(u, u_gt)
    m = _mask(mask, epe)
    if not m.any():
        raise EmptyMaskError("aee over an empty mask")
    return float(epe[m].mean())


def outliers(epe: np.ndarray, mag: np.ndarray) -> np.ndarray:
    """Outlier iff the pixel fails both inlier tests ``epe < 3`` and ``epe < 0.05 * |u_gt|``."""
    return ~((epe < 3.0) | (epe < 0.05 * mag))


def fl_rate(u, u_gt, mask=None) -> float:
    epe, mag = _norms(u, u_gt)
    m = _mask(mask, epe)
    if not m.any():
        raise EmptyMaskError("fl_rate over an empty mask")
    return float(outliers(epe, mag)[m].mean())


def region_report(u, u_gt, masks: Optional[Mapping[str, object]] = None, valid=None) -> list:
    """One row per named region; an empty region yields a row with status ``empty`` and no values.

    ``valid`` (e.g. the ground truth's known-flow mask) restricts every region,
    including ``all``.
    """
    epe, _ = _norms(u, u_gt)
    base = _mask(valid, epe)
    regions = {"all": None}
    if masks:
        regions.update(masks)
    rows = []
    for name, mask in regions.items():
        m = base & _mask(mask, epe)
        count = int(m.sum())
        if count == 0:
            rows.append({"region": name, "pixels": 0, "aee": None, "fl": None, "status": "empty"})
            continue
        rows.append({"region": name, "pixels": count, "aee": aee(u, u_gt, m),
                     "fl": fl_rate(u, u_gt, m), "status": "ok"})
    return rows


def report_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([r["region"], r["pixels"],
                         "n/a" if r["aee"] is None else f"{r['aee']:.6f}",
                         "n/a" if r["fl"] is None else f"{r['fl']:.6f}",
                         r["status"]])
    return buf.getvalue()


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float((a * a).sum() * (b * b).sum()))
    return float((a * b).sum() / denom) if denom > 0 else 0.0
