"""Fitting pipeline and data-driven Lipschitz radii."""
from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np
from scipy.spatial import cKDTree

from shapereg.admm import admm_solve
from shapereg.cgm import cgm_solve
from shapereg.config import Engine, FitConfig
from shapereg.errors import DataError
from shapereg.model import MaxAffineModel
from shapereg.problem import Dataset, NoShape, PerPointBall, ShapeConstraint, build_instance, mirror_shape
from shapereg.proxalm import Trace, solve
from shapereg.shapes import dual_exponent

log = logging.getLogger("shapereg.estimator")


def fit(
    dataset: Dataset,
    shape: ShapeConstraint | None = None,
    config: FitConfig = FitConfig(),
    *,
    trace: Trace | None = None,
) -> MaxAffineModel:
    """Standardize (when the gradient set allows it), solve, map back to the data scale."""
    shape = shape if shape is not None else NoShape()
    if config.concave:
        dataset = Dataset(dataset.X, -dataset.Y)
        shape = mirror_shape(shape)
    instance = build_instance(dataset, shape, standardize_data=config.standardize)
    engine = config.engine
    log.info("fit_start", extra={"engine": engine.value, "n": instance.n, "d": instance.d,
                                 "shape": shape.kind, "standardized": instance.standardized})
    if engine.uses_cgm:
        result = cgm_solve(instance, config.cgm_config(), engine.inner, config.engine_config(), trace=trace)
        model = result.model
    elif engine is Engine.ADMM:
        model = admm_solve(instance, config.engine_config(), trace=trace).model
    else:
        model = solve(instance, config.engine_config(), trace=trace).model
    meta = {**model.meta, "engine": engine.value, "tol": config.tol, "concave": config.concave}
    model = replace(model, meta=meta)
    if config.concave:
        model = replace(model.negated(), shape=mirror_shape(model.shape))
    return model


def lipschitz_knn(dataset: Dataset, k: int, p: float = 2.0) -> np.ndarray:
    """L_i = median over the k nearest neighbours j of |Y_i - Y_j| / ||X_i - X_j||_p.

    Neighbours coinciding with X_i are skipped (with a warning).
    """
    n = dataset.n
    if not (1 <= k < n):
        raise DataError(f"k must satisfy 1 <= k < n (k={k}, n={n})")
    if p not in (1.0, 2.0, np.inf):
        raise DataError("p must be 1, 2 or inf")
    P, Y = dataset.points, dataset.Y
    tree = cKDTree(P)
    dist, idx = tree.query(P, k=k + 1, p=p)
    dist, idx = dist.reshape(n, k + 1), idx.reshape(n, k + 1)
    radii = np.empty(n)
    skipped = 0
    for i in range(n):
        keep = (idx[i] != i) & (dist[i] > 0)
        skipped += int(np.sum((idx[i] != i) & (dist[i] == 0)))
        if not keep.any():
            raise DataError(f"point {i} has no neighbour at positive distance")
        nb = idx[i][keep][:k]
        radii[i] = float(np.median(np.abs(Y[i] - Y[nb]) / dist[i][keep][:k]))
    if skipped:
        log.warning("knn_coincident_points", extra={"skipped": skipped})
    # a flat neighbourhood still needs a positive radius
    floor = 1e-12 * max(1.0, float(np.max(radii)))
    return np.maximum(radii, floor)


def data_driven_shape(dataset: Dataset, k: int, p: float = 2.0) -> PerPointBall:
    """Per-point ball on the gradients in the norm dual to the neighbour distance."""
    return PerPointBall(q=dual_exponent(p), L=lipschitz_knn(dataset, k, p).tolist())
