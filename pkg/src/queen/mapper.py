"""Supervised-contrastive 2D mapper.

A small fully connected net g maps the protected model's feature vectors
into the plane, trained so same-class features land close together and
different classes land apart. Class geometry (centers, mean radii) is
measured on these 2D points; the query registry lives in the same plane.

The training objective for a batch, anchors i with positive sets O(i)
and candidate sets A(i) = everyone but i:

    sum_i -log( (1/|O(i)|) * sum_{o in O(i)} exp(s_io)
                / sum_{a in A(i)} exp(s_ia) )

where s_ij is the inner product of the L2-normalized 2D outputs over the
temperature. Normalization happens inside the loss only; the registry
and all class geometry use the raw 2D coordinates, otherwise the
objective would be scale-divergent in the plane.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class MapperSpec:
    """Four dense layers: input -> h1 -> h2 -> h3 -> 2."""

    input_dim: int
    hidden: tuple[int, int, int] = (64, 32, 16)
    temperature: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if len(self.hidden) != 3 or any(h < 1 for h in self.hidden):
            raise ValueError("hidden must be three positive sizes (four dense layers)")
        if not (self.temperature > 0):
            raise ValueError("temperature must be positive")

    def network_spec(self) -> nn.NetworkSpec:
        return nn.NetworkSpec(
            (self.input_dim, *self.hidden, 2), activation="relu", seed=self.seed
        )


def _normalized(z):
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), NORM_FLOOR)
    return z / norms, norms


def _sets(labels):
    labels = np.asarray(labels)
    n = labels.shape[0]
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(n, dtype=bool)
    positives = same & off_diag
    return positives, off_diag


def supcon_loss(z, labels, temperature: float) -> tuple[float, int]:
    """Batch loss value and the number of skipped anchors.

    Anchors without a same-class partner in the batch are skipped; a batch
    where every anchor is skipped has no defined loss and is rejected.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] != 2:
        raise ValueError("z must be a batch of 2D points")
    n = z.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    if not (temperature > 0):
        raise ValueError("temperature must be positive")
    positives, candidates = _sets(labels)
    o_sizes = positives.sum(axis=1)
    if not np.any(o_sizes > 0):
        raise ValueError("every class in the batch is a singleton; loss undefined")

    zn, _ = _normalized(z)
    S = (zn @ zn.T) / temperature
    neg_inf = -np.inf
    S_masked = np.where(candidates, S, neg_inf)
    m = S_masked.max(axis=1, keepdims=True)
    E = np.where(candidates, np.exp(S - m), 0.0)

    loss = 0.0
    skipped = 0
    for i in range(n):
        if o_sizes[i] == 0:
            skipped += 1
            continue
        p = E[i][positives[i]].sum()
        q = E[i].sum()
        loss += -np.log(p) + np.log(o_sizes[i]) + np.log(q)
    return float(loss), skipped


def supcon_loss_grad(z, labels, temperature: float):
    """Loss, skip count and the gradient in the raw 2D coordinates."""
    z = np.asarray(z, dtype=np.float64)
    loss, skipped = supcon_loss(z, labels, temperature)
    positives, candidates = _sets(labels)
    o_sizes = positives.sum(axis=1)

    zn, norms = _normalized(z)
    S = (zn @ zn.T) / temperature
    S_masked = np.where(candidates, S, -np.inf)
    m = S_masked.max(axis=1, keepdims=True)
    E = np.where(candidates, np.exp(S - m), 0.0)
    P = np.where(positives, E, 0.0).sum(axis=1)
    Q = E.sum(axis=1)

    # dL/dS, rows of skipped anchors stay zero
    G = np.zeros_like(S)
    active = o_sizes > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_q = np.where(active, 1.0 / Q, 0.0)
        inv_p = np.where(active, 1.0 / np.where(P > 0, P, 1.0), 0.0)
    G = E * (inv_q[:, None] - positives * inv_p[:, None])
    G[~active] = 0.0

    d_zn = ((G + G.T) @ zn) / temperature
    # back through the normalization: project out the radial component
    radial = np.sum(d_zn * zn, axis=1, keepdims=True)
    d_z = (d_zn - radial * zn) / norms
    return loss, skipped, d_z


class Mapper:
    """Trained 2D mapper: frozen parameters plus the map operation."""

    def __init__(self, spec: MapperSpec, params: np.ndarray):
        self.spec = spec
        self.net_spec = spec.network_spec()
        self.params = np.asarray(params, dtype=np.float64)
        if self.params.shape != (nn.param_count(self.net_spec),):
            raise ValueError("parameter vector does not match the mapper spec")

    def map_features(self, U) -> np.ndarray:
        """Raw 2D coordinates for a batch of feature vectors."""
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        return nn.forward_batch(self.net_spec, self.params, U)[0]

    def map_feature(self, u) -> np.ndarray:
        return self.map_features(np.asarray(u)[None, :])[0]


@dataclass
class MapperTrainResult:
    mapper: Mapper
    losses: list = field(default_factory=list)
    skipped_anchors: int = 0
    separation_ok: bool = True
    intra_mean: float = 0.0
    inter_mean: float = 0.0


def separation_stats(points2d, labels):
    """Mean distance to own class center vs mean distance between centers."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    centers = np.array([points2d[labels == c].mean(axis=0) for c in classes])
    intra = float(
        np.mean(
            [
                np.linalg.norm(points2d[labels == c] - centers[k], axis=1).mean()
                for k, c in enumerate(classes)
            ]
        )
    )
    diffs = centers[:, None, :] - centers[None, :, :]
    d = np.linalg.norm(diffs, axis=2)
    inter = float(d[np.triu_indices(len(classes), k=1)].mean())
    return intra, inter


def train_mapper(
    extractor: nn.Network,
    X,
    y,
    spec: MapperSpec,
    epochs: int = 100,
    lr: float = 0.01,
    lr_halving_every: int = 20,
    batch_size: int = 128,
    seed: int = 0,
) -> MapperTrainResult:
    """Fit the mapper on the extractor's features of the training data.

    The extractor is frozen: its features are computed once up front and
    its parameters are never touched. Learning rate halves on a fixed
    epoch schedule. After training, a separation check compares the mean
    intra-class 2D radius against the mean distance between class
    centers and logs a warning when the clusters fail to separate.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.shape[0] != y.shape[0]:
        raise ValueError("feature and label counts differ")
    if X.shape[0] < 2:
        raise ValueError("need at least two training samples")

    U = extractor.features(X)
    if U.shape[1] != spec.input_dim:
        raise ValueError(
            f"extractor features have dim {U.shape[1]}, mapper expects {spec.input_dim}"
        )

    net_spec = spec.network_spec()
    params = nn.init_params(net_spec)
    rng = np.random.default_rng(seed)
    n = U.shape[0]
    losses = []
    skipped_total = 0
    step_lr = lr
    for epoch in range(epochs):
        if lr_halving_every and epoch > 0 and epoch % lr_halving_every == 0:
            step_lr *= 0.5
        order = rng.permutation(n)
        epoch_loss = 0.0
        nb = 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            if idx.size < 2:
                continue
            Z = nn.forward_batch(net_spec, params, U[idx])[0]
            try:
                val, skipped, d_z = supcon_loss_grad(Z, y[idx], spec.temperature)
            except ValueError:
                # all-singleton tail batch: nothing to learn from
                continue
            skipped_total += skipped
            if not np.isfinite(val):
                raise nn.DivergenceError(epoch)
            g = nn.output_grad_backprop(net_spec, params, U[idx], d_z)
            params -= step_lr * g
            epoch_loss += val
            nb += 1
        losses.append(epoch_loss / max(nb, 1))

    mapper = Mapper(spec, params)
    intra, inter = separation_stats(mapper.map_features(U), y)
    ok = intra < inter
    if not ok:
        log.warning(
            "mapper separation check failed: intra %.4f vs inter %.4f", intra, inter
        )
    return MapperTrainResult(
        mapper=mapper,
        losses=losses,
        skipped_anchors=skipped_total,
        separation_ok=ok,
        intra_mean=intra,
        inter_mean=inter,
    )
