"""Cross-entropy, angular-margin softmax, contrastive and center losses.

All losses are built from :mod:`esddkit.autodiff` primitives, so their
gradients come from the same engine as the network's.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import BadMargin, BatchTooSmall, ClassOutOfRange, LabelNotSimplex, ShapeMismatch


@dataclass
class LossValue:
    value: ad.Tensor
    components: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return self.value.item()


@dataclass(frozen=True)
class CenterBank:
    """Running centres for the tracked classes (bonafide only by default)."""

    centers: np.ndarray
    update_rate: float = 0.5
    tracked: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not 0 < self.update_rate <= 1:
            raise ValueError("update_rate must lie in (0, 1]")
        if self.centers.shape[0] != len(self.tracked):
            raise ValueError("one centre row per tracked class")

    @classmethod
    def zeros(cls, dim: int, update_rate: float = 0.5, tracked=(0,)) -> "CenterBank":
        return cls(np.zeros((len(tracked), dim)), update_rate, tuple(tracked))


def _one_hot(ids: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((ids.shape[0], n))
    out[np.arange(ids.shape[0]), ids] = 1.0
    return out


def unit_rows(x: ad.Tensor) -> ad.Tensor:
    """Row-wise L2 normalisation."""
    n = ad.l2norm(x)
    return ad.mul(x, ad.expand(ad.power(n, -1.0), 1, x.shape[1]))


def cross_entropy(logits: ad.Tensor, soft_labels) -> LossValue:
    y = np.asarray(soft_labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise LabelNotSimplex(f"labels {y.shape} do not match logits {logits.shape}")
    if np.any(y < 0) or np.any(np.abs(y.sum(axis=1) - 1.0) > 1e-6):
        raise LabelNotSimplex("every label row must be a probability vector")
    nll = ad.sum(ad.mul(ad.log_softmax(logits), ad.const(y)))
    value = ad.scale(nll, -1.0 / logits.shape[0])
    return LossValue(value, {"cross_entropy": value.item()})


def _chebyshev(c: ad.Tensor, m: int) -> ad.Tensor:
    """cos(m * theta) as the Chebyshev polynomial T_m evaluated at cos(theta)."""
    prev, cur = ad.const(np.ones(c.shape)), c
    for _ in range(m - 1):
        prev, cur = cur, ad.sub(ad.scale(ad.mul(c, cur), 2.0), prev)
    return cur


def a_softmax(emb: ad.Tensor, class_weights: ad.Tensor, class_ids, margin: int = 2, lam: float = 0.0) -> LossValue:
    """Angular-margin softmax loss.

    The target logit ||x|| cos(theta_y) is replaced by ||x|| psi(theta_y) with
    psi(theta) = (-1)^k cos(m theta) - 2k on [k pi/m, (k+1) pi/m]. The piece
    index k is read off cos(theta) directly, so no arccos is taken.

    ``lam`` > 0 blends in the plain target, ||x|| (lam cos + psi) / (1 + lam);
    annealing it toward a small value avoids the zero-norm collapse that the
    pure margin causes from random initialisation.
    """
    if int(margin) != margin or margin < 1:
        raise BadMargin(f"margin must be an integer >= 1, got {margin}")
    m = int(margin)
    ids = np.asarray(class_ids, dtype=np.int64)
    n_cls = class_weights.shape[0]
    if ids.shape != (emb.shape[0],) or np.any(ids < 0) or np.any(ids >= n_cls):
        raise ClassOutOfRange(f"class ids must lie in [0, {n_cls}) with one per row")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if emb.shape[1] != class_weights.shape[1]:
        raise ShapeMismatch(f"embedding {emb.shape} vs class weights {class_weights.shape}")

    norms = ad.l2norm(emb)
    cos = ad.matmul(unit_rows(emb), ad.transpose(unit_rows(class_weights)))
    onehot = _one_hot(ids, n_cls)
    cos_y = ad.sum(ad.mul(cos, ad.const(onehot)), axis=1)

    c = np.clip(cos_y.data, -1.0, 1.0)
    k = np.zeros_like(c)
    for j in range(1, m):
        k += c <= np.cos(j * np.pi / m)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    psi = ad.add(ad.mul(_chebyshev(cos_y, m), ad.const(sign)), ad.const(-2.0 * k))

    delta = ad.scale(ad.sub(psi, cos_y), 1.0 / (1.0 + lam))
    shift = ad.mul(ad.const(onehot), ad.expand(delta, 1, n_cls))
    logits = ad.mul(ad.add(cos, shift), ad.expand(norms, 1, n_cls))
    value = cross_entropy(logits, onehot).value
    return LossValue(value, {"asoftmax": value.item()})


def _pair_matrix(b: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    i, j = np.triu_indices(b, k=1)
    p = np.zeros((i.size, b))
    p[np.arange(i.size), i] = 1.0
    p[np.arange(i.size), j] = -1.0
    return p, i, j


def contrastive(emb: ad.Tensor, labels, margin: float = 1.0) -> LossValue:
    """Mean over all unordered pairs: d^2 for same-label, max(0, margin - d)^2 otherwise."""
    labels = np.asarray(labels)
    b = emb.shape[0]
    if b < 2:
        raise BatchTooSmall("contrastive loss needs at least two embeddings")
    p, i, j = _pair_matrix(b)
    same = (labels[i] == labels[j]).astype(np.float64)
    diffs = ad.matmul(ad.const(p), emb)
    sq = ad.sum(ad.mul(diffs, diffs), axis=1)
    hinge = ad.relu(ad.sub(ad.const(np.full(i.size, float(margin))), ad.l2norm(diffs)))
    total = ad.add(
        ad.sum(ad.mul(sq, ad.const(same))),
        ad.sum(ad.mul(ad.mul(hinge, hinge), ad.const(1.0 - same))),
    )
    value = ad.scale(total, 1.0 / i.size)
    return LossValue(value, {"contrastive": value.item()})


def center_loss(emb: ad.Tensor, class_ids, bank: CenterBank) -> tuple[LossValue, CenterBank]:
    """Half squared distance to the class centre, averaged over tracked samples.

    Centres then move toward the batch mean of their class by ``update_rate``.
    Untracked samples contribute nothing.
    """
    ids = np.asarray(class_ids)
    rows = np.full(ids.shape[0], -1)
    for r, cls in enumerate(bank.tracked):
        rows[ids == cls] = r
    mask = rows >= 0
    n_tracked = int(mask.sum())
    if n_tracked == 0:
        value = ad.scale(ad.sum(emb), 0.0)
        return LossValue(value, {"center": 0.0}), bank

    targets = np.zeros(emb.shape)
    targets[mask] = bank.centers[rows[mask]]
    diff = ad.mul(ad.sub(emb, ad.const(targets)), ad.const(np.repeat(mask[:, None], emb.shape[1], 1).astype(float)))
    value = ad.scale(ad.sum(ad.mul(diff, diff)), 0.5 / n_tracked)

    centers = bank.centers.copy()
    for r in range(len(bank.tracked)):
        sel = rows == r
        if sel.any():
            centers[r] += bank.update_rate * (emb.data[sel].mean(axis=0) - centers[r])
    return LossValue(value, {"center": value.item()}), replace(bank, centers=centers)


def composite_phase1(
    emb: ad.Tensor,
    class_weights: ad.Tensor,
    class_ids,
    binary_labels,
    bank: CenterBank,
    weights=(1.0, 1.0, 1.0),
    margin: int = 2,
    contrastive_margin: float = 1.0,
    normalize_embeddings: bool = True,
    lam: float = 0.0,
) -> tuple[LossValue, CenterBank]:
    """Weighted sum of angular-margin, contrastive and center losses.

    Contrastive and center terms see L2-normalised embeddings when
    ``normalize_embeddings`` is set, which keeps the unit margin meaningful.
    """
    w_a, w_c, w_z = (float(w) for w in weights)
    la = a_softmax(emb, class_weights, class_ids, margin, lam)
    space = unit_rows(emb) if normalize_embeddings else emb
    lc = contrastive(space, binary_labels, contrastive_margin)
    lz, bank = center_loss(space, binary_labels, bank)
    value = ad.add(ad.add(ad.scale(la.value, w_a), ad.scale(lc.value, w_c)), ad.scale(lz.value, w_z))
    components = {"asoftmax": la.item(), "contrastive": lc.item(), "center": lz.item()}
    return LossValue(value, components, {"asoftmax": w_a, "contrastive": w_c, "center": w_z}), bank
