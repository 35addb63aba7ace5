"""vMF contrastive, ETF and distillation losses over vertex/pixel correspondences.

Every loss returns (sum over visible vertices, gradient w.r.t. the (K, d) correspondence
features); invisible rows get zero gradient.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from inemo.errors import InvalidArgumentError


@dataclass
class Correspondences:
    vertex: np.ndarray  # (K,)
    features: np.ndarray  # (K, d); zero rows where not visible
    visible: np.ndarray  # (K,) bool
    pixel: np.ndarray  # (K, 2) (x, y) on the feature map

    @property
    def visible_count(self):
        return int(self.visible.sum())

    @property
    def visible_index(self):
        return np.flatnonzero(self.visible)


def gather_correspondences(feature_map, render):
    """Pair each mesh vertex with the feature at its projected pixel."""
    fmap = np.asarray(feature_map)
    if fmap.shape[:2] != render.shape:
        raise InvalidArgumentError(
            f"Render {render.shape} was not produced at feature-map resolution {fmap.shape[:2]}"
        )
    k = len(render.visible)
    visible = np.asarray(render.visible, dtype=bool).copy()
    features = np.zeros((k, fmap.shape[2]))
    idx = np.flatnonzero(visible)
    px, py = render.pixel_of_vertex[idx, 0], render.pixel_of_vertex[idx, 1]
    features[idx] = fmap[py, px]
    return Correspondences(
        vertex=np.arange(k), features=features, visible=visible, pixel=render.pixel_of_vertex.copy()
    )


def scatter_to_map(corr, grad_rows, map_shape):
    """Accumulate per-vertex feature gradients back onto their pixels."""
    out = np.zeros(map_shape)
    idx = corr.visible_index
    np.add.at(out, (corr.pixel[idx, 1], corr.pixel[idx, 0]), grad_rows[idx])
    return out


def softmax_rows(logits):
    """Row-wise softmax; -inf logits get probability 0."""
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def _empty(corr):
    return 0.0, np.zeros_like(corr.features)


def loss_cont(corr, mesh, other_thetas, bank, unused_sample, kappa1):
    """Contrastive vMF loss against own non-neighbour vertices, other classes, the bank and H-bar.

    For visible vertex k the candidate set is Theta_c minus its neighbourhood (k itself stays),
    every other class's vertex features, background features and the unused-pool sample.
    """
    idx = corr.visible_index
    if len(idx) == 0:
        return _empty(corr)
    f = corr.features[idx]
    theta = mesh.theta
    shared = [np.asarray(a, dtype=np.float64).reshape(-1, theta.shape[1])
              for a in (other_thetas, bank, unused_sample) if a is not None]
    shared = np.concatenate(shared) if shared else np.zeros((0, theta.shape[1]))

    own = kappa1 * f @ theta.T
    own = np.where(mesh.neighbor_mask[idx], -np.inf, own)
    logits = np.concatenate([own, kappa1 * f @ shared.T], axis=1)
    positive = own[np.arange(len(idx)), idx]
    lse = logsumexp(logits, axis=1)
    p = softmax_rows(logits)
    candidates = np.concatenate([theta, shared])
    grad = np.zeros_like(corr.features)
    grad[idx] = kappa1 * (p @ candidates - theta[idx])
    return float(np.sum(lse - positive)), grad


def loss_train(corr, mesh, other_thetas, bank, kappa1):
    """Contrastive loss without the unused-pool term."""
    return loss_cont(corr, mesh, other_thetas, bank, None, kappa1)


def loss_etf(corr, centroids, class_id, kappa2):
    """Cross-entropy of each visible feature against the class's ETF centroid."""
    if not 0 <= class_id < len(centroids):
        raise InvalidArgumentError(f"Class {class_id} has no centroid (N={len(centroids)})")
    idx = corr.visible_index
    if len(idx) == 0:
        return _empty(corr)
    f = corr.features[idx]
    logits = kappa2 * f @ centroids.T
    lse = logsumexp(logits, axis=1)
    p = softmax_rows(logits)
    grad = np.zeros_like(corr.features)
    grad[idx] = kappa2 * (p @ centroids - centroids[class_id])
    return float(np.sum(lse - logits[:, class_id])), grad


def loss_kd(corr_new, corr_old, prev_thetas, kappa3):
    """KL(p_old || p_new) of vertex-assignment distributions over the previous tasks' vertex features."""
    if prev_thetas is None or len(prev_thetas) == 0:
        return _empty(corr_new)
    idx = corr_new.visible_index
    if len(idx) == 0:
        return _empty(corr_new)
    logits_new = kappa3 * corr_new.features[idx] @ prev_thetas.T
    logits_old = kappa3 * corr_old.features[idx] @ prev_thetas.T
    log_p = logits_new - logsumexp(logits_new, axis=1, keepdims=True)
    log_q = logits_old - logsumexp(logits_old, axis=1, keepdims=True)
    q = np.exp(log_q)
    kl = np.sum(q * (log_q - log_p))
    grad = np.zeros_like(corr_new.features)
    grad[idx] = kappa3 * (np.exp(log_p) - q) @ prev_thetas
    return float(max(kl, 0.0)), grad
