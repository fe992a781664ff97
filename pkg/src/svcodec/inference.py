"""Gate-blended network evaluation shared by patch extraction and decoding.

Classifier outputs are blended as post-softmax/sigmoid probabilities so the
gated combination stays a convex mixture; thresholds (argmax, 0.5) are
applied after blending.  Regressor outputs are blended in scaled units and
multiplied by the grid value scale afterwards.  All evaluators chunk their
inputs to bound peak memory.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np

from .container import EncodedSubdomain, NetRecord
from .neural import forward_block
from .partition import SubdomainLayout, blend_fields

CHUNK = 131072


def eval_net(expert: EncodedSubdomain, net: NetRecord, centers: np.ndarray) -> np.ndarray:
    """Raw network outputs at continuous index-space points (float32)."""
    xn = expert.normalize(centers)
    return forward_block(net.params, net.ff, xn)


def _softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    return ez / ez.sum(axis=1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-z))


def _blend_chunked(layout: SubdomainLayout, experts: List[EncodedSubdomain],
                   centers: np.ndarray, net_name: str, transform, out_dim: int
                   ) -> Tuple[np.ndarray, np.ndarray]:
    centers = np.asarray(centers, dtype=np.float64)
    n = centers.shape[0]
    out = np.zeros((n, out_dim), dtype=np.float64)
    covered = np.zeros(n, dtype=bool)
    by_id = {e.id: e for e in experts}

    def evaluate(sid: int, pts: np.ndarray):
        expert = by_id.get(sid)
        if expert is None:
            return None
        net = dict(expert.nets()).get(net_name)
        if net is None:
            return None
        raw = eval_net(expert, net, pts)
        return transform(raw)

    for s in range(0, n, CHUNK):
        vals, cov = blend_fields(layout, centers[s:s + CHUNK], evaluate, out_dim)
        out[s:s + CHUNK] = vals
        covered[s:s + CHUNK] = cov
    return out, covered


def blended_l1_probs(layout: SubdomainLayout, experts: List[EncodedSubdomain],
                     centers: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(n, 3) blended class probabilities for level-1 slots, plus coverage."""
    return _blend_chunked(layout, experts, centers, "l1", _softmax, 3)


def blended_l0_probs(layout: SubdomainLayout, experts: List[EncodedSubdomain],
                     centers: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(n,) blended active-voxel probabilities, plus coverage."""
    probs, cov = _blend_chunked(layout, experts, centers, "l0", _sigmoid, 1)
    return probs[:, 0], cov


def blended_values(layout: SubdomainLayout, experts: List[EncodedSubdomain],
                   centers: np.ndarray, net_name: str = "voxel"
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """(n,) blended regressor outputs in scaled units, plus coverage."""
    vals, cov = _blend_chunked(layout, experts, centers, net_name,
                               lambda raw: raw, 1)
    return vals[:, 0], cov
