"""Occlusion attributions for prototype concepts.

A concept's activation is explained by occluding, one pixel at a time, the
receptive field it fired on (the argmax patch) and recording how much the
similarity drops. Negative drops are clamped to zero and the map is rescaled
so that it sums exactly to the concept activation (completeness), which keeps
every map nonnegative and makes attribution co-localization a lower bound on
co-activation. Pixels outside the receptive field get zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import netpbm
from .model import PrototypeModel, activations, extract_patches


@dataclass
class AttributionMap:
    values: np.ndarray  # (H, W), >= 0, sums to `total`
    concept: int
    total: float  # the concept activation c_j(x)


@dataclass
class PatchAttribution:
    """Compact attribution: nonzero only on one a x b receptive field."""

    position: tuple[int, int]  # top-left pixel (row, col)
    values: np.ndarray  # (a, b)
    total: float

    def dense(self, H: int, W: int) -> np.ndarray:
        out = np.zeros((H, W))
        r, c = self.position
        a, b = self.values.shape
        out[r : r + a, c : c + b] = self.values
        return out


def occlusion_profile(patch: np.ndarray, prototype: np.ndarray, tau: float):
    """Per-pixel occlusion response at a fixed patch location.

    Returns (c, cocc, deltas) where c is the patch similarity, cocc[i] the
    similarity with spatial pixel i blacked out, and deltas = c - cocc.
    """
    ab = patch.shape[0] // 3
    z = patch.reshape(ab, 3)
    p = prototype.reshape(ab, 3)
    diff = z - p
    per_pixel = np.sum(diff * diff, axis=1)
    d2 = float(np.sum(per_pixel))
    c = float(np.exp(-d2 / tau))
    d2_occ = d2 - per_pixel + np.sum(p * p, axis=1)
    cocc = np.exp(-d2_occ / tau)
    return c, cocc, c - cocc


def patch_attribution(patch: np.ndarray, prototype: np.ndarray, tau: float,
                      position, patch_size) -> PatchAttribution:
    """Attribution values over one receptive field, completeness-normalized."""
    a, b = patch_size
    c, _, deltas = occlusion_profile(patch, prototype, tau)
    d = np.maximum(deltas, 0.0)
    s = float(d.sum())
    if s > 0.0:
        vals = d * (c / s)
    else:
        # every occlusion helps or is neutral: fall back to uniform mass
        vals = np.full(a * b, c / (a * b))
    return PatchAttribution(position=tuple(int(x) for x in position),
                            values=vals.reshape(a, b), total=c)


def attribution_vjp(patch: np.ndarray, prototype: np.ndarray, tau: float,
                    cotangent: np.ndarray) -> np.ndarray:
    """Gradient wrt the prototype of sum_i cotangent_i * attr_i at a fixed
    argmax location, holding the clamp pattern fixed (subgradient)."""
    ab = patch.shape[0] // 3
    g = cotangent.reshape(ab)
    c, cocc, deltas = occlusion_profile(patch, prototype, tau)
    diff = patch - prototype  # (q,) = flattened z - p
    dc_dir = (2.0 * c / tau) * diff  # dc/dp

    d = np.maximum(deltas, 0.0)
    s = float(d.sum())
    if s <= 0.0:
        return (float(g.sum()) / ab) * dc_dir

    live = (deltas > 0.0).astype(np.float64)
    u = float(np.dot(g, d))
    coef_dc = u / s + (c / s) * float(np.dot(g, live)) - (u * c / s**2) * float(live.sum())
    coef_occ = (-(c / s) * g + (u * c / s**2)) * live  # (ab,), per-pixel dcocc weight

    # dcocc_i/dp = (2 cocc_i / tau) * (diff - e_i z_i): a shared direction plus a
    # sparse correction zeroing the occluded pixel's contribution of z.
    w = coef_occ * cocc
    grad = (coef_dc * c + float(w.sum())) * (2.0 / tau) * diff
    sparse = (w[:, None] * patch.reshape(ab, 3)) * (2.0 / tau)
    grad -= sparse.reshape(-1)
    return grad


def concept_attribution(model: PrototypeModel, j: int, image: np.ndarray) -> AttributionMap:
    """Dense nonnegative map explaining c_j(image); sums to the activation."""
    if not 0 <= j < model.k:
        raise IndexError(f"concept {j} out of range for k={model.k}")
    acts = activations(model, image)
    patches, positions = extract_patches(image, model.patch_size, model.stride)
    idx = int(np.flatnonzero((positions == acts.argmax_location[j]).all(axis=1))[0])
    pa = patch_attribution(patches[idx], model.prototypes[j], model.tau,
                           acts.argmax_location[j], model.patch_size)
    H, W = image.shape[:2]
    return AttributionMap(values=pa.dense(H, W), concept=j, total=pa.total)


def patch_attribution_for(model: PrototypeModel, j: int, image: np.ndarray) -> PatchAttribution:
    """Compact form of concept_attribution (kernel and cache fast path)."""
    acts = activations(model, image)
    patches, positions = extract_patches(image, model.patch_size, model.stride)
    idx = int(np.flatnonzero((positions == acts.argmax_location[j]).all(axis=1))[0])
    return patch_attribution(patches[idx], model.prototypes[j], model.tau,
                             acts.argmax_location[j], model.patch_size)


def overlap_inner(m1: PatchAttribution, m2: PatchAttribution) -> float:
    """<m1, m2> over the pixel grid, using only the overlapping field region."""
    r1, c1 = m1.position
    r2, c2 = m2.position
    a1, b1 = m1.values.shape
    a2, b2 = m2.values.shape
    r_lo, r_hi = max(r1, r2), min(r1 + a1, r2 + a2)
    c_lo, c_hi = max(c1, c2), min(c1 + b1, c2 + b2)
    if r_lo >= r_hi or c_lo >= c_hi:
        return 0.0
    v1 = m1.values[r_lo - r1 : r_hi - r1, c_lo - c1 : c_hi - c1]
    v2 = m2.values[r_lo - r2 : r_hi - r2, c_lo - c2 : c_hi - c2]
    return float(np.sum(v1 * v2))


def overlap_cotangent(fixed: PatchAttribution, live_position, live_shape) -> np.ndarray:
    """Coefficients of the live map's field pixels in <fixed, live>."""
    a, b = live_shape
    g = np.zeros((a, b))
    r1, c1 = fixed.position
    a1, b1 = fixed.values.shape
    r2, c2 = live_position
    r_lo, r_hi = max(r1, r2), min(r1 + a1, r2 + a)
    c_lo, c_hi = max(c1, c2), min(c1 + b1, c2 + b)
    if r_lo < r_hi and c_lo < c_hi:
        g[r_lo - r2 : r_hi - r2, c_lo - c2 : c_hi - c2] = \
            fixed.values[r_lo - r1 : r_hi - r1, c_lo - c1 : c_hi - c1]
    return g


def representatives(model: PrototypeModel, j: int, dataset, n: int):
    """Top-n training patches by activation of concept j.

    Returns [(image_id, (row, col), activation)] sorted by decreasing
    activation, ties broken by image id.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    entries = dataset.split("train")
    if not entries:
        raise ValueError("empty dataset")
    scored = []
    for entry in entries:
        acts = activations(model, entry.raster)
        loc = (int(acts.argmax_location[j, 0]), int(acts.argmax_location[j, 1]))
        scored.append((entry.image_id, loc, float(acts.c[j])))
    scored.sort(key=lambda t: (-t[2], t[0]))
    return scored[:n]


def export_map(amap: AttributionMap, pgm_path, sidecar_path) -> None:
    """Write the map as 16-bit P5 plus a JSON sidecar with the exact total."""
    peak = float(amap.values.max())
    if peak > 0:
        quant = np.rint(amap.values / peak * 65535).astype(np.uint16)
    else:
        quant = np.zeros(amap.values.shape, dtype=np.uint16)
    netpbm.write_pgm16(pgm_path, quant)
    with open(sidecar_path, "w") as fh:
        json.dump({"concept": amap.concept, "total": amap.total, "max": peak}, fh)


def load_map(pgm_path, sidecar_path) -> AttributionMap:
    with open(sidecar_path) as fh:
        meta = json.load(fh)
    quant = netpbm.read_pgm16(pgm_path).astype(np.float64)
    values = quant / 65535.0 * meta["max"]
    return AttributionMap(values=values, concept=meta["concept"], total=meta["total"])
