"""Training objectives and their analytic gradients.

Besides cross-entropy, two families of corrective terms exist. Index-based
weight penalties (attr_index_loss) reproduce the classic explanation-alignment
loss and are deliberately brittle: they penalize concept *slots*, so the model
can re-learn a forbidden concept under another index. The aggregation loss
(aggr_loss) instead penalizes weight mass on anything *similar* to a frozen
forbidden concept, measured by the kernels module, and is invariant to concept
reindexing. Concept-level supervision (labels, regions) aligns the concepts
themselves.

All gradients treat the activation max at its argmax patch and hold clamp
patterns fixed (subgradients at measure-zero kinks).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .attribution import (attribution_vjp, overlap_cotangent, overlap_inner,
                          patch_attribution)
from .model import GradientSet, PrototypeModel, extract_patches, predict_proba

PROB_FLOOR = 1e-12
BCE_CLAMP = 1e-6


class LossError(RuntimeError):
    """A loss term produced a non-finite value."""


@dataclass
class LossSpec:
    lambda_attr: float = 1.0
    lambda_aggr: float = 1.0
    lambda_relevance: float = 0.1
    lambda_concept_label: float = 0.1
    lambda_concept_region: float = 0.1
    # L1 on weights whose concept belongs to another class (the prototype-net
    # last-layer sparsity prior); keeps classes from being encoded as negative
    # evidence of other classes' concepts.
    lambda_offclass: float = 0.1
    # prototype-net shaping terms: cluster pulls some own-class prototype onto
    # each example (per-dimension squared distance), separation hinge-penalizes
    # other classes' prototypes that sit closer than sep_margin to the example.
    lambda_cluster: float = 3.0
    lambda_separation: float = 0.08
    sep_margin: float = 0.25
    epsilon_rel: float = 0.1
    kernel: str = "param"  # act | attr | param | param_raw
    rho: float = 1.0
    sigma: float | None = None  # param-kernel bandwidth, default sqrt(q)/4

    def __post_init__(self):
        for name in ("lambda_attr", "lambda_aggr", "lambda_relevance",
                     "lambda_concept_label", "lambda_concept_region",
                     "lambda_offclass", "lambda_cluster", "lambda_separation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epsilon_rel <= 0:
            raise ValueError("epsilon_rel must be > 0")

    @classmethod
    def cross_entropy_only(cls) -> "LossSpec":
        return cls(lambda_attr=0.0, lambda_aggr=0.0, lambda_relevance=0.0,
                   lambda_concept_label=0.0, lambda_concept_region=0.0,
                   lambda_offclass=0.0, lambda_cluster=0.0, lambda_separation=0.0)


@dataclass
class ConceptMask:
    """Per-decision relevance over concept *indices*: 1 = may be used."""

    m: np.ndarray  # (k,) of {0, 1}
    scope: str | None = None  # instance id this mask was given for


@dataclass
class FeedbackState:
    """Per-example corrective supervision assembled by a debugging session."""

    instance_masks: dict = field(default_factory=dict)  # x_id -> (k,) mask
    class_masks: dict = field(default_factory=dict)  # y -> (k,) mask
    relevant: dict = field(default_factory=dict)  # y -> set of concept indices
    concept_labels: dict = field(default_factory=dict)  # x_id -> [(j, target)]
    concept_regions: dict = field(default_factory=dict)  # x_id -> [(j, HxW mask)]

    def mask_for(self, x_id, y):
        if x_id is not None and x_id in self.instance_masks:
            return self.instance_masks[x_id]
        return self.class_masks.get(y)

    def empty(self) -> bool:
        return not (self.instance_masks or self.class_masks or self.relevant
                    or self.concept_labels or self.concept_regions)


def cross_entropy(probs: np.ndarray, y: int) -> float:
    """-log p_y with the probability clamped at 1e-12."""
    if not 0 <= y < len(probs):
        raise IndexError(f"class {y} out of range")
    return float(-np.log(max(float(probs[y]), PROB_FLOOR)))


def attr_index_loss(model: PrototypeModel, x, y: int, mask) -> float:
    """Index-based weight penalty: sum_j (1 - m_j) w_j^2 for class y."""
    m = mask.m if isinstance(mask, ConceptMask) else np.asarray(mask)
    if m.shape[0] != model.k:
        raise ValueError(f"mask length {m.shape[0]} != k={model.k}")
    w = model.weights[y]
    return float(np.sum((1.0 - m) * w**2))


def relevance_penalty(model: PrototypeModel, y: int, relevant, epsilon_rel: float) -> float:
    """Hinge penalty keeping |w_j| of relevant concepts away from zero."""
    if epsilon_rel <= 0:
        raise ValueError("epsilon_rel must be > 0")
    total = 0.0
    for j in relevant:
        gap = max(0.0, epsilon_rel - abs(float(model.weights[y, j])))
        total += gap * gap
    return total


def concept_label_loss(model: PrototypeModel, x, targets) -> float:
    """Mean binary cross-entropy between activations and desired on/off labels."""
    if not targets:
        raise ValueError("targets must be non-empty")
    from .model import activations

    acts = activations(model, x)
    return _concept_label_value(acts.c, targets)


def _concept_label_value(c: np.ndarray, targets) -> float:
    total = 0.0
    for j, t in targets:
        cc = min(max(float(c[j]), BCE_CLAMP), 1.0 - BCE_CLAMP)
        total += -t * np.log(cc) - (1.0 - t) * np.log(1.0 - cc)
    return total / len(targets)


def concept_region_loss(model: PrototypeModel, x, j: int, region: np.ndarray) -> float:
    """Penalize attribution mass outside the allowed region."""
    if region.shape != x.shape[:2]:
        raise ValueError(f"region shape {region.shape} does not match image {x.shape[:2]}")
    from .attribution import patch_attribution_for

    pa = patch_attribution_for(model, j, x)
    return _region_value(pa, region)


def _region_value(pa, region) -> float:
    r0, c0 = pa.position
    a, b = pa.values.shape
    win = region[r0 : r0 + a, c0 : c0 + b]
    return float(np.sum((1.0 - win) * pa.values**2))


def aggr_loss(model: PrototypeModel, x, y: int, memory, kernel: str = "act", *,
              ref=None, rho: float = 1.0, sigma: float | None = None,
              x_id=None) -> float:
    """Robust aggregation penalty: sum over forbidden snapshots in scope of
    sum_j kappa(snapshot, c_j) * (w_j^(y))^2."""
    if kernel not in ("act", "attr", "param", "param_raw"):
        raise ValueError(f"unknown kernel {kernel!r}")
    entries = K.query(memory, x_id, y) if memory is not None else []
    if not entries:
        return 0.0
    kappa_sum = _kappa_sums(model, entries, kernel, ref=ref, rho=rho, sigma=sigma)
    w = model.weights[y]
    return float(np.dot(kappa_sum, w**2))


def _kappa_sums(model, entries, kernel, *, ref=None, rho=1.0, sigma=None,
                live_eval=None) -> np.ndarray:
    """kappa_sum[j] = sum over snapshots of kappa(snapshot, concept_j)."""
    k = model.k
    out = np.zeros(k)
    if kernel in ("param", "param_raw"):
        sig = sigma if sigma is not None else K.default_sigma(model.q)
        for snap in entries:
            for j in range(k):
                if kernel == "param":
                    out[j] += K.kappa_param(snap.frozen_p, model.prototypes[j], sig)
                else:
                    out[j] += K.kappa_param_raw(snap.frozen_p, model.prototypes[j])
        return out
    if ref is None:
        raise ValueError(f"kernel {kernel!r} needs a reference set")
    if kernel == "act":
        C = live_eval[0] if live_eval is not None else ref.live_activations(model)[0]
        for snap in entries:
            prof = snap.activation_profile(ref)
            out += np.mean((prof[:, None] * C) ** rho, axis=0)
        return out
    # attr kernel
    live_maps = _live_attr_maps(model, ref, live_eval)
    for snap in entries:
        cached = snap.attribution_profile(ref)
        for j in range(k):
            inner = np.array([overlap_inner(cached[n], live_maps[n][j])
                              for n in range(len(ref))])

            out[j] += float(np.mean(inner**rho))
    return out


def _live_attr_maps(model, ref, live_eval=None):
    """Current attribution maps for every (reference image, concept)."""
    stack = ref.stack(model.patch_size, model.stride)
    if live_eval is not None:
        _, amax = live_eval
    else:
        _, amax = stack.activations(model)
    maps = []
    for n in range(len(ref)):
        row = []
        for j in range(model.k):
            row.append(patch_attribution(stack.patches[n, amax[n, j]],
                                         model.prototypes[j], model.tau,
                                         stack.positions[amax[n, j]],
                                         model.patch_size))
        maps.append(row)
    return maps


def total_loss(model: PrototypeModel, batch, spec: LossSpec, memory=None,
               feedback=None, ref=None) -> float:
    """Mean over the batch of cross-entropy plus active weighted terms."""
    value, _, _ = batch_loss_and_grads(model, batch, spec, memory=memory,
                                       feedback=feedback, ref=ref, want_grads=False)
    return value


def batch_loss_and_grads(model: PrototypeModel, batch, spec: LossSpec,
                         memory=None, feedback=None, ref=None,
                         patch_cache=None, ref_eval=None, want_grads=True):
    """Evaluate the total loss and exact gradients over a batch.

    batch items are (image, label) or (image, label, x_id). Returns
    (loss, GradientSet, terms) where terms maps each active objective to its
    lambda-weighted mean contribution (they sum to the loss).
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    fb = feedback if feedback is not None else FeedbackState()
    B = len(batch)
    k, v, q = model.k, model.v, model.q
    dP = np.zeros((k, q))
    dW = np.zeros((v, k))
    terms = {"cross_entropy": 0.0}

    needs_ref = (spec.lambda_aggr > 0 and memory is not None and len(memory.entries) > 0
                 and spec.kernel in ("act", "attr"))
    live_eval = None
    if needs_ref:
        if ref is None:
            raise ValueError(f"kernel {spec.kernel!r} needs a reference set")
        live_eval = ref_eval if ref_eval is not None else ref.live_activations(model)
    aggr_cache: dict = {}

    inv_tau2 = 2.0 / model.tau
    for item in batch:
        image, label, x_id = _coerce(item)
        patches, positions, sq = _patches_for(image, model, x_id, patch_cache)
        d2 = sq[:, None] - 2.0 * patches @ model.prototypes.T \
            + np.sum(model.prototypes**2, axis=1)[None, :]
        np.maximum(d2, 0.0, out=d2)
        acts = np.exp(-d2 / model.tau)
        amax = np.argmax(acts, axis=0)
        c = acts[amax, np.arange(k)]
        z_star = patches[amax]  # (k, q)

        s = model.weights @ c
        probs = predict_proba(s)
        terms["cross_entropy"] += cross_entropy(probs, label) / B

        dc = np.zeros(k)
        if want_grads and probs[label] > PROB_FLOOR:  # clamped CE is locally constant
            ds = probs.copy()
            ds[label] -= 1.0
            ds /= B
            dW += np.outer(ds, c)
            dc += model.weights.T @ ds

        if spec.lambda_cluster > 0 or spec.lambda_separation > 0:
            own = model.owner_class == label
            d2min_idx = np.argmin(d2, axis=0)  # best patch per concept
            d2min = d2[d2min_idx, np.arange(k)] / q
            if spec.lambda_cluster > 0 and own.any() and bool(np.any(sq > 0)):
                # every own-class prototype is pulled onto its nearest non-empty
                # patch (continuous stand-in for prototype projection; empty
                # background is not a part)
                d2_parts = np.where((sq > 0)[:, None], d2, np.inf)
                part_idx = np.argmin(d2_parts, axis=0)
                part_min = d2_parts[part_idx, np.arange(k)] / q
                n_own = int(own.sum())
                terms["cluster"] = terms.get("cluster", 0.0) \
                    + spec.lambda_cluster * float(part_min[own].sum()) / (n_own * B)
                if want_grads:
                    for j in np.flatnonzero(own):
                        dP[j] += spec.lambda_cluster * 2.0 \
                            * (model.prototypes[j] - patches[part_idx[j]]) \
                            / (q * n_own * B)
            if spec.lambda_separation > 0 and (~own).any():
                # other classes' prototypes may not sit close to this image
                n_oth = int((~own).sum())
                for j in np.flatnonzero(~own):
                    gap = spec.sep_margin - float(d2min[j])
                    if gap > 0:
                        terms["separation"] = terms.get("separation", 0.0) \
                            + spec.lambda_separation * gap / (n_oth * B)
                        if want_grads:
                            dP[j] -= spec.lambda_separation * 2.0 \
                                * (model.prototypes[j] - patches[d2min_idx[j]]) \
                                / (q * n_oth * B)

        mask = fb.mask_for(x_id, label) if spec.lambda_attr > 0 else None
        if mask is not None:
            m = mask.m if isinstance(mask, ConceptMask) else np.asarray(mask)
            val = float(np.sum((1.0 - m) * model.weights[label] ** 2))
            terms["attr_index"] = terms.get("attr_index", 0.0) + spec.lambda_attr * val / B
            if want_grads:
                dW[label] += spec.lambda_attr * 2.0 * (1.0 - m) * model.weights[label] / B

        rel = fb.relevant.get(label) if spec.lambda_relevance > 0 else None
        if rel:
            val = relevance_penalty(model, label, rel, spec.epsilon_rel)
            terms["relevance"] = terms.get("relevance", 0.0) + spec.lambda_relevance * val / B
            if want_grads:
                for j in rel:
                    wj = float(model.weights[label, j])
                    gap = spec.epsilon_rel - abs(wj)
                    if gap > 0 and wj != 0.0:
                        dW[label, j] += spec.lambda_relevance * 2.0 * gap * (-np.sign(wj)) / B

        targets = fb.concept_labels.get(x_id) if spec.lambda_concept_label > 0 else None
        if targets:
            val = _concept_label_value(c, targets)
            terms["concept_label"] = terms.get("concept_label", 0.0) \
                + spec.lambda_concept_label * val / B
            if want_grads:
                for j, t in targets:
                    cj = float(c[j])
                    if BCE_CLAMP < cj < 1.0 - BCE_CLAMP:
                        dbce = -t / cj + (1.0 - t) / (1.0 - cj)
                        dc[j] += spec.lambda_concept_label * dbce / (len(targets) * B)

        regions = fb.concept_regions.get(x_id) if spec.lambda_concept_region > 0 else None
        if regions:
            for j, region in regions:
                pa = patch_attribution(z_star[j], model.prototypes[j], model.tau,
                                       positions[amax[j]], model.patch_size)
                val = _region_value(pa, region)
                terms["concept_region"] = terms.get("concept_region", 0.0) \
                    + spec.lambda_concept_region * val / B
                if want_grads:
                    r0, c0 = pa.position
                    a, b = pa.values.shape
                    win = np.asarray(region)[r0 : r0 + a, c0 : c0 + b]
                    g = 2.0 * (1.0 - win) * pa.values
                    dP[j] += spec.lambda_concept_region * \
                        attribution_vjp(z_star[j], model.prototypes[j], model.tau, g) / B

        if spec.lambda_aggr > 0 and memory is not None:
            entries = K.query(memory, x_id, label)
            if entries:
                key = tuple(id(e) for e in entries)
                if key not in aggr_cache:
                    aggr_cache[key] = _aggr_pieces(model, entries, spec, ref, live_eval,
                                                   want_grads)
                kappa_sum, dkappa = aggr_cache[key]
                wrow = model.weights[label]
                val = float(np.dot(kappa_sum, wrow**2))
                terms["aggr"] = terms.get("aggr", 0.0) + spec.lambda_aggr * val / B
                if want_grads:
                    dW[label] += spec.lambda_aggr * 2.0 * kappa_sum * wrow / B
                    dP += spec.lambda_aggr * (wrow**2)[:, None] * dkappa / B

        if want_grads:
            # route activation gradients into prototypes via the argmax patch
            gP = (dc * c * inv_tau2)[:, None] * (z_star - model.prototypes)
            dP += gP

    if spec.lambda_offclass > 0:
        off = np.ones((v, k), dtype=bool)
        off[model.owner_class, np.arange(k)] = False
        terms["offclass_l1"] = spec.lambda_offclass * float(np.sum(np.abs(model.weights[off])))
        if want_grads:
            dW[off] += spec.lambda_offclass * np.sign(model.weights[off])

    total = float(sum(terms.values()))
    for name, val in terms.items():
        if not np.isfinite(val):
            raise LossError(f"non-finite loss term {name!r}")
    if not np.isfinite(total):
        raise LossError("non-finite total loss")
    return total, GradientSet(d_prototypes=dP, d_weights=dW), terms


def _aggr_pieces(model, entries, spec, ref, live_eval, want_grads):
    """kappa_sum (k,) plus d(kappa_sum)/d(prototypes) (k, q) for the entry set."""
    k, q = model.k, model.q
    kernel, rho = spec.kernel, spec.rho
    dkappa = np.zeros((k, q))
    if kernel in ("param", "param_raw"):
        sig = spec.sigma if spec.sigma is not None else K.default_sigma(q)
        kappa_sum = np.zeros(k)
        for snap in entries:
            diff = snap.frozen_p[None, :] - model.prototypes  # (k, q)
            if kernel == "param":
                kap = np.exp(-np.sum(diff**2, axis=1) / sig**2)
                kappa_sum += kap
                if want_grads:
                    dkappa += (kap * 2.0 / sig**2)[:, None] * diff
            else:
                kappa_sum += model.prototypes @ snap.frozen_p
                if want_grads:
                    dkappa += snap.frozen_p[None, :]
        return kappa_sum, dkappa

    stack = ref.stack(model.patch_size, model.stride)
    C, amax = live_eval  # (N, k), (N, k)
    N = len(ref)
    if kernel == "act":
        kappa_sum = np.zeros(k)
        u_total = np.zeros((N, k))
        for snap in entries:
            prof = snap.activation_profile(ref)  # (N,)
            prod = (prof[:, None] * C) ** rho
            kappa_sum += prod.mean(axis=0)
            u_total += rho * prod
        if want_grads:
            z_sel = stack.gather(np.arange(N), amax)  # (N, k, q)
            dkappa = (2.0 / (N * model.tau)) * (
                np.einsum("nk,nkq->kq", u_total, z_sel, optimize=True)
                - u_total.sum(axis=0)[:, None] * model.prototypes
            )
        return kappa_sum, dkappa

    # attr kernel: co-localization inner products per reference image
    kappa_sum = np.zeros(k)
    live_maps = _live_attr_maps(model, ref, live_eval)
    for snap in entries:
        cached = snap.attribution_profile(ref)
        for j in range(k):
            inners = np.empty(N)
            for n in range(N):
                inners[n] = overlap_inner(cached[n], live_maps[n][j])
            kappa_sum[j] += float(np.mean(inners**rho))
            if want_grads:
                for n in range(N):
                    if inners[n] == 0.0 and rho != 1.0:
                        continue
                    scale = rho * inners[n] ** (rho - 1.0) if rho != 1.0 else 1.0
                    g = overlap_cotangent(cached[n], live_maps[n][j].position,
                                          live_maps[n][j].values.shape)
                    patch = stack.patches[n, amax[n, j]]
                    dkappa[j] += (scale / N) * attribution_vjp(
                        patch, model.prototypes[j], model.tau, g)
    return kappa_sum, dkappa


def _coerce(item):
    if len(item) == 2:
        image, label = item
        return image, int(label), None
    image, label, x_id = item
    return image, int(label), x_id


def _patches_for(image, model, x_id, patch_cache):
    if patch_cache is not None and x_id is not None and x_id in patch_cache:
        return patch_cache[x_id]
    patches, positions = extract_patches(image, model.patch_size, model.stride)
    entry = (patches, positions, np.sum(patches**2, axis=1))
    if patch_cache is not None and x_id is not None:
        patch_cache[x_id] = entry
    return entry
