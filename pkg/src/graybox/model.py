"""Prototype-concept gray-box classifier.

Concepts are Gaussian similarities between learned pixel-space patch
prototypes and the best-matching patch of the input (max over a strided patch
grid), so every activation lies in (0, 1]. Per-class scores are plain linear
combinations of the concept activations with input-constant weights, which
makes the (weight, activation) explanation faithful by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Input geometry incompatible with the model's patch grid."""


@dataclass
class ModelConfig:
    patch_size: tuple[int, int] = (16, 16)
    stride: int = 8
    slots_per_class: int = 2
    tau: float | None = None  # defaults to q/8 = a*b*3/8
    init_weight_own: float = 0.5
    init_weight_other: float = -0.1


@dataclass
class PrototypeModel:
    prototypes: np.ndarray  # (k, q) with q = a*b*3
    owner_class: np.ndarray  # (k,) int
    weights: np.ndarray  # (v, k)
    patch_size: tuple[int, int]
    stride: int
    tau: float

    @property
    def k(self) -> int:
        return self.prototypes.shape[0]

    @property
    def v(self) -> int:
        return self.weights.shape[0]

    @property
    def q(self) -> int:
        return self.prototypes.shape[1]

    def copy(self) -> "PrototypeModel":
        return PrototypeModel(
            prototypes=self.prototypes.copy(),
            owner_class=self.owner_class.copy(),
            weights=self.weights.copy(),
            patch_size=tuple(self.patch_size),
            stride=self.stride,
            tau=self.tau,
        )


@dataclass
class ConceptActivations:
    c: np.ndarray  # (k,) in (0, 1]
    argmax_location: np.ndarray  # (k, 2) top-left pixel (row, col) of max patch


@dataclass
class Explanation:
    pairs: list[tuple[float, float]]  # (weight, activation), one per concept
    class_index: int
    argmax_location: np.ndarray

    def score(self) -> float:
        w = np.array([p[0] for p in self.pairs])
        c = np.array([p[1] for p in self.pairs])
        return float(np.dot(w, c))


@dataclass
class GradientSet:
    d_prototypes: np.ndarray  # (k, q)
    d_weights: np.ndarray  # (v, k)


def patch_positions(H: int, W: int, patch_size, stride: int) -> np.ndarray:
    """Top-left (row, col) of every patch in row-major order."""
    a, b = patch_size
    if H < a or W < b:
        raise DimensionError(f"image {H}x{W} smaller than patch {a}x{b}")
    rows = np.arange(0, H - a + 1, stride)
    cols = np.arange(0, W - b + 1, stride)
    grid = np.stack(np.meshgrid(rows, cols, indexing="ij"), axis=-1)
    return grid.reshape(-1, 2)


def extract_patches(image: np.ndarray, patch_size, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened patches (P, q) aligned with patch_positions order."""
    a, b = patch_size
    H, W = image.shape[:2]
    positions = patch_positions(H, W, patch_size, stride)
    windows = np.lib.stride_tricks.sliding_window_view(image, (a, b), axis=(0, 1))
    rows = positions[:, 0]
    cols = positions[:, 1]
    # windows axes: (H-a+1, W-b+1, 3, a, b) -> gather and flatten to pixel-major
    patches = windows[rows, cols]  # (P, 3, a, b)
    patches = np.moveaxis(patches, 1, 3).reshape(len(positions), a * b * 3)
    return np.ascontiguousarray(patches), positions


@dataclass
class PatchStack:
    """Pre-extracted patches for a fixed image list (trainer fast path)."""

    patches: np.ndarray  # (N, P, q)
    sq_norms: np.ndarray  # (N, P)
    positions: np.ndarray  # (P, 2)

    @classmethod
    def from_images(cls, images, patch_size, stride) -> "PatchStack":
        mats = []
        positions = None
        for img in images:
            z, positions = extract_patches(img, patch_size, stride)
            mats.append(z)
        patches = np.stack(mats, axis=0)
        return cls(patches=patches, sq_norms=np.sum(patches**2, axis=2), positions=positions)

    def activations(self, model: PrototypeModel) -> tuple[np.ndarray, np.ndarray]:
        """(C, amax): activations (N, k) and argmax patch indices (N, k)."""
        p = model.prototypes
        d2 = (
            self.sq_norms[:, :, None]
            - 2.0 * np.einsum("npq,kq->npk", self.patches, p, optimize=True)
            + np.sum(p**2, axis=1)[None, None, :]
        )
        np.maximum(d2, 0.0, out=d2)
        acts = np.exp(-d2 / model.tau)
        amax = np.argmax(acts, axis=1)  # first occurrence = smallest row-major index
        C = np.take_along_axis(acts, amax[:, None, :], axis=1)[:, 0, :]
        return C, amax

    def gather(self, image_idx: np.ndarray, amax: np.ndarray) -> np.ndarray:
        """Argmax patches (n, k, q) for the given image rows."""
        return self.patches[image_idx[:, None], amax]


def activations(model: PrototypeModel, image: np.ndarray) -> ConceptActivations:
    """Concept activations c_j = max_z exp(-||z - p_j||^2 / tau), first-max ties."""
    patches, positions = extract_patches(image, model.patch_size, model.stride)
    d2 = (
        np.sum(patches**2, axis=1)[:, None]
        - 2.0 * patches @ model.prototypes.T
        + np.sum(model.prototypes**2, axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    acts = np.exp(-d2 / model.tau)  # (P, k)
    amax = np.argmax(acts, axis=0)
    c = acts[amax, np.arange(model.k)]
    return ConceptActivations(c=c, argmax_location=positions[amax])


def scores(model: PrototypeModel, acts: ConceptActivations) -> np.ndarray:
    """Per-class scores s_y = <w^(y), c>; summation order shared with explain()."""
    if acts.c.shape[0] != model.k:
        raise DimensionError(f"activation length {acts.c.shape[0]} != k={model.k}")
    return np.array([np.dot(model.weights[y], acts.c) for y in range(model.v)])


def predict_proba(score_vec: np.ndarray) -> np.ndarray:
    """Numerically stable softmax."""
    if not np.all(np.isfinite(score_vec)):
        raise ValueError("non-finite scores")
    shifted = score_vec - np.max(score_vec)
    e = np.exp(shifted)
    return e / np.sum(e)


def explain(model: PrototypeModel, image: np.ndarray, y: int) -> Explanation:
    """Faithful explanation: the (weight, activation) pairs for class y."""
    if not 0 <= y < model.v:
        raise IndexError(f"class {y} out of range for v={model.v}")
    acts = activations(model, image)
    pairs = [(float(model.weights[y, j]), float(acts.c[j])) for j in range(model.k)]
    return Explanation(pairs=pairs, class_index=y, argmax_location=acts.argmax_location)


def init_model(dataset, config: ModelConfig, seed: int = 0) -> PrototypeModel:
    """Prototypes start as random non-empty training patches of the owner class;
    weights start positive on the owner class and mildly negative elsewhere."""
    rng = np.random.default_rng(seed)
    v = dataset.config.v
    a, b = config.patch_size
    q = a * b * 3
    tau = config.tau if config.tau is not None else q / 8.0
    k = v * config.slots_per_class

    by_class: dict[int, list] = {y: [] for y in range(v)}
    for entry in dataset.split("train"):
        by_class[entry.scene.class_label].append(entry)

    prototypes = np.empty((k, q))
    owner = np.empty(k, dtype=np.int64)
    slot = 0
    for y in range(v):
        pool = by_class[y]
        if not pool:
            raise ValueError(f"no training images for class {y}")
        for _ in range(config.slots_per_class):
            for _attempt in range(1000):
                entry = pool[rng.integers(len(pool))]
                patches, _ = extract_patches(entry.raster, config.patch_size, config.stride)
                idx = rng.integers(patches.shape[0])
                if np.sum(patches[idx] ** 2) > 0:
                    prototypes[slot] = patches[idx]
                    break
            else:
                raise ValueError(f"could not find a non-empty init patch for class {y}")
            owner[slot] = y
            slot += 1

    weights = np.full((v, k), config.init_weight_other)
    weights[owner, np.arange(k)] = config.init_weight_own
    return PrototypeModel(
        prototypes=prototypes,
        owner_class=owner,
        weights=weights,
        patch_size=(a, b),
        stride=config.stride,
        tau=tau,
    )


def forward_backward(model: PrototypeModel, batch, loss_spec, memory=None,
                     feedback=None, ref=None):
    """Mean batch loss plus exact analytic gradients (max treated at its argmax).

    Delegates the term arithmetic to the losses module; see there for the
    individual objectives.
    """
    from . import losses

    loss, grads, _terms = losses.batch_loss_and_grads(model, batch, loss_spec,
                                                      memory=memory, feedback=feedback,
                                                      ref=ref)
    return loss, grads
