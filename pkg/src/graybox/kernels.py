"""Concept-similarity kernels and the forbidden-concept memory.

Three kernels compare concepts: co-activation over a fixed reference set
(kappa_act), attribution co-localization (kappa_attr), and prototype-parameter
distance (kappa_param, RBF-normalized to [0, 1]; the raw inner product is kept
as kappa_param_raw). Concepts marked irrelevant during debugging are frozen
into snapshots with cached activation/attribution profiles, so feedback keeps
its meaning even after the live concept drifts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .attribution import PatchAttribution, patch_attribution
from .model import PatchStack, PrototypeModel


class ProfileError(RuntimeError):
    """Concept profile evaluated against the wrong reference set."""


@dataclass
class ReferenceSet:
    """Fixed ordered image list over which Monte Carlo kernel sums run."""

    images: list
    ids: list
    ref_id: str
    _stacks: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_images(cls, images, ids=None) -> "ReferenceSet":
        if len(images) == 0:
            raise ValueError("reference set must be non-empty")
        if ids is None:
            ids = [f"ref/{i:04d}" for i in range(len(images))]
        h = hashlib.sha256()
        for img in images:
            arr = np.ascontiguousarray(img, dtype=np.float64)
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return cls(images=list(images), ids=list(ids), ref_id=h.hexdigest())

    @classmethod
    def from_dataset(cls, dataset, split: str = "train") -> "ReferenceSet":
        entries = dataset.split(split)
        return cls.from_images([e.raster for e in entries], [e.image_id for e in entries])

    def __len__(self) -> int:
        return len(self.images)

    def stack(self, patch_size, stride) -> PatchStack:
        key = (tuple(patch_size), stride)
        if key not in self._stacks:
            self._stacks[key] = PatchStack.from_images(self.images, patch_size, stride)
        return self._stacks[key]

    def live_activations(self, model: PrototypeModel):
        """Activations (N, k) and argmax patch indices (N, k) of all live concepts."""
        return self.stack(model.patch_size, model.stride).activations(model)


@dataclass
class LiveConcept:
    """Evaluator view of one live model concept."""

    model: PrototypeModel
    j: int

    def activation_profile(self, ref: ReferenceSet) -> np.ndarray:
        C, _ = ref.live_activations(self.model)
        return C[:, self.j]

    def attribution_profile(self, ref: ReferenceSet) -> list:
        m = self.model
        stack = ref.stack(m.patch_size, m.stride)
        C, amax = stack.activations(m)
        maps = []
        for n in range(len(ref)):
            patch = stack.patches[n, amax[n, self.j]]
            pos = stack.positions[amax[n, self.j]]
            maps.append(patch_attribution(patch, m.prototypes[self.j], m.tau,
                                          pos, m.patch_size))
        return maps


@dataclass
class ConceptSnapshot:
    """Frozen copy of a concept plus its cached reference profiles."""

    frozen_p: np.ndarray
    patch_size: tuple[int, int]
    stride: int
    tau: float
    cached_activations: np.ndarray  # (|ref|,)
    cached_attributions: list  # PatchAttribution per reference image
    created_round: int
    source_concept: int
    reference_set_id: str

    def activation_profile(self, ref: ReferenceSet) -> np.ndarray:
        if ref.ref_id != self.reference_set_id:
            raise ProfileError("snapshot cached against a different reference set")
        return self.cached_activations

    def attribution_profile(self, ref: ReferenceSet) -> list:
        if ref.ref_id != self.reference_set_id:
            raise ProfileError("snapshot cached against a different reference set")
        return self.cached_attributions


@dataclass(frozen=True)
class FeedbackScope:
    kind: str  # instance | class | global
    x_id: str | None = None
    y: int | None = None

    def __post_init__(self):
        if self.kind not in ("instance", "class", "global"):
            raise ValueError(f"unknown scope kind {self.kind!r}")
        if self.kind == "instance" and (self.x_id is None or self.y is None):
            raise ValueError("instance scope needs x_id and y")
        if self.kind == "class" and self.y is None:
            raise ValueError("class scope needs y")

    def covers(self, x_id, y) -> bool:
        if self.kind == "global":
            return True
        if self.kind == "class":
            return y == self.y
        return x_id == self.x_id and y == self.y


@dataclass
class MemoryEntry:
    snapshot: ConceptSnapshot
    scope: FeedbackScope


@dataclass
class Memory:
    reference_set_id: str
    entries: list = field(default_factory=list)

    @classmethod
    def for_reference(cls, ref: ReferenceSet) -> "Memory":
        return cls(reference_set_id=ref.ref_id)

    def __len__(self) -> int:
        return len(self.entries)


def snapshot_concept(model: PrototypeModel, j: int, ref: ReferenceSet,
                     created_round: int = 0) -> ConceptSnapshot:
    """Freeze concept j with eagerly computed reference caches."""
    frozen = model.prototypes[j].copy()
    stack = ref.stack(model.patch_size, model.stride)
    # single-prototype activation pass with the frozen vector
    d2 = (stack.sq_norms
          - 2.0 * np.einsum("npq,q->np", stack.patches, frozen, optimize=True)
          + float(np.dot(frozen, frozen)))
    np.maximum(d2, 0.0, out=d2)
    acts = np.exp(-d2 / model.tau)
    amax = np.argmax(acts, axis=1)
    cached_acts = acts[np.arange(len(ref)), amax].copy()
    maps = [
        patch_attribution(stack.patches[n, amax[n]], frozen, model.tau,
                          stack.positions[amax[n]], model.patch_size)
        for n in range(len(ref))
    ]
    return ConceptSnapshot(
        frozen_p=frozen,
        patch_size=tuple(model.patch_size),
        stride=model.stride,
        tau=model.tau,
        cached_activations=cached_acts,
        cached_attributions=maps,
        created_round=created_round,
        source_concept=j,
        reference_set_id=ref.ref_id,
    )


def insert(memory: Memory, model: PrototypeModel, j: int, scope: FeedbackScope,
           ref: ReferenceSet, created_round: int = 0) -> Memory:
    """Append a frozen snapshot of concept j; the live model is untouched."""
    if not 0 <= j < model.k:
        raise IndexError(f"concept {j} out of range for k={model.k}")
    if ref.ref_id != memory.reference_set_id:
        raise ProfileError("reference set does not match this memory")
    memory.entries.append(MemoryEntry(snapshot=snapshot_concept(model, j, ref, created_round),
                                      scope=scope))
    return memory


def query(memory: Memory, x_id, y) -> list:
    """Snapshots whose scope covers the decision (x, y)."""
    return [e.snapshot for e in memory.entries if e.scope.covers(x_id, y)]


def _activation_profile(concept, ref: ReferenceSet) -> np.ndarray:
    return concept.activation_profile(ref)


def kappa_act(c1, c2, ref: ReferenceSet, rho: float = 1.0) -> float:
    """Co-activation kernel: mean over the reference set of (c1(x) c2(x))^rho."""
    if rho <= 0:
        raise ValueError("rho must be > 0")
    a1 = _activation_profile(c1, ref)
    a2 = _activation_profile(c2, ref)
    return float(np.mean((a1 * a2) ** rho))


def kappa_attr(c1, c2, ref: ReferenceSet, rho: float = 1.0) -> float:
    """Co-localization kernel over completeness-normalized attribution maps."""
    if rho <= 0:
        raise ValueError("rho must be > 0")
    from .attribution import overlap_inner

    maps1 = c1.attribution_profile(ref)
    maps2 = c2.attribution_profile(ref)
    inner = np.array([overlap_inner(m1, m2) for m1, m2 in zip(maps1, maps2)])
    return float(np.mean(inner**rho))


def default_sigma(q: int) -> float:
    return np.sqrt(q) / 4.0


def kappa_param(p1: np.ndarray, p2: np.ndarray, sigma: float) -> float:
    """RBF similarity between prototype vectors, bounded in (0, 1]."""
    if p1.shape != p2.shape:
        raise ValueError(f"prototype length mismatch {p1.shape} vs {p2.shape}")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    d2 = float(np.sum((p1 - p2) ** 2))
    return float(np.exp(-d2 / sigma**2))


def kappa_param_raw(p1: np.ndarray, p2: np.ndarray) -> float:
    """Plain inner product in parameter space (the simplified-loss kernel)."""
    if p1.shape != p2.shape:
        raise ValueError(f"prototype length mismatch {p1.shape} vs {p2.shape}")
    return float(np.dot(p1, p2))
