"""SGD training loops: initial cross-entropy fit, then alternating
concept/weight refinement with corrective terms.

The refinement schedule alternates 5-epoch phases: during a concept phase only
prototype vectors receive updates, during a weight phase only the aggregation
weights. Momentum buffers are reset at phase boundaries so parked parameters
never accumulate stale velocity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses, shapes
from .kernels import ReferenceSet
from .model import PrototypeModel


class TrainingDiverged(RuntimeError):
    def __init__(self, message, last_model=None, history=None):
        super().__init__(message)
        self.last_model = last_model
        self.history = history


@dataclass
class Schedule:
    initial_epochs: int = 20
    refine_epochs: int = 25
    phase_length: int = 5
    learning_rate: float = 0.25
    prototype_lr_scale: float = 100.0  # prototype grads are ~1e3 smaller than weight grads
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    stability_window: int = 5
    stability_delta: float = 0.01

    def __post_init__(self):
        if self.refine_epochs % self.phase_length != 0:
            raise ValueError("refine_epochs must be divisible by phase_length")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def phases(self) -> list[str]:
        names = []
        for i in range(self.refine_epochs // self.phase_length):
            names.append("concepts" if i % 2 == 0 else "weights")
        return names


@dataclass
class EpochMetrics:
    epoch: int
    phase: str  # initial | concepts | weights
    train_loss: float
    train_accuracy: float
    test_accuracy: float
    terms: dict
    confound_reliance: float

    def to_json(self) -> dict:
        return {
            "epoch": self.epoch,
            "phase": self.phase,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "test_accuracy": self.test_accuracy,
            "terms": dict(self.terms),
            "confound_reliance": self.confound_reliance,
        }


@dataclass
class MetricsHistory:
    records: list = field(default_factory=list)

    def append(self, rec: EpochMetrics):
        self.records.append(rec)

    def extend(self, other: "MetricsHistory"):
        self.records.extend(other.records)

    def __len__(self):
        return len(self.records)

    def test_accuracies(self) -> list:
        return [r.test_accuracy for r in self.records]


def is_stable(history: MetricsHistory, window: int, delta: float) -> bool:
    """True iff deconfounded-test accuracy varied by at most delta over the
    last `window` epochs."""
    if window < 2:
        raise ValueError("window must be >= 2")
    accs = history.test_accuracies()
    if len(accs) < window:
        return False
    tail = accs[-window:]
    return (max(tail) - min(tail)) <= delta


def confounder_template(confounder_atom, patch_size) -> np.ndarray:
    """Canonical confounder patch: the atom rendered to fill one receptive field."""
    a, b = patch_size
    size = min(a, b)
    color, shape = confounder_atom
    stencil = shapes._shape_pixel_mask(shape, size)
    patch = np.zeros((a, b, 3))
    rgb = np.array(shapes.PALETTE[color], dtype=np.float64) / 255.0
    r0, c0 = (a - size) // 2, (b - size) // 2
    patch[r0 : r0 + size, c0 : c0 + size][stencil] = rgb
    return patch.reshape(-1)


def confounder_probe_reference(data_config, formulas=None) -> ReferenceSet:
    """One image per grid cell: the confounder rendered at that cell, every
    other cell filled with seeded dim noise.

    kappa_act against this set isolates 'fires on the confounder' from 'fires
    on anything': empty-background probes would co-activate with
    background-matching prototypes, training images would co-activate with
    causal prototypes (the confounder co-occurs with them there), and shape
    fillers would co-activate with same-colored prototypes. Noise fillers sit
    far from every shape prototype while still suppressing background
    matchers.
    """
    del formulas  # probes are shape-free outside the confounder cell
    color, shape = data_config.confounder
    H, grid = data_config.image_size, data_config.grid
    cell_px = H // grid
    images, ids = [], []
    cells = [(r, c) for r in range(grid) for c in range(grid)]
    for idx, cell in enumerate(cells):
        rng = np.random.default_rng([data_config.seed, 7001, idx])
        scene = shapes.Scene(
            shapes=[shapes.ShapeSpec(shape, color, cell, data_config.shape_size)],
            class_label=-1)
        img = shapes.render(scene, H, grid)
        for other in cells:
            if other == cell:
                continue
            r0, c0 = other[0] * cell_px, other[1] * cell_px
            img[r0 : r0 + cell_px, c0 : c0 + cell_px] = \
                rng.uniform(0.0, 0.6, size=(cell_px, cell_px, 3))
        images.append(img)
        ids.append(f"probe/{idx:02d}")
    return ReferenceSet.from_images(images, ids)


def template_similarities(model: PrototypeModel, confounder_atom,
                          ref: ReferenceSet) -> np.ndarray:
    """kappa_act(confounder template, c_j) over `ref` for every concept j."""
    template = confounder_template(confounder_atom, model.patch_size)
    stack = ref.stack(model.patch_size, model.stride)
    d2 = (stack.sq_norms
          - 2.0 * np.einsum("npq,q->np", stack.patches, template, optimize=True)
          + float(np.dot(template, template)))
    np.maximum(d2, 0.0, out=d2)
    t_acts = np.exp(-d2 / model.tau).max(axis=1)  # (N,)
    C, _ = ref.live_activations(model)
    return np.mean(t_acts[:, None] * C, axis=0)


def confound_reliance(model: PrototypeModel, confounder_atom, ref: ReferenceSet,
                      confounded_class: int) -> float:
    """max_j kappa_act(template, c_j) * |w_j| / max|w| for the confounded class."""
    kappas = template_similarities(model, confounder_atom, ref)
    w = np.abs(model.weights[confounded_class])
    w_max = float(w.max())
    if w_max == 0.0:
        return 0.0
    return float(np.max(kappas * w / w_max))


@dataclass
class _EvalContext:
    """Cached patch matrices and probe set for per-epoch metric passes."""

    train_examples: list
    test_examples: list
    patch_cache: dict
    probe_ref: ReferenceSet
    confounder_atom: tuple
    confounded_class: int

    @classmethod
    def build(cls, dataset, model: PrototypeModel) -> "_EvalContext":
        train = [(e.raster, e.scene.class_label, e.image_id)
                 for e in dataset.split("train")]
        test_split = "test" if dataset.split("test") else "train"
        test = [(e.raster, e.scene.class_label, e.image_id)
                for e in dataset.split(test_split)]
        return cls(
            train_examples=train,
            test_examples=test,
            patch_cache={},
            probe_ref=confounder_probe_reference(dataset.config, dataset.formulas),
            confounder_atom=tuple(dataset.config.confounder),
            confounded_class=dataset.config.confounded_class,
        )


def evaluate_split(model, examples, spec, memory=None, feedback=None, ref=None,
                   patch_cache=None, chunk=64):
    """Mean loss (with terms) and accuracy over a full example list."""
    total_terms: dict = {}
    correct = 0
    n = len(examples)
    for lo in range(0, n, chunk):
        part = examples[lo : lo + chunk]
        _, _, terms = losses.batch_loss_and_grads(
            model, part, spec, memory=memory, feedback=feedback, ref=ref,
            patch_cache=patch_cache, want_grads=False)
        for name, val in terms.items():
            total_terms[name] = total_terms.get(name, 0.0) + val * len(part)
        correct += _count_correct(model, part, patch_cache)
    terms = {name: val / n for name, val in total_terms.items()}
    return float(sum(terms.values())), terms, correct / n


def _misclassified_by_class(model, ctx: "_EvalContext", dataset) -> dict:
    """Per class, the within-class example rows the model currently gets wrong."""
    wrong: dict[int, set] = {}
    counters: dict[int, int] = {}
    for image, label, x_id in ctx.train_examples:
        row = counters.get(label, 0)
        counters[label] = row + 1
        patches, _, sq = losses._patches_for(image, model, x_id, ctx.patch_cache)
        d2 = sq[:, None] - 2.0 * patches @ model.prototypes.T \
            + np.sum(model.prototypes**2, axis=1)[None, :]
        np.maximum(d2, 0.0, out=d2)
        c = np.exp(-d2 / model.tau).max(axis=0)
        if int(np.argmax(model.weights @ c)) != label:
            wrong.setdefault(label, set()).add(row)
    return wrong


def _count_correct(model, examples, patch_cache):
    correct = 0
    for image, label, x_id in examples:
        patches, _, sq = losses._patches_for(image, model, x_id, patch_cache)
        d2 = sq[:, None] - 2.0 * patches @ model.prototypes.T \
            + np.sum(model.prototypes**2, axis=1)[None, :]
        np.maximum(d2, 0.0, out=d2)
        c = np.exp(-d2 / model.tau).max(axis=0)
        if int(np.argmax(model.weights @ c)) == label:
            correct += 1
    return correct


def _epoch_record(model, ctx: _EvalContext, spec, memory, feedback, ref, epoch, phase):
    train_loss, terms, train_acc = evaluate_split(
        model, ctx.train_examples, spec, memory=memory, feedback=feedback, ref=ref,
        patch_cache=ctx.patch_cache)
    _, _, test_acc = evaluate_split(model, ctx.test_examples,
                                    losses.LossSpec.cross_entropy_only(),
                                    patch_cache=ctx.patch_cache)
    reliance = confound_reliance(model, ctx.confounder_atom, ctx.probe_ref,
                                 ctx.confounded_class)
    return EpochMetrics(epoch=epoch, phase=phase, train_loss=train_loss,
                        train_accuracy=train_acc, test_accuracy=test_acc,
                        terms=terms, confound_reliance=reliance)


def _sgd_epoch(model, examples, spec, schedule, rng, *, memory=None, feedback=None,
               ref=None, patch_cache=None, update_prototypes=True,
               update_weights=True, velocity=None):
    order = rng.permutation(len(examples))
    vP, vW = velocity
    for lo in range(0, len(examples), schedule.batch_size):
        batch = [examples[i] for i in order[lo : lo + schedule.batch_size]]
        loss, grads, _ = losses.batch_loss_and_grads(
            model, batch, spec, memory=memory, feedback=feedback, ref=ref,
            patch_cache=patch_cache)
        if not np.isfinite(loss):
            raise TrainingDiverged("non-finite batch loss")
        if update_prototypes:
            vP *= schedule.momentum
            vP -= schedule.learning_rate * schedule.prototype_lr_scale * grads.d_prototypes
            model.prototypes += vP
        if update_weights:
            vW *= schedule.momentum
            vW -= schedule.learning_rate * grads.d_weights
            model.weights += vW


@dataclass
class ClassPatchPool:
    """Non-empty patches of one class's training images, on the
    non-overlapping patch tiling, with the source example of each patch."""

    patches: np.ndarray  # (n, q)
    example_row: np.ndarray  # (n,) index into the class's example list
    example_ids: list


def projection_pool(dataset, patch_size) -> dict:
    """Per-class ClassPatchPool used for prototype projection.

    Prototypes are projected onto these after each concept phase, so learned
    concepts stay identifiable with actual image parts instead of drifting to
    patch-cloud centroids (which act as uninformative bias features).
    """
    from .model import extract_patches

    cfg = dataset.config
    mats: dict[int, list] = {y: [] for y in range(cfg.v)}
    rows: dict[int, list] = {y: [] for y in range(cfg.v)}
    ids: dict[int, list] = {y: [] for y in range(cfg.v)}
    for entry in dataset.split("train"):
        y = entry.scene.class_label
        patches, _ = extract_patches(entry.raster, patch_size, patch_size[0])
        keep = np.sum(patches**2, axis=1) > 0
        if keep.any():
            mats[y].append(patches[keep])
            rows[y].append(np.full(int(keep.sum()), len(ids[y]), dtype=np.int64))
        ids[y].append(entry.image_id)
    return {
        y: ClassPatchPool(patches=np.concatenate(mats[y], axis=0),
                          example_row=np.concatenate(rows[y]),
                          example_ids=ids[y])
        for y in range(cfg.v) if mats[y]
    }


def _snapshot_penalty(pool_patches, snapshots, sigma) -> np.ndarray:
    """Sum over forbidden snapshots of kappa_param against each pool patch."""
    total = np.zeros(pool_patches.shape[0])
    for snap in snapshots:
        d2 = np.sum((pool_patches - snap.frozen_p) ** 2, axis=1)
        total += np.exp(-d2 / sigma**2)
    return total


def project_prototypes(model: PrototypeModel, pools: dict, *, memory=None,
                       loss_spec=None, rng=None, misclassified=None) -> None:
    """Snap every prototype to a patch of its owner class (in place).

    When the aggregation penalty is active the landing cost includes the
    snapshot similarity (forbidden patches are poor landing spots), and
    prototypes whose weight the penalty has killed are re-seeded onto a
    (seeded) random low-penalty patch from a currently misclassified image of
    their class, so the slot can try a fresh candidate part.
    """
    from .kernels import default_sigma

    lam = loss_spec.lambda_aggr if loss_spec is not None else 0.0
    sigma = (loss_spec.sigma if loss_spec is not None and loss_spec.sigma is not None
             else default_sigma(model.q))
    for j in range(model.k):
        y = int(model.owner_class[j])
        if y not in pools:
            continue
        pool = pools[y]
        cost = np.sum((pool.patches - model.prototypes[j]) ** 2, axis=1) / model.q
        snaps = _scope_snapshots(memory, y) if (lam > 0 and memory is not None) else []
        penalty = _snapshot_penalty(pool.patches, snaps, sigma) if snaps else None
        if penalty is not None:
            cost = cost + lam * penalty
        dead = abs(float(model.weights[y, j])) < 0.05
        if lam > 0 and rng is not None and dead:
            bad = misclassified.get(y, set()) if misclassified else set()
            mask = np.isin(pool.example_row, sorted(bad)) if bad else \
                np.ones(len(pool.example_row), dtype=bool)
            if penalty is not None:
                mask &= penalty < 0.5
            idx = np.flatnonzero(mask)
            if idx.size:
                model.prototypes[j] = pool.patches[idx[rng.integers(idx.size)]]
                continue
        model.prototypes[j] = pool.patches[int(np.argmin(cost))]


def _scope_snapshots(memory, y) -> list:
    return [e.snapshot for e in memory.entries
            if e.scope.kind == "global" or (e.scope.kind == "class" and e.scope.y == y)
            or (e.scope.kind == "instance" and e.scope.y == y)]


def structural_spec(base: losses.LossSpec | None = None) -> losses.LossSpec:
    """Classification objective plus the prototype-shaping terms only (no
    corrective feedback terms)."""
    base = base or losses.LossSpec()
    return losses.LossSpec(
        lambda_attr=0.0, lambda_aggr=0.0, lambda_relevance=0.0,
        lambda_concept_label=0.0, lambda_concept_region=0.0,
        lambda_offclass=base.lambda_offclass, lambda_cluster=base.lambda_cluster,
        lambda_separation=base.lambda_separation, sep_margin=base.sep_margin)


def train_initial(model: PrototypeModel, dataset, schedule: Schedule,
                  callback=None, loss_spec: losses.LossSpec | None = None
                  ) -> tuple[PrototypeModel, MetricsHistory]:
    """Initial fit: cross-entropy plus the prototype-shaping terms (cluster,
    separation, off-class sparsity) for exactly schedule.initial_epochs epochs."""
    model = model.copy()
    ctx = _EvalContext.build(dataset, model)
    spec = structural_spec(loss_spec)
    rng = np.random.default_rng([schedule.seed, 0])
    history = MetricsHistory()
    velocity = (np.zeros_like(model.prototypes), np.zeros_like(model.weights))
    for epoch in range(schedule.initial_epochs):
        last_good = model.copy()
        try:
            _sgd_epoch(model, ctx.train_examples, spec, schedule, rng,
                       patch_cache=ctx.patch_cache, velocity=velocity)
        except (TrainingDiverged, losses.LossError) as exc:
            raise TrainingDiverged(f"initial training diverged at epoch {epoch}: {exc}",
                                   last_model=last_good, history=history) from exc
        record = _epoch_record(model, ctx, spec, None, None, None, epoch, "initial")
        history.append(record)
        if callback:
            callback(record)
    return model, history


def train_refine(model: PrototypeModel, dataset, schedule: Schedule,
                 loss_spec: losses.LossSpec, memory=None, feedback=None,
                 ref=None, round_index: int = 1, callback=None,
                 checkpoint_dir=None) -> tuple[PrototypeModel, MetricsHistory]:
    """Alternating concept/weight phases with corrective terms active
    throughout; a checkpoint is written at each phase boundary when
    checkpoint_dir is given."""
    model = model.copy()
    ctx = _EvalContext.build(dataset, model)
    if ref is None and loss_spec.kernel in ("act", "attr") and memory is not None \
            and len(memory.entries) > 0:
        ref = ReferenceSet.from_dataset(dataset, "train")
    rng = np.random.default_rng([schedule.seed, round_index])
    proj_rng = np.random.default_rng([schedule.seed, round_index, 77])
    pools = projection_pool(dataset, model.patch_size)
    history = MetricsHistory()
    epoch = 0
    for phase_idx, phase in enumerate(schedule.phases()):
        velocity = (np.zeros_like(model.prototypes), np.zeros_like(model.weights))
        for step in range(schedule.phase_length):
            last_good = model.copy()
            try:
                _sgd_epoch(model, ctx.train_examples, loss_spec, schedule, rng,
                           memory=memory, feedback=feedback, ref=ref,
                           patch_cache=ctx.patch_cache,
                           update_prototypes=(phase == "concepts"),
                           update_weights=(phase == "weights"),
                           velocity=velocity)
            except (TrainingDiverged, losses.LossError) as exc:
                raise TrainingDiverged(
                    f"refinement diverged at epoch {epoch} ({phase}): {exc}",
                    last_model=last_good, history=history) from exc
            if phase == "concepts" and step == schedule.phase_length - 1:
                project_prototypes(model, pools, memory=memory, loss_spec=loss_spec,
                                   rng=proj_rng,
                                   misclassified=_misclassified_by_class(
                                       model, ctx, dataset))
            record = _epoch_record(model, ctx, loss_spec, memory, feedback, ref,
                                   epoch, phase)
            history.append(record)
            if callback:
                callback(record)
            epoch += 1
        if checkpoint_dir is not None:
            from .persistence import save_checkpoint

            out = Path(checkpoint_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, out / f"round{round_index:03d}_"
                                         f"phase{phase_idx:02d}_{phase}.json")
    return model, history
