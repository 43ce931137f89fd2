"""Confounded synthetic shapes dataset.

Images show two colored 2-D shapes (square / triangle / circle in six colors)
placed on a cell grid over a black background. Class labels come from random
disjunctive formulas over (color, shape) atoms, e.g. "pink triangle or green
circle". Every *training* image of one chosen class additionally contains a
confounder shape (default: yellow square), while validation and test images
never do, so reliance on the confounder is measurable as a generalization gap.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import netpbm

SHAPES = ("square", "triangle", "circle")
COLORS = ("red", "green", "blue", "yellow", "pink", "cyan")

# 8-bit palette so in-memory rasters and P6 files round-trip bit-exactly.
PALETTE = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "yellow": (255, 255, 0),
    "pink": (255, 102, 178),
    "cyan": (0, 255, 255),
}

CONFOUNDER_ATOM = ("yellow", "square")
SPLITS = ("train", "validation", "test")


class GenerationError(RuntimeError):
    """Raised when the dataset generator cannot satisfy its contract."""


@dataclass(frozen=True)
class ShapeSpec:
    shape: str
    color: str
    position: tuple[int, int]  # (row, col) cell on the placement grid
    size: int  # side / diameter in pixels

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.color not in PALETTE:
            raise ValueError(f"unknown color {self.color!r}")
        if self.size < 8:
            raise ValueError(f"shape size {self.size} < 8 px")

    @property
    def atom(self) -> tuple[str, str]:
        return (self.color, self.shape)


@dataclass(frozen=True)
class Formula:
    """Disjunction of 1-2 distinct (color, shape) atoms."""

    atoms: tuple[tuple[str, str], ...]

    def __post_init__(self):
        if not 1 <= len(self.atoms) <= 2:
            raise ValueError("formula must have 1-2 atoms")
        if len(set(self.atoms)) != len(self.atoms):
            raise ValueError("formula atoms must be distinct")

    def __str__(self):
        return " or ".join(f"{c} {s}" for c, s in self.atoms)


@dataclass
class Scene:
    shapes: list[ShapeSpec]
    class_label: int
    confounded: bool = False

    def __post_init__(self):
        cells = [s.position for s in self.shapes]
        if len(set(cells)) != len(cells):
            raise ValueError(f"shapes share a grid cell: {cells}")


@dataclass
class DatasetImage:
    image_id: str  # "<split>/<index>"
    raster: np.ndarray  # HxWx3 float64 in [0, 1]
    scene: Scene


@dataclass
class DataConfig:
    seed: int = 0
    v: int = 5
    n_train: int = 50
    n_validation: int = 0
    n_test: int = 20
    image_size: int = 64
    grid: int = 4
    shape_size: int | None = None  # defaults to one grid cell
    confounded_class: int = 0
    confounder: tuple[str, str] = CONFOUNDER_ATOM
    atom_pool: tuple[tuple[str, str], ...] = field(
        default_factory=lambda: tuple((c, s) for c in COLORS for s in SHAPES)
    )
    rejection_factor: int = 1000

    def __post_init__(self):
        if self.shape_size is None:
            self.shape_size = self.image_size // self.grid

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "validation": self.n_validation, "test": self.n_test}


@dataclass
class Dataset:
    config: DataConfig
    formulas: list[Formula]
    splits: dict[str, list[DatasetImage]]
    manifest: dict

    def split(self, name: str) -> list[DatasetImage]:
        return self.splits[name]


def sample_formulas(seed: int, v: int, atom_pool, exclude=CONFOUNDER_ATOM) -> list[Formula]:
    """Draw v pairwise atom-disjoint disjunctive formulas, deterministic in seed.

    Two-atom formulas are preferred; a formula degrades to one atom only when
    the remaining pool could not otherwise serve every formula at least one.
    """
    usable = [a for a in atom_pool if tuple(a) != tuple(exclude)]
    if len(usable) < v:
        raise GenerationError(
            f"pool exhausted: {v} formulas need at least {v} atoms, "
            f"only {len(usable)} usable after excluding {exclude}"
        )
    rng = np.random.default_rng(seed)
    order = [usable[i] for i in rng.permutation(len(usable))]
    formulas = []
    for remaining in range(v, 0, -1):
        arity = 2 if len(order) - 2 >= remaining - 1 else 1
        atoms = tuple(tuple(order.pop()) for _ in range(arity))
        formulas.append(Formula(atoms))
    return formulas


def eval_formula(formula: Formula, scene: Scene) -> bool:
    """True iff some shape in the scene matches some atom of the formula."""
    atoms = set(formula.atoms)
    return any(spec.atom in atoms for spec in scene.shapes)


def _shape_pixel_mask(shape: str, size: int) -> np.ndarray:
    """Binary size x size stencil of the shape inside its bounding box."""
    r = np.arange(size)[:, None]
    c = np.arange(size)[None, :]
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        # apex at top center, base along the bottom row
        return np.abs(2 * c - (size - 1)) <= r + 1
    if shape == "circle":
        mid = (size - 1) / 2.0
        return (r - mid) ** 2 + (c - mid) ** 2 <= (size / 2.0) ** 2
    raise ValueError(f"unknown shape {shape!r}")


def _cell_origin(spec: ShapeSpec, H: int, grid: int) -> tuple[int, int]:
    cell = H // grid
    row, col = spec.position
    if not (0 <= row < grid and 0 <= col < grid):
        raise ValueError(f"cell {spec.position} outside {grid}x{grid} grid")
    if spec.size > cell:
        raise ValueError(f"shape size {spec.size} exceeds cell size {cell}")
    pad = (cell - spec.size) // 2
    return row * cell + pad, col * cell + pad


def render(scene: Scene, H: int, grid: int = 4) -> np.ndarray:
    """Deterministic raster: black background, fixed palette fills."""
    raster = np.zeros((H, H, 3), dtype=np.float64)
    for spec in scene.shapes:
        r0, c0 = _cell_origin(spec, H, grid)
        stencil = _shape_pixel_mask(spec.shape, spec.size)
        rgb = np.array(PALETTE[spec.color], dtype=np.float64) / 255.0
        region = raster[r0 : r0 + spec.size, c0 : c0 + spec.size]
        region[stencil] = rgb
    return raster


def shape_mask(scene: Scene, which: int, H: int, grid: int = 4) -> np.ndarray:
    """Binary HxH mask that is 1 exactly on the pixels of shape `which`."""
    if not 0 <= which < len(scene.shapes):
        raise IndexError(f"shape index {which} out of range for {len(scene.shapes)} shapes")
    spec = scene.shapes[which]
    mask = np.zeros((H, H), dtype=np.uint8)
    r0, c0 = _cell_origin(spec, H, grid)
    stencil = _shape_pixel_mask(spec.shape, spec.size)
    mask[r0 : r0 + spec.size, c0 : c0 + spec.size][stencil] = 1
    return mask


def _derived_rng(seed: int, split: str, label: int, index: int) -> np.random.Generator:
    """Per-image rng so generation is order-independent and reproducible."""
    key = f"{seed}:{split}:{label}:{index}".encode("ascii")
    digest = hashlib.sha256(key).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _sample_scene(rng, formulas, formula_atoms, label, causal_atom, cfg: DataConfig,
                  budget_counter) -> Scene:
    """Rejection-sample a scene that satisfies exactly formula `label`.

    The proposal forces the causal shape and draws the second shape from the
    full atom pool; rejected if the second shape matches any formula atom
    (which would skew per-atom coverage or satisfy another class) or would be
    a natural render of the confounder.
    """
    all_cells = [(r, c) for r in range(cfg.grid) for c in range(cfg.grid)]
    while True:
        budget_counter[0] += 1
        if budget_counter[0] > budget_counter[1]:
            rate = budget_counter[2] / max(1, budget_counter[0])
            raise GenerationError(
                f"rejection budget exceeded after {budget_counter[0]} proposals "
                f"(acceptance rate {rate:.4f}); {len(formula_atoms)} of "
                f"{len(cfg.atom_pool)} pool atoms are claimed by formulas"
            )
        cells = [all_cells[i] for i in rng.choice(len(all_cells), size=2, replace=False)]
        distractor = tuple(cfg.atom_pool[rng.integers(len(cfg.atom_pool))])
        if distractor in formula_atoms or distractor == tuple(cfg.confounder):
            continue
        shapes = [
            ShapeSpec(causal_atom[1], causal_atom[0], cells[0], cfg.shape_size),
            ShapeSpec(distractor[1], distractor[0], cells[1], cfg.shape_size),
        ]
        scene = Scene(shapes=shapes, class_label=label)
        satisfied = [f for f in formulas if eval_formula(f, scene)]
        if len(satisfied) == 1 and satisfied[0] is formulas[label]:
            budget_counter[2] += 1
            return scene


def generate(config: DataConfig) -> Dataset:
    """Generate the full dataset, injecting the confounder into every train
    image of the confounded class."""
    if config.v < 2:
        raise GenerationError(f"need at least 2 classes, got {config.v}")
    if config.image_size < 32:
        raise GenerationError(f"image size {config.image_size} < 32")
    if config.image_size % config.grid != 0:
        raise GenerationError("image size must be divisible by the grid")
    formulas = sample_formulas(config.seed, config.v, config.atom_pool,
                               exclude=config.confounder)
    formula_atoms = {tuple(a) for f in formulas for a in f.atoms}
    n_free = sum(
        1 for a in config.atom_pool
        if tuple(a) not in formula_atoms and tuple(a) != tuple(config.confounder)
    )
    if n_free == 0:
        raise GenerationError("no distractor atoms left outside the formulas")

    total = sum(config.counts().values()) * config.v
    budget_counter = [0, config.rejection_factor * max(1, total), 0]

    splits: dict[str, list[DatasetImage]] = {}
    for split, n in config.counts().items():
        entries = []
        for label in range(config.v):
            atoms = formulas[label].atoms
            for i in range(n):
                rng = _derived_rng(config.seed, split, label, i)
                causal_atom = atoms[i % len(atoms)]  # 50/50 coverage in 2-atom classes
                scene = _sample_scene(rng, formulas, formula_atoms, label, causal_atom,
                                      config, budget_counter)
                if split == "train" and label == config.confounded_class:
                    occupied = {s.position for s in scene.shapes}
                    free = [(r, c) for r in range(config.grid) for c in range(config.grid)
                            if (r, c) not in occupied]
                    cell = free[rng.integers(len(free))]
                    scene.shapes.append(ShapeSpec(config.confounder[1], config.confounder[0],
                                                  cell, config.shape_size))
                    scene.confounded = True
                entries.append(DatasetImage(
                    image_id=f"{split}/{len(entries):04d}",
                    raster=render(scene, config.image_size, config.grid),
                    scene=scene,
                ))
        splits[split] = entries

    manifest = build_manifest(config, formulas, splits)
    return Dataset(config=config, formulas=formulas, splits=splits, manifest=manifest)


def confounder_prevalence(dataset: Dataset, split: str, label: int) -> float:
    """Fraction of the split's class-`label` images containing the confounder atom."""
    atom = tuple(dataset.config.confounder)
    members = [e for e in dataset.split(split) if e.scene.class_label == label]
    if not members:
        return 0.0
    hits = sum(any(s.atom == atom for s in e.scene.shapes) for e in members)
    return hits / len(members)


def build_manifest(config: DataConfig, formulas, splits) -> dict:
    manifest = {
        "version": 1,
        "seed": config.seed,
        "classes": config.v,
        "image_size": config.image_size,
        "grid": config.grid,
        "shape_size": config.shape_size,
        "palette": {name: list(rgb) for name, rgb in PALETTE.items()},
        "formulas": [[list(a) for a in f.atoms] for f in formulas],
        "confound": {
            "class": config.confounded_class,
            "atom": list(config.confounder),
        },
        "counts": config.counts(),
        "splits": {
            split: [
                {
                    "id": e.image_id,
                    "class": e.scene.class_label,
                    "confounded": e.scene.confounded,
                    "shapes": [
                        {"shape": s.shape, "color": s.color,
                         "position": list(s.position), "size": s.size}
                        for s in e.scene.shapes
                    ],
                }
                for e in entries
            ]
            for split, entries in splits.items()
        },
    }
    manifest["hash"] = manifest_hash(manifest)
    return manifest


def manifest_hash(manifest: dict) -> str:
    payload = {k: v for k, v in manifest.items() if k != "hash"}
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_dataset(dataset: Dataset, out_dir) -> None:
    """Write manifest.json plus one P6 file per image and P4 masks per shape."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True))
    H, grid = dataset.config.image_size, dataset.config.grid
    for split, entries in dataset.splits.items():
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        for idx, entry in enumerate(entries):
            netpbm.write_ppm(split_dir / f"{idx:04d}.ppm", entry.raster)
            for k in range(len(entry.scene.shapes)):
                netpbm.write_pbm(split_dir / f"{idx:04d}.mask.{k}.pbm",
                                 shape_mask(entry.scene, k, H, grid))


def load_dataset(root) -> Dataset:
    """Rebuild a Dataset from a directory written by save_dataset."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest_hash(manifest) != manifest["hash"]:
        raise GenerationError(f"manifest hash mismatch in {root}")
    config = DataConfig(
        seed=manifest["seed"],
        v=manifest["classes"],
        n_train=manifest["counts"]["train"],
        n_validation=manifest["counts"]["validation"],
        n_test=manifest["counts"]["test"],
        image_size=manifest["image_size"],
        grid=manifest["grid"],
        shape_size=manifest["shape_size"],
        confounded_class=manifest["confound"]["class"],
        confounder=tuple(manifest["confound"]["atom"]),
    )
    formulas = [Formula(tuple(tuple(a) for a in atoms)) for atoms in manifest["formulas"]]
    splits = {}
    for split, records in manifest["splits"].items():
        entries = []
        for idx, rec in enumerate(records):
            scene = Scene(
                shapes=[ShapeSpec(s["shape"], s["color"], tuple(s["position"]), s["size"])
                        for s in rec["shapes"]],
                class_label=rec["class"],
                confounded=rec["confounded"],
            )
            raster = netpbm.read_ppm(root / split / f"{idx:04d}.ppm")
            entries.append(DatasetImage(image_id=rec["id"], raster=raster, scene=scene))
        splits[split] = entries
    return Dataset(config=config, formulas=formulas, splits=splits, manifest=manifest)
