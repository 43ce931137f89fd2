"""Scripted end-to-end experiment: initial fit, oracle feedback, refinement.

Three conditions compare encodings of the same corrective feedback: `none`
(no correction), `attr` (index-based weight penalty, which the model eludes
while keeping its confounder concepts), and `aggr` (similarity-based penalty
against frozen forbidden concepts, which forces the confounded class onto its
causal shapes).
"""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import losses, netpbm, shapes
from .attribution import concept_attribution, representatives
from .model import extract_patches
from .session import (SessionConfig, new_session, persist, run_round,
                      scripted_oracle, submit_feedback)

CONDITIONS = ("none", "attr", "aggr")


def condition_loss_spec(condition: str, base: losses.LossSpec) -> losses.LossSpec:
    """Same base spec in every condition; only the corrective channel differs."""
    if condition == "none":
        return replace(base, lambda_attr=0.0, lambda_aggr=0.0)
    if condition == "attr":
        return replace(base, lambda_aggr=0.0)
    if condition == "aggr":
        return replace(base, lambda_attr=0.0)
    raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")


def per_class_accuracy(model, dataset, split="test") -> list[float]:
    counts = np.zeros(dataset.config.v)
    hits = np.zeros(dataset.config.v)
    for entry in dataset.split(split):
        patches, _ = extract_patches(entry.raster, model.patch_size, model.stride)
        d2 = (np.sum(patches**2, axis=1)[:, None]
              - 2.0 * patches @ model.prototypes.T
              + np.sum(model.prototypes**2, axis=1)[None, :])
        np.maximum(d2, 0.0, out=d2)
        c = np.exp(-d2 / model.tau).max(axis=0)
        y = entry.scene.class_label
        counts[y] += 1
        hits[y] += int(np.argmax(model.weights @ c) == y)
    return [float(h / n) if n else 0.0 for h, n in zip(hits, counts)]


def _mask_bbox(mask: np.ndarray):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def _box_iou(box1, box2) -> float:
    r0 = max(box1[0], box2[0])
    c0 = max(box1[1], box2[1])
    r1 = min(box1[2], box2[2])
    c1 = min(box1[3], box2[3])
    inter = max(0, r1 - r0) * max(0, c1 - c0)
    a1 = (box1[2] - box1[0]) * (box1[3] - box1[1])
    a2 = (box2[2] - box2[0]) * (box2[3] - box2[1])
    union = a1 + a2 - inter
    return inter / union if union else 0.0


def causal_overlap_iou(model, dataset, j: int) -> float:
    """Overlap between the prototype's receptive field (on its top training
    representative) and the box around a causally relevant shape there."""
    (image_id, loc, _act), = representatives(model, j, dataset, 1)
    entry = next(e for e in dataset.split("train") if e.image_id == image_id)
    a, b = model.patch_size
    field = (loc[0], loc[1], loc[0] + a, loc[1] + b)
    owner = int(model.owner_class[j])
    causal_atoms = set(dataset.formulas[owner].atoms)
    H, grid = dataset.config.image_size, dataset.config.grid
    best = 0.0
    for idx, spec in enumerate(entry.scene.shapes):
        if spec.atom in causal_atoms:
            mask = shapes.shape_mask(entry.scene, idx, H, grid)
            best = max(best, _box_iou(field, _mask_bbox(mask)))
    return best


def prototype_panel(model, dataset, j: int) -> np.ndarray:
    """Fig-style strip: prototype render | nearest training patch | attribution
    blend over that patch."""
    a, b = model.patch_size
    proto_img = np.clip(model.prototypes[j].reshape(a, b, 3), 0.0, 1.0)
    (image_id, loc, _act), = representatives(model, j, dataset, 1)
    entry = next(e for e in dataset.split("train") if e.image_id == image_id)
    crop = entry.raster[loc[0] : loc[0] + a, loc[1] : loc[1] + b]
    amap = concept_attribution(model, j, entry.raster)
    heat = amap.values[loc[0] : loc[0] + a, loc[1] : loc[1] + b]
    peak = heat.max()
    heat = heat / peak if peak > 0 else heat
    blend = 0.5 * crop.copy()
    blend[:, :, 0] += 0.5 * heat  # attribution shown in the red channel
    gap = np.full((a, 2, 3), 1.0)
    return np.clip(np.concatenate([proto_img, gap, crop, gap, blend], axis=1), 0.0, 1.0)


def write_panels(model, dataset, out_dir, concepts=None) -> list[str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for j in concepts if concepts is not None else range(model.k):
        name = f"prototype_{j:02d}.ppm"
        netpbm.write_ppm(out_dir / name, prototype_panel(model, dataset, j))
        names.append(name)
    return names


def run_experiment(dataset: shapes.Dataset, seed: int, condition: str, out_dir,
                   config: SessionConfig | None = None,
                   dataset_dir=None) -> dict:
    """Full pipeline for one (seed, condition) cell; returns the summary dict."""
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}; expected one of {CONDITIONS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config is None:
        config = SessionConfig()
    config = replace(config, seed=seed,
                     schedule=replace(config.schedule, seed=seed),
                     loss_spec=condition_loss_spec(condition, config.loss_spec))
    sess = new_session(dataset, config, dataset_dir=dataset_dir,
                       session_id=f"{condition}-seed{seed}")
    run_round(sess)  # initial 20-epoch fit
    reliance_initial = sess.history.records[-1].confound_reliance
    train_acc_initial = sess.history.records[-1].train_accuracy

    flagged = []
    if condition != "none":
        for fb in scripted_oracle(sess):
            submit_feedback(sess, fb)
            flagged.append(fb.concept)
    run_round(sess)  # 25-epoch alternating refinement
    reliance_final = sess.history.records[-1].confound_reliance

    model = sess.model
    cfg = dataset.config
    test_acc = per_class_accuracy(model, dataset, "test")
    train_acc = per_class_accuracy(model, dataset, "train")
    confounded_slots = [j for j in range(model.k)
                        if int(model.owner_class[j]) == cfg.confounded_class]
    iou = {str(j): causal_overlap_iou(model, dataset, j) for j in confounded_slots}
    panels = write_panels(model, dataset, out / "panels", concepts=confounded_slots)

    summary = {
        "condition": condition,
        "seed": seed,
        "dataset_hash": dataset.manifest["hash"],
        "confounded_class": cfg.confounded_class,
        "formulas": [str(f) for f in dataset.formulas],
        "flagged_concepts": flagged,
        "confound_reliance_initial": reliance_initial,
        "confound_reliance_final": reliance_final,
        "test_accuracy_per_class": test_acc,
        "train_accuracy_per_class": train_acc,
        "test_accuracy": float(np.mean(test_acc)),
        "train_accuracy_initial": train_acc_initial,
        "causal_overlap_iou": iou,
        "panels": [f"panels/{name}" for name in panels],
    }
    persist(sess, out / "session")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def write_report(run_dirs, out_path) -> str:
    """Markdown comparison across runs: one row per run plus per-condition
    aggregates (mean +/- half-range)."""
    out_path = Path(out_path)
    summaries = []
    missing = []
    for d in run_dirs:
        p = Path(d) / "summary.json"
        if p.exists():
            summaries.append((Path(d), json.loads(p.read_text())))
        else:
            missing.append(str(p))
    if missing:
        raise FileNotFoundError("missing experiment summaries: " + ", ".join(missing))

    lines = ["# Confounded-shapes experiment report", ""]
    hashes = {s["dataset_hash"] for _, s in summaries}
    if len(hashes) > 1:
        lines += ["> **Warning:** runs used different datasets "
                  f"({len(hashes)} distinct manifest hashes); comparisons may be invalid.", ""]

    lines += ["| condition | seed | test acc | test acc (confounded class) | "
              "reliance initial | reliance final | best causal IoU |",
              "|---|---|---|---|---|---|---|"]
    for run_dir, s in sorted(summaries, key=lambda t: (t[1]["condition"], t[1]["seed"])):
        yc = s["confounded_class"]
        best_iou = max(s["causal_overlap_iou"].values()) if s["causal_overlap_iou"] else 0.0
        lines.append(
            f"| {s['condition']} | {s['seed']} | {s['test_accuracy']:.3f} | "
            f"{s['test_accuracy_per_class'][yc]:.3f} | "
            f"{s['confound_reliance_initial']:.3f} | {s['confound_reliance_final']:.3f} | "
            f"{best_iou:.3f} |")
    lines.append("")

    by_condition: dict[str, list[dict]] = {}
    for _, s in summaries:
        by_condition.setdefault(s["condition"], []).append(s)
    lines += ["## Aggregates", "",
              "| condition | runs | reliance final | test acc (confounded class) |",
              "|---|---|---|---|"]
    for cond in sorted(by_condition):
        group = by_condition[cond]
        rel = [s["confound_reliance_final"] for s in group]
        acc = [s["test_accuracy_per_class"][s["confounded_class"]] for s in group]
        lines.append(f"| {cond} | {len(group)} | {_mean_range(rel)} | {_mean_range(acc)} |")
    lines.append("")

    lines.append("## Prototype panels (confounded class)")
    for run_dir, s in sorted(summaries, key=lambda t: (t[1]["condition"], t[1]["seed"])):
        lines.append("")
        lines.append(f"### {s['condition']} / seed {s['seed']}")
        for rel_path in s["panels"]:
            full = (run_dir / rel_path)
            try:
                shown = full.relative_to(out_path.parent)
            except ValueError:
                shown = full
            lines.append(f"- `{shown}`")
    text = "\n".join(lines) + "\n"
    out_path.write_text(text)
    return text


def _mean_range(values) -> str:
    mean = float(np.mean(values))
    if len(values) == 1:
        return f"{mean:.3f}"
    half = (max(values) - min(values)) / 2.0
    return f"{mean:.3f} ± {half:.3f}"
