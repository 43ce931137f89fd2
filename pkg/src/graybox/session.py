"""Interactive debugging sessions: assess concepts, ingest feedback, retrain.

A session walks the three-step loop: Step 1 surfaces evidence packets per
concept (representatives, attribution overlays, weights, pairwise
similarities); Step 2 feedback marks concepts irrelevant, freezing them into
the memory (and recording an index mask for the baseline loss); Step 3
feedback supplies concept labels or region masks. Rounds retrain with the
active corrective terms until the deconfounded-test accuracy stabilizes.
"""

from __future__ import annotations

import base64
import json
import uuid
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import kernels as K
from . import losses, persistence, shapes, trainer
from .attribution import concept_attribution, representatives
from .model import ModelConfig, init_model
from .trainer import MetricsHistory, Schedule

STATES = ("idle", "training", "awaiting_feedback", "stable")
FEEDBACK_KINDS = ("mark_irrelevant", "concept_label", "concept_region", "mark_relevant")


class SessionStateError(RuntimeError):
    pass


class FeedbackError(ValueError):
    pass


@dataclass
class SessionConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: Schedule = field(default_factory=Schedule)
    loss_spec: losses.LossSpec = field(default_factory=losses.LossSpec)
    oracle_threshold: float = 0.15
    n_representatives: int = 3

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "model": asdict(self.model),
            "schedule": asdict(self.schedule),
            "loss_spec": asdict(self.loss_spec),
            "oracle_threshold": self.oracle_threshold,
            "n_representatives": self.n_representatives,
        }

    @classmethod
    def from_json(cls, data: dict) -> "SessionConfig":
        """Build from a (possibly partial) JSON dict; missing keys keep defaults."""
        defaults = cls()
        model_data = dict(data.get("model", {}))
        if "patch_size" in model_data:
            model_data["patch_size"] = tuple(model_data["patch_size"])
        return cls(
            seed=data.get("seed", defaults.seed),
            model=ModelConfig(**{**asdict(defaults.model), **model_data}),
            schedule=Schedule(**{**asdict(defaults.schedule),
                                 **data.get("schedule", {})}),
            loss_spec=losses.LossSpec(**{**asdict(defaults.loss_spec),
                                         **data.get("loss_spec", {})}),
            oracle_threshold=data.get("oracle_threshold", defaults.oracle_threshold),
            n_representatives=data.get("n_representatives", defaults.n_representatives),
        )


@dataclass
class Feedback:
    kind: str
    author: str = "human"
    round: int = 0
    concept: int | None = None
    scope: K.FeedbackScope | None = None  # mark_irrelevant
    image_id: str | None = None  # concept_label / concept_region
    desired: float | None = None  # concept_label
    region: np.ndarray | None = None  # concept_region
    class_index: int | None = None  # mark_relevant

    def to_json(self) -> dict:
        rec = {"kind": self.kind, "author": self.author, "round": self.round,
               "concept": self.concept, "image_id": self.image_id,
               "desired": self.desired, "class_index": self.class_index}
        if self.scope is not None:
            rec["scope"] = {"kind": self.scope.kind, "x_id": self.scope.x_id,
                            "y": self.scope.y}
        if self.region is not None:
            bits = np.packbits(self.region.astype(np.uint8), axis=None)
            rec["region"] = {"shape": list(self.region.shape),
                             "bits": base64.b64encode(bits.tobytes()).decode("ascii")}
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "Feedback":
        scope = None
        if rec.get("scope"):
            s = rec["scope"]
            scope = K.FeedbackScope(kind=s["kind"], x_id=s.get("x_id"), y=s.get("y"))
        region = None
        if rec.get("region"):
            shape = tuple(rec["region"]["shape"])
            raw = base64.b64decode(rec["region"]["bits"])
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8))
            region = bits[: shape[0] * shape[1]].reshape(shape).astype(np.float64)
        return cls(kind=rec["kind"], author=rec.get("author", "human"),
                   round=rec.get("round", 0), concept=rec.get("concept"),
                   scope=scope, image_id=rec.get("image_id"),
                   desired=rec.get("desired"), region=region,
                   class_index=rec.get("class_index"))


@dataclass
class ConceptPacket:
    concept: int
    owner_class: int
    representatives: list  # [(image_id, (row, col), activation)]
    overlays: list  # AttributionMap per representative
    weights: np.ndarray  # (v,) column of the weight matrix
    kappa_row: np.ndarray  # (k,) kappa_act against every concept


@dataclass
class DebugSession:
    id: str
    dataset: shapes.Dataset
    config: SessionConfig
    dataset_dir: str | None = None
    model: object = None  # PrototypeModel once trained
    memory: K.Memory | None = None
    ref: K.ReferenceSet | None = None
    feedback_log: list = field(default_factory=list)
    feedback_state: losses.FeedbackState = field(default_factory=losses.FeedbackState)
    state: str = "idle"
    round: int = 0
    trained: bool = False
    history: MetricsHistory = field(default_factory=MetricsHistory)

    @property
    def k(self) -> int:
        return self.dataset.config.v * self.config.model.slots_per_class


def new_session(dataset: shapes.Dataset, config: SessionConfig,
                dataset_dir=None, session_id=None) -> DebugSession:
    session = DebugSession(
        id=session_id or uuid.uuid4().hex[:12],
        dataset=dataset,
        config=config,
        dataset_dir=str(dataset_dir) if dataset_dir else None,
    )
    session.ref = K.ReferenceSet.from_dataset(dataset, "train")
    session.memory = K.Memory.for_reference(session.ref)
    return session


def _entry_by_id(session: DebugSession, image_id: str):
    split = image_id.split("/", 1)[0]
    for entry in session.dataset.split(split):
        if entry.image_id == image_id:
            return entry
    raise FeedbackError(f"unknown image id {image_id!r}")


def assess(session: DebugSession) -> list[ConceptPacket]:
    """Step-1 evidence: one packet per concept, sorted by max_y |w_j|."""
    if not session.trained:
        raise SessionStateError("session has no trained model to assess")
    model = session.model
    n = max(3, session.config.n_representatives)
    C, _ = session.ref.live_activations(model)
    gram = (C.T @ C) / C.shape[0]  # kappa_act at rho=1 between live concepts
    packets = []
    for j in range(model.k):
        reps = representatives(model, j, session.dataset, n)
        overlays = [concept_attribution(model, j, _entry_by_id(session, rid).raster)
                    for rid, _, _ in reps]
        packets.append(ConceptPacket(
            concept=j,
            owner_class=int(model.owner_class[j]),
            representatives=reps,
            overlays=overlays,
            weights=model.weights[:, j].copy(),
            kappa_row=gram[j].copy(),
        ))
    packets.sort(key=lambda p: (-float(np.max(np.abs(p.weights))), p.concept))
    return packets


def _validate_feedback(session: DebugSession, fb: Feedback) -> None:
    if fb.kind not in FEEDBACK_KINDS:
        raise FeedbackError(f"unknown feedback kind {fb.kind!r}")
    k = session.model.k if session.model is not None else session.k
    v = session.dataset.config.v
    if fb.kind == "mark_irrelevant":
        if fb.concept is None or not 0 <= fb.concept < k:
            raise FeedbackError(f"concept index {fb.concept} out of range [0, {k})")
        if fb.scope is None:
            raise FeedbackError("mark_irrelevant needs a scope")
        if fb.scope.y is not None and not 0 <= fb.scope.y < v:
            raise FeedbackError(f"scope class {fb.scope.y} out of range [0, {v})")
        if fb.scope.kind == "instance":
            _entry_by_id(session, fb.scope.x_id)
    elif fb.kind == "concept_label":
        if fb.concept is None or not 0 <= fb.concept < k:
            raise FeedbackError(f"concept index {fb.concept} out of range [0, {k})")
        if fb.desired not in (0, 1, 0.0, 1.0):
            raise FeedbackError("desired activation must be 0 or 1")
        _entry_by_id(session, fb.image_id)
    elif fb.kind == "concept_region":
        if fb.concept is None or not 0 <= fb.concept < k:
            raise FeedbackError(f"concept index {fb.concept} out of range [0, {k})")
        entry = _entry_by_id(session, fb.image_id)
        if fb.region is None or fb.region.shape != entry.raster.shape[:2]:
            raise FeedbackError("region mask must match the image resolution")
    elif fb.kind == "mark_relevant":
        if fb.concept is None or not 0 <= fb.concept < k:
            raise FeedbackError(f"concept index {fb.concept} out of range [0, {k})")
        if fb.class_index is None or not 0 <= fb.class_index < v:
            raise FeedbackError(f"class {fb.class_index} out of range [0, {v})")


def submit_feedback(session: DebugSession, fb: Feedback) -> DebugSession:
    """Validate and apply one feedback event; the log is append-only."""
    if session.state not in ("awaiting_feedback", "stable"):
        raise SessionStateError(f"cannot accept feedback in state {session.state!r}")
    _validate_feedback(session, fb)
    fb.round = session.round
    fs = session.feedback_state
    k = session.model.k if session.model is not None else session.k
    if fb.kind == "mark_irrelevant":
        K.insert(session.memory, session.model, fb.concept, fb.scope, session.ref,
                 created_round=session.round)
        if fb.scope.kind == "instance":
            mask = fs.instance_masks.setdefault(fb.scope.x_id, np.ones(k))
            mask[fb.concept] = 0.0
        elif fb.scope.kind == "class":
            mask = fs.class_masks.setdefault(fb.scope.y, np.ones(k))
            mask[fb.concept] = 0.0
        else:  # global
            for y in range(session.dataset.config.v):
                mask = fs.class_masks.setdefault(y, np.ones(k))
                mask[fb.concept] = 0.0
    elif fb.kind == "concept_label":
        fs.concept_labels.setdefault(fb.image_id, []).append(
            (fb.concept, float(fb.desired)))
    elif fb.kind == "concept_region":
        fs.concept_regions.setdefault(fb.image_id, []).append(
            (fb.concept, fb.region.astype(np.float64)))
    elif fb.kind == "mark_relevant":
        fs.relevant.setdefault(fb.class_index, set()).add(fb.concept)
    session.feedback_log.append(fb)
    if session.state == "stable":
        session.state = "awaiting_feedback"
    return session


def begin_round(session: DebugSession) -> None:
    """Validate the state machine and mark the session as training."""
    if session.state not in ("idle", "awaiting_feedback"):
        raise SessionStateError(f"cannot start a round in state {session.state!r}")
    session.state = "training"


def execute_round(session: DebugSession, schedule: Schedule | None = None,
                  loss_spec: losses.LossSpec | None = None, callback=None
                  ) -> DebugSession:
    """Run the training for a round begun with begin_round."""
    if session.state != "training":
        raise SessionStateError("execute_round requires a session in state 'training'")
    schedule = schedule or session.config.schedule
    loss_spec = loss_spec or session.config.loss_spec
    offset = len(session.history)

    def _cb(record):
        record.epoch += offset
        session.history.append(record)
        if callback:
            callback(record)

    try:
        if not session.trained:
            if session.model is None:
                session.model = init_model(session.dataset, session.config.model,
                                           seed=session.config.seed)
            session.model, _ = trainer.train_initial(session.model, session.dataset,
                                                     schedule, callback=_cb,
                                                     loss_spec=loss_spec)
            session.trained = True
        else:
            session.model, _ = trainer.train_refine(
                session.model, session.dataset, schedule, loss_spec,
                memory=session.memory, feedback=session.feedback_state,
                ref=session.ref, round_index=session.round + 1, callback=_cb)
    except Exception:
        session.state = "awaiting_feedback" if session.trained else "idle"
        raise
    session.round += 1
    stable = trainer.is_stable(session.history, schedule.stability_window,
                               schedule.stability_delta)
    session.state = "stable" if stable else "awaiting_feedback"
    return session


def run_round(session: DebugSession, schedule: Schedule | None = None,
              loss_spec: losses.LossSpec | None = None, callback=None) -> DebugSession:
    """Train one round: initial fit on the first call, refinement afterwards."""
    begin_round(session)
    return execute_round(session, schedule, loss_spec, callback)


def scripted_oracle(session: DebugSession, dataset: shapes.Dataset | None = None
                    ) -> list[Feedback]:
    """Stand-in annotator: flag confounded-class concepts similar to the
    confounder template, with class scope."""
    dataset = dataset or session.dataset
    if not session.trained:
        raise SessionStateError("oracle needs a trained model")
    model = session.model
    cfg = dataset.config
    probe = trainer.confounder_probe_reference(cfg, dataset.formulas)
    sims = trainer.template_similarities(model, tuple(cfg.confounder), probe)
    theta = session.config.oracle_threshold
    out = []
    for j in range(model.k):
        if int(model.owner_class[j]) == cfg.confounded_class and sims[j] > theta:
            out.append(Feedback(kind="mark_irrelevant", author="scripted_oracle",
                                concept=j,
                                scope=K.FeedbackScope("class", y=cfg.confounded_class)))
    return out


# ---------------------------------------------------------------------------
# persistence: session directory = session.json + feedback.jsonl +
# metrics.jsonl + checkpoints/ + memory.json
# ---------------------------------------------------------------------------

def persist(session: DebugSession, root) -> Path:
    if session.state == "training":
        raise SessionStateError("cannot persist a session mid-round")
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "checkpoints").mkdir(exist_ok=True)
    checkpoint = None
    if session.model is not None:
        checkpoint = f"checkpoints/round_{session.round:03d}.json"
        persistence.save_checkpoint(session.model, root / checkpoint)
    persistence.save_memory(session.memory, root / "memory.json",
                            maps_dir=root / "memory_maps")
    with open(root / "feedback.jsonl", "w") as fh:
        for fb in session.feedback_log:
            fh.write(json.dumps(fb.to_json(), sort_keys=True) + "\n")
    with open(root / "metrics.jsonl", "w") as fh:
        for rec in session.history.records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    meta = {
        "id": session.id,
        "version": 1,
        "dataset_dir": session.dataset_dir,
        "dataset_hash": session.dataset.manifest["hash"],
        "config": session.config.to_json(),
        "state": session.state,
        "round": session.round,
        "trained": session.trained,
        "checkpoint": checkpoint,
        "epochs": len(session.history),
    }
    (root / "session.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return root


def load_session(root, dataset: shapes.Dataset | None = None) -> DebugSession:
    root = Path(root)
    meta = json.loads((root / "session.json").read_text())
    if dataset is None:
        if not meta["dataset_dir"]:
            raise SessionStateError("session has no recorded dataset directory")
        dataset = shapes.load_dataset(meta["dataset_dir"])
    if dataset.manifest["hash"] != meta["dataset_hash"]:
        raise SessionStateError("dataset hash does not match the session record")
    session = new_session(dataset, SessionConfig.from_json(meta["config"]),
                          dataset_dir=meta["dataset_dir"], session_id=meta["id"])
    session.state = meta["state"]
    session.round = meta["round"]
    session.trained = meta["trained"]
    if meta["checkpoint"]:
        session.model = persistence.load_checkpoint(root / meta["checkpoint"])
    session.memory = persistence.load_memory(root / "memory.json")
    fb_path = root / "feedback.jsonl"
    if fb_path.exists():
        for line in fb_path.read_text().splitlines():
            if line.strip():
                fb = Feedback.from_json(json.loads(line))
                session.feedback_log.append(fb)
                _apply_feedback_state(session, fb)
    return session


def _apply_feedback_state(session: DebugSession, fb: Feedback) -> None:
    """Rebuild the FeedbackState side of a logged event (memory is loaded
    separately from its own file)."""
    fs = session.feedback_state
    k = session.k
    if fb.kind == "mark_irrelevant":
        if fb.scope.kind == "instance":
            fs.instance_masks.setdefault(fb.scope.x_id, np.ones(k))[fb.concept] = 0.0
        elif fb.scope.kind == "class":
            fs.class_masks.setdefault(fb.scope.y, np.ones(k))[fb.concept] = 0.0
        else:
            for y in range(session.dataset.config.v):
                fs.class_masks.setdefault(y, np.ones(k))[fb.concept] = 0.0
    elif fb.kind == "concept_label":
        fs.concept_labels.setdefault(fb.image_id, []).append((fb.concept, fb.desired))
    elif fb.kind == "concept_region":
        fs.concept_regions.setdefault(fb.image_id, []).append((fb.concept, fb.region))
    elif fb.kind == "mark_relevant":
        fs.relevant.setdefault(fb.class_index, set()).add(fb.concept)


def replay_session(root, dataset: shapes.Dataset | None = None) -> str:
    """Re-run a persisted session from its feedback log and seeds; returns the
    final checkpoint hash (must equal the persisted one)."""
    root = Path(root)
    meta = json.loads((root / "session.json").read_text())
    if dataset is None:
        dataset = shapes.load_dataset(meta["dataset_dir"])
    config = SessionConfig.from_json(meta["config"])
    events = []
    fb_path = root / "feedback.jsonl"
    if fb_path.exists():
        for line in fb_path.read_text().splitlines():
            if line.strip():
                events.append(Feedback.from_json(json.loads(line)))
    session = new_session(dataset, config, dataset_dir=meta["dataset_dir"],
                          session_id=meta["id"] + "-replay")
    for _ in range(meta["round"]):
        run_round(session)
        for fb in events:
            if fb.round == session.round:
                submit_feedback(session, fb)
    return persistence.checkpoint_hash(session.model)
