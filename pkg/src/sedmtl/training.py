"""Two-stage training: teacher on hard scene labels, then the multitask
student under the event loss plus a weighted scene term.

Modes:
  teacher     scene classifier minimizing the hard softmax cross-entropy
  event_only  student trained on the event loss alone (the CRNN baseline)
  mtl_hard    event loss + alpha * hard scene loss
  mtl_soft    event loss + beta * soft scene loss against frozen teacher
              outputs softened at temperature T

Every run is deterministic given (config, seed, data): parameter init,
batch order and the optimizer all draw from seeded generators, and ops are
single-threaded per run. Cross-validation fans runs out per (fold, seed).
"""

import json
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from . import losses, networks
from .data import EventRoll, chunk_clips
from .errors import ConfigError, DataError, DimensionError
from .features import LogMelSpectrogram, compute_band_stats, standardize
from .losses import SceneTarget

MODES = ("teacher", "mtl_hard", "mtl_soft", "event_only")


@dataclass
class TrainConfig:
    mode: str
    alpha: float = 0.0
    beta: float = 0.0
    temperature: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    fold: int = 0
    chunk_len: int = 500

    def to_dict(self) -> dict:
        return asdict(self)


_CONFIG_FIELDS = {
    "mode": str,
    "alpha": (int, float),
    "beta": (int, float),
    "temperature": (int, float),
    "learning_rate": (int, float),
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "seed": int,
    "fold": int,
    "chunk_len": int,
}


def validate_config(doc: dict) -> TrainConfig:
    """Build a TrainConfig from a plain dict, reporting every violation."""
    problems = []
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for key in doc:
        if key not in _CONFIG_FIELDS:
            problems.append(f"unknown field {key!r}")
    for key, types in _CONFIG_FIELDS.items():
        if key not in doc:
            continue
        if isinstance(doc[key], bool) or not isinstance(doc[key], types):
            problems.append(f"field {key!r} has wrong type")
    mode = doc.get("mode")
    if mode is None:
        problems.append("field 'mode' is required")
    elif mode not in MODES:
        problems.append(f"mode must be one of {MODES}, got {mode!r}")
    checks = [
        ("alpha", lambda v: v >= 0, "must be >= 0"),
        ("beta", lambda v: v >= 0, "must be >= 0"),
        ("temperature", lambda v: v > 0, "must be > 0"),
        ("learning_rate", lambda v: v > 0, "must be > 0"),
        ("batch_size", lambda v: v >= 1, "must be >= 1"),
        ("max_epochs", lambda v: v >= 1, "must be >= 1"),
        ("patience", lambda v: v >= 0, "must be >= 0"),
        ("fold", lambda v: v >= -1, "must be >= -1 (-1 trains and validates on all clips)"),
        ("chunk_len", lambda v: v >= 1, "must be >= 1"),
    ]
    for key, ok, why in checks:
        value = doc.get(key)
        if value is not None and isinstance(value, (int, float)) and not ok(value):
            problems.append(f"field {key!r} {why}, got {value}")
    if problems:
        raise ConfigError("invalid config:\n  " + "\n  ".join(problems))
    return TrainConfig(**doc)


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.moments: dict[str, tuple] = {}


def adam_step(
    params: networks.ModelParams,
    grads: dict,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """Bias-corrected adaptive-moment update, in place."""
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != tensor.values.shape:
            raise DimensionError(
                f"gradient for {name!r} has shape {g.shape}, expected {tensor.values.shape}"
            )
        m, v = state.moments.get(
            name, (np.zeros_like(tensor.values), np.zeros_like(tensor.values))
        )
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        tensor.values = tensor.values - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.moments[name] = (m, v)


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class ClipExample:
    """One clip's features, scene index, and frame-level event targets."""

    clip_id: str
    features: LogMelSpectrogram
    scene: int
    roll: EventRoll


def standardize_split(examples: dict, train_ids) -> dict:
    """Standardize every clip with per-band stats from the training ids only."""
    stats = compute_band_stats([examples[c].features for c in sorted(train_ids)])
    out = {}
    for clip_id, ex in examples.items():
        out[clip_id] = ClipExample(
            clip_id=ex.clip_id,
            features=standardize(ex.features, stats),
            scene=ex.scene,
            roll=ex.roll,
        )
    return out


@dataclass
class TrainResult:
    params: networks.ModelParams
    log: list
    best_epoch: int
    best_metric: float


def _mean_grads(params: networks.ModelParams, batch_len: int) -> dict:
    return {
        name: t.grad / batch_len
        for name, t in params.items()
        if t.grad is not None
    }


def _early_stop_loop(config, run_epoch, eval_metric, params):
    """Shared epoch loop: train, evaluate, snapshot the best, stop on patience."""
    log = []
    best_metric = -np.inf
    best_epoch = -1
    best_snapshot = params.copy_values()
    since_best = 0
    for epoch in range(1, config.max_epochs + 1):
        train_losses = run_epoch()
        metric_name, metric, extra = eval_metric()
        record = {
            "epoch": epoch,
            "train_losses": train_losses,
            "val_metrics": {metric_name: metric, **extra},
        }
        log.append(record)
        if metric > best_metric:
            best_metric = metric
            best_epoch = epoch
            best_snapshot = params.copy_values()
            since_best = 0
        else:
            since_best += 1
            if since_best > config.patience:
                break
    params.set_values(best_snapshot)
    return TrainResult(params=params, log=log, best_epoch=best_epoch, best_metric=best_metric)


# ---------------------------------------------------------------------------
# teacher


def teacher_accuracy(params: networks.ModelParams, clips) -> float:
    correct = 0
    for clip in clips:
        logits = networks.teacher_forward(params, clip.features).values
        correct += int(np.argmax(logits)) == clip.scene
    return correct / len(clips)


def train_teacher(
    train_clips, val_clips, config: TrainConfig, n_scenes: int | None = None
) -> TrainResult:
    """Minimize the hard scene loss; early stop on validation scene accuracy."""
    if config.mode != "teacher":
        raise ConfigError(f"train_teacher needs mode 'teacher', got {config.mode!r}")
    if not train_clips:
        raise DataError("teacher training fold is empty")
    if not val_clips:
        raise DataError("teacher validation fold is empty")
    if n_scenes is None:
        n_scenes = max(c.scene for c in list(train_clips) + list(val_clips)) + 1
    params = networks.init_teacher_params(n_scenes, config.seed)
    state = AdamState()
    rng = np.random.default_rng(config.seed)
    order_pool = list(train_clips)

    def run_epoch():
        order = rng.permutation(len(order_pool))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [order_pool[i] for i in order[start : start + config.batch_size]]
            ad.zero_grads(params.tensors())
            for clip in batch:
                with ad.Tape() as tape:
                    logits = networks.teacher_forward(params, clip.features)
                    loss = losses.scene_hard_loss(
                        logits, SceneTarget.one_hot(clip.scene, n_scenes)
                    )
                tape.backward(loss)
                total += loss.item()
            adam_step(params, _mean_grads(params, len(batch)), state, config.learning_rate)
        ad.zero_grads(params.tensors())
        return {"scene_hard": total / len(order_pool)}

    def eval_metric():
        return "scene_accuracy", teacher_accuracy(params, val_clips), {}

    return _early_stop_loop(config, run_epoch, eval_metric, params)


def compute_soft_labels(params: networks.ModelParams, clips, temperature: float) -> dict:
    """Frozen-teacher soft label per clip: temperature softmax of its logits."""
    out = {}
    for clip in clips:
        if clip.features is None:
            raise DataError(f"clip {clip.clip_id!r} has no features")
        logits = networks.teacher_forward(params, clip.features).values
        out[clip.clip_id] = losses.distill_targets(logits, temperature)
    return out


def save_soft_labels(path, labels: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: list(v) for k, v in sorted(labels.items())}, fh, indent=2)
        fh.write("\n")


def load_soft_labels(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return {k: np.asarray(v, dtype=np.float64) for k, v in doc.items()}


# ---------------------------------------------------------------------------
# student


def student_posteriors(params: networks.ModelParams, clip) -> np.ndarray:
    event_logits, _ = networks.student_forward(params, clip.features)
    return ad.sigmoid(event_logits).values


def evaluate_student(
    params: networks.ModelParams,
    clips,
    policy: ev.ThresholdPolicy,
    smooth_window: int = ev.DEFAULT_SMOOTH_WINDOW,
    segment_s: float = ev.DEFAULT_SEGMENT_S,
) -> dict:
    """Pool segment counts over clips; returns f1/er plus the raw counts."""
    counts = ev.SegmentCounts()
    hop = clips[0].roll.hop_seconds
    for clip in clips:
        pred = ev.binarize(student_posteriors(params, clip), policy, smooth_window)
        counts = counts.merge(
            ev.segment_counts(clip.roll.data, pred, hop, segment_s)
        )
    return {
        "f1": ev.f1_score(counts),
        "er": ev.error_rate(counts),
        "counts": counts,
    }


def _scene_term(mode, scene_logits, clip, n_scenes, soft_labels, temperature):
    if mode == "mtl_hard":
        return losses.scene_hard_loss(
            scene_logits, SceneTarget.one_hot(clip.scene, n_scenes)
        )
    return losses.soft_scene_loss(scene_logits, soft_labels[clip.clip_id], temperature)


def train_student(
    train_clips,
    val_clips,
    config: TrainConfig,
    soft_labels: dict | None = None,
    n_scenes: int | None = None,
) -> TrainResult:
    """Minimize the mode's objective over fixed-length chunks; early stop on
    validation segment F1 at a fixed 0.5 threshold.
    """
    if config.mode not in ("event_only", "mtl_hard", "mtl_soft"):
        raise ConfigError(f"train_student cannot run mode {config.mode!r}")
    if config.mode == "mtl_soft":
        if soft_labels is None:
            raise ConfigError("mode mtl_soft needs soft labels")
        missing = [c.clip_id for c in train_clips if c.clip_id not in soft_labels]
        if missing:
            raise ConfigError(f"soft labels missing for clips: {missing}")
    if not train_clips:
        raise DataError("student training fold is empty")

    if n_scenes is None:
        n_scenes = max(c.scene for c in list(train_clips) + list(val_clips)) + 1
    n_events = train_clips[0].roll.data.shape[0]
    params = networks.init_student_params(n_scenes, n_events, config.seed)
    state = AdamState()
    rng = np.random.default_rng(config.seed)

    items = []  # (chunk, clip) pairs; the chunk inherits its clip's scene target
    for clip in train_clips:
        for chunk in chunk_clips(clip.features, clip.roll, config.chunk_len, clip.clip_id):
            items.append((chunk, clip))
    val_policy = ev.ThresholdPolicy("fixed", 0.5)

    def run_epoch():
        order = rng.permutation(len(items))
        event_total = 0.0
        scene_total = 0.0
        unit_total = 0
        for start in range(0, len(order), config.batch_size):
            batch = [items[i] for i in order[start : start + config.batch_size]]
            ad.zero_grads(params.tensors())
            for chunk, clip in batch:
                with ad.Tape() as tape:
                    event_logits, scene_logits = networks.student_forward(
                        params, chunk.features
                    )
                    e1 = losses.event_loss(event_logits, chunk.roll, chunk.mask)
                    if config.mode == "event_only":
                        loss = e1
                    elif config.mode == "mtl_hard":
                        term = _scene_term(
                            "mtl_hard", scene_logits, clip, n_scenes, None, None
                        )
                        loss = losses.mtl_objective(e1, term, config.alpha)
                    else:
                        term = _scene_term(
                            "mtl_soft", scene_logits, clip, n_scenes,
                            soft_labels, config.temperature,
                        )
                        loss = losses.proposed_objective(e1, term, config.beta)
                tape.backward(loss)
                event_total += e1.item()
                scene_total += loss.item() - e1.item()
                unit_total += n_events * int(chunk.mask.sum())
            adam_step(params, _mean_grads(params, len(batch)), state, config.learning_rate)
        ad.zero_grads(params.tensors())
        return {
            "event": event_total / len(items),
            "scene_term": scene_total / len(items),
            "total": (event_total + scene_total) / len(items),
            "event_per_unit": event_total / unit_total,
        }

    def eval_metric():
        scores = evaluate_student(params, val_clips, val_policy)
        return "f1", scores["f1"], {"er": scores["er"]}

    return _early_stop_loop(config, run_epoch, eval_metric, params)


# ---------------------------------------------------------------------------
# cross-validation driver


def _cv_single(payload):
    """Train and evaluate everything for one (fold, seed); a worker job."""
    examples, fold_split, base, modes, seed, fold, eval_cfg, n_scenes = payload
    train_ids = sorted(c for c, f in fold_split.assignment.items() if f != fold)
    val_ids = sorted(c for c, f in fold_split.assignment.items() if f == fold)
    split = standardize_split(examples, train_ids)
    train_clips = [split[c] for c in train_ids]
    val_clips = [split[c] for c in val_ids]

    soft_labels = None
    if "mtl_soft" in modes:
        teacher_cfg = TrainConfig(**{**base, "mode": "teacher", "seed": seed, "fold": fold})
        teacher = train_teacher(train_clips, val_clips, teacher_cfg, n_scenes=n_scenes)
        soft_labels = compute_soft_labels(
            teacher.params, train_clips, base.get("temperature", 1.0)
        )

    results = []
    for mode in modes:
        cfg = TrainConfig(**{**base, "mode": mode, "seed": seed, "fold": fold})
        result = train_student(
            train_clips, val_clips, cfg,
            soft_labels=soft_labels if mode == "mtl_soft" else None,
            n_scenes=n_scenes,
        )
        policy, smooth = _make_eval_policy(result.params, train_clips, eval_cfg)
        scores = evaluate_student(result.params, val_clips, policy, smooth)
        per_event = pooled_per_event(
            result.params, val_clips, policy, smooth, eval_cfg.get("event_names")
        )
        results.append(
            {
                "fold": fold,
                "seed": seed,
                "mode": mode,
                "f1": scores["f1"],
                "er": scores["er"],
                "best_epoch": result.best_epoch,
                "per_event": per_event,
            }
        )
    return results


def _make_eval_policy(params, reference_clips, eval_cfg):
    smooth = eval_cfg.get("smooth_window", ev.DEFAULT_SMOOTH_WINDOW)
    if eval_cfg.get("policy", "fixed") == "calibrated":
        pairs = [
            (student_posteriors(params, clip), clip.roll) for clip in reference_clips
        ]
        thresholds = ev.calibrate_thresholds(
            pairs, eval_cfg.get("grid", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]),
            smooth_window=smooth, hop_s=reference_clips[0].roll.hop_seconds,
        )
        return ev.ThresholdPolicy("calibrated", per_class=thresholds), smooth
    return ev.ThresholdPolicy("fixed", eval_cfg.get("threshold", 0.5)), smooth


def pooled_per_event(params, clips, policy, smooth, event_names=None):
    # Segment counts must not straddle clip boundaries, so merge per clip.
    hop = clips[0].roll.hop_seconds
    n_events = clips[0].roll.data.shape[0]
    if event_names is None:
        event_names = [str(i) for i in range(n_events)]
    pooled = [ev.SegmentCounts() for _ in range(n_events)]
    for clip in clips:
        pred = ev.binarize(student_posteriors(params, clip), policy, smooth)
        for m in range(n_events):
            pooled[m] = pooled[m].merge(
                ev.segment_counts(clip.roll.data[m : m + 1], pred[m : m + 1], hop)
            )
    return [
        {
            "event": name,
            "f1": ev.f1_score(counts),
            "f1_defined": ev.f1_defined(counts),
            "er": ev.error_rate(counts),
            "er_defined": ev.er_defined(counts),
        }
        for name, counts in zip(event_names, pooled)
    ]


def run_cross_validation(
    examples: dict,
    fold_split,
    base_config: dict,
    modes,
    seeds,
    eval_cfg: dict | None = None,
    workers: int = 1,
) -> dict:
    """Train per (fold, seed) and aggregate mean F1/ER per mode across runs."""
    eval_cfg = eval_cfg or {}
    for mode in modes:
        if mode not in ("event_only", "mtl_hard", "mtl_soft"):
            raise ConfigError(f"cross-validation cannot run mode {mode!r}")
    n_scenes = max(ex.scene for ex in examples.values()) + 1
    jobs = [
        (examples, fold_split, base_config, list(modes), seed, fold, eval_cfg, n_scenes)
        for fold in range(fold_split.n_folds)
        for seed in seeds
    ]
    if workers > 1:
        import multiprocessing

        with multiprocessing.Pool(workers) as pool:
            nested = pool.map(_cv_single, jobs)
    else:
        nested = [_cv_single(job) for job in jobs]
    runs = [r for batch in nested for r in batch]
    runs.sort(key=lambda r: (r["fold"], r["seed"], r["mode"]))

    aggregate = {}
    for mode in modes:
        mode_runs = [r for r in runs if r["mode"] == mode]
        aggregate[mode] = {
            "f1": float(np.mean([r["f1"] for r in mode_runs])),
            "er": float(np.mean([r["er"] for r in mode_runs])),
            "n_runs": len(mode_runs),
        }
    return {"runs": runs, "aggregate": aggregate}
