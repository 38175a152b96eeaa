"""Whole-image prediction, the four counting metrics, and gating-response reports.

A whole-image count is the sum of eval-mode patch predictions over the image's
non-overlapping patch grid; remainder strips contribute nothing. Scores compare
against the scene's annotated dot count:

    mae = mean |t - y|          msd = sqrt(mean (t - y)^2)
    mse = mean (t - y)^2        mde = mean |t - y| / t      (needs every t > 0)
"""

from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from . import trainer as trainmod
from .errors import MetricUndefinedError, ValidationError
from .tensor import dtype_for


@dataclass
class MetricsReport:
    n_test: int
    mae: float
    msd: float
    mse: float
    mde: float = None          # None when undefined (zero-count truth present)
    rows: list = field(default_factory=list)  # (scene_id, truth, prediction)


@dataclass
class GatingRow:
    scene_id: str
    mode: str
    gate_mean: np.ndarray      # (K,), sums to 1
    dominant: int              # argmax of gate_mean
    entropy: float


def predict_image(model, scene, clamp_negative=False, batch_patches=64):
    """Grid-partition the scene and sum eval-mode patch predictions."""
    h, w = scene.image.shape
    offsets = datamod.grid_offsets(h, w)
    dtype = dtype_for(model.precision)
    total = 0.0
    for lo in range(0, len(offsets), batch_patches):
        chunk = offsets[lo:lo + batch_patches]
        x = np.stack([
            scene.image[y0:y0 + datamod.PATCH_SIZE, x0:x0 + datamod.PATCH_SIZE][None]
            for x0, y0 in chunk
        ]).astype(dtype)
        preds = model.predict_batch(x)
        if clamp_negative:
            preds = np.maximum(preds, 0.0)
        total += float(np.asarray(preds, dtype=np.float64).sum())
    return total


def score(truths, predictions, scene_ids=None, with_mde=True):
    """Build a MetricsReport; raises MetricUndefinedError if MDE is requested
    with a zero truth (the error carries the partial report)."""
    t = np.asarray(truths, dtype=np.float64)
    y = np.asarray(predictions, dtype=np.float64)
    if t.shape != y.shape or t.ndim != 1 or t.size < 1:
        raise ValidationError(f"score expects equal-length vectors, got {t.shape} and {y.shape}")
    if scene_ids is None:
        scene_ids = [str(i) for i in range(t.size)]
    d = t - y
    mae = float(np.abs(d).mean())
    mse = float((d * d).mean())
    msd = float(np.sqrt(mse))
    rows = list(zip(scene_ids, t.tolist(), y.tolist()))
    report = MetricsReport(n_test=t.size, mae=mae, msd=msd, mse=mse, rows=rows)
    if with_mde:
        zero = [sid for sid, tv in zip(scene_ids, t) if tv == 0.0]
        if zero:
            raise MetricUndefinedError(
                f"MDE undefined: zero-count truth for scenes {zero}",
                scene_ids=zero, report=report)
        report.mde = float((np.abs(d) / t).mean())
    return report


def evaluate_model(model, scenes, clamp_negative=False, with_mde=True):
    """Score a model over whole scenes; truth is the annotated dot count."""
    truths = [float(len(s.dots)) for s in scenes]
    preds = [predict_image(model, s, clamp_negative=clamp_negative) for s in scenes]
    ids = [s.id for s in scenes]
    return score(truths, preds, scene_ids=ids, with_mde=with_mde)


def gating_report(model, scenes):
    """Per image: the mean gate row over its grid patches, the dominant expert,
    and the entropy of that mean row. Returns (rows, per_mode) where per_mode
    aggregates rows by mode label (empty dict when no scene carries one)."""
    rows = []
    dtype = dtype_for(model.precision)
    for scene in scenes:
        h, w = scene.image.shape
        offsets = datamod.grid_offsets(h, w)
        x = np.stack([
            scene.image[y0:y0 + datamod.PATCH_SIZE, x0:x0 + datamod.PATCH_SIZE][None]
            for x0, y0 in offsets
        ]).astype(dtype)
        if model.kind == "moc":
            g = model.gate.forward(x, mode="eval")
        else:
            g = np.ones((x.shape[0], 1), dtype=dtype)
        mean_g = np.asarray(g, dtype=np.float64).mean(axis=0)
        rows.append(GatingRow(
            scene_id=scene.id,
            mode=scene.mode_label or "",
            gate_mean=mean_g,
            dominant=int(np.argmax(mean_g)),
            entropy=trainmod.gate_entropy(mean_g),
        ))
    per_mode = {}
    labelled = [r for r in rows if r.mode]
    for row in labelled:
        per_mode.setdefault(row.mode, []).append(row)
    aggregates = {}
    for mode, mode_rows in per_mode.items():
        mean_g = np.mean([r.gate_mean for r in mode_rows], axis=0)
        aggregates[mode] = GatingRow(
            scene_id=f"MODE:{mode}", mode=mode, gate_mean=mean_g,
            dominant=int(np.argmax(mean_g)), entropy=trainmod.gate_entropy(mean_g))
    return rows, aggregates


def crossval(config, scenes, k, seed, sigma=datamod.DEFAULT_SIGMA, crops_per_scene=80,
             clamp_negative=False, with_mde=True, fold_hook=None):
    """k-fold protocol: train on the other folds' crops, score the held-out fold.

    Returns (fold_reports, aggregate_report); the aggregate pools every
    held-out image. Fold membership and training both derive from `seed`.
    """
    by_id = {s.id: s for s in scenes}
    folds = datamod.kfold_split([s.id for s in scenes], k, seed)
    fold_reports = []
    all_ids, all_truths, all_preds = [], [], []
    for fold_idx, held_out in enumerate(folds):
        train_scenes = [by_id[sid] for fold in folds if fold is not held_out for sid in fold]
        test_scenes = [by_id[sid] for sid in held_out]
        patches = datamod.build_training_patches(train_scenes, crops_per_scene, sigma,
                                                 seed=seed * 1000 + fold_idx)
        model, _ = trainmod.train(config, patches)
        report = evaluate_model(model, test_scenes, clamp_negative=clamp_negative,
                                with_mde=with_mde)
        fold_reports.append(report)
        for sid, t, y in report.rows:
            all_ids.append(sid)
            all_truths.append(t)
            all_preds.append(y)
        if fold_hook is not None:
            fold_hook(fold_idx, model, report)
    aggregate = score(all_truths, all_preds, scene_ids=all_ids, with_mde=with_mde)
    return fold_reports, aggregate


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

FMT = "{:.12g}".format


def write_metrics_csv(path, report: MetricsReport):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("scene_id,truth,prediction,abs_err\n")
        for sid, t, y in report.rows:
            fh.write(f"{sid},{FMT(t)},{FMT(y)},{FMT(abs(t - y))}\n")
        mde = "" if report.mde is None else FMT(report.mde)
        fh.write(f"AGGREGATE,{FMT(report.mae)},{FMT(report.msd)},{FMT(report.mse)},{mde}\n")


def write_gating_csv(path, rows, aggregates, num_experts):
    with open(path, "w", encoding="utf-8") as fh:
        cols = ["scene_id", "mode", "dominant_expert", "entropy"]
        cols += [f"g_{k}" for k in range(1, num_experts + 1)]
        fh.write(",".join(cols) + "\n")
        for row in list(rows) + [aggregates[m] for m in sorted(aggregates)]:
            vals = [row.scene_id, row.mode, str(row.dominant + 1), FMT(row.entropy)]
            vals += [FMT(v) for v in row.gate_mean]
            fh.write(",".join(vals) + "\n")
