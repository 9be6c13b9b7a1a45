"""Volumetric Dice, ablation experiments and report tables."""
import logging
import os
import time

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import PhantomSpec, generate_phantom_set, load_nifti_dataset
from .estimators import GMRSegmenter
from .pitta import AdaptationConfig

log = logging.getLogger(__name__)

ARMS = ("SrcOnly(raw)", "SrcOnly(GMR)", "raw+PITTA", "GMR+PITTA")
# arm -> (representation, adapt)
ARM_SPEC = {
    "SrcOnly(raw)": ("raw", False),
    "SrcOnly(GMR)": ("gmr", False),
    "raw+PITTA": ("raw", True),
    "GMR+PITTA": ("gmr", True),
}


def volumetric_dice(pred, truth, class_id, empty_value=1.0):
    """Dice of one class over a whole case; ``empty_value`` when the class is
    absent from both volumes."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    a, b = pred == class_id, truth == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return empty_value
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def case_scores(preds, truths, classes, empty_nan=False):
    """Dice per case and class, shape (n_cases, n_classes)."""
    empty = float("nan") if empty_nan else 1.0
    return np.array([[volumetric_dice(p, t, c, empty) for c in classes]
                     for p, t in zip(preds, truths)], dtype=np.float64)


def aggregate(arm, scores_by_seed, classes):
    """Report rows for one arm.

    ``scores_by_seed`` is a list (one per seed) of (n_cases, n_classes)
    arrays. Cases are averaged within a seed, then mean and population std are
    taken across seeds.
    """
    per_seed = np.array([np.nanmean(s, axis=0) for s in scores_by_seed])
    rows = []
    for j, c in enumerate(classes):
        col = per_seed[:, j]
        rows.append({"arm": arm, "class": int(c), "mean": float(np.mean(col)),
                     "std": float(np.std(col)), "n_cases": int(scores_by_seed[0].shape[0]),
                     "n_seeds": len(scores_by_seed)})
    avg = per_seed.mean(axis=1)
    rows.append({"arm": arm, "class": "average", "mean": float(np.mean(avg)),
                 "std": float(np.std(avg)), "n_cases": int(scores_by_seed[0].shape[0]),
                 "n_seeds": len(scores_by_seed)})
    return rows


def rows_for(report, arm):
    return {r["class"]: r for r in report["rows"] if r["arm"] == arm}


def format_table(report, class_names=None):
    """Markdown table with one row per arm and check marks per component."""
    classes = report["classes"]
    names = class_names or report.get("class_names") or {}
    head = ["HA", "GMR", "PITTA"] + [str(names.get(str(c), c)) for c in classes] + ["Average"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for arm in report["arms"]:
        rep, adapt = ARM_SPEC.get(arm, ("?", False))
        rows = rows_for(report, arm)
        cells = ["✓", "✓" if rep == "gmr" else "", "✓" if adapt else ""]
        for key in list(classes) + ["average"]:
            r = rows[key]
            cells.append(f"{r['mean']:.4f} ± {r['std']:.4f}")
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def format_csv(report):
    lines = ["arm,class,mean,std,n_cases,n_seeds"]
    for r in report["rows"]:
        lines.append(f"{r['arm']},{r['class']},{r['mean']!r},{r['std']!r},{r['n_cases']},{r['n_seeds']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- experiments

def _phantom_data(cfg):
    spec = PhantomSpec.from_dict(cfg["spec"])
    train_pairs = generate_phantom_set(spec, cfg["n_train"], cfg.get("train_seed", 0))
    test_spec = PhantomSpec.from_dict({**cfg["spec"], **cfg.get("test_overrides", {})})
    test_pairs = generate_phantom_set(test_spec, cfg["n_test"], cfg.get("test_seed", 100000))
    X = np.concatenate([a.image for a, _, _ in train_pairs])
    y = np.concatenate([lab for _, _, lab in train_pairs])
    cases = [(b.case_id, b.image, lab) for _, b, lab in test_pairs]
    return X, y, cases, spec.num_classes


def _nifti_data(cfg):
    kw = dict(profile=cfg.get("profile"), source_modality=cfg["source_modality"])
    train_recs = load_nifti_dataset(cfg["dir"], cfg["source_modality"], cfg.get("manifest"),
                                    split="train", require_labels=True, **kw)
    test_recs = load_nifti_dataset(cfg["dir"], cfg["target_modality"], cfg.get("manifest"),
                                   split="test", require_labels=True, **kw)
    X = np.concatenate([r.image for r in train_recs])
    y = np.concatenate([r.label for r in train_recs])
    cases = [(r.case_id, r.image, r.label) for r in test_recs]
    C = int(max(y.max(), max(int(c[2].max()) for c in cases))) + 1
    return X, y, cases, cfg.get("num_classes", C)


def load_experiment_data(config):
    ds = config["dataset"]
    if "phantom" in ds:
        return _phantom_data(ds["phantom"])
    if "nifti" in ds:
        return _nifti_data(ds["nifti"])
    raise ValueError("dataset must define 'phantom' or 'nifti'")


def train_arm_model(representation, seed, X, y, num_classes, train_cfg, checkpoint_dir=None):
    path = None
    if checkpoint_dir:
        path = os.path.join(checkpoint_dir, f"{representation}_seed{seed}.ckpt")
        if os.path.exists(path):
            return GMRSegmenter.from_checkpoint(load_checkpoint(path))
    est = GMRSegmenter(representation=representation, num_classes=num_classes,
                       random_state=seed, **train_cfg)
    t0 = time.time()
    est.fit(X, y)
    log.info("trained %s seed %d in %.1fs", representation, seed, time.time() - t0)
    if path:
        os.makedirs(checkpoint_dir, exist_ok=True)
        save_checkpoint(est.checkpoint_, path)
    return est


def predict_case(est, image, adaptation):
    est.adaptation = adaptation
    try:
        return est.predict(image)
    finally:
        est.adaptation = None


def run_experiment(config, data=None, models=None):
    """Train/evaluate every arm over every seed and return a report dict.

    ``config`` keys: ``arms``, ``seeds``, ``dataset``, ``train`` (estimator
    training parameters), ``adapt`` (adaptation parameters), ``classes``
    (scored class ids, default all foreground), ``checkpoint_dir``,
    ``empty_nan``. ``models`` may map (representation, seed) to a fitted
    :class:`GMRSegmenter` to skip training.
    """
    arms = list(config.get("arms", ARMS))
    unknown = set(arms) - set(ARM_SPEC)
    if unknown:
        raise ValueError(f"unknown arms {sorted(unknown)}")
    seeds = list(config.get("seeds", [0]))
    X, y, cases, C = data if data is not None else load_experiment_data(config)
    classes = list(config.get("classes") or range(1, C))
    adapt_cfg = AdaptationConfig(**config.get("adapt", {}))
    models = dict(models or {})
    scores = {arm: [] for arm in arms}
    per_case = []
    for seed in seeds:
        for arm in arms:
            rep, adapt = ARM_SPEC[arm]
            if (rep, seed) not in models:
                models[(rep, seed)] = train_arm_model(rep, seed, X, y, C, config.get("train", {}),
                                                      config.get("checkpoint_dir"))
            est = models[(rep, seed)]
            preds = [predict_case(est, img, adapt_cfg if adapt else None) for _, img, _ in cases]
            s = case_scores(preds, [t for _, _, t in cases], classes, config.get("empty_nan", False))
            scores[arm].append(s)
            for (cid, _, _), row in zip(cases, s):
                per_case.append({"arm": arm, "seed": seed, "case_id": cid,
                                 "dice": {str(c): float(v) for c, v in zip(classes, row)}})
    rows = []
    for arm in arms:
        rows.extend(aggregate(arm, scores[arm], classes))
    return {"arms": arms, "seeds": seeds, "classes": classes, "rows": rows,
            "per_case": per_case, "class_names": config.get("class_names", {})}
