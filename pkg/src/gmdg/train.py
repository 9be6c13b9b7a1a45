"""Source-domain training with heavy paired augmentation."""
import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .augmentation import augmentation_config, sample_heavy_transform
from .checkpoint import Checkpoint
from .model import architecture_for, build_model

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 24
    learning_rate: float = 1e-4
    iterations: int = 10000
    seed: int = 0
    augment: bool = True
    augmentation: dict = field(default_factory=dict)
    profile: str = "full"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        augmentation_config(self.augmentation)

    def to_dict(self):
        return asdict(self)


def compute_class_prior(labels, num_classes=None):
    """Pixel frequency of each class over a collection of label masks."""
    masks = [np.asarray(m) for m in labels] if not isinstance(labels, np.ndarray) else [labels]
    if not masks or all(m.size == 0 for m in masks):
        raise ValueError("cannot compute a class prior from no labels")
    top = max(int(m.max()) for m in masks if m.size) + 1
    C = num_classes or top
    if top > C:
        raise ValueError(f"labels contain class {top - 1} but num_classes={C}")
    counts = np.zeros(C, dtype=np.int64)
    for m in masks:
        if np.any(m < 0):
            raise ValueError("negative class index in labels")
        counts += np.bincount(m.ravel().astype(np.int64), minlength=C)
    return counts / counts.sum()


def dataset_hash(images, labels):
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return h.hexdigest()


def make_batch(images, labels, idx, seeds, cfg):
    aug = augmentation_config(cfg.augmentation)
    xs, ys = [], []
    for i, s in zip(idx, seeds):
        x, y = images[i], labels[i]
        if cfg.augment:
            t = sample_heavy_transform(int(s), aug)
            x, y = t.image_fn(x), t.label_fn(y)
        xs.append(x)
        ys.append(y)
    return np.stack(xs), np.stack(ys)


def train(images, labels, cfg=None, num_classes=None, arch=None, on_step=None,
          metadata=None, dtype=torch.float32):
    """Fit a segmentation network on model-ready slices.

    ``images`` are already in the model's input representation (e.g. gradient
    maps); augmentation is applied on top of them. Returns a
    :class:`Checkpoint` whose metadata carries the training-set class prior.
    ``on_step(iteration, loss)`` is called after every optimizer step.
    """
    cfg = cfg or TrainConfig()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim == 2:
        images, labels = images[None], labels[None]
    if len(images) == 0:
        raise ValueError("empty training set")
    if images.shape != labels.shape:
        raise ValueError(f"images {images.shape} and labels {labels.shape} differ in shape")
    prior = compute_class_prior(list(labels), num_classes)
    C = len(prior)
    if arch is None:
        arch = architecture_for(cfg.profile, num_classes=C, input_size=images.shape[-2:])
    if arch.num_classes != C or tuple(arch.input_size) != images.shape[-2:]:
        raise ValueError("architecture does not match the data (classes or input size)")

    model = build_model(arch, seed=cfg.seed, dtype=dtype)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    model.train()
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(images), size=cfg.batch_size)
        seeds = rng.integers(0, 2**31 - 1, size=cfg.batch_size)
        xb, yb = make_batch(images, labels, idx, seeds, cfg)
        x = torch.from_numpy(xb[:, None]).to(dtype)
        y = torch.from_numpy(yb)
        loss = F.cross_entropy(model(x), y)
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = float(loss.detach())
        losses.append(value)
        if on_step is not None:
            on_step(it, value)
    model.eval()

    k = max(1, len(losses) // 10)
    meta = {
        "tool_version": __version__,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "optimizer": "adam",
        "augment": cfg.augment,
        "augmentation": augmentation_config(cfg.augmentation),
        "dataset_hash": dataset_hash(images, labels),
        "n_slices": int(len(images)),
        "class_prior": [float(v) for v in prior],
        "loss_first_decile": float(np.mean(losses[:k])) if losses else None,
        "loss_last_decile": float(np.mean(losses[-k:])) if losses else None,
    }
    meta.update(metadata or {})
    return Checkpoint.from_model(model, meta)
