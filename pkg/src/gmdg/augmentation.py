"""Heavy training augmentation and invertible test-time transforms.

Training transforms are sampled as a :class:`PairedTransform`: one spatial
coordinate map shared by image and mask, plus intensity jitter that only
touches the image. Masks are always resampled nearest-neighbour with edge
clamping, so a transform can drop a class but never invent one.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None

FAMILIES = ("affine", "elastic", "flip", "gamma", "noise", "blur")

DEFAULT_AUGMENTATION = {
    "families": list(FAMILIES),
    "p": 0.5,
    "rotation_deg": 30.0,
    "scale": [0.8, 1.2],
    "translation": 0.1,
    "elastic_alpha": 2.0,
    "elastic_sigma": 4.0,
    "gamma": [0.7, 1.5],
    "noise_std": 0.05,
    "blur_sigma": 1.0,
}

INVERTIBLE_KINDS = ("identity", "horizontal_flip", "vertical_flip", "rotation90")


def augmentation_config(overrides=None):
    cfg = dict(DEFAULT_AUGMENTATION)
    cfg["families"] = list(cfg["families"])
    for key, value in (overrides or {}).items():
        if key not in cfg:
            raise KeyError(f"unknown augmentation option {key!r}")
        cfg[key] = value
    unknown = set(cfg["families"]) - set(FAMILIES)
    if unknown:
        raise ValueError(f"unknown augmentation families {sorted(unknown)}")
    return cfg


@dataclass
class PairedTransform:
    """A sampled augmentation; ``descriptor`` fully determines its effect."""

    seed: int
    descriptor: dict = field(default_factory=dict)

    @property
    def is_identity(self):
        return not self.descriptor["ops"]

    @property
    def is_spatial(self):
        return any(op in self.descriptor["ops"] for op in ("affine", "elastic", "flip"))

    def coordinates(self, shape):
        """Source coordinates, shape (2, H, W), that each output pixel samples."""
        h, w = shape
        yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        dy, dx = yy - cy, xx - cx
        ops = self.descriptor["ops"]
        if "flip" in ops:
            f = ops["flip"]
            if f["horizontal"]:
                dx = -dx
            if f["vertical"]:
                dy = -dy
        if "affine" in ops:
            a = ops["affine"]
            t = np.deg2rad(a["rotation_deg"])
            c, s = np.cos(t), np.sin(t)
            # inverse map: output -> input
            ty, tx = a["translate"][0] * h, a["translate"][1] * w
            ry, rx = dy - ty, dx - tx
            dy = (c * ry + s * rx) / a["scale"]
            dx = (-s * ry + c * rx) / a["scale"]
        if "elastic" in ops:
            e = ops["elastic"]
            rng = np.random.default_rng(e["seed"])
            for comp in range(2):
                field_ = ndimage.gaussian_filter(rng.uniform(-1, 1, size=shape), e["sigma"],
                                                 mode="nearest")
                peak = np.abs(field_).max()
                if peak > 0:
                    field_ = field_ / peak * e["alpha"]
                if comp == 0:
                    dy = dy + field_
                else:
                    dx = dx + field_
        return np.stack([dy + cy, dx + cx])

    def _warp(self, arr, order):
        if not self.is_spatial:
            return arr.copy()
        coords = self.coordinates(arr.shape)
        return ndimage.map_coordinates(arr, coords, order=order, mode="nearest")

    def image_fn(self, image):
        x = np.asarray(image, dtype=np.float64)
        out = self._warp(x, order=1)
        ops = self.descriptor["ops"]
        if "gamma" in ops:
            lo, hi = out.min(), out.max()
            if hi > lo:
                out = lo + (hi - lo) * ((out - lo) / (hi - lo)) ** ops["gamma"]["gamma"]
        if "blur" in ops:
            out = ndimage.gaussian_filter(out, ops["blur"]["sigma"], mode="nearest")
        if "noise" in ops:
            n = ops["noise"]
            rng = np.random.default_rng(n["seed"])
            span = out.max() - out.min()
            out = out + rng.normal(0.0, n["std"] * (span if span > 0 else 1.0), size=out.shape)
        return out

    def label_fn(self, mask):
        m = np.asarray(mask)
        return self._warp(m, order=0).astype(m.dtype)

    def __call__(self, image, mask=None):
        if mask is None:
            return self.image_fn(image)
        return self.image_fn(image), self.label_fn(mask)


def sample_heavy_transform(rng_seed, config=None):
    """Draw a random composition of the enabled augmentation families.

    Each family is switched on independently with probability ``config['p']``.
    The same seed always yields the same descriptor.
    """
    cfg = augmentation_config(config)
    rng = np.random.default_rng(rng_seed)
    ops = {}
    # one draw per family regardless of enabled set, so toggling a family
    # does not reshuffle the others
    gates = rng.random(len(FAMILIES))
    child = rng.integers(0, 2**31 - 1, size=2)
    on = {fam: bool(g < cfg["p"]) and fam in cfg["families"] for fam, g in zip(FAMILIES, gates)}
    if on["affine"]:
        ops["affine"] = {
            "rotation_deg": float(rng.uniform(-cfg["rotation_deg"], cfg["rotation_deg"])),
            "scale": float(rng.uniform(*cfg["scale"])),
            "translate": [float(v) for v in rng.uniform(-cfg["translation"], cfg["translation"], 2)],
        }
    if on["elastic"]:
        ops["elastic"] = {"alpha": float(cfg["elastic_alpha"]), "sigma": float(cfg["elastic_sigma"]),
                          "seed": int(child[0])}
    if on["flip"]:
        hv = rng.random(2) < 0.5
        if not hv.any():
            hv[0] = True
        ops["flip"] = {"horizontal": bool(hv[0]), "vertical": bool(hv[1])}
    if on["gamma"]:
        ops["gamma"] = {"gamma": float(rng.uniform(*cfg["gamma"]))}
    if on["noise"]:
        ops["noise"] = {"std": float(rng.uniform(0.0, cfg["noise_std"])), "seed": int(child[1])}
    if on["blur"]:
        ops["blur"] = {"sigma": float(rng.uniform(0.0, cfg["blur_sigma"]))}
    return PairedTransform(seed=int(rng_seed), descriptor={"ops": ops})


def _check_kind(kind):
    if kind not in INVERTIBLE_KINDS:
        raise ValueError(f"{kind!r} is not an invertible transform; choose from {INVERTIBLE_KINDS}")


def _is_torch(z):
    return torch is not None and isinstance(z, torch.Tensor)


def tta_forward(z, kind="horizontal_flip"):
    """Apply an invertible spatial transform to the last two axes of ``z``.

    Works on numpy arrays and torch tensors of any leading shape, so the
    same call handles slices, class-logit maps and batches.
    """
    _check_kind(kind)
    if kind == "identity":
        return z
    if _is_torch(z):
        if kind == "horizontal_flip":
            return z.flip(-1)
        if kind == "vertical_flip":
            return z.flip(-2)
        return torch.rot90(z, 1, dims=(-2, -1))
    if kind == "horizontal_flip":
        return np.flip(z, axis=-1).copy()
    if kind == "vertical_flip":
        return np.flip(z, axis=-2).copy()
    return np.rot90(z, 1, axes=(-2, -1)).copy()


def tta_inverse(z, kind="horizontal_flip"):
    _check_kind(kind)
    if kind != "rotation90":
        return tta_forward(z, kind)
    if _is_torch(z):
        return torch.rot90(z, -1, dims=(-2, -1))
    return np.rot90(z, -1, axes=(-2, -1)).copy()


@dataclass(frozen=True)
class InvertibleTransform:
    kind: str = "horizontal_flip"

    def __post_init__(self):
        _check_kind(self.kind)

    def forward(self, z):
        return tta_forward(z, self.kind)

    def inverse(self, z):
        return tta_inverse(z, self.kind)
