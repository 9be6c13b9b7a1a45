"""Case records, NIfTI ingestion and the synthetic cross-modal phantom.

Volumes are held slice-first as ``(D, H, W)`` arrays. On disk they are NIfTI
files named ``<case_id>_<modality>.nii.gz`` with labels in
``<case_id>_label.nii.gz``; the stored voxel order is ``(H, W, D)``.
"""
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

CROP_SIZE = (128, 128)
TEST_FRACTION = 0.1

RING, INNER, OUTER = 1, 2, 3


class DatasetError(ValueError):
    pass


@dataclass
class CaseRecord:
    case_id: str
    modality: str
    image: np.ndarray
    label: Optional[np.ndarray] = None
    spacing: tuple = (1.0, 1.0, 1.0)
    split: str = "train"

    def __post_init__(self):
        if not self.modality:
            raise DatasetError("modality tag must be nonempty")
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.label is not None:
            self.label = np.asarray(self.label, dtype=np.int64)
            if self.label.ndim == 2:
                self.label = self.label[None]
            if self.label.shape != self.image.shape:
                raise DatasetError(
                    f"{self.case_id}: image {self.image.shape} and label {self.label.shape} differ")


# ---------------------------------------------------------------- phantoms

def _default_intensities():
    return {"A": [0.0, 0.35, 0.9, 0.6], "B": [0.0, 0.35, 0.9, 0.6]}


def _default_styles():
    return {"A": {"gain": 1.0, "bias": 0.0, "gamma": 1.0},
            "B": {"gain": 1.0, "bias": 0.0, "gamma": 1.0}}


@dataclass
class PhantomSpec:
    """Parameters of a two-modality phantom.

    Geometry is a set of concentric ellipses: an outer disc (class 3), a ring
    (class 1) and the disc inside the ring (class 2) on background 0. With
    ``num_structures`` 1 or 2 only the ring, or ring and inner disc, exist.
    ``lesion`` adds an intensity offset to a blob inside ``lesion['class']``
    in modality B only.
    """

    size: tuple = (128, 128)
    num_structures: int = 3
    n_slices: int = 1
    intensities: dict = field(default_factory=_default_intensities)
    noise_std: float = 0.02
    styles: dict = field(default_factory=_default_styles)
    lesion: Optional[dict] = None
    seed: int = 0

    def __post_init__(self):
        self.size = tuple(self.size)
        if not 1 <= self.num_structures <= 3:
            raise ValueError("num_structures must be 1, 2 or 3")
        for mod in ("A", "B"):
            if len(self.intensities[mod]) < self.num_classes:
                raise ValueError(f"intensity map for {mod} needs {self.num_classes} entries")
        if self.lesion is not None and self.lesion.get("class", RING) >= self.num_classes:
            raise ValueError("lesion class does not exist in this phantom")

    @property
    def num_classes(self):
        return self.num_structures + 1

    def to_dict(self):
        d = dict(self.__dict__)
        d["size"] = list(self.size)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def with_seed(self, seed):
        d = self.to_dict()
        d["seed"] = int(seed)
        return PhantomSpec.from_dict(d)


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    u = (yy - cy) * c + (xx - cx) * s
    v = -(yy - cy) * s + (xx - cx) * c
    return (u / ry) ** 2 + (v / rx) ** 2


def phantom_geometry(spec: PhantomSpec):
    """Sample the analytic region definitions; returns a dict of parameters."""
    rng = np.random.default_rng([spec.seed, 0])
    h, w = spec.size
    s = min(h, w)
    geo = {
        "cy": (h - 1) / 2 + rng.uniform(-0.08, 0.08) * s,
        "cx": (w - 1) / 2 + rng.uniform(-0.08, 0.08) * s,
        "theta": rng.uniform(0, math.pi),
        "aspect": rng.uniform(0.75, 1.0),
        "r_outer": rng.uniform(0.34, 0.42) * s,
        "r_ring": rng.uniform(0.22, 0.28) * s,
        "thickness": rng.uniform(0.30, 0.42),
        "ring_shift": [float(v) for v in rng.uniform(-0.04, 0.04, 2) * s],
        "lesion_angle": rng.uniform(0, 2 * math.pi),
    }
    return geo


def phantom_labels(spec: PhantomSpec, geo=None):
    """Rasterize the label volume (D, H, W) exactly from the geometry."""
    geo = geo or phantom_geometry(spec)
    h, w = spec.size
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.zeros((spec.n_slices, h, w), dtype=np.int64)
    for k in range(spec.n_slices):
        shrink = 1.0 - 0.25 * k / max(spec.n_slices - 1, 1)
        cy, cx, th = geo["cy"], geo["cx"], geo["theta"]
        ry_c, rx_c = cy + geo["ring_shift"][0], cx + geo["ring_shift"][1]
        r2 = geo["r_ring"] * shrink
        r1 = r2 * (1.0 - geo["thickness"])
        lab = out[k]
        if spec.num_structures >= 3:
            ro = geo["r_outer"] * shrink
            lab[_ellipse(yy, xx, cy, cx, ro, ro * geo["aspect"], th) <= 1.0] = OUTER
        lab[_ellipse(yy, xx, ry_c, rx_c, r2, r2 * geo["aspect"], th) <= 1.0] = RING
        if spec.num_structures >= 2:
            lab[_ellipse(yy, xx, ry_c, rx_c, r1, r1 * geo["aspect"], th) <= 1.0] = INNER
    return out


def lesion_mask(spec: PhantomSpec, labels, geo=None):
    """Boolean (D, H, W) lesion region, always a subset of the lesion class."""
    if spec.lesion is None:
        return np.zeros(labels.shape, dtype=bool)
    geo = geo or phantom_geometry(spec)
    cls = spec.lesion.get("class", RING)
    h, w = spec.size
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.zeros(labels.shape, dtype=bool)
    for k in range(labels.shape[0]):
        region = labels[k] == cls
        if not region.any():
            continue
        shrink = 1.0 - 0.25 * k / max(spec.n_slices - 1, 1)
        r2 = geo["r_ring"] * shrink
        rmid = r2 * (1.0 - geo["thickness"] / 2)
        a = geo["lesion_angle"]
        ly = geo["cy"] + geo["ring_shift"][0] + rmid * math.sin(a)
        lx = geo["cx"] + geo["ring_shift"][1] + rmid * math.cos(a) * geo["aspect"]
        rad = spec.lesion.get("radius_frac", 0.5) * r2
        blob = (yy - ly) ** 2 + (xx - lx) ** 2 <= rad ** 2
        out[k] = blob & region
    return out


def _apply_style(v, style):
    gamma = style.get("gamma", 1.0)
    if gamma != 1.0:
        v = np.clip(v, 0.0, None) ** gamma
    gain, bias = style.get("gain", 1.0), style.get("bias", 0.0)
    if gain != 1.0:
        v = gain * v
    if bias != 0.0:
        v = v + bias
    return v


def generate_phantom_pair(spec: PhantomSpec):
    """Render modalities A and B of one phantom case.

    Both share geometry, labels and the noise realization; B differs by its
    intensity map, its global style and, if configured, the lesion.
    """
    geo = phantom_geometry(spec)
    labels = phantom_labels(spec, geo)
    noise = np.random.default_rng([spec.seed, 1]).normal(0.0, spec.noise_std, labels.shape)
    lesion = lesion_mask(spec, labels, geo)
    records = []
    for mod in ("A", "B"):
        lut = np.asarray(spec.intensities[mod][:spec.num_classes], dtype=np.float64)
        img = lut[labels] + noise
        if mod == "B" and spec.lesion is not None:
            img = img + spec.lesion.get("delta", 0.5) * lesion
        img = _apply_style(img, spec.styles.get(mod, {}))
        records.append(CaseRecord(f"phantom{spec.seed:05d}", mod, img, labels.copy()))
    return records[0], records[1], labels


def generate_phantom_set(spec: PhantomSpec, count, start_seed=0):
    return [generate_phantom_pair(spec.with_seed(start_seed + i)) for i in range(count)]


# ---------------------------------------------------------------- geometry helpers

def resize2d(arr, shape, order=1):
    """Resample a 2D array to ``shape`` on a corner-aligned grid."""
    arr = np.asarray(arr)
    h, w = arr.shape
    oh, ow = shape
    if (h, w) == (oh, ow):
        return arr.copy()
    ys = np.linspace(0, h - 1, oh) if oh > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, ow) if ow > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = ndimage.map_coordinates(arr.astype(np.float64), [yy, xx], order=order, mode="nearest")
    return out.astype(arr.dtype) if order == 0 else out


def center_crop(arr, shape=CROP_SIZE):
    """Center-crop (zero-padding when smaller) the last two axes to ``shape``."""
    arr = np.asarray(arr)
    h, w = arr.shape[-2:]
    th, tw = shape
    ph, pw = max(th - h, 0), max(tw - w, 0)
    if ph or pw:
        pad = [(0, 0)] * (arr.ndim - 2) + [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)]
        arr = np.pad(arr, pad)
        h, w = arr.shape[-2:]
    top, left = (h - th) // 2, (w - tw) // 2
    return arr[..., top:top + th, left:left + tw]


def nonzero_bbox(volume):
    """In-plane bounding box (y0, y1, x0, x1), half-open, of voxels > 0."""
    mask = np.asarray(volume) > 0
    if mask.ndim == 3:
        mask = mask.any(axis=0)
    if not mask.any():
        return 0, mask.shape[0], 0, mask.shape[1]
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return rows[0], rows[-1] + 1, cols[0], cols[-1] + 1


def preprocess_volume(image, label=None, profile="cardiac", target_shape=None,
                      out_shape=CROP_SIZE):
    """Bring a (D, H, W) volume to ``out_shape`` per slice.

    cardiac: resize in-plane to ``target_shape`` (the source-modality shape)
    when given, then center crop. brain: crop the nonzero bounding box, then
    resize.
    """
    image = np.asarray(image, dtype=np.float64)
    if profile == "cardiac":
        if target_shape is not None and tuple(target_shape) != image.shape[-2:]:
            image = np.stack([resize2d(s, target_shape, 1) for s in image])
            if label is not None:
                label = np.stack([resize2d(s, target_shape, 0) for s in label])
        image = center_crop(image, out_shape)
        label = None if label is None else center_crop(label, out_shape)
    elif profile == "brain":
        y0, y1, x0, x1 = nonzero_bbox(image)
        image = image[:, y0:y1, x0:x1]
        image = np.stack([resize2d(s, out_shape, 1) for s in image])
        if label is not None:
            label = np.asarray(label)[:, y0:y1, x0:x1]
            label = np.stack([resize2d(s, out_shape, 0) for s in label])
    else:
        raise DatasetError(f"unknown preprocessing profile {profile!r}")
    return image, label


# ---------------------------------------------------------------- NIfTI I/O

def _nib():
    import nibabel
    return nibabel


def volume_path(directory, case_id, modality):
    for ext in (".nii.gz", ".nii"):
        p = os.path.join(directory, f"{case_id}_{modality}{ext}")
        if os.path.exists(p):
            return p
    return None


def read_volume(path):
    """Read a NIfTI file as ``(D, H, W)`` plus voxel spacing."""
    img = _nib().load(path)
    data = np.asarray(img.dataobj)
    if data.ndim == 2:
        data = data[..., None]
    if data.ndim != 3:
        raise DatasetError(f"{path}: expected a 3D volume, got shape {data.shape}")
    zooms = tuple(float(z) for z in img.header.get_zooms()[:3])
    return np.transpose(data, (2, 0, 1)), zooms


def write_volume(path, volume, spacing=(1.0, 1.0, 1.0), dtype=None):
    nib = _nib()
    vol = np.asarray(volume)
    if vol.ndim == 2:
        vol = vol[None]
    data = np.ascontiguousarray(np.transpose(vol, (1, 2, 0)))
    if dtype is not None:
        data = data.astype(dtype)
    elif data.dtype == np.int64:
        data = data.astype(np.int16)
    img = nib.Nifti1Image(data, np.diag(list(spacing) + [1.0]))
    img.header.set_zooms(tuple(spacing))
    nib.save(img, path)


def read_manifest(path_or_list):
    if isinstance(path_or_list, (list, tuple)):
        entries = list(path_or_list)
    else:
        with open(path_or_list) as fh:
            entries = json.load(fh)
    return split_manifest(entries)


def split_manifest(entries, test_fraction=TEST_FRACTION):
    """Resolve split tags. Untagged manifests put the last 10% (at least one
    case) into the test split, preserving manifest order."""
    if entries and isinstance(entries[0], dict):
        out = []
        for e in entries:
            if e.get("split") not in ("train", "test"):
                raise DatasetError(f"case {e.get('case_id')!r}: split must be 'train' or 'test'")
            out.append((str(e["case_id"]), e["split"]))
        return out
    ids = [str(e) for e in entries]
    n_test = max(1, int(math.floor(len(ids) * test_fraction))) if ids else 0
    return [(cid, "test" if i >= len(ids) - n_test else "train") for i, cid in enumerate(ids)]


def write_manifest(path, entries):
    with open(path, "w") as fh:
        json.dump([{"case_id": c, "split": s} for c, s in entries], fh, indent=2)


def load_nifti_dataset(directory, modality, split_manifest=None, profile=None,
                       source_modality=None, split=None, require_labels=False,
                       out_shape=CROP_SIZE):
    """Load the cases of one modality listed in a split manifest.

    ``profile`` selects the in-plane preprocessing ('cardiac', 'brain') or
    none. For cardiac, the resize target is read from the same case's
    ``source_modality`` volume when that file exists.
    """
    if not modality:
        raise DatasetError("modality tag must be nonempty")
    if split_manifest is None:
        split_manifest = os.path.join(directory, "manifest.json")
    entries = read_manifest(split_manifest)
    records = []
    for case_id, tag in entries:
        if split is not None and tag != split:
            continue
        ipath = volume_path(directory, case_id, modality)
        if ipath is None:
            raise DatasetError(f"missing volume for case {case_id!r}, modality {modality!r}")
        image, spacing = read_volume(ipath)
        lpath = volume_path(directory, case_id, "label")
        label = None
        if lpath is not None:
            label, _ = read_volume(lpath)
            label = np.rint(label).astype(np.int64)
            if label.shape != image.shape:
                raise DatasetError(f"{case_id}: label shape {label.shape} != image {image.shape}")
        elif require_labels:
            raise DatasetError(f"missing label volume for case {case_id!r}")
        if profile is not None:
            target = None
            if profile == "cardiac" and source_modality and source_modality != modality:
                spath = volume_path(directory, case_id, source_modality)
                if spath is not None:
                    target = _nib().load(spath).shape[:2]
            image, label = preprocess_volume(image, label, profile, target, out_shape)
        records.append(CaseRecord(case_id, modality, image, label, spacing, tag))
    if not records:
        raise DatasetError(f"no cases found in {directory}")
    return records


def save_phantom_set(directory, pairs, test_fraction=TEST_FRACTION):
    os.makedirs(directory, exist_ok=True)
    ids = []
    for rec_a, rec_b, labels in pairs:
        write_volume(os.path.join(directory, f"{rec_a.case_id}_A.nii.gz"), rec_a.image)
        write_volume(os.path.join(directory, f"{rec_b.case_id}_B.nii.gz"), rec_b.image)
        write_volume(os.path.join(directory, f"{rec_a.case_id}_label.nii.gz"), labels)
        ids.append(rec_a.case_id)
    write_manifest(os.path.join(directory, "manifest.json"), split_manifest(ids, test_fraction))


def stack_slices(records):
    """Flatten records into (n, H, W) images and labels (labels may be None)."""
    images = np.concatenate([r.image for r in records])
    if any(r.label is None for r in records):
        return images, None
    return images, np.concatenate([r.label for r in records])
