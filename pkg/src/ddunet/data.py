"""Volume I/O, preprocessing, overlapping patches and synthetic cases.

Arrays are indexed ``[d0, d1, d2]``; patches are cut along the last axis ``d2``.

MVOL layout: one directory per case holding ``header.txt`` (``key: value``
lines) and one little-endian row-major ``<name>.raw`` file per payload::

    magic: MVOL1
    case_id: case_000
    dims: 32x32x16
    spacing: 1.0,1.0,1.0
    axis_order: z,y,x
    payload.t1: f32
    payload.labels: u8
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = "MVOL1"
MODALITIES = ("t1", "t1gd", "t2", "flair")
LABEL_VALUES = (0, 1, 2, 4)
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
HEADER = "header.txt"


class MVOLError(Exception):
    pass


class MagicMismatch(MVOLError):
    pass


class ShapeMismatch(MVOLError):
    pass


class DtypeMismatch(MVOLError):
    pass


class TruncatedPayload(MVOLError):
    pass


class IllegalLabel(MVOLError, ValueError):
    pass


class DegenerateVolumeWarning(UserWarning):
    pass


@dataclass
class VolumeCase:
    case_id: str
    modalities: np.ndarray  # [4, d0, d1, d2] float32
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    labels: np.ndarray | None = None  # [d0, d1, d2] uint8

    def __post_init__(self):
        self.modalities = np.asarray(self.modalities, dtype=np.float32)
        if self.modalities.ndim != 4 or self.modalities.shape[0] != len(MODALITIES):
            raise ShapeMismatch(f"modalities must be [4, d0, d1, d2], got {self.modalities.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.shape:
                raise ShapeMismatch(f"labels shape {self.labels.shape} != {self.shape}")
            check_labels(self.labels)
            self.labels = self.labels.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.modalities.shape[1:])


def check_labels(labels: np.ndarray):
    bad = np.setdiff1d(np.unique(labels), LABEL_VALUES)
    if bad.size:
        raise IllegalLabel(f"illegal label values {bad.tolist()}; allowed {LABEL_VALUES}")


# -- MVOL ---------------------------------------------------------------------


def _write_mvol(path, case_id: str, shape, spacing, payloads: dict[str, tuple[str, np.ndarray]]):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [
        f"magic: {MAGIC}",
        f"case_id: {case_id}",
        "dims: " + "x".join(str(int(s)) for s in shape),
        "spacing: " + ",".join(repr(float(s)) for s in spacing),
        "axis_order: z,y,x",
    ]
    for name, (kind, arr) in payloads.items():
        if tuple(arr.shape) != tuple(shape):
            raise ShapeMismatch(f"payload {name} shape {arr.shape} != {tuple(shape)}")
        lines.append(f"payload.{name}: {kind}")
        (path / f"{name}.raw").write_bytes(np.ascontiguousarray(arr, dtype=DTYPES[kind]).tobytes())
    (path / HEADER).write_text("\n".join(lines) + "\n")


def read_header(path) -> dict:
    path = Path(path)
    hp = path / HEADER
    if not hp.is_file():
        raise MVOLError(f"{path}: missing {HEADER}")
    fields = {}
    for line in hp.read_text().splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise MVOLError(f"{hp}: malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    if fields.get("magic") != MAGIC:
        raise MagicMismatch(f"{hp}: magic {fields.get('magic')!r} != {MAGIC!r}")
    try:
        dims = tuple(int(v) for v in fields["dims"].split("x"))
        spacing = tuple(float(v) for v in fields.get("spacing", "1,1,1").split(","))
    except (KeyError, ValueError) as e:
        raise MVOLError(f"{hp}: bad dims/spacing ({e})") from None
    if len(dims) != 3 or len(spacing) != 3 or min(dims) < 1:
        raise ShapeMismatch(f"{hp}: need 3 positive dims and 3 spacings")
    payloads = {k[len("payload.") :]: v for k, v in fields.items() if k.startswith("payload.")}
    return {"case_id": fields.get("case_id", path.name), "dims": dims, "spacing": spacing, "payloads": payloads}


def _read_payload(path: Path, header: dict, name: str, kind: str) -> np.ndarray:
    declared = header["payloads"].get(name)
    if declared is None:
        raise MVOLError(f"{path}: no payload {name!r}")
    if declared != kind:
        raise DtypeMismatch(f"{path}: payload {name} has dtype {declared}, expected {kind}")
    dt = DTYPES[kind]
    expected = int(np.prod(header["dims"])) * dt.itemsize
    raw = (path / f"{name}.raw").read_bytes()
    if len(raw) < expected:
        raise TruncatedPayload(f"{path}/{name}.raw: truncated payload ({len(raw)} < {expected} bytes)")
    if len(raw) > expected:
        raise ShapeMismatch(f"{path}/{name}.raw: {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=dt).reshape(header["dims"]).copy()


def write_case(path, case: VolumeCase):
    payloads = {m: ("f32", case.modalities[i]) for i, m in enumerate(MODALITIES)}
    if case.labels is not None:
        payloads["labels"] = ("u8", case.labels)
    _write_mvol(path, case.case_id, case.shape, case.spacing, payloads)


def read_case(path) -> VolumeCase:
    path = Path(path)
    header = read_header(path)
    mods = np.stack([_read_payload(path, header, m, "f32") for m in MODALITIES])
    labels = None
    if "labels" in header["payloads"]:
        labels = _read_payload(path, header, "labels", "u8")
        check_labels(labels)
    return VolumeCase(header["case_id"], mods, header["spacing"], labels)


def write_labels(path, labels, case_id: str | None = None, spacing=(1.0, 1.0, 1.0), probs=None):
    """Write a label map (and optionally ET/TC/WT probabilities) as an MVOL directory."""
    labels = np.asarray(labels)
    check_labels(labels)
    payloads = {"labels": ("u8", labels)}
    if probs is not None:
        for name, p in zip(("prob_et", "prob_tc", "prob_wt"), probs):
            payloads[name] = ("f32", p)
    _write_mvol(path, case_id or Path(path).name, labels.shape, spacing, payloads)


def read_labels(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = read_header(path)
    labels = _read_payload(path, header, "labels", "u8")
    check_labels(labels)
    return labels, header


def read_probs(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    header = read_header(path)
    probs = np.stack([_read_payload(path, header, n, "f32") for n in ("prob_et", "prob_tc", "prob_wt")])
    return probs, header


def list_cases(root) -> list[Path]:
    root = Path(root)
    if (root / HEADER).is_file():
        return [root]
    return sorted(p for p in root.iterdir() if (p / HEADER).is_file()) if root.is_dir() else []


# -- preprocessing ----------------------------------------------------------------


def zscore(volume, nonzero: bool = True) -> np.ndarray:
    """Standardise over nonzero voxels (if at least two), else over all voxels.

    Voxels outside the support stay 0. A zero-variance support yields zeros and
    a :class:`DegenerateVolumeWarning`.
    """
    v = np.asarray(volume, dtype=np.float64)
    if v.size < 2:
        raise ValueError("zscore needs at least 2 voxels")
    support = v != 0 if nonzero else np.ones(v.shape, dtype=bool)
    if np.count_nonzero(support) < 2:
        support = np.ones(v.shape, dtype=bool)
    vals = v[support]
    std = vals.std()
    out = np.zeros(v.shape, dtype=np.float32)
    if std == 0:
        warnings.warn("zero-variance volume standardised to zeros", DegenerateVolumeWarning, stacklevel=2)
        return out
    out[support] = ((vals - vals.mean()) / std).astype(np.float32)
    return out


def remap_labels(labels) -> np.ndarray:
    """BraTS labels to nested binary channels [ET, TC, WT] (uint8)."""
    labels = np.asarray(labels)
    check_labels(labels)
    et = labels == 4
    tc = et | (labels == 1)
    wt = tc | (labels == 2)
    return np.stack([et, tc, wt]).astype(np.uint8)


@dataclass(frozen=True)
class CropBox:
    """Per-axis mapping between a volume and its fixed-size crop.

    ``src[i]`` is the (start, stop) range in the original volume and ``dst[i]``
    the start of that range inside the crop.
    """

    full_shape: tuple[int, ...]
    crop_shape: tuple[int, ...]
    src: tuple[tuple[int, int], ...]
    dst: tuple[int, ...]


def crop_box(mask: np.ndarray, crop_shape) -> CropBox:
    """Centre a ``crop_shape`` window on the bounding box of ``mask``; pad where too small."""
    shape = mask.shape
    nz = np.argwhere(mask)
    if nz.size:
        center = [(lo + hi) // 2 for lo, hi in zip(nz.min(0), nz.max(0))]
    else:
        center = [s // 2 for s in shape]
    src, dst = [], []
    for n, c, mid in zip(shape, crop_shape, center):
        if n >= c:
            start = int(min(max(mid - c // 2, 0), n - c))
            src.append((start, start + c))
            dst.append(0)
        else:
            src.append((0, n))
            dst.append((c - n) // 2)
    return CropBox(tuple(shape), tuple(int(c) for c in crop_shape), tuple(src), tuple(dst))


def apply_crop(arr: np.ndarray, box: CropBox) -> np.ndarray:
    """Crop/pad the trailing three axes of ``arr`` according to ``box``."""
    lead = arr.shape[:-3]
    out = np.zeros(lead + box.crop_shape, dtype=arr.dtype)
    s = tuple(slice(a, b) for a, b in box.src)
    d = tuple(slice(o, o + (b - a)) for o, (a, b) in zip(box.dst, box.src))
    out[(Ellipsis,) + d] = arr[(Ellipsis,) + s]
    return out


def undo_crop(arr: np.ndarray, box: CropBox) -> np.ndarray:
    lead = arr.shape[:-3]
    out = np.zeros(lead + box.full_shape, dtype=arr.dtype)
    s = tuple(slice(a, b) for a, b in box.src)
    d = tuple(slice(o, o + (b - a)) for o, (a, b) in zip(box.dst, box.src))
    out[(Ellipsis,) + s] = arr[(Ellipsis,) + d]
    return out


# -- patches -----------------------------------------------------------------------


def patch_offsets(depth: int, patch_depth: int, stride: int) -> tuple[list[int], bool]:
    """Offsets along the patch axis and whether the last one had to be anchored."""
    if patch_depth > depth:
        raise ValueError(f"patch depth {patch_depth} exceeds volume depth {depth}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    offsets = list(range(0, depth - patch_depth + 1, stride))
    anchored = offsets[-1] + patch_depth != depth
    if anchored:
        offsets.append(depth - patch_depth)
    return offsets, anchored


@dataclass
class PatchSet:
    patches: list[tuple[int, np.ndarray]]  # (offset, [4, d0, d1, patch_depth])
    full_shape: tuple[int, int, int]
    patch_depth: int
    stride: int
    anchored: bool = False
    targets: list[np.ndarray] = field(default_factory=list)  # [3, d0, d1, patch_depth]
    box: CropBox | None = None

    @property
    def offsets(self) -> list[int]:
        return [o for o, _ in self.patches]


def split_patches(volume: np.ndarray, offsets: list[int], patch_depth: int) -> list[np.ndarray]:
    return [np.ascontiguousarray(volume[..., o : o + patch_depth]) for o in offsets]


def prepare_case(case: VolumeCase, crop_shape) -> tuple[np.ndarray, np.ndarray | None, CropBox]:
    """z-score each modality, then crop/pad to ``crop_shape``. Returns image, targets, box."""
    image = np.stack([zscore(m) for m in case.modalities])
    box = crop_box(np.any(case.modalities != 0, axis=0), crop_shape)
    image = apply_crop(image, box)
    targets = apply_crop(remap_labels(case.labels), box) if case.labels is not None else None
    return image, targets, box


def extract_patches(
    case: VolumeCase,
    crop_shape=(192, 192, 128),
    patch_depth: int = 64,
    stride: int = 32,
) -> PatchSet:
    image, targets, box = prepare_case(case, crop_shape)
    depth = image.shape[-1]
    offsets, anchored = patch_offsets(depth, patch_depth, stride)
    ps = PatchSet(
        list(zip(offsets, split_patches(image, offsets, patch_depth))),
        tuple(image.shape[1:]),
        patch_depth,
        stride,
        anchored,
        box=box,
    )
    if targets is not None:
        ps.targets = split_patches(targets, offsets, patch_depth)
    return ps


def reconstruct(predictions, full_shape) -> np.ndarray:
    """Average overlapping patch predictions back into a ``[C, *full_shape]`` volume."""
    predictions = list(predictions)
    if not predictions:
        raise ValueError("no predictions to reconstruct")
    channels = predictions[0][1].shape[0]
    depth = full_shape[-1]
    acc = np.zeros((channels,) + tuple(full_shape), dtype=np.float64)
    count = np.zeros(depth, dtype=np.int64)
    for offset, pred in predictions:
        pd = pred.shape[-1]
        if offset < 0 or offset + pd > depth:
            raise ValueError(f"patch at offset {offset} (depth {pd}) outside volume depth {depth}")
        acc[..., offset : offset + pd] += pred
        count[offset : offset + pd] += 1
    if (count == 0).any():
        gap = np.flatnonzero(count == 0)
        raise ValueError(f"gap in patch coverage at slices {gap[0]}..{gap[-1]}")
    return (acc / count).astype(predictions[0][1].dtype)


# -- synthetic cases ----------------------------------------------------------------

# mean intensity; rows T1, T1Gd, T2, FLAIR; columns healthy brain, edema, core, enhancing
_LEVELS = np.array(
    [
        [0.60, 0.50, 0.35, 0.45],
        [0.60, 0.55, 0.40, 1.00],
        [0.40, 0.85, 0.65, 0.55],
        [0.40, 0.95, 0.70, 0.75],
    ]
)


# radius fractions: WT of the volume extent, TC of WT, ET of TC
WT_RADIUS = (0.36, 0.42)
TC_RADIUS = (0.72, 0.80)
ET_RADIUS = (0.62, 0.70)


def _ellipsoid(shape, center, radii) -> np.ndarray:
    grid = np.ogrid[tuple(slice(0, n) for n in shape)]
    r = sum(((g - c) / rad) ** 2 for g, c, rad in zip(grid, center, radii))
    return r <= 1.0


def synth_case(seed: int, shape=(32, 32, 16), kind: str | None = None, noise: float = 0.05) -> VolumeCase:
    """Nested-ellipsoid tumour phantom (WT > TC > ET) inside an ellipsoidal brain.

    ``kind`` is "hgg" or "lgg" (no enhancing tumour); by default it is drawn
    from the seed with a 1-in-4 chance of "lgg".
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 16:
        raise ValueError(f"synthetic shape must be 3D with every extent >= 16, got {shape}")
    rng = np.random.default_rng(seed)
    if kind is None:
        kind = "lgg" if rng.random() < 0.25 else "hgg"
    if kind not in ("hgg", "lgg"):
        raise ValueError(f"unknown case kind {kind!r}")
    ext = np.array(shape, dtype=np.float64)
    mid = (ext - 1) / 2
    brain = _ellipsoid(shape, mid, ext * 0.48)
    wt_r = ext * rng.uniform(*WT_RADIUS, 3)
    wt_c = mid + rng.uniform(-0.05, 0.05, 3) * ext
    tc_r = wt_r * rng.uniform(*TC_RADIUS)
    tc_c = wt_c + rng.uniform(-0.1, 0.1, 3) * (wt_r - tc_r)
    et_r = tc_r * rng.uniform(*ET_RADIUS)
    et_c = tc_c + rng.uniform(-0.1, 0.1, 3) * (tc_r - et_r)
    wt = _ellipsoid(shape, wt_c, wt_r) & brain
    tc = _ellipsoid(shape, tc_c, tc_r) & wt
    et = _ellipsoid(shape, et_c, et_r) & tc if kind == "hgg" else np.zeros(shape, bool)

    labels = np.zeros(shape, np.uint8)
    labels[wt] = 2
    labels[tc] = 1
    labels[et] = 4
    region = np.zeros(shape, np.int64)
    region[wt] = 1
    region[tc] = 2
    region[et] = 3
    mods = _LEVELS[:, region] + rng.normal(0.0, noise, (4,) + shape)
    mods = np.where(brain, np.clip(mods, 0.01, None), 0.0).astype(np.float32)
    return VolumeCase(f"synth_{seed:04d}", mods, (1.0, 1.0, 1.0), labels)
