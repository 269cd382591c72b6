"""Multi-modal volume container, preprocessing, and file I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MODALITIES = ("t1", "t1ce", "t2", "flair")
N_CLASSES = 4
VXG_MAGIC = b"VXG1"


class EmptyBrainError(ValueError):
    pass


class DegenerateChannelError(ValueError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class MultiModalVolume:
    """Four co-registered intensity grids, stacked as ``(4, D, H, W)``.

    ``brain_mask`` marks voxels that carry signal in the source scan. It is
    fixed before normalization so that zero-mean channels do not lose
    in-brain voxels that happen to land on exactly 0.
    """

    channels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[int, int, int] = (0, 0, 0)
    brain_mask: np.ndarray | None = None

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 4 or self.channels.shape[0] != len(MODALITIES):
            raise ValueError(f"expected (4, D, H, W) channels, got {self.channels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive values, got {self.spacing}")
        self.origin = tuple(int(o) for o in self.origin)
        if self.brain_mask is None:
            self.brain_mask = np.any(self.channels != 0, axis=0)
        elif self.brain_mask.shape != self.shape:
            raise ValueError("brain_mask shape does not match channels")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.channels.shape[1:])


@dataclass
class LabelVolume:
    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.size and self.labels.max() >= N_CLASSES:
            raise ValueError(f"label values must be in 0..{N_CLASSES - 1}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


def remap_brats_labels(labels: np.ndarray) -> np.ndarray:
    """BraTS stores enhancing tumor as 4; collapse it to the dense id 3."""
    out = np.asarray(labels).astype(np.uint8, copy=True)
    out[out == 4] = 3
    return out


# --------------------------------------------------------------------------
# preprocessing


def brain_bbox(v: MultiModalVolume) -> tuple[slice, slice, slice]:
    nz = np.any(v.channels != 0, axis=0)
    if not nz.any():
        raise EmptyBrainError("volume has no nonzero voxel")
    idx = np.nonzero(nz)
    return tuple(slice(int(i.min()), int(i.max()) + 1) for i in idx)


def crop_to_brain(v: MultiModalVolume) -> tuple[MultiModalVolume, tuple[int, int, int]]:
    """Crop to the tight bounding box of voxels nonzero in any channel."""
    box = brain_bbox(v)
    offsets = tuple(s.start for s in box)
    cropped = MultiModalVolume(
        v.channels[(slice(None),) + box].copy(),
        spacing=v.spacing,
        origin=tuple(o + d for o, d in zip(v.origin, offsets)),
        brain_mask=v.brain_mask[box].copy(),
    )
    return cropped, offsets


def crop_labels(labels: LabelVolume, box: tuple[slice, slice, slice]) -> LabelVolume:
    return LabelVolume(labels.labels[box].copy(), labels.spacing,
                       tuple(o + s.start for o, s in zip(labels.origin, box)))


def rescale_percentile(v: MultiModalVolume, p: float = 99.5) -> MultiModalVolume:
    """Divide each channel by the p-th percentile of its nonzero voxels, clip to [0, 1]."""
    out = np.empty_like(v.channels)
    for c, ch in enumerate(v.channels):
        nz = ch[ch != 0]
        if nz.size == 0:
            raise DegenerateChannelError(f"channel {MODALITIES[c]} has no nonzero voxel")
        ref = np.percentile(nz, p)
        if ref == 0:
            raise DegenerateChannelError(
                f"{p}th percentile of channel {MODALITIES[c]} is zero")
        out[c] = np.clip(ch / ref, 0.0, 1.0)
    return replace(v, channels=out, brain_mask=v.brain_mask.copy())


def znormalize(v: MultiModalVolume) -> MultiModalVolume:
    """Zero mean / unit variance per channel over the brain mask.

    Voxels outside the mask stay 0. A channel that is constant over the
    mask maps to all zeros.
    """
    mask = v.brain_mask
    out = np.zeros_like(v.channels)
    for c, ch in enumerate(v.channels):
        vals = ch[mask]
        if vals.size == 0:
            continue
        mu = vals.mean()
        sd = vals.std()
        if sd == 0 or not np.isfinite(sd):
            continue
        out[c][mask] = (vals - mu) / sd
    return replace(v, channels=out, brain_mask=mask.copy())


def pad_to_shape(v: MultiModalVolume, target: tuple[int, int, int]
                 ) -> tuple[MultiModalVolume, tuple[int, int, int]]:
    """Centered zero padding; returns the volume and the offset of the old content."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t < s for t, s in zip(target, v.shape)):
        raise ValueError(f"cannot pad shape {v.shape} to {target}")
    before = tuple((t - s) // 2 for t, s in zip(target, v.shape))
    widths = [(b, t - s - b) for b, t, s in zip(before, target, v.shape)]
    channels = np.pad(v.channels, [(0, 0)] + widths)
    mask = np.pad(v.brain_mask, widths)
    origin = tuple(o - b for o, b in zip(v.origin, before))
    return MultiModalVolume(channels, v.spacing, origin, mask), before


def pad_labels(labels: LabelVolume, target: tuple[int, int, int]) -> LabelVolume:
    before = tuple((t - s) // 2 for t, s in zip(target, labels.shape))
    widths = [(b, t - s - b) for b, t, s in zip(before, target, labels.shape)]
    return LabelVolume(np.pad(labels.labels, widths), labels.spacing,
                       tuple(o - b for o, b in zip(labels.origin, before)))


def preprocess(v: MultiModalVolume, labels: LabelVolume | None = None,
               percentile: float = 99.5, target: tuple[int, int, int] | None = None):
    """Crop, rescale, z-normalize and optionally pad; labels follow the geometry."""
    box = brain_bbox(v)
    v, _ = crop_to_brain(v)
    if labels is not None:
        labels = crop_labels(labels, box)
    v = znormalize(rescale_percentile(v, percentile))
    if target is not None:
        v, _ = pad_to_shape(v, target)
        if labels is not None:
            labels = pad_labels(labels, target)
    return v, labels


# --------------------------------------------------------------------------
# VXG1 container: magic, dims (3 x u32 LE), channel count (u32 LE),
# f32 voxel data channel-major, then an optional u8 label grid.


def write_vxg(path, v: MultiModalVolume, labels: LabelVolume | None = None) -> None:
    D, H, W = v.shape
    with open(path, "wb") as fh:
        fh.write(VXG_MAGIC)
        fh.write(struct.pack("<4I", D, H, W, v.channels.shape[0]))
        fh.write(v.channels.astype("<f4").tobytes(order="C"))
        if labels is not None:
            if labels.shape != v.shape:
                raise ValueError("label grid shape does not match volume")
            fh.write(labels.labels.astype(np.uint8).tobytes(order="C"))


def read_vxg(path, spacing=(1.0, 1.0, 1.0)) -> tuple[MultiModalVolume, LabelVolume | None]:
    raw = Path(path).read_bytes()
    if raw[:4] != VXG_MAGIC:
        raise FormatError(f"{path}: not a VXG1 file")
    D, H, W, C = struct.unpack_from("<4I", raw, 4)
    n = D * H * W
    off = 20
    data = np.frombuffer(raw, dtype="<f4", count=C * n, offset=off)
    off += 4 * C * n
    channels = data.astype(np.float64).reshape(C, D, H, W)
    labels = None
    rest = len(raw) - off
    if rest == n:
        labels = LabelVolume(
            np.frombuffer(raw, dtype=np.uint8, count=n, offset=off).reshape(D, H, W).copy(),
            spacing)
    elif rest != 0:
        raise FormatError(f"{path}: {rest} trailing bytes")
    return MultiModalVolume(channels, spacing), labels


# --------------------------------------------------------------------------
# NIfTI


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float], np.ndarray]:
    """Return (data, spacing, affine) for a .nii/.nii.gz file."""
    import nibabel as nib

    img = nib.load(str(path))
    data = np.asarray(img.dataobj)
    spacing = tuple(float(s) for s in img.header.get_zooms()[:3])
    return data, spacing, img.affine


def load_nifti_case(paths: dict[str, str], seg: str | None = None
                    ) -> tuple[MultiModalVolume, LabelVolume | None, np.ndarray]:
    """Load the four modalities (keys from ``MODALITIES``) and an optional segmentation."""
    chans = []
    spacing = affine = None
    for m in MODALITIES:
        data, sp, aff = read_nifti(paths[m])
        if spacing is None:
            spacing, affine = sp, aff
        elif chans and data.shape != chans[0].shape:
            raise ValueError(f"modality {m} has shape {data.shape}, expected {chans[0].shape}")
        chans.append(np.asarray(data, dtype=np.float64))
    v = MultiModalVolume(np.stack(chans), spacing)
    labels = None
    if seg is not None:
        data, _, _ = read_nifti(seg)
        labels = LabelVolume(remap_brats_labels(data), spacing)
    return v, labels, affine


def write_nifti_labels(path, labels: LabelVolume, affine: np.ndarray | None = None,
                       brats_ids: bool = True) -> None:
    """Write a label grid; with ``brats_ids`` enhancing tumor is stored as 4 again."""
    import nibabel as nib

    data = labels.labels.copy()
    if brats_ids:
        data[data == 3] = 4
    if affine is None:
        affine = np.diag(list(labels.spacing) + [1.0])
    img = nib.Nifti1Image(data.astype(np.uint8), affine)
    img.header.set_zooms(labels.spacing)
    img.header["descrip"] = b"labels remapped 4->3 on read" if brats_ids else b"dense labels"
    nib.save(img, str(path))
