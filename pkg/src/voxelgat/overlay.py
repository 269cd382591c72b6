"""PNG overlays of predicted labels on the FLAIR channel."""
from __future__ import annotations

import numpy as np
from PIL import Image

from .volume import LabelVolume, MultiModalVolume

# red: edema, yellow: enhancing, blue: necrosis
COLORS = {1: (0, 80, 255), 2: (255, 0, 0), 3: (255, 230, 0)}
FLAIR = 3


def largest_axial_slice(labels: np.ndarray) -> int:
    area = (labels > 0).sum(axis=(0, 1))
    return int(area.argmax()) if area.any() else labels.shape[2] // 2


def overlay_slice(v: MultiModalVolume, pred: LabelVolume, z: int | None = None,
                  alpha: float = 0.5) -> np.ndarray:
    z = largest_axial_slice(pred.labels) if z is None else z
    flair = v.channels[FLAIR][:, :, z]
    lo, hi = np.percentile(flair, [1, 99]) if flair.any() else (0.0, 1.0)
    gray = np.clip((flair - lo) / max(hi - lo, 1e-12), 0, 1) * 255
    rgb = np.repeat(gray[..., None], 3, axis=2)
    lab = pred.labels[:, :, z]
    for c, color in COLORS.items():
        m = lab == c
        rgb[m] = (1 - alpha) * rgb[m] + alpha * np.array(color, dtype=np.float64)
    # rows = second array axis so the image is not transposed relative to the scan
    return np.round(rgb).astype(np.uint8).transpose(1, 0, 2)


def save_overlay(path, v: MultiModalVolume, pred: LabelVolume, z: int | None = None) -> None:
    Image.fromarray(overlay_slice(v, pred, z)).save(path)
