"""Synthetic multi-modal phantoms with nested ellipsoidal tumors.

Each phantom is an ellipsoidal "brain" on a zero background holding one
or more tumors built from three nested ellipsoids: edema outside, an
enhancing rim inside it and a necrotic core in the middle.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage as ndi

from .volume import LabelVolume, MultiModalVolume, write_vxg

# raw intensities (t1, t1ce, t2, flair) per class: background brain tissue,
# necrosis, edema, enhancing tumor
DEFAULT_PROFILES = {
    "brain": (500.0, 500.0, 400.0, 400.0),
    "necrosis": (250.0, 300.0, 900.0, 500.0),
    "edema": (450.0, 480.0, 700.0, 850.0),
    "enhancing": (480.0, 950.0, 600.0, 650.0),
}
CLASS_OF = {"necrosis": 1, "edema": 2, "enhancing": 3}


class ParameterError(ValueError):
    pass


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (32, 32, 32)
    n_volumes: int = 8
    n_tumors: int = 1
    # semi-axis ranges in voxels; enhancing and necrosis radii are fractions
    # of the enclosing ellipsoid
    edema_radius: tuple[float, float] = (5.0, 8.0)
    enhancing_frac: tuple[float, float] = (0.55, 0.75)
    necrosis_frac: tuple[float, float] = (0.4, 0.6)
    brain_frac: float = 0.9
    profiles: dict = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    noise: float = 25.0
    bias_field: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 16:
            raise ParameterError(f"phantom shape must be at least 16^3, got {self.shape}")
        lo, hi = self.edema_radius
        if lo <= 0 or hi < lo:
            raise ParameterError("edema_radius must be an increasing positive range")
        brain_r = np.array(self.shape) / 2 * self.brain_frac
        if hi >= brain_r.min() - 1:
            raise ParameterError(
                f"edema radius {hi} does not fit in a brain of semi-axes {brain_r.tolist()}")
        for name in ("enhancing_frac", "necrosis_frac"):
            a, b = getattr(self, name)
            if not 0 < a <= b < 1:
                raise ParameterError(f"{name} must satisfy 0 < lo <= hi < 1")
        if self.noise < 0:
            raise ParameterError("noise must be >= 0")


def ellipsoid_mask(shape, center, radii) -> np.ndarray:
    grids = np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")
    r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return r2 <= 1.0


def generate_phantom(spec: PhantomSpec, rng: np.random.Generator):
    """Return (volume, labels, geometry dict) for a single phantom."""
    shape = tuple(spec.shape)
    center = (np.array(shape) - 1) / 2
    brain_r = np.array(shape) / 2 * spec.brain_frac
    brain = ellipsoid_mask(shape, center, brain_r)
    labels = np.zeros(shape, dtype=np.uint8)
    tumors = []
    for _ in range(spec.n_tumors):
        r_e = rng.uniform(*spec.edema_radius, size=3)
        # keep the edema ellipsoid inside the brain ellipsoid
        room = np.maximum(brain_r - r_e - 1, 0)
        for _ in range(100):
            off = rng.uniform(-1, 1, 3) * room / np.sqrt(3)
            if np.sum((off / np.maximum(brain_r, 1e-9)) ** 2) <= 1:
                break
        c = center + off
        r_t = r_e * rng.uniform(*spec.enhancing_frac)
        r_n = r_t * rng.uniform(*spec.necrosis_frac)
        edema = ellipsoid_mask(shape, c, r_e) & brain
        enh = ellipsoid_mask(shape, c, r_t) & brain
        nec = ellipsoid_mask(shape, c, r_n) & brain
        labels[edema & (labels == 0)] = 2
        labels[enh & (labels != 1)] = 3
        labels[nec] = 1
        tumors.append({"center": c.tolist(), "edema": r_e.tolist(),
                       "enhancing": r_t.tolist(), "necrosis": r_n.tolist()})

    prof = spec.profiles
    table = np.array([prof["brain"], prof["necrosis"], prof["edema"], prof["enhancing"]])
    channels = table[labels].transpose(3, 0, 1, 2).copy()
    if spec.bias_field:
        smooth = ndi.gaussian_filter(rng.normal(size=shape), sigma=min(shape) / 4)
        smooth /= np.abs(smooth).max() or 1.0
        channels *= 1.0 + spec.bias_field * smooth
    if spec.noise:
        channels += rng.normal(scale=spec.noise, size=channels.shape)
    # keep in-brain voxels strictly positive and the background exactly zero
    channels = np.where(brain, np.maximum(channels, 1.0), 0.0)
    labels[~brain] = 0
    geometry = {"brain_center": center.tolist(), "brain_radii": brain_r.tolist(),
                "tumors": tumors}
    return MultiModalVolume(channels), LabelVolume(labels), geometry


def phantom_generate(spec: PhantomSpec, out_dir) -> list[Path]:
    """Write ``spec.n_volumes`` phantoms as VXG1 files plus a geometry manifest."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    paths, manifest = [], {"spec": asdict(spec), "cases": {}}
    for i in range(spec.n_volumes):
        v, lab, geom = generate_phantom(spec, rng)
        p = out_dir / f"case_{i:03d}.vxg"
        write_vxg(p, v, lab)
        manifest["cases"][p.stem] = geom
        paths.append(p)
    (out_dir / "phantoms.json").write_text(json.dumps(manifest, indent=2))
    return paths
