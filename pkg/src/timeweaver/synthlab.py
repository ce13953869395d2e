"""Synthetic identity/age-factored face generation and degradation.

Identity maps to geometry (organ placement and sizes), age maps to skin
texture statistics (wrinkle contrast, high-frequency roughness, cheek
fullness shading). Organ geometry depends only on the identity, so organ
masks are ground truth and age never moves a landmark. Everything is a
pure function of its seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import DimensionMismatchError
from .seeds import derive_seed, np_rng

GEOMETRY_DIM = 12
AGE_MIN, AGE_MAX = 5, 90
BASE_RESOLUTION = 32


# ---------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class IdentitySpec:
    id_seed: int
    geometry_params: np.ndarray  # (GEOMETRY_DIM,) in [0,1]
    base_tone: float

    def __post_init__(self):
        g = np.asarray(self.geometry_params, dtype=np.float64)
        if g.shape != (GEOMETRY_DIM,):
            raise DimensionMismatchError(f"geometry_params must have shape ({GEOMETRY_DIM},)")
        if not ((g >= 0) & (g <= 1)).all():
            raise ValueError("geometry_params must lie in [0,1]")
        object.__setattr__(self, "geometry_params", g)


@dataclass(frozen=True)
class AgeFactor:
    age_years: int
    wrinkle_density: float
    texture_roughness: float
    fullness: float

    def __post_init__(self):
        if not AGE_MIN <= self.age_years <= AGE_MAX:
            raise ValueError(f"age_years must be in [{AGE_MIN},{AGE_MAX}]")


@dataclass
class RenderedFace:
    image: np.ndarray       # (H,W,3) float32 in [0,1]
    organ_mask: np.ndarray  # (H,W) bool
    identity: IdentitySpec
    age: AgeFactor
    face_mask: np.ndarray | None = None  # (H,W) bool; face oval vs background


@dataclass(frozen=True)
class DegradeConfig:
    blur_sigma: float = 1.5
    downscale_factor: int = 2
    noise_sigma: float = 0.05
    quant_levels: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0.5 <= self.blur_sigma <= 3.0:
            raise ValueError("blur_sigma must be in [0.5, 3.0]")
        if self.downscale_factor not in (2, 3, 4):
            raise ValueError("downscale_factor must be one of {2,3,4}")
        if not 0.0 <= self.noise_sigma <= 0.1:
            raise ValueError("noise_sigma must be in [0, 0.1]")
        if self.quant_levels not in (16, 32, 64, 256):
            raise ValueError("quant_levels must be one of {16,32,64,256}")


@dataclass
class DatasetRecord:
    identity_id: int
    gt_path: str
    degraded_path: str
    mask_path: str
    age_years: int
    ref_paths: List[str]


@dataclass
class DatasetManifest:
    records: List[DatasetRecord]
    split: str
    seed: int
    root: Path | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "seed": self.seed,
            "records": [
                {
                    "identity_id": r.identity_id,
                    "gt_path": r.gt_path,
                    "degraded_path": r.degraded_path,
                    "mask_path": r.mask_path,
                    "age_years": r.age_years,
                    "ref_paths": list(r.ref_paths),
                }
                for r in self.records
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        records = [DatasetRecord(**r) for r in data["records"]]
        return cls(records=records, split=data["split"], seed=data["seed"], root=path.parent)

    def resolve(self, rel: str) -> Path:
        if self.root is None:
            return Path(rel)
        return self.root / rel

    def validate(self) -> None:
        gt_by_identity: dict[int, set] = {}
        for r in self.records:
            gt_by_identity.setdefault(r.identity_id, set()).add(r.gt_path)
        for r in self.records:
            for rel in [r.gt_path, r.degraded_path, r.mask_path, *r.ref_paths]:
                if not self.resolve(rel).exists():
                    raise FileNotFoundError(f"manifest references missing file: {rel}")
            if not 1 <= len(r.ref_paths) <= 5:
                raise ValueError(f"record {r.gt_path}: reference count must be in [1,5]")
            own = gt_by_identity[r.identity_id]
            for ref in r.ref_paths:
                if ref == r.gt_path:
                    raise ValueError(f"record {r.gt_path}: references its own ground truth")
                if ref not in own:
                    raise ValueError(f"record {r.gt_path}: reference {ref} has a different identity")


# ---------------------------------------------------------------------------
# image I/O

def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="RGB").save(path)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def mask_path_for(image_path: str) -> str:
    """Map an images/ (or degraded/) path to its organ mask path."""
    p = Path(image_path)
    return str(Path("masks") / p.name)


def face_mask_path_for(image_path: str) -> str:
    p = Path(image_path)
    return str(Path("face_masks") / p.name)


# ---------------------------------------------------------------------------
# identity and age factors

def gen_identity(seed: int) -> IdentitySpec:
    if seed < 0:
        raise ValueError("seed must be >= 0")
    rng = np.random.default_rng(seed)
    geometry = rng.uniform(0.0, 1.0, GEOMETRY_DIM)
    base_tone = float(rng.uniform(0.0, 1.0))
    return IdentitySpec(id_seed=seed, geometry_params=geometry, base_tone=base_tone)


def age_factor(age_years: int) -> AgeFactor:
    """Deterministic age-to-texture mapping; monotone by construction."""
    t = (age_years - AGE_MIN) / (AGE_MAX - AGE_MIN)
    return AgeFactor(
        age_years=int(age_years),
        wrinkle_density=float(t),
        texture_roughness=float(t ** 0.9),
        fullness=float(1.0 - t),
    )


# ---------------------------------------------------------------------------
# rendering

def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _face_geometry(spec: IdentitySpec, res: int) -> dict:
    g = spec.geometry_params
    s = res / BASE_RESOLUTION
    cx = (res - 1) / 2.0
    cy = res / 2.0
    return {
        "cx": cx, "cy": cy,
        "face_rx": (9.0 + 4.0 * g[0]) * s,
        "face_ry": (11.0 + 3.5 * g[1]) * s,
        "eye_dx": (3.5 + 2.5 * g[2]) * s,
        "eye_y": cy - (2.5 + 2.0 * g[3]) * s,
        "eye_rx": (1.1 + 0.9 * g[4]) * s,
        "eye_ry": (0.7 + 0.5 * g[4]) * s,
        "brow_dy": (2.2 + 1.5 * g[5]) * s,
        "brow_ry": (0.5 + 0.6 * g[6]) * s,
        "nose_len": (3.0 + 3.0 * g[7]) * s,
        "nose_rx": (0.7 + 1.0 * g[8]) * s,
        "mouth_y": cy + (5.5 + 2.5 * g[9]) * s,
        "mouth_rx": (2.0 + 2.5 * g[10]) * s,
        "mouth_ry": (0.6 + 0.8 * g[11]) * s,
        "scale": s,
    }


def face_region_mask(spec: IdentitySpec, resolution: int = BASE_RESOLUTION) -> np.ndarray:
    geo = _face_geometry(spec, resolution)
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    return _ellipse(yy, xx, geo["cy"], geo["cx"], geo["face_ry"], geo["face_rx"])


def render_face(spec: IdentitySpec, age: AgeFactor, pose_seed: int,
                resolution: int = BASE_RESOLUTION) -> RenderedFace:
    res = resolution
    geo = _face_geometry(spec, res)
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    cx, cy, s = geo["cx"], geo["cy"], geo["scale"]

    face = _ellipse(yy, xx, cy, cx, geo["face_ry"], geo["face_rx"])

    # organ rasters (geometry only; shared across ages and poses)
    ex_l, ex_r = cx - geo["eye_dx"], cx + geo["eye_dx"]
    eyes = (_ellipse(yy, xx, geo["eye_y"], ex_l, geo["eye_ry"], geo["eye_rx"])
            | _ellipse(yy, xx, geo["eye_y"], ex_r, geo["eye_ry"], geo["eye_rx"]))
    brow_y = geo["eye_y"] - geo["brow_dy"] - geo["eye_ry"]
    brows = (_ellipse(yy, xx, brow_y, ex_l, geo["brow_ry"], geo["eye_rx"] * 1.4)
             | _ellipse(yy, xx, brow_y, ex_r, geo["brow_ry"], geo["eye_rx"] * 1.4))
    nose_top = cy - 1.0 * s
    nose = ((np.abs(xx - cx) <= geo["nose_rx"])
            & (yy >= nose_top) & (yy <= nose_top + geo["nose_len"]))
    mouth = _ellipse(yy, xx, geo["mouth_y"], cx, geo["mouth_ry"], geo["mouth_rx"])
    organ_mask = (eyes | brows | nose | mouth) & face
    n_organ = int(organ_mask.sum())
    if not 1 <= n_organ <= int(0.6 * res * res):
        raise ValueError(f"organ mask has {n_organ} pixels; outside [1, {int(0.6*res*res)}]")

    # base colors
    skin = 0.40 + 0.32 * spec.base_tone
    img = np.empty((res, res, 3), dtype=np.float64)
    img[...] = 0.18  # background
    skin_rgb = np.array([skin * 1.05, skin * 0.94, skin * 0.82])
    img[face] = skin_rgb

    # age texture, multiplicative so dark tones never clip
    tex_rng = np_rng(spec.id_seed, "texture", pose_seed)
    noise_field = tex_rng.uniform(-1.0, 1.0, (res, res))
    amp = 0.02 + 0.16 * age.texture_roughness
    skin_region = face & ~organ_mask
    img[skin_region] *= (1.0 + amp * noise_field[skin_region])[:, None]

    wrinkle = np.zeros((res, res), dtype=np.float64)
    wr_rng = np_rng(spec.id_seed, "wrinkles")
    half_w = geo["face_rx"] * 0.55
    for i in range(3):  # forehead lines
        wy = brow_y - (1.5 + 1.3 * i + wr_rng.uniform(-0.4, 0.4)) * s
        line = (np.abs(yy - wy) <= 0.5 * s) & (np.abs(xx - cx) <= half_w)
        wrinkle[line] = np.maximum(wrinkle[line], 0.14 + 0.05 * i)
    for sign in (-1.0, 1.0):  # cheek folds
        wx = cx + sign * (geo["eye_dx"] + wr_rng.uniform(-0.3, 0.3) * s)
        wy0 = geo["eye_y"] + (3.0 + wr_rng.uniform(-0.3, 0.3)) * s
        fold = (np.abs(xx - wx) <= 0.55 * s) & (yy >= wy0) & (yy <= wy0 + 3.0 * s)
        wrinkle[fold] = np.maximum(wrinkle[fold], 0.18)
    wr_scale = 1.0 - age.wrinkle_density * wrinkle
    img[skin_region] *= wr_scale[skin_region][:, None]

    hollow = np.zeros((res, res), dtype=np.float64)
    for sign in (-1.0, 1.0):
        hx = cx + sign * (geo["eye_dx"] + 1.5 * s)
        hy = geo["eye_y"] + 5.5 * s
        d2 = ((xx - hx) ** 2 + (yy - hy) ** 2) / (2.2 * s) ** 2
        hollow += np.exp(-d2)
    img[skin_region] *= (1.0 - (1.0 - age.fullness) * 0.10 * hollow[skin_region])[:, None]

    # organs on top (constant colors, identity-fixed geometry)
    img[eyes & face] = [0.10, 0.10, 0.12]
    img[brows & face] = [0.16, 0.13, 0.11]
    img[nose & face] = skin_rgb * 0.80
    img[mouth & face] = [0.48, 0.22, 0.22]

    # pose: photometric lighting gradient only, geometry untouched
    pose_rng = np_rng(spec.id_seed, "pose", pose_seed)
    theta = pose_rng.uniform(0.0, 2.0 * np.pi)
    strength = pose_rng.uniform(0.0, 0.05)
    grad = strength * ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)) / res
    img += grad[..., None]

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return RenderedFace(image=img, organ_mask=organ_mask, identity=spec, age=age,
                        face_mask=face)


def occlude(image: np.ndarray, seed: int) -> np.ndarray:
    """Block out a band of the image, simulating an unusable reference."""
    rng = np.random.default_rng(seed)
    out = image.copy()
    h, w = out.shape[:2]
    r0 = int(rng.integers(0, h // 2))
    out[r0:r0 + h // 2, :] = 0.05
    return out


# ---------------------------------------------------------------------------
# degradation

def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize on pixel centers (weights sum to one)."""
    in_h, in_w = img.shape[:2]

    def axis_coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    ylo, yhi, yf = axis_coords(out_h, in_h)
    xlo, xhi, xf = axis_coords(out_w, in_w)
    rows = img[ylo] * (1.0 - yf)[:, None, None] + img[yhi] * yf[:, None, None]
    out = rows[:, xlo] * (1.0 - xf)[None, :, None] + rows[:, xhi] * xf[None, :, None]
    return out


def degrade(image: np.ndarray, cfg: DegradeConfig) -> np.ndarray:
    """First-order degradation: blur, down/upscale, noise, quantization."""
    x = np.asarray(image, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("degrade: image contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("degrade: image values must lie in [0,1]")
    h, w = x.shape[:2]

    x = gaussian_filter(x, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0.0), mode="nearest")
    lo_h = max(1, round(h / cfg.downscale_factor))
    lo_w = max(1, round(w / cfg.downscale_factor))
    x = _resize_bilinear(x, lo_h, lo_w)
    x = _resize_bilinear(x, h, w)
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(cfg.seed)
        x = x + rng.normal(0.0, cfg.noise_sigma, x.shape)
    x = np.clip(x, 0.0, 1.0)
    levels = cfg.quant_levels
    x = np.round(x * (levels - 1)) / (levels - 1)
    return x.astype(np.float32)


# ---------------------------------------------------------------------------
# dataset construction

def _sample_ages(per_identity: int, rng: np.random.Generator) -> np.ndarray:
    """Ages stratified over the supported span so identities are cross-age."""
    base = np.linspace(10.0, 86.0, per_identity)
    jitter = rng.uniform(-6.0, 6.0, per_identity)
    return np.clip(np.round(base + jitter), AGE_MIN, AGE_MAX).astype(int)


def _sample_degrade(rng: np.random.Generator, seed: int, synth_cfg: dict | None) -> DegradeConfig:
    cfg = synth_cfg or {}
    blur_lo, blur_hi = cfg.get("blur_sigma_range", (0.5, 3.0))
    noise_lo, noise_hi = cfg.get("noise_sigma_range", (0.0, 0.1))
    factors = cfg.get("downscale_choices", [2, 3, 4])
    quants = cfg.get("quant_choices", [16, 32, 64, 256])
    return DegradeConfig(
        blur_sigma=float(rng.uniform(blur_lo, blur_hi)),
        downscale_factor=int(rng.choice(factors)),
        noise_sigma=float(rng.uniform(noise_lo, noise_hi)),
        quant_levels=int(rng.choice(quants)),
        seed=seed,
    )


def build_dataset(n_identities: int, images_per_identity: int, out_dir: str | Path,
                  seed: int, synth_cfg: dict | None = None,
                  split: str = "train") -> DatasetManifest:
    """Materialize a dataset on disk and return its manifest.

    Layout: images/, degraded/, masks/, face_masks/, manifest.json. Each
    record's references are other images of the same identity (never its
    own ground truth).
    """
    if n_identities < 2:
        raise ValueError("n_identities must be >= 2")
    if images_per_identity < 2:
        raise ValueError("images_per_identity must be >= 2 (references must be disjoint)")
    out_dir = Path(out_dir)
    resolution = int((synth_cfg or {}).get("resolution", BASE_RESOLUTION))
    for sub in ("images", "degraded", "masks", "face_masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    records: List[DatasetRecord] = []
    seen_ids: set[int] = set()
    for i in range(n_identities):
        spec_seed = derive_seed(seed, "identity-spec", split, i)
        identity_id = spec_seed % 10 ** 9
        if identity_id in seen_ids:
            identity_id = (identity_id + 1) % 10 ** 9
        seen_ids.add(identity_id)
        spec = gen_identity(spec_seed)
        rng = np_rng(seed, "identity-rng", split, i)
        ages = _sample_ages(images_per_identity, rng)

        gt_paths: List[str] = []
        for k in range(images_per_identity):
            face = render_face(spec, age_factor(int(ages[k])), pose_seed=int(rng.integers(2 ** 31)),
                               resolution=resolution)
            name = f"{identity_id:09d}_{k}.png"
            gt_rel = str(Path("images") / name)
            save_image(out_dir / gt_rel, face.image)
            save_mask(out_dir / "masks" / name, face.organ_mask)
            save_mask(out_dir / "face_masks" / name, face.face_mask)
            dcfg = _sample_degrade(rng, seed=derive_seed(seed, "degrade", split, i, k), synth_cfg=synth_cfg)
            save_image(out_dir / "degraded" / name, degrade(face.image, dcfg))
            gt_paths.append(gt_rel)
            records.append(DatasetRecord(
                identity_id=identity_id,
                gt_path=gt_rel,
                degraded_path=str(Path("degraded") / name),
                mask_path=str(Path("masks") / name),
                age_years=int(ages[k]),
                ref_paths=[],
            ))

        base = len(records) - images_per_identity
        for k in range(images_per_identity):
            others = [gt_paths[j] for j in range(images_per_identity) if j != k]
            n_ref = int(rng.integers(1, min(5, len(others)) + 1))
            picks = rng.choice(len(others), size=n_ref, replace=False)
            records[base + k].ref_paths = sorted(others[j] for j in picks)

    manifest = DatasetManifest(records=records, split=split, seed=seed, root=out_dir)
    manifest.save(out_dir / "manifest.json")
    manifest.validate()
    return manifest


def identity_groups(manifest: DatasetManifest) -> dict[int, List[DatasetRecord]]:
    groups: dict[int, List[DatasetRecord]] = {}
    for r in manifest.records:
        groups.setdefault(r.identity_id, []).append(r)
    return groups
