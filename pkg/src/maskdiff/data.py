"""Dataset layout, image codec, and the generated toy lesion benchmark.

Samples are [4,H,W] float32 arrays: three color channels in [-1,1] plus a
binary mask channel in {-1,+1}. On disk a sample is an 8-bit color PNG
under ``images/`` and a grayscale mask PNG under ``masks/`` sharing the
basename; pipeline outputs additionally carry a lossless DTF1 sidecar.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dtf import load_tensor, save_tensor
from .rng import stream

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Sample:
    name: str
    x: np.ndarray  # [4,H,W] float32

    @property
    def colors(self) -> np.ndarray:
        return self.x[:3]

    @property
    def mask(self) -> np.ndarray:
        return self.x[3]


def colors_to_uint8(colors: np.ndarray) -> np.ndarray:
    """[3,H,W] in [-1,1] -> HWC uint8."""
    u8 = np.round((colors.astype(np.float64) + 1.0) * 127.5)
    return np.clip(u8, 0, 255).astype(np.uint8).transpose(1, 2, 0)


def uint8_to_colors(u8: np.ndarray) -> np.ndarray:
    """HWC uint8 -> [3,H,W] float32 in [-1,1]."""
    return (u8.astype(np.float64).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def mask_to_uint8(mask: np.ndarray) -> np.ndarray:
    return np.where(mask > 0, 255, 0).astype(np.uint8)


def uint8_to_mask(u8: np.ndarray) -> np.ndarray:
    """Binarize at the 8-bit midpoint: 127 -> -1, 128 -> +1."""
    return np.where(u8 > 127, 1.0, -1.0).astype(np.float32)


def resize_chw(img: np.ndarray, size: int) -> np.ndarray:
    """Antialiased bicubic resize of a [C,H,W] float array.

    This is the one resize used everywhere (loading, metric inputs), so
    scores are comparable across stages.
    """
    if img.shape[1] == size and img.shape[2] == size:
        return img.astype(np.float32)
    out = np.empty((img.shape[0], size, size), dtype=np.float32)
    for c in range(img.shape[0]):
        plane = Image.fromarray(img[c].astype(np.float32), mode="F")
        out[c] = np.asarray(plane.resize((size, size), Image.BICUBIC), dtype=np.float32)
    return out


def save_sample(sample: Sample, out_dir: str | Path, sidecar: bool = True) -> list[Path]:
    """Write <name>.png, <name>_mask.png, and optionally <name>.dtf."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    img_path = out_dir / f"{sample.name}.png"
    Image.fromarray(colors_to_uint8(sample.colors), mode="RGB").save(img_path)
    paths.append(img_path)
    mask_path = out_dir / f"{sample.name}_mask.png"
    Image.fromarray(mask_to_uint8(sample.mask), mode="L").save(mask_path)
    paths.append(mask_path)
    if sidecar:
        dtf_path = out_dir / f"{sample.name}.dtf"
        save_tensor(dtf_path, sample.x)
        paths.append(dtf_path)
    return paths


def load_sample(out_dir: str | Path, name: str, prefer_sidecar: bool = True) -> Sample:
    out_dir = Path(out_dir)
    dtf_path = out_dir / f"{name}.dtf"
    if prefer_sidecar and dtf_path.exists():
        return Sample(name, load_tensor(dtf_path))
    u8 = np.asarray(Image.open(out_dir / f"{name}.png").convert("RGB"))
    m8 = np.asarray(Image.open(out_dir / f"{name}_mask.png").convert("L"))
    return Sample(name, np.concatenate([uint8_to_colors(u8), uint8_to_mask(m8)[None]]))


def write_dataset(samples: list[Sample], root: str | Path) -> None:
    """Lay out samples as images/ and masks/ trees."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(colors_to_uint8(s.colors), mode="RGB").save(root / "images" / f"{s.name}.png")
        Image.fromarray(mask_to_uint8(s.mask), mode="L").save(root / "masks" / f"{s.name}.png")


def load_dataset(root: str | Path, size: int = 32) -> list[Sample]:
    """Decode, resize, rescale to [-1,1], and stack image+mask pairs.

    Masks binarize at the 8-bit midpoint after resizing. Errors name the
    offending basename.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise FileNotFoundError(f"{root}: expected images/ and masks/ subdirectories")
    samples = []
    stems = sorted(p.stem for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    if len(stems) != len(set(stems)):
        raise ValueError(f"{root}: duplicate basenames in images/")
    for stem in stems:
        img_path = next(p for p in img_dir.iterdir() if p.stem == stem and p.suffix.lower() in IMAGE_EXTS)
        mask_candidates = [p for p in mask_dir.iterdir() if p.stem == stem and p.suffix.lower() in IMAGE_EXTS]
        if not mask_candidates:
            raise FileNotFoundError(f"sample {stem!r}: no mask file")
        try:
            img = Image.open(img_path).convert("RGB")
            mask = Image.open(mask_candidates[0]).convert("L")
        except Exception as exc:
            raise ValueError(f"sample {stem!r}: unreadable file ({exc})") from exc
        if img.size != mask.size:
            raise ValueError(f"sample {stem!r}: image dims {img.size} != mask dims {mask.size}")
        colors = uint8_to_colors(np.asarray(img))
        m = np.asarray(mask).astype(np.float32)
        if colors.shape[1] != size:
            colors = resize_chw(colors, size)
        if m.shape[0] != size:
            m = resize_chw(m[None], size)[0]
        mask_ch = np.where(m > 127, 1.0, -1.0).astype(np.float32)
        samples.append(Sample(stem, np.concatenate([colors, mask_ch[None]]).astype(np.float32)))
    return samples


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap color values to the 8-bit grid so memory and disk agree."""
    return (np.round((x + 1.0) * 127.5) / 127.5 - 1.0).astype(np.float32)


def gen_toy_data(
    count: int,
    seed: int,
    size: int = 32,
    shifted: bool = False,
    name_prefix: str = "toy",
) -> list[Sample]:
    """Deterministic lesion benchmark: smooth textured backgrounds with one
    blob-shaped lesion per image and an exact support mask.

    The shifted variant changes the background palette and noise level to
    stand in for a dataset with different acquisition statistics.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    samples = []
    for i in range(count):
        rng = stream(seed, "toy-shifted" if shifted else "toy", i)
        if shifted:
            base = np.array([
                rng.uniform(-0.2, 0.2),
                rng.uniform(0.0, 0.45),
                rng.uniform(-0.1, 0.35),
            ])
            noise_sigma = 0.06
        else:
            base = np.array([
                rng.uniform(0.05, 0.55),
                rng.uniform(-0.25, 0.15),
                rng.uniform(-0.35, 0.05),
            ])
            noise_sigma = 0.03
        img = np.empty((3, size, size), dtype=np.float64)
        for c in range(3):
            img[c] = base[c]
            for _ in range(2):
                amp = rng.uniform(0.04, 0.14)
                fx, fy = rng.uniform(0.5, 2.5, size=2)
                phase = rng.uniform(0, 2 * np.pi)
                img[c] += amp * np.cos(2 * np.pi * (fx * xx + fy * yy) + phase)
        img += rng.normal(0.0, noise_sigma, size=img.shape)

        # blob lesion: harmonic perturbation of a circle, exact support mask
        for _ in range(32):
            cy, cx = rng.uniform(0.3, 0.7, size=2)
            r0 = rng.uniform(0.13, 0.27)
            a1, a2 = rng.uniform(0.0, 0.3, size=2)
            p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
            ang = np.arctan2(yy - cy, xx - cx)
            bound = r0 * (1.0 + a1 * np.cos(ang + p1) + a2 * np.cos(2 * ang + p2))
            dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
            mask = dist <= bound
            if mask.sum() >= 9:
                break
        shade = np.clip(1.0 - 0.5 * dist / np.maximum(bound, 1e-6), 0.3, 1.0)
        lesion_color = base + np.array([
            rng.uniform(0.25, 0.5),
            rng.uniform(-0.3, -0.05),
            rng.uniform(-0.2, 0.1),
        ])
        tex = rng.normal(0.0, noise_sigma, size=(3, size, size))
        for c in range(3):
            img[c] = np.where(mask, lesion_color[c] * shade + tex[c], img[c])
        colors = quantize(np.clip(img, -1.0, 1.0))
        mask_ch = np.where(mask, 1.0, -1.0).astype(np.float32)
        samples.append(Sample(f"{name_prefix}{i:04d}", np.concatenate([colors, mask_ch[None]])))
    return samples


def stack_dataset(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.x for s in samples])


def hash_paths(paths: list[Path], base: Path | None = None) -> str:
    """Order-independent content hash over files (sorted by relative name)."""
    entries = []
    for p in paths:
        rel = str(p.relative_to(base)) if base else p.name
        entries.append((rel, p))
    h = hashlib.sha256()
    for rel, p in sorted(entries):
        h.update(rel.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def hash_paths_combine(digests: list[str]) -> str:
    h = hashlib.sha256()
    for d in digests:
        h.update(d.encode())
    return h.hexdigest()[:16]
