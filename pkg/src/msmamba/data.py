"""Image I/O and synthetic degradations for desk-scale experiments.

Images travel through this module as float32 ``[3,H,W]`` arrays in [0,1].
Loading supports 8-bit RGB PNG (via Pillow) and binary PPM (P6, parsed by
hand so malformed files can be reported with a byte offset). Every
degradation generator is a pure function of (clean, params, seed):
re-invocation with the same arguments is bitwise identical.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .tensor import ContractViolation

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageIOError(IOError):
    """Unreadable or malformed image file; ``offset`` is the failing byte."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class DegradationSpec:
    """Recipe that produced a degraded image: kind + numeric params + seed."""

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class ImageSample:
    """Clean/degraded pair in [0,1] float RGB with provenance."""

    clean: np.ndarray
    degraded: np.ndarray
    degradation: DegradationSpec
    id: str = ""

    def __post_init__(self):
        if self.clean.shape != self.degraded.shape:
            raise ContractViolation(
                f"sample {self.id!r}: clean {self.clean.shape} vs "
                f"degraded {self.degraded.shape}"
            )


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def _parse_ppm(buf: bytes, path: str) -> np.ndarray:
    pos = 0

    def skip_space():
        nonlocal pos
        while pos < len(buf):
            c = buf[pos : pos + 1]
            if c.isspace():
                pos += 1
            elif c == b"#":  # comment runs to end of line
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b""):
                    pos += 1
            else:
                return

    def read_int(what: str) -> int:
        nonlocal pos
        skip_space()
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise ImageIOError(f"{path}: expected {what} in PPM header", start)
        return int(buf[start:pos])

    if buf[:2] != b"P6":
        raise ImageIOError(f"{path}: not a binary PPM (P6) file", 0)
    pos = 2
    width = read_int("width")
    height = read_int("height")
    maxval = read_int("maxval")
    if maxval != 255:
        raise ImageIOError(f"{path}: only maxval 255 supported, got {maxval}", pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageIOError(f"{path}: missing whitespace after maxval", pos)
    pos += 1  # exactly one whitespace byte before the raster
    need = width * height * 3
    raster = buf[pos : pos + need]
    if len(raster) < need:
        raise ImageIOError(
            f"{path}: truncated pixel data, need {need} bytes, have {len(raster)}",
            pos + len(raster),
        )
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return arr


def load_image(path: str) -> np.ndarray:
    """Read an 8-bit PNG or PPM(P6) file as float32 ``[3,H,W]`` in [0,1]."""
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise ImageIOError(f"cannot read {path}: {e.strerror}", 0) from e
    if buf[: len(_PNG_SIGNATURE)] == _PNG_SIGNATURE:
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except Exception as e:  # Pillow raises several unrelated types
            raise ImageIOError(f"{path}: corrupt PNG: {e}", len(_PNG_SIGNATURE)) from e
    elif buf[:2] == b"P6":
        arr = _parse_ppm(buf, path)
    else:
        raise ImageIOError(f"{path}: unsupported format (not PNG or PPM P6)", 0)
    return np.ascontiguousarray(arr.transpose(2, 0, 1)).astype(np.float32) / 255.0


def save_image(img: np.ndarray, path: str) -> None:
    """Write ``[3,H,W]`` [0,1] floats as 8-bit PNG or PPM by extension."""
    arr = np.asarray(getattr(img, "data", img))
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContractViolation(f"save_image expects [3,H,W], got {arr.shape}")
    q = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    hwc = np.ascontiguousarray(q.transpose(1, 2, 0))
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        Image.fromarray(hwc, mode="RGB").save(path, format="PNG")
    elif ext in (".ppm", ".pnm"):
        h, w = hwc.shape[:2]
        with open(path, "wb") as f:
            f.write(b"P6\n%d %d\n255\n" % (w, h))
            f.write(hwc.tobytes())
    else:
        raise ContractViolation(f"save_image: unsupported extension {ext!r}")


# ---------------------------------------------------------------------------
# degradation generators
# ---------------------------------------------------------------------------


def _clip01(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def synth_noise(clean: np.ndarray, sigma: float, seed: int = 0) -> ImageSample:
    """Additive Gaussian noise, clamped to [0,1]."""
    if not 0.0 < sigma <= 1.0:
        raise ContractViolation(f"sigma must be in (0,1], got {sigma}")
    rng = np.random.default_rng(seed)
    noisy = clean + rng.normal(0.0, sigma, size=clean.shape)
    spec = DegradationSpec("noise", {"sigma": sigma}, seed)
    return ImageSample(clean, _clip01(noisy), spec)


def rain_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Oriented motion-blur kernel: a rasterized line of total mass 1.

    At 90 degrees this is a vertical line of ``1/length`` entries.
    """
    if length < 2:
        raise ContractViolation(f"streak length must be >= 2, got {length}")
    k = length if length % 2 == 1 else length + 1
    kern = np.zeros((k, k))
    theta = np.deg2rad(angle_deg)
    c = (k - 1) / 2.0
    for i in range(length):
        off = i - (length - 1) / 2.0
        row = int(round(c + off * np.sin(theta)))
        col = int(round(c + off * np.cos(theta)))
        kern[row, col] += 1.0 / length
    return kern


def _convolve_same(field: np.ndarray, kern: np.ndarray) -> np.ndarray:
    k = kern.shape[0]
    p = k // 2
    padded = np.pad(field, p)
    view = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return np.tensordot(view, kern[::-1, ::-1], axes=([2, 3], [0, 1]))


def synth_rain(
    clean: np.ndarray,
    density: float,
    length: int = 9,
    angle: float = 75.0,
    intensity: float = 0.8,
    seed: int = 0,
) -> ImageSample:
    """Additive rain streaks: a sparse point field blurred along one direction."""
    if not 0.0 <= density < 1.0:
        raise ContractViolation(f"density must be in [0,1), got {density}")
    rng = np.random.default_rng(seed)
    h, w = clean.shape[1], clean.shape[2]
    field = (rng.random((h, w)) < density).astype(np.float64)
    if density > 0.0:
        streaks = _convolve_same(field, rain_kernel(length, angle))
    else:
        streaks = field
    rained = clean + intensity * streaks[None]
    spec = DegradationSpec(
        "rain",
        {"density": density, "length": length, "angle": angle, "intensity": intensity},
        seed,
    )
    return ImageSample(clean, _clip01(rained), spec)


def pseudo_depth(h: int, w: int, seed: int) -> np.ndarray:
    """Smooth depth proxy in [0.5, 2]: a 4x4 seeded grid, bilinearly upsampled."""
    rng = np.random.default_rng(seed)
    grid = rng.uniform(0.5, 2.0, size=(4, 4))
    ys = np.linspace(0.0, 3.0, h) if h > 1 else np.zeros(1)
    xs = np.linspace(0.0, 3.0, w) if w > 1 else np.zeros(1)
    y0 = np.minimum(ys.astype(int), 2)
    x0 = np.minimum(xs.astype(int), 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    tl = grid[np.ix_(y0, x0)]
    tr = grid[np.ix_(y0, x0 + 1)]
    bl = grid[np.ix_(y0 + 1, x0)]
    br = grid[np.ix_(y0 + 1, x0 + 1)]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def synth_haze(clean: np.ndarray, beta: float, A: float = 0.9, seed: int = 0) -> ImageSample:
    """Atmospheric scattering: clean*t + A*(1-t) with t = exp(-beta*depth)."""
    if beta < 0.0:
        raise ContractViolation(f"beta must be >= 0, got {beta}")
    if not 0.7 <= A <= 1.0:
        raise ContractViolation(f"airlight A must be in [0.7,1], got {A}")
    h, w = clean.shape[1], clean.shape[2]
    t = np.exp(-beta * pseudo_depth(h, w, seed))[None]
    hazy = clean * t + A * (1.0 - t)
    spec = DegradationSpec("haze", {"beta": beta, "A": A}, seed)
    return ImageSample(clean, _clip01(hazy), spec)


def synth_lowlight(
    clean: np.ndarray,
    gamma: float = 2.2,
    scale: float = 0.3,
    read_noise: float = 0.01,
    seed: int = 0,
) -> ImageSample:
    """Underexposure: power curve darkening, linear scaling, sensor noise."""
    if gamma < 1.0:
        raise ContractViolation(f"gamma must be >= 1, got {gamma}")
    if not 0.0 < scale <= 1.0:
        raise ContractViolation(f"scale must be in (0,1], got {scale}")
    rng = np.random.default_rng(seed)
    dark = scale * np.power(clean, gamma)
    if read_noise > 0.0:
        dark = dark + rng.normal(0.0, read_noise, size=clean.shape)
    spec = DegradationSpec(
        "lowlight", {"gamma": gamma, "scale": scale, "read_noise": read_noise}, seed
    )
    return ImageSample(clean, _clip01(dark), spec)


def synthetic_scene(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural clean content: gradients, disks and band-limited texture.

    Gives degradation experiments something structured to restore without
    shipping photographs; output is float32 ``[3,h,w]`` within [0.02, 0.98]
    so additive noise is rarely clipped.
    """
    yy, xx = np.mgrid[0:h, 0:w]
    yn = yy / max(h - 1, 1)
    xn = xx / max(w - 1, 1)
    img = np.zeros((3, h, w))
    for c in range(3):
        a, b, d = rng.uniform(-0.4, 0.4, 3)
        img[c] = 0.5 + a * (xn - 0.5) + b * (yn - 0.5) + d * (xn - 0.5) * (yn - 0.5)
    for _ in range(int(rng.integers(2, 5))):
        cy = rng.uniform(0.1 * h, 0.9 * h)
        cx = rng.uniform(0.1 * w, 0.9 * w)
        r = rng.uniform(0.06, 0.22) * min(h, w)
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        col = rng.uniform(0.1, 0.9, 3)
        for c in range(3):
            img[c][mask] = 0.7 * col[c] + 0.3 * img[c][mask]
    texture = np.zeros((3, h, w))
    for c in range(3):
        spec = np.zeros((h, w // 2 + 1), dtype=complex)
        kh, kw = min(4, h), min(5, w // 2 + 1)
        spec[:kh, :kw] = rng.normal(0, 1, (kh, kw)) + 1j * rng.normal(0, 1, (kh, kw))
        texture[c] = np.fft.irfft2(spec, s=(h, w))
    texture *= 0.15 / (np.abs(texture).max() + 1e-9)
    return np.clip(img + texture, 0.02, 0.98).astype(np.float32)


_GENERATORS = {
    "noise": synth_noise,
    "rain": synth_rain,
    "haze": synth_haze,
    "lowlight": synth_lowlight,
}


def synthesize(clean: np.ndarray, kind: str, params: dict, seed: int = 0) -> ImageSample:
    """Dispatch to a degradation generator by name."""
    if kind not in _GENERATORS:
        raise ContractViolation(
            f"unknown degradation {kind!r}; expected one of {sorted(_GENERATORS)}"
        )
    return _GENERATORS[kind](clean, seed=seed, **params)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def random_patch_augment(sample: ImageSample, patch: int, seed: int = 0):
    """Seeded paired crop plus one of the 8 dihedral flips/rotations.

    The identical window and transform are applied to clean and degraded,
    so the pair can never desynchronize.
    """
    h, w = sample.clean.shape[1], sample.clean.shape[2]
    if patch > min(h, w):
        raise ContractViolation(f"patch {patch} exceeds image size {h}x{w}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - patch + 1))
    left = int(rng.integers(0, w - patch + 1))
    quarter_turns = int(rng.integers(0, 4))
    mirror = bool(rng.integers(0, 2))

    def xform(img):
        out = img[:, top : top + patch, left : left + patch]
        out = np.rot90(out, quarter_turns, axes=(1, 2))
        if mirror:
            out = out[:, :, ::-1]
        return np.ascontiguousarray(out)

    return xform(sample.clean), xform(sample.degraded)


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def _format_params(params: dict) -> str:
    return ",".join(f"{k}={params[k]}" for k in sorted(params))


def _parse_params(text: str) -> dict:
    params = {}
    if not text:
        return params
    for pair in text.split(","):
        key, _, val = pair.partition("=")
        try:
            num = float(val)
            params[key] = int(num) if num.is_integer() and "." not in val else num
        except ValueError:
            params[key] = val
    return params


def write_manifest(path: str, records: list) -> None:
    """Records are (id, clean_path, kind, params) tuples; params include seed."""
    with open(path, "w") as f:
        for rec_id, clean_path, kind, params in records:
            f.write(f"{rec_id}\t{clean_path}\t{kind}\t{_format_params(params)}\n")


def read_manifest(path: str) -> list:
    records = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ContractViolation(
                    f"{path}:{ln}: expected 4 tab-separated fields, got {len(parts)}"
                )
            rec_id, clean_path, kind, params_text = parts
            records.append((rec_id, clean_path, kind, _parse_params(params_text)))
    return records


def load_manifest_samples(manifest_path: str) -> list:
    """Materialize every manifest record into an ImageSample."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    for rec_id, clean_path, kind, params in read_manifest(manifest_path):
        if not os.path.isabs(clean_path):
            clean_path = os.path.join(base, clean_path)
        clean = load_image(clean_path)
        params = dict(params)
        seed = int(params.pop("seed", 0))
        sample = synthesize(clean, kind, params, seed)
        sample.id = rec_id
        samples.append(sample)
    return samples
