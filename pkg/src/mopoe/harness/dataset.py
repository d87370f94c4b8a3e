"""Procedural multimodal bitmap datasets.

Every sample carries one class label rendered as a fixed glyph; each
modality composites that glyph onto its own deterministic background
pattern by inverting the background under the glyph, adds per-sample
noise, and binarizes at 0.5. Shared information across modalities is
therefore exactly the label; everything else is modality-specific.

Container format, one file per split per modality (and one for labels):
magic "MMDS", u32 version, u32 count, u32 dims, u32 dtype code
(1 = u8 pixels, 2 = u16 labels), all little-endian, then the payload.
An idx reader/writer covers the classic big-endian digit-file layout
for externally supplied data.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "ConfigInvalid",
    "MultimodalSample",
    "SyntheticSetConfig",
    "SyntheticDataset",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "read_idx",
    "write_idx",
    "glyph_bitmap",
    "background_pattern",
    "background_intensity",
    "flip_probability",
]

MMDS_MAGIC = b"MMDS"
MMDS_VERSION = 1
DTYPE_PIXELS = 1
DTYPE_LABELS = 2

IDX_MAGIC_LABELS = 0x00000801
IDX_MAGIC_IMAGES = 0x00000803


class ConfigInvalid(ValueError):
    """Dataset configuration failed validation."""


def _popcount(values: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    v = values.copy()
    while np.any(v):
        out += v & 1
        v >>= 1
    return out


def glyph_bitmap(label: int, side: int) -> np.ndarray:
    """Boolean side x side class glyph: a Walsh pattern on the 8x8 grid.

    Distinct labels give codewords that disagree on exactly half the 64
    master pixels, and xoring with a common background preserves those
    distances, so classes stay maximally separated on every modality.
    """
    code = (label % 10) + 1
    idx = np.arange(64)
    base = (_popcount(idx & code) % 2).astype(bool).reshape(8, 8)
    if side == 8:
        return base
    scale = np.minimum((np.arange(side) * 8) // side, 7)
    return base[np.ix_(scale, scale)]


def background_pattern(pattern_id: int, side: int) -> np.ndarray:
    """Deterministic background field in [0, 1]; distinct per pattern id."""
    xs, ys = np.meshgrid(np.linspace(0, 1, side), np.linspace(0, 1, side), indexing="ij")
    family = pattern_id % 6
    scale = 1 + pattern_id // 6
    if family == 0:
        val = xs
    elif family == 1:
        val = ys
    elif family == 2:
        val = ((np.floor(xs * 4 * scale) + np.floor(ys * 4 * scale)) % 2) * 0.7 + 0.15
    elif family == 3:
        val = 0.5 + 0.5 * np.sin(2 * np.pi * scale * 2 * xs)
    elif family == 4:
        val = (xs + ys) / 2.0
    else:
        val = np.clip(1.2 * np.sqrt((xs - 0.5) ** 2 + (ys - 0.5) ** 2) * 2, 0, 1)
    return val


def background_intensity(pattern_id: int, side: int) -> np.ndarray:
    """Rendering background: the pattern pushed to {0.1, 0.9}.

    Keeping intensities away from the 0.5 binarization threshold makes
    the per-pixel flip probability a clean function of the noise level:
    zero below 0.4, (1 - 0.4/noise)/2 above it.
    """
    return 0.1 + 0.8 * (background_pattern(pattern_id, side) > 0.5)


def flip_probability(noise: float) -> float:
    """Chance that noise flips a background pixel across the threshold."""
    if noise <= 0.4:
        return 0.0
    return 0.5 * (1.0 - 0.4 / noise)


class SyntheticSetConfig:
    """Generator settings; one background pattern and noise level per
    modality."""

    __slots__ = ("M", "classes", "train", "test", "side", "patterns", "noise", "seed")

    def __init__(
        self,
        M: int,
        train: int,
        test: int,
        classes: int = 10,
        side: int = 8,
        patterns=None,
        noise=0.55,
        seed: int = 0,
    ):
        if M < 1 or train < 1 or test < 1:
            raise ConfigInvalid("M, train, and test must be positive")
        if not 2 <= classes <= 10:
            raise ConfigInvalid("classes must be in [2, 10]")
        if side < 4:
            raise ConfigInvalid("side must be at least 4")
        self.M = int(M)
        self.classes = int(classes)
        self.train = int(train)
        self.test = int(test)
        self.side = int(side)
        self.patterns = list(patterns) if patterns is not None else list(range(M))
        if len(self.patterns) != M:
            raise ConfigInvalid("one background pattern per modality required")
        if np.isscalar(noise):
            self.noise = [float(noise)] * M
        else:
            self.noise = [float(v) for v in noise]
        if len(self.noise) != M or any(v < 0 or v > 1 for v in self.noise):
            raise ConfigInvalid("noise levels must be in [0, 1], one per modality")
        self.seed = int(seed)

    @property
    def dims(self) -> int:
        return self.side * self.side

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "classes": self.classes,
            "train": self.train,
            "test": self.test,
            "side": self.side,
            "patterns": self.patterns,
            "noise": self.noise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSetConfig":
        return cls(
            d["M"],
            d["train"],
            d["test"],
            classes=d["classes"],
            side=d["side"],
            patterns=d["patterns"],
            noise=d["noise"],
            seed=d["seed"],
        )


class MultimodalSample:
    """One sample: per-modality tensors, its label, and a presence mask."""

    __slots__ = ("xs", "label", "present")

    def __init__(self, xs, label: int, present=None):
        self.xs = list(xs)
        self.label = int(label)
        self.present = list(present) if present is not None else [x is not None for x in xs]


class SyntheticDataset:
    """Column layout: one (N, dims) float array of {0,1} per modality."""

    __slots__ = ("xs", "labels", "side")

    def __init__(self, xs: list[np.ndarray], labels: np.ndarray, side: int):
        self.xs = xs
        self.labels = labels
        self.side = side

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def M(self) -> int:
        return len(self.xs)

    def sample(self, i: int) -> MultimodalSample:
        return MultimodalSample([x[i] for x in self.xs], self.labels[i])

    def subset(self, idx) -> "SyntheticDataset":
        return SyntheticDataset([x[idx] for x in self.xs], self.labels[idx], self.side)


def _render_split(config: SyntheticSetConfig, n: int, rng: np.random.Generator) -> SyntheticDataset:
    side = config.side
    glyphs = [glyph_bitmap(c, side) for c in range(config.classes)]
    backgrounds = [background_intensity(p, side) for p in config.patterns]
    labels = rng.integers(config.classes, size=n).astype(np.int64)
    xs = [np.empty((n, side * side)) for _ in range(config.M)]
    for i in range(n):
        g = glyphs[labels[i]]
        for j in range(config.M):
            noisy = backgrounds[j] + config.noise[j] * rng.uniform(-1.0, 1.0, size=(side, side))
            bg_bit = noisy > 0.5
            composite = np.where(g, ~bg_bit, bg_bit)
            xs[j][i] = composite.astype(np.float64).ravel()
    return SyntheticDataset(xs, labels, side)


def generate_dataset(config: SyntheticSetConfig) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Deterministic train/test splits from one seeded stream."""
    rng = np.random.default_rng(config.seed)
    train = _render_split(config, config.train, rng)
    test = _render_split(config, config.test, rng)
    return train, test


def _write_mmds(path: Path, payload: bytes, count: int, dims: int, dtype_code: int) -> None:
    with open(path, "wb") as f:
        f.write(MMDS_MAGIC)
        f.write(struct.pack("<IIII", MMDS_VERSION, count, dims, dtype_code))
        f.write(payload)


def _read_mmds(path: Path) -> tuple[np.ndarray, int, int]:
    raw = Path(path).read_bytes()
    if raw[:4] != MMDS_MAGIC:
        raise ConfigInvalid(f"{path}: bad magic")
    version, count, dims, dtype_code = struct.unpack("<IIII", raw[4:20])
    if version != MMDS_VERSION:
        raise ConfigInvalid(f"{path}: unsupported version {version}")
    payload = raw[20:]
    if dtype_code == DTYPE_PIXELS:
        arr = np.frombuffer(payload, dtype=np.uint8)
    elif dtype_code == DTYPE_LABELS:
        arr = np.frombuffer(payload, dtype="<u2")
    else:
        raise ConfigInvalid(f"{path}: unknown dtype code {dtype_code}")
    if arr.size != count * dims:
        raise ConfigInvalid(f"{path}: payload size disagrees with header")
    return arr.reshape(count, dims), count, dims


def save_dataset(out_dir, config: SyntheticSetConfig, train: SyntheticDataset, test: SyntheticDataset) -> dict:
    """Write split/modality files plus a manifest with content hashes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for split_name, split in (("train", train), ("test", test)):
        for j, x in enumerate(split.xs):
            path = out / f"{split_name}_m{j}.mmds"
            _write_mmds(
                path,
                x.astype(np.uint8).tobytes(),
                len(split),
                x.shape[1],
                DTYPE_PIXELS,
            )
            files[path.name] = _sha256(path)
        lpath = out / f"{split_name}_labels.mmds"
        _write_mmds(
            lpath,
            split.labels.astype("<u2").tobytes(),
            len(split),
            1,
            DTYPE_LABELS,
        )
        files[lpath.name] = _sha256(lpath)
    manifest = {"config": config.to_dict(), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(data_dir) -> tuple[SyntheticSetConfig, SyntheticDataset, SyntheticDataset]:
    data = Path(data_dir)
    manifest = json.loads((data / "manifest.json").read_text())
    config = SyntheticSetConfig.from_dict(manifest["config"])
    splits = []
    for split_name, n in (("train", config.train), ("test", config.test)):
        xs = []
        for j in range(config.M):
            arr, count, dims = _read_mmds(data / f"{split_name}_m{j}.mmds")
            if count != n or dims != config.dims:
                raise ConfigInvalid(f"{split_name}_m{j}: header disagrees with config")
            xs.append(arr.astype(np.float64))
        labels, count, dims = _read_mmds(data / f"{split_name}_labels.mmds")
        splits.append(SyntheticDataset(xs, labels.ravel().astype(np.int64), config.side))
    return config, splits[0], splits[1]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def read_idx(path_or_bytes) -> np.ndarray:
    """Classic big-endian idx container: labels (1-D u8) or images (3-D u8)."""
    raw = path_or_bytes if isinstance(path_or_bytes, bytes) else Path(path_or_bytes).read_bytes()
    if len(raw) < 8:
        raise ConfigInvalid("idx data too short")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IDX_MAGIC_LABELS:
        (count,) = struct.unpack(">I", raw[4:8])
        body = np.frombuffer(raw[8:], dtype=np.uint8)
        if body.size != count:
            raise ConfigInvalid("idx label payload size mismatch")
        return body.copy()
    if magic == IDX_MAGIC_IMAGES:
        count, rows, cols = struct.unpack(">III", raw[4:16])
        body = np.frombuffer(raw[16:], dtype=np.uint8)
        if body.size != count * rows * cols:
            raise ConfigInvalid("idx image payload size mismatch")
        return body.reshape(count, rows, cols).copy()
    raise ConfigInvalid(f"unknown idx magic 0x{magic:08x}")


def write_idx(path, array: np.ndarray) -> None:
    """Inverse of read_idx, for fixtures and exports."""
    arr = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        if arr.ndim == 1:
            f.write(struct.pack(">II", IDX_MAGIC_LABELS, arr.shape[0]))
        elif arr.ndim == 3:
            f.write(struct.pack(">IIII", IDX_MAGIC_IMAGES, *arr.shape))
        else:
            raise ConfigInvalid("idx arrays are 1-D labels or 3-D images")
        f.write(arr.tobytes())
