"""Synthetic multi-domain benchmarks, stratified splits and the dataset file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn_core import as_tensor

FORMAT_MAGIC = "UDIMDS"
FORMAT_VERSION = "v1"
CORRUPTIONS = ("gauss_noise", "contrast", "pixelate", "occlude")
GLYPH_SIZE = 8
GLYPH_CLASSES = ("disk", "cross", "bar", "ring")


@dataclass
class DomainDataset:
    domain_id: str
    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = as_tensor(self.inputs, "inputs")
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a 2-D (n, d) array")
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("labels and inputs disagree on n")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside 0..C-1")
        if not self.domain_id or any(c.isspace() for c in self.domain_id):
            raise ValueError(f"domain_id must be non-empty without whitespace: {self.domain_id!r}")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, domain_id: str | None = None) -> "DomainDataset":
        idx = np.asarray(idx)
        return DomainDataset(domain_id or self.domain_id, self.inputs[idx], self.labels[idx],
                             self.n_classes, dict(self.metadata))

    def with_inputs(self, inputs: np.ndarray, domain_id: str | None = None) -> "DomainDataset":
        return DomainDataset(domain_id or self.domain_id, inputs, self.labels.copy(),
                             self.n_classes, dict(self.metadata))


def merge(datasets: list[DomainDataset], domain_id: str = "source") -> DomainDataset:
    """Pool several domains into one (multi-source training treats them as one)."""
    if not datasets:
        raise ValueError("nothing to merge")
    C = max(d.n_classes for d in datasets)
    return DomainDataset(domain_id, np.concatenate([d.inputs for d in datasets]),
                         np.concatenate([d.labels for d in datasets]), C,
                         {"merged": ",".join(d.domain_id for d in datasets)})


def rotate(points: np.ndarray, angle_deg: float) -> np.ndarray:
    if angle_deg == 0:
        return points.copy()
    t = np.deg2rad(angle_deg)
    R = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    return points @ R.T


def _base_moons(n: int, noise: float, rng: np.random.Generator):
    half = n // 2
    t = rng.uniform(0.0, np.pi, size=n)
    upper = np.stack([np.cos(t[:half]), np.sin(t[:half])], axis=1)
    lower = np.stack([1.0 - np.cos(t[half:]), 0.5 - np.sin(t[half:])], axis=1)
    X = np.concatenate([upper, lower]) - np.array([0.5, 0.25])
    X = X + noise * rng.standard_normal(X.shape)
    y = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(n - half, dtype=np.int64)])
    return X, y


def make_moons_domains(n: int, angles_deg, noise: float = 0.1, seed: int = 0) -> list[DomainDataset]:
    """Two interleaving moons centred at the origin; domain e rotates them by angles[e]."""
    if n < 4 or n % 2:
        raise ValueError("n must be an even number >= 4")
    angles = [float(a) for a in angles_deg]
    if len(set(angles)) != len(angles):
        raise ValueError(f"duplicate rotation angles: {angles}")
    X, y = _base_moons(n, noise, np.random.default_rng(seed))
    out = []
    for a in angles:
        meta = {"generator": "moons", "shift": a, "severity": 0, "seed": seed, "noise": noise}
        out.append(DomainDataset(f"rot{a:g}", rotate(X, a), y.copy(), 2, meta))
    return out


def make_blobs_domains(n: int, C: int, shift_vectors, scale_factors, seed: int = 0,
                       spread: float = 3.0) -> list[DomainDataset]:
    """C Gaussian clusters; domain e moves the means by shift[e] and scales spread by scale[e].

    All domains share the same underlying standard-normal draws, so domain
    differences are exactly the configured shift/scale.
    """
    shifts = [np.asarray(s, dtype=np.float64) for s in shift_vectors]
    scales = [float(s) for s in scale_factors]
    if len(shifts) != len(scales):
        raise ValueError("need one scale factor per shift vector")
    if any(s <= 0 for s in scales):
        raise ValueError("scale factors must be positive")
    if C < 2 or n < C:
        raise ValueError("need C >= 2 and n >= C")
    d = shifts[0].size
    rng = np.random.default_rng(seed)
    means = spread * rng.standard_normal((C, d))
    y = np.arange(n) % C
    z = rng.standard_normal((n, d))
    out = []
    for e, (s, k) in enumerate(zip(shifts, scales)):
        X = means[y] + s + k * z
        meta = {"generator": "blobs", "shift": s.tolist(), "scale": k, "severity": 0, "seed": seed}
        out.append(DomainDataset(f"blobs{e}", X, y.copy(), C, meta))
    return out


def _draw_glyph(kind: str, cx: float, cy: float, intensity: float) -> np.ndarray:
    ys, xs = np.mgrid[0:GLYPH_SIZE, 0:GLYPH_SIZE].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    r = np.hypot(dx, dy)
    if kind == "disk":
        mask = r <= 2.2
    elif kind == "ring":
        mask = (r >= 1.8) & (r <= 3.1)
    elif kind == "cross":
        mask = ((np.abs(dx) <= 0.6) | (np.abs(dy) <= 0.6)) & (np.abs(dx) <= 3) & (np.abs(dy) <= 3)
    elif kind == "bar":
        mask = (np.abs(dy) <= 0.8) & (np.abs(dx) <= 3.2)
    else:
        raise ValueError(kind)
    return intensity * mask.astype(np.float64)


def make_glyphs(n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Clean 8x8 glyph images (flattened to 64 values in [0, 1]) with balanced labels."""
    C = len(GLYPH_CLASSES)
    if n < C or n % C:
        raise ValueError(f"n must be a positive multiple of {C}")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % C
    centres = 3.5 + rng.uniform(-0.75, 0.75, size=(n, 2))
    intensity = rng.uniform(0.7, 1.0, size=n)
    X = np.stack([_draw_glyph(GLYPH_CLASSES[k], cx, cy, a).ravel()
                  for k, (cx, cy), a in zip(y, centres, intensity)])
    return X, y.astype(np.int64)


def _block_average(X: np.ndarray, block: int = 2) -> np.ndarray:
    imgs = X.reshape(-1, GLYPH_SIZE // block, block, GLYPH_SIZE // block, block)
    avg = imgs.mean(axis=(2, 4), keepdims=True)
    return np.broadcast_to(avg, imgs.shape).reshape(X.shape)


def corrupt(X: np.ndarray, corruption: str, severity: int, rng: np.random.Generator) -> np.ndarray:
    """Apply a corruption of strength ``severity`` (0 = identity) to flattened glyphs."""
    if corruption not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {corruption!r}; expected one of {CORRUPTIONS}")
    if severity == 0:
        return X.copy()
    k = severity
    if corruption == "gauss_noise":
        return X + 0.05 * k * rng.standard_normal(X.shape)
    if corruption == "contrast":
        mean = X.mean(axis=1, keepdims=True)
        return mean + (1.0 - 0.18 * k) * (X - mean)
    if corruption == "pixelate":
        a = k / 5.0
        return (1.0 - a) * X + a * _block_average(X, 2)
    # occlude: grey square growing from a per-image anchor; bigger severities cover a superset
    side = k + 1
    out = X.reshape(-1, GLYPH_SIZE, GLYPH_SIZE).copy()
    anchors = rng.integers(0, GLYPH_SIZE - 6 + 1, size=(out.shape[0], 2))
    for img, (r0, c0) in zip(out, anchors):
        img[r0:r0 + side, c0:c0 + side] = 0.5
    return out.reshape(X.shape)


def make_glyphs_corrupted(n: int, corruption: str, severities, seed: int = 0) -> list[DomainDataset]:
    """One domain per severity level of a corruption applied to shared clean glyphs."""
    if corruption not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {corruption!r}; expected one of {CORRUPTIONS}")
    sev = [int(s) for s in severities]
    if any(s < 0 or s > 5 for s in sev):
        raise ValueError("severities must lie in 0..5")
    X, y = make_glyphs(n, seed)
    out = []
    for s in sev:
        # same anchors/noise stream per severity keeps corruptions nested across levels
        rng = np.random.default_rng([seed, 1])
        meta = {"generator": "glyphs", "corruption": corruption, "severity": s, "seed": seed}
        out.append(DomainDataset(f"{corruption}{s}", corrupt(X, corruption, s, rng), y.copy(),
                                 len(GLYPH_CLASSES), meta))
    return out


def split(d: DomainDataset, train_frac: float = 0.6, val_frac: float = 0.2, seed: int = 0):
    """Class-stratified (train, val, test) split; deterministic in ``seed``."""
    if not (0 < train_frac < 1 and 0 < val_frac < 1 and train_frac + val_frac < 1):
        raise ValueError("fractions must be in (0, 1) with train + val < 1")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in range(d.n_classes):
        idx = np.flatnonzero(d.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 3:
            raise ValueError(f"class {c} has only {idx.size} instances; need >= 3 to split")
        idx = idx[rng.permutation(idx.size)]
        n_tr = max(1, int(round(train_frac * idx.size)))
        n_va = max(1, int(round(val_frac * idx.size)))
        n_tr = min(n_tr, idx.size - 2)
        n_va = min(n_va, idx.size - n_tr - 1)
        parts[0].append(idx[:n_tr])
        parts[1].append(idx[n_tr:n_tr + n_va])
        parts[2].append(idx[n_tr + n_va:])
    names = ("train", "val", "test")
    return tuple(d.subset(np.sort(np.concatenate(p)), f"{d.domain_id}-{name}")
                 for p, name in zip(parts, names))


# -- file format -------------------------------------------------------------

class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def dumps_dataset(d: DomainDataset) -> str:
    if len(d) == 0:
        raise ValueError("refusing to save an empty dataset")
    n, dim = d.inputs.shape
    lines = [f"{FORMAT_MAGIC} {FORMAT_VERSION} {d.domain_id} {n} {dim} {d.n_classes}"]
    for key in sorted(d.metadata):
        if "=" in key or any(c.isspace() for c in key):
            raise ValueError(f"metadata key {key!r} must not contain '=' or whitespace")
        lines.append(f"{key}={json.dumps(d.metadata[key])}")
    lines.append("")
    for row, label in zip(d.inputs, d.labels):
        lines.append(" ".join(repr(float(v)) for v in row) + f" {int(label)}")
    return "\n".join(lines) + "\n"


def save_dataset(d: DomainDataset, path) -> None:
    Path(path).write_text(dumps_dataset(d), encoding="ascii")


def loads_dataset(text: str) -> DomainDataset:
    raw = text.encode("ascii")
    lines = raw.split(b"\n")
    offsets = np.cumsum([0] + [len(l) + 1 for l in lines])
    header = lines[0].decode().split(" ")
    if len(header) != 6 or header[0] != FORMAT_MAGIC:
        raise DatasetFormatError("malformed header", 0)
    if header[1] != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {header[1]!r}", len(FORMAT_MAGIC) + 1)
    try:
        domain_id, n, dim, C = header[2], int(header[3]), int(header[4]), int(header[5])
    except ValueError:
        raise DatasetFormatError("non-integer size in header", 0) from None
    meta = {}
    i = 1
    while i < len(lines) and lines[i] != b"":
        key, sep, value = lines[i].decode().partition("=")
        if not sep:
            raise DatasetFormatError("metadata line without '='", int(offsets[i]))
        try:
            meta[key] = json.loads(value)
        except json.JSONDecodeError:
            raise DatasetFormatError(f"bad metadata value for {key!r}", int(offsets[i])) from None
        i += 1
    if i >= len(lines):
        raise DatasetFormatError("missing blank line before data", len(raw))
    i += 1
    X = np.empty((n, dim))
    y = np.empty(n, dtype=np.int64)
    for r in range(n):
        li = i + r
        if li >= len(lines) or (lines[li] == b"" and li == len(lines) - 1):
            raise DatasetFormatError(f"truncated: expected {n} rows, found {r}", len(raw))
        fields = lines[li].split(b" ")
        if len(fields) != dim + 1:
            raise DatasetFormatError(f"row {r} has {len(fields)} fields, expected {dim + 1}",
                                     int(offsets[li]))
        try:
            X[r] = [float(f) for f in fields[:dim]]
            y[r] = int(fields[dim])
        except ValueError:
            raise DatasetFormatError(f"unparsable number in row {r}", int(offsets[li])) from None
    tail = b"\n".join(lines[i + n:])
    if tail.strip():
        raise DatasetFormatError("trailing data after last row", int(offsets[i + n]))
    if not raw.endswith(b"\n"):
        raise DatasetFormatError("truncated: missing final newline", len(raw))
    return DomainDataset(domain_id, X, y, C, meta)


def load_dataset(path) -> DomainDataset:
    return loads_dataset(Path(path).read_text(encoding="ascii"))
