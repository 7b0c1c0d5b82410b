"""Datasets, IDX/CSV ingestion, CSR size estimates, checkpoints and mask files.

Binary layouts (all multi-byte fields little-endian unless noted):

Checkpoint::

    b"ECRPCKPT"  u16 version  u32 n  <n bytes of UTF-8 JSON descriptor>
    per layer:   weight f32[] | bias f32[] | gate f32[] (if present)
                 | weight_mask packed bits | bias_mask packed bits
    detector (if descriptor["detector"]):
                 theta0 f32[] | th f64 | delta1 f64 (NaN if unset)
                 | triggered i32 (-1 if unset) | u32 m | history f64[m]

Mask sidecar::

    b"ECRPMASK"  u16 version  u32 n_layers
    per layer:   u32 layer  u32 ndim  u32 dims[ndim]  u64 bit_offset
    payload:     all masks' bits, concatenated, packed little-endian bitorder

IDX files follow the usual big-endian convention: two zero bytes, a dtype
code, the number of dimensions, then one big-endian u32 per dimension.
"""

from __future__ import annotations

import csv
import gzip
import io
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from filelock import FileLock

from .models import Layer, Model

SYNTHETIC = ("two_moons", "spirals", "sine_regression")

CHECKPOINT_MAGIC = b"ECRPCKPT"
CHECKPOINT_VERSION = 1
MASK_MAGIC = b"ECRPMASK"
MASK_VERSION = 1

IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    """Malformed binary or text input."""


class CheckpointVersionError(FormatError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    task: str  # "classification" or "regression"
    n_classes: int = 0
    name: str = ""
    seed: int = 0

    @property
    def inputs(self) -> np.ndarray:
        return np.concatenate([self.x_train, self.x_test])

    @property
    def targets(self) -> np.ndarray:
        return np.concatenate([self.y_train, self.y_test])

    def __len__(self) -> int:
        return len(self.x_train) + len(self.x_test)

    @property
    def n_features(self) -> int:
        return int(np.prod(self.x_train.shape[1:]))

    @property
    def n_outputs(self) -> int:
        return self.n_classes if self.task == "classification" else int(np.prod(self.y_train.shape[1:]) or 1)

    def train_head(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """First ``n`` training samples (the whole split if smaller)."""
        return self.x_train[:n], self.y_train[:n]


def split(inputs: np.ndarray, targets: np.ndarray, seed: int, train_fraction: float = 0.8):
    perm = np.random.default_rng(seed).permutation(len(inputs))
    n_train = int(round(train_fraction * len(inputs)))
    tr, te = perm[:n_train], perm[n_train:]
    return inputs[tr], targets[tr], inputs[te], targets[te]


def _two_moons(n: int, rng: np.random.Generator):
    n_upper = n // 2
    n_lower = n - n_upper
    t_up = np.linspace(0.0, np.pi, n_upper)
    t_lo = np.linspace(0.0, np.pi, n_lower)
    upper = np.stack([np.cos(t_up), np.sin(t_up)], axis=1)
    lower = np.stack([1.0 - np.cos(t_lo), 0.5 - np.sin(t_lo)], axis=1)
    x = np.concatenate([upper, lower])
    y = np.concatenate([np.zeros(n_upper, dtype=np.int64), np.ones(n_lower, dtype=np.int64)])
    return x, y


def _spirals(n: int, rng: np.random.Generator):
    n0 = n // 2
    n1 = n - n0
    arms = []
    for label, m in ((0, n0), (1, n1)):
        t = np.linspace(0.25, 1.0, m) * 3 * np.pi
        phase = label * np.pi
        arms.append(np.stack([t * np.cos(t + phase), t * np.sin(t + phase)], axis=1) / (3 * np.pi))
    y = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    return np.concatenate(arms), y


def make_synthetic(name: str, n: int = 1000, noise: float = 0.1, seed: int = 0) -> Dataset:
    """Deterministic toy dataset with an 80/20 train/test split."""
    if name not in SYNTHETIC:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {SYNTHETIC}")
    if n < 10:
        raise ConfigError(f"need at least 10 samples, got {n}")
    rng = np.random.default_rng(seed)
    if name == "sine_regression":
        x = rng.uniform(-np.pi, np.pi, size=(n, 1))
        y = np.sin(x)
        if noise:
            y = y + noise * rng.standard_normal(y.shape)
        return Dataset(*split(x, y, seed), task="regression", name=name, seed=seed)
    x, y = _two_moons(n, rng) if name == "two_moons" else _spirals(n, rng)
    if noise:
        x = x + noise * rng.standard_normal(x.shape)
    return Dataset(*split(x, y, seed), task="classification", n_classes=2, name=name, seed=seed)


# -- IDX / CSV -----------------------------------------------------------------


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed) into a native-endian array."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte 0: need 4 bytes, file has {len(raw)}")
    if raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad magic at byte 0: expected 00 00, found {raw[0]:02x} {raw[1]:02x}")
    code, ndim = raw[2], raw[3]
    if code not in IDX_DTYPES:
        raise FormatError(f"{path}: unknown dtype code 0x{code:02x} at byte 2")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimensions at byte 4: expected {4 * ndim} bytes, found {len(raw) - 4}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = IDX_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - header
    if actual != expected:
        raise FormatError(f"{path}: payload at byte {header}: expected {expected} bytes, found {actual}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    codes = {v.newbyteorder("="): k for k, v in IDX_DTYPES.items()}
    code = codes.get(array.dtype.newbyteorder("="))
    if code is None:
        raise FormatError(f"dtype {array.dtype} has no IDX code")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(IDX_DTYPES[code]).tobytes())


def load_idx(images_path, labels_path, seed: int = 0, flatten: bool = False) -> Dataset:
    """Image/label IDX pair as a classification dataset scaled to [0, 1]."""
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64).reshape(-1)
    if len(images) != len(labels):
        raise FormatError(f"{images_path} holds {len(images)} items but {labels_path} holds {len(labels)}")
    x = images.astype(np.float64)
    if images.dtype == np.uint8:
        x /= 255.0
    if flatten:
        x = x.reshape(len(x), -1)
    elif x.ndim == 3:
        x = x[..., None]
    return Dataset(*split(x, labels, seed), task="classification", n_classes=int(labels.max()) + 1, name=Path(images_path).name, seed=seed)


def load_csv(path, schema="classification", seed: int = 0) -> Dataset:
    """CSV with a header row; the last column is the target.

    ``schema`` is the task name, or a mapping with a ``task`` key.
    """
    task = schema["task"] if isinstance(schema, dict) else schema
    if task not in ("classification", "regression"):
        raise ConfigError(f"unknown task {task!r}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise FormatError(f"{path}: expected a header and at least one data row")
    header, body = rows[0], rows[1:]
    try:
        table = np.array([[float(v) for v in row] for row in body])
    except ValueError as err:
        raise FormatError(f"{path}: non-numeric cell ({err})") from None
    if table.shape[1] != len(header):
        raise FormatError(f"{path}: rows have {table.shape[1]} columns, header has {len(header)}")
    x = table[:, :-1]
    if task == "classification":
        y = table[:, -1].astype(np.int64)
        return Dataset(*split(x, y, seed), task=task, n_classes=int(y.max()) + 1, name=Path(path).name, seed=seed)
    return Dataset(*split(x, table[:, -1:], seed), task=task, name=Path(path).name, seed=seed)


# -- CSR size ------------------------------------------------------------------


def csr_bytes(rows: int, nnz: int, value_bytes: int = 2, index_bytes: int = 2) -> int:
    """values + column indices + row pointers."""
    return value_bytes * nnz + index_bytes * nnz + index_bytes * (rows + 1)


@dataclass(frozen=True)
class DiskEstimate:
    csr_bytes: int  # 16-bit values, column indices and row pointers
    csr_bytes_32bit_index: int  # 16-bit values, 32-bit indices
    dense_bytes: int  # 32-bit dense storage


def _weight_matrices(obj) -> list[np.ndarray]:
    if isinstance(obj, Model):
        return [layer.weight_mask.reshape(layer.n_out, -1) for layer in obj.layers]
    if isinstance(obj, np.ndarray):
        return [obj]
    return [np.asarray(m) for m in obj]


def csr_disk_estimate(obj) -> DiskEstimate:
    """CSR storage estimate summed over weight matrices.

    Accepts a model (its weight masks), one mask/weight array, or a list of
    them. Conv kernels count as (out_channels, in_channels * k * k) matrices.
    """
    total16 = total32 = dense = 0
    for m in _weight_matrices(obj):
        m = np.asarray(m)
        rows = m.shape[0] if m.ndim else 1
        nnz = int(np.count_nonzero(m))
        total16 += csr_bytes(rows, nnz)
        total32 += csr_bytes(rows, nnz, 2, 4)
        dense += 4 * m.size
    return DiskEstimate(total16, total32, dense)


# -- checkpoints ---------------------------------------------------------------


def _pack(mask: np.ndarray) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool).reshape(-1), bitorder="little").tobytes()


def _unpack(buf: bytes, n: int, shape) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little", count=n)
    return bits.astype(bool).reshape(shape)


def _f32(a: np.ndarray) -> bytes:
    return np.asarray(a, dtype="<f4").tobytes()


def _write_exclusive(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with FileLock(str(path) + ".lock"):
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(payload)
        os.replace(tmp, path)


def checkpoint_bytes(model: Model, detector=None) -> bytes:
    desc = {
        "head": model.head,
        "input_shape": list(model.input_shape),
        "layers": [
            {"kind": l.kind, "activation": l.activation, "weight_shape": list(l.weight.shape), "gate": l.gate is not None}
            for l in model.layers
        ],
        "detector": detector is not None,
    }
    if detector is not None:
        desc["detector_normalization"] = detector.normalization
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
    out.write(blob)
    for l in model.layers:
        out.write(_f32(l.weight))
        out.write(_f32(l.bias))
        if l.gate is not None:
            out.write(_f32(l.gate))
        out.write(_pack(l.weight_mask))
        out.write(_pack(l.bias_mask))
    if detector is not None:
        out.write(struct.pack("<I", detector.theta0.size))
        out.write(_f32(detector.theta0))
        d1 = np.nan if detector.delta1 is None else detector.delta1
        trig = -1 if detector.triggered_epoch is None else detector.triggered_epoch
        out.write(struct.pack("<ddiI", detector.th, d1, trig, len(detector.delta_history)))
        out.write(np.asarray(detector.delta_history, dtype="<f8").tobytes())
    return out.getvalue()


def save_checkpoint(model: Model, path, detector=None) -> None:
    _write_exclusive(path, checkpoint_bytes(model, detector))


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}: need {n} bytes, {len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64).reshape(shape)

    def bits(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return _unpack(self.take((n + 7) // 8), n, shape)


def load_checkpoint(path, with_detector: bool = False):
    """Model (and detector state, if requested) from a checkpoint file."""
    from .lifecycle import DetectorState

    r = _Reader(Path(path).read_bytes(), path)
    magic = r.buf[: len(CHECKPOINT_MAGIC)]
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0: {magic!r}")
    r.pos = len(CHECKPOINT_MAGIC)
    version, n = r.unpack("<HI")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this reader supports {CHECKPOINT_VERSION}")
    try:
        desc = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"{path}: unreadable descriptor at byte 14: {err}") from None
    layers = []
    for entry in desc["layers"]:
        shape = tuple(entry["weight_shape"])
        w = r.f32(shape)
        b = r.f32((shape[0],))
        gate = r.f32((shape[0],)) if entry["gate"] else None
        wm = r.bits(shape)
        bm = r.bits((shape[0],))
        layers.append(Layer(entry["kind"], w, b, entry["activation"], wm, bm, gate))
    model = Model(layers, desc["head"], tuple(desc["input_shape"]))
    detector = None
    if desc.get("detector"):
        (m,) = r.unpack("<I")
        theta0 = r.f32((m,))
        th, d1, trig, h = r.unpack("<ddiI")
        hist = np.frombuffer(r.take(8 * h), dtype="<f8").tolist()
        detector = DetectorState(
            theta0=theta0,
            th=th,
            normalization=desc.get("detector_normalization", "delta1"),
            delta_history=hist,
            delta1=None if np.isnan(d1) else d1,
            triggered_epoch=None if trig < 0 else trig,
            last_epoch=len(hist) - 1,
        )
    if r.pos != len(r.buf):
        raise FormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes at byte {r.pos}")
    return (model, detector) if with_detector else model


# -- mask sidecar --------------------------------------------------------------


def mask_bytes(masks: list[tuple[int, np.ndarray]]) -> bytes:
    out = io.BytesIO()
    out.write(MASK_MAGIC)
    out.write(struct.pack("<HI", MASK_VERSION, len(masks)))
    offset = 0
    for layer, m in masks:
        m = np.asarray(m, dtype=bool)
        out.write(struct.pack(f"<II{m.ndim}IQ", layer, m.ndim, *m.shape, offset))
        offset += m.size
    bits = np.concatenate([np.asarray(m, dtype=bool).reshape(-1) for _, m in masks]) if masks else np.zeros(0, dtype=bool)
    out.write(_pack(bits))
    return out.getvalue()


def save_mask(path, masks: list[tuple[int, np.ndarray]]) -> None:
    _write_exclusive(path, mask_bytes(masks))


def load_mask(path) -> list[tuple[int, np.ndarray]]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.buf[: len(MASK_MAGIC)] != MASK_MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    r.pos = len(MASK_MAGIC)
    version, count = r.unpack("<HI")
    if version != MASK_VERSION:
        raise CheckpointVersionError(f"{path}: mask version {version}, this reader supports {MASK_VERSION}")
    heads = []
    for _ in range(count):
        layer, ndim = r.unpack("<II")
        shape = r.unpack(f"<{ndim}I")
        (offset,) = r.unpack("<Q")
        heads.append((layer, shape, offset))
    total = sum(int(np.prod(s)) for _, s, _ in heads)
    bits = r.bits((total,))
    return [(layer, bits[off : off + int(np.prod(shape))].reshape(shape)) for layer, shape, off in heads]


def model_masks(model: Model) -> list[tuple[int, np.ndarray]]:
    return [(i, l.weight_mask) for i, l in enumerate(model.layers)]


def save_node_mask(path, node_mask) -> None:
    save_mask(path, list(zip(node_mask.layers, node_mask.keep)))


def load_node_mask(path):
    from .structured import NodeMask

    entries = load_mask(path)
    return NodeMask(tuple(i for i, _ in entries), tuple(m for _, m in entries))
