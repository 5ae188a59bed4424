"""Datasets, checkpoints and result files.

Tensors live in raw little-endian files with a short header:

    b"QGT1" | u1 dtype code | u1 ndim | ndim x <u8 dims | payload

next to a JSON manifest describing the dataset. Checkpoints, boundary sets
and reports are JSON; weight arrays are base64-encoded little-endian float32
(float64 only if a value is not representable), so a save/load round trip
is bit-exact.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

MAGIC = b"QGT1"
_DTYPES = {0: "u1", 1: "<f4", 2: "<f8", 3: "<i8"}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}
DATASET_FORMAT = "qesguard-dataset/1"
CHECKPOINT_FORMAT = "qesguard-checkpoint/1"


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raw tensor files


def _header(arr: np.ndarray) -> bytes:
    code = _CODES.get(arr.dtype.str) if arr.dtype != np.uint8 else 0
    if code is None:
        raise DataError(f"unsupported dtype {arr.dtype}")
    return MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)


def write_tensor(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    elif arr.dtype.kind in "iu" and arr.dtype != np.uint8:
        arr = arr.astype("<i8")
    with open(path, "wb") as f:
        f.write(_header(arr))
        f.write(np.ascontiguousarray(arr).tobytes())


def read_header(path) -> tuple:
    """(dtype, shape, header_bytes)."""
    with open(path, "rb") as f:
        head = f.read(6)
        if len(head) < 6 or head[:4] != MAGIC:
            raise DataError(f"{path}: not a tensor file (bad magic)")
        code, ndim = struct.unpack("<BB", head[4:])
        if code not in _DTYPES:
            raise DataError(f"{path}: unknown dtype code {code} at byte offset 4")
        dims = f.read(8 * ndim)
        if len(dims) != 8 * ndim:
            raise DataError(f"{path}: truncated header")
        shape = struct.unpack(f"<{ndim}Q", dims)
    return np.dtype(_DTYPES[code]), tuple(shape), 6 + 8 * ndim


def read_tensor(path, expect_shape: Optional[tuple] = None) -> np.ndarray:
    dtype, shape, off = read_header(path)
    if expect_shape is not None and tuple(expect_shape) != shape:
        raise DataError(f"{path}: header shape {shape} != declared {tuple(expect_shape)}")
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = os.path.getsize(path) - off
    if actual != expected:
        raise DataError(f"{path}: payload is {actual} bytes after the {off}-byte header, "
                        f"expected {expected} bytes for shape {shape} of {dtype}")
    return np.fromfile(path, dtype=dtype, offset=off).reshape(shape)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetManifest:
    name: str
    shape: tuple  # (C, H, W)
    count: int
    images: str  # path relative to the manifest
    labels: str
    num_classes: int
    dtype: str = "uint8"
    value_range: tuple = (0.0, 1.0)  # after scaling
    splits: dict = field(default_factory=dict)
    attack: Optional[dict] = None
    extra: dict = field(default_factory=dict)
    root: Path = field(default=Path("."), repr=False)

    def as_dict(self) -> dict:
        d = {
            "format": DATASET_FORMAT, "name": self.name, "shape": list(self.shape), "count": self.count,
            "images": self.images, "labels": self.labels, "num_classes": self.num_classes,
            "dtype": self.dtype, "value_range": list(self.value_range), "splits": self.splits,
        }
        if self.attack is not None:
            d["attack"] = self.attack
        if self.extra:
            d["extra"] = self.extra
        return d

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read manifest {path}: {e}") from None
        if d.get("format") != DATASET_FORMAT:
            raise DataError(f"{path}: not a dataset manifest (format={d.get('format')!r})")
        return cls(d["name"], tuple(d["shape"]), int(d["count"]), d["images"], d["labels"],
                   int(d["num_classes"]), d.get("dtype", "uint8"), tuple(d.get("value_range", (0, 1))),
                   d.get("splits", {}), d.get("attack"), d.get("extra", {}), path.parent)


def load_dataset(manifest) -> tuple:
    """(images float64 (N, C, H, W) in [0, 1], labels int64)."""
    m = manifest if isinstance(manifest, DatasetManifest) else DatasetManifest.load(manifest)
    ipath, lpath = m.root / m.images, m.root / m.labels
    for p in (ipath, lpath):
        if not p.exists():
            raise DataError(f"missing file {p}")
    dtype, shape, off = read_header(ipath)
    declared = (m.count,) + tuple(m.shape)
    expected = int(np.prod(declared)) * dtype.itemsize
    actual = os.path.getsize(ipath) - off
    if actual != expected:
        raise DataError(f"{ipath}: expected {expected} payload bytes ({m.count} samples of "
                        f"{'x'.join(map(str, m.shape))} {dtype}) but found {actual}")
    raw = read_tensor(ipath, declared)
    if dtype == np.uint8:
        x = raw.astype(np.float64) / 255.0
    else:
        x = raw.astype(np.float64)
        bad = np.flatnonzero((x < 0) | (x > 1) | ~np.isfinite(x))
        if bad.size:
            raise DataError(f"{ipath}: pixel outside [0,1] at byte offset {off + bad[0] * dtype.itemsize}")
    y = read_tensor(lpath).astype(np.int64)
    if y.shape != (m.count,):
        raise DataError(f"{lpath}: {y.shape[0] if y.ndim else 0} labels for {m.count} samples")
    bad = np.flatnonzero((y < 0) | (y >= m.num_classes))
    if bad.size:
        _, _, loff = read_header(lpath)
        raise DataError(f"{lpath}: label {y[bad[0]]} outside [0, {m.num_classes}) at byte offset "
                        f"{loff + bad[0] * 8}")
    return x, y


def save_dataset(directory, name: str, images: np.ndarray, labels, num_classes: int,
                 dtype: str = "float64", attack: Optional[dict] = None, splits: Optional[dict] = None,
                 extra: Optional[dict] = None) -> Path:
    """Write images/labels plus a manifest; returns the manifest path.

    ``dtype="uint8"`` stores 0..255 codes (input must be on the 1/255 grid or uint8).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=np.int64)
    if images.ndim != 4 or len(images) != len(labels):
        raise DataError("need (N, C, H, W) images with one label each")
    if dtype == "uint8":
        raw = images if images.dtype == np.uint8 else np.round(np.asarray(images, np.float64) * 255).astype(np.uint8)
    else:
        raw = np.asarray(images, dtype=np.dtype(dtype))
        if raw.size and (raw.min() < 0 or raw.max() > 1):
            raise DataError("float images must lie in [0, 1]")
    iname, lname = f"{name}.images.bin", f"{name}.labels.bin"
    write_tensor(directory / iname, raw)
    write_tensor(directory / lname, labels)
    m = DatasetManifest(name, tuple(images.shape[1:]), len(images), iname, lname, int(num_classes),
                        np.dtype(raw.dtype).name, (0.0, 1.0), splits or {}, attack, extra or {}, directory)
    path = directory / f"{name}.json"
    path.write_text(json.dumps(m.as_dict(), indent=2))
    return path


def sample_nat(x, count: int, seed=0) -> tuple:
    """Draw ``count`` distinct samples without replacement. Returns (samples, indices)."""
    x = np.asarray(x)
    if count > len(x):
        raise DataError(f"cannot sample {count} from a set of {len(x)}")
    if count < 0:
        raise DataError("count must be >= 0")
    idx = np.random.default_rng(seed).permutation(len(x))[:count]
    return x[idx], idx


def split(x, y, n_train: int, n_test: int) -> tuple:
    if n_train + n_test > len(x):
        raise DataError(f"split {n_train}+{n_test} exceeds {len(x)} samples")
    return (x[:n_train], y[:n_train]), (x[n_train : n_train + n_test], y[n_train : n_train + n_test])


# ---------------------------------------------------------------------------
# JSON artifacts


def encode_array(a) -> dict:
    """32-bit storage when lossless, else 64-bit, so decoding is always bit-exact."""
    a = np.asarray(a, dtype=np.float64)
    a32 = a.astype("<f4")
    if np.array_equal(a32.astype(np.float64), a, equal_nan=True):
        a, dt = np.ascontiguousarray(a32), "<f4"
    else:
        a, dt = np.ascontiguousarray(a.astype("<f8")), "<f8"
    return {"shape": list(a.shape), "dtype": dt, "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    buf = base64.b64decode(d["data"])
    a = np.frombuffer(buf, dtype=np.dtype(d.get("dtype", "<f8")))
    return a.reshape(d["shape"]).astype(np.float64)


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v


def write_json(path, obj: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(_plain(obj), indent=2))


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read {path}: {e}") from None


def detector_to_dict(d) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "kind": "detector",
        "architecture": d.spec.as_dict(),
        "weights": [encode_array(w) for w in d.weights],
        "bits": list(d.bits),
        "frozen": list(d.frozen),
        "quantize_activations": d.quantize_activations,
        "metadata": _plain(d.metadata),
        "fingerprint": d.fingerprint(),
    }


def detector_from_dict(obj: dict):
    from .detector import DetectorSpec, DetectorState

    if obj.get("format") != CHECKPOINT_FORMAT or obj.get("kind") != "detector":
        raise DataError("not a detector checkpoint")
    d = DetectorState(DetectorSpec.from_dict(obj["architecture"]),
                      [decode_array(w) for w in obj["weights"]], list(obj["bits"]),
                      list(obj["frozen"]), bool(obj.get("quantize_activations", True)),
                      dict(obj.get("metadata", {})))
    if "fingerprint" in obj and obj["fingerprint"] != d.fingerprint():
        raise DataError("detector checkpoint is corrupt: fingerprint mismatch")
    return d


def classifier_to_dict(c) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "kind": "classifier",
        "architecture": {"preset": c.preset, "num_classes": c.num_classes, "in_channels": c.in_channels,
                         "strides": [s for _, _, s in c.convs]},
        "weights": [encode_array(p) for p in c.params()],
        "metadata": _plain(c.metadata),
        "fingerprint": c.fingerprint(),
    }


def classifier_from_dict(obj: dict):
    from .classifier import ClassifierState

    if obj.get("format") != CHECKPOINT_FORMAT or obj.get("kind") != "classifier":
        raise DataError("not a classifier checkpoint")
    a = obj["architecture"]
    ps = [decode_array(p) for p in obj["weights"]]
    convs = [(ps[2 * j], ps[2 * j + 1], s) for j, s in enumerate(a["strides"])]
    c = ClassifierState(a["preset"], convs, (ps[-2], ps[-1]), int(a["num_classes"]),
                        int(a.get("in_channels", 3)), dict(obj.get("metadata", {})))
    if "fingerprint" in obj and obj["fingerprint"] != c.fingerprint():
        raise DataError("classifier checkpoint is corrupt: fingerprint mismatch")
    return c


def save_checkpoint(path, model) -> None:
    from .detector import DetectorState

    write_json(path, detector_to_dict(model) if isinstance(model, DetectorState) else classifier_to_dict(model))


def load_checkpoint(path):
    obj = read_json(path)
    kind = obj.get("kind")
    if kind == "detector":
        return detector_from_dict(obj)
    if kind == "classifier":
        return classifier_from_dict(obj)
    raise DataError(f"{path}: unknown checkpoint kind {kind!r}")


def save_boundaries(path, b) -> None:
    write_json(path, b.as_dict())


def load_boundaries(path):
    from .calibration import BoundarySet

    d = read_json(path)
    if d.get("format") != "qesguard-boundaries/1":
        raise DataError(f"{path}: not a boundary file")
    return BoundarySet.from_dict(d)


def save_outcomes(path, outcomes: list, extra: Optional[dict] = None) -> None:
    write_json(path, {"format": "qesguard-outcomes/1", "outcomes": [o.as_dict() for o in outcomes],
                      **(extra or {})})


def load_outcomes(path) -> tuple:
    from .early_exit import DetectionOutcome

    d = read_json(path)
    if d.get("format") != "qesguard-outcomes/1":
        raise DataError(f"{path}: not an outcomes file")
    return [DetectionOutcome.from_dict(o) for o in d["outcomes"]], d


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# sources


def read_cifar10_batches(paths) -> tuple:
    """CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes (R, G, B planes)."""
    xs, ys = [], []
    for p in paths:
        buf = np.fromfile(p, dtype=np.uint8)
        if buf.size % 3073:
            raise DataError(f"{p}: {buf.size} bytes is not a whole number of 3073-byte records")
        rec = buf.reshape(-1, 3073)
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    x, y = np.concatenate(xs), np.concatenate(ys)
    if y.size and y.max() > 9:
        bad = int(np.flatnonzero(y > 9)[0])
        raise DataError(f"label {y[bad]} > 9 in record {bad} (byte offset {bad * 3073})")
    return x, y


def import_cifar10(src_dir, out_dir, n_train: int = 10000, n_test: int = 2000, seed: int = 0) -> tuple:
    """Subsample CIFAR-10 binary batches into train/test datasets. Returns manifest paths."""
    src = Path(src_dir)
    train_files = sorted(src.glob("data_batch_*.bin"))
    test_file = src / "test_batch.bin"
    if not train_files or not test_file.exists():
        raise DataError(f"{src}: expected data_batch_*.bin and test_batch.bin")
    xtr, ytr = read_cifar10_batches(train_files)
    xte, yte = read_cifar10_batches([test_file])
    rng = np.random.default_rng(seed)
    itr = np.sort(rng.permutation(len(xtr))[:n_train])
    ite = np.sort(rng.permutation(len(xte))[:n_test])
    extra = {"source": "cifar10-binary", "seed": seed}
    a = save_dataset(out_dir, "cifar10-train", xtr[itr], ytr[itr], 10, "uint8", extra=extra)
    b = save_dataset(out_dir, "cifar10-test", xte[ite], yte[ite], 10, "uint8", extra=extra)
    return a, b


PHOTO_SOURCES = {
    # RGB photographs bundled with scikit-image / scikit-learn; one class per photograph
    "A": ("astronaut", "chelsea", "coffee", "hubble_deep_field", "immunohistochemistry", "rocket",
          "retina", "sk:china.jpg", "sk:flower.jpg", "file:motorcycle_left.png"),
    # grayscale photographs, replicated to three channels
    "B": ("camera", "coins", "moon", "brick", "grass", "gravel", "page", "text", "cell", "clock"),
}


def _photo(name: str) -> np.ndarray:
    import skimage.data as sd

    if name.startswith("sk:"):
        from sklearn.datasets import load_sample_image

        return np.asarray(load_sample_image(name[3:]))
    if name.startswith("file:"):
        from PIL import Image

        return np.asarray(Image.open(os.path.join(sd.data_dir, name[5:])).convert("RGB"))
    im = np.asarray(getattr(sd, name)())
    if im.ndim == 2:
        im = np.repeat(im[..., None], 3, axis=2)
    return im[..., :3].astype(np.uint8)


def photo_patches(kind: str, n: int, seed=0, size: int = 32, min_crop: int = 40,
                  max_crop: int = 200) -> tuple:
    """Labelled patch dataset: random square crops of a fixed photo set, box-resized
    to size x size with a random horizontal flip. Class = source photograph.

    Returns (uint8 images (N, 3, size, size), labels).
    """
    from PIL import Image

    try:
        names = PHOTO_SOURCES[kind.upper()]
    except KeyError:
        raise DataError(f"unknown patch source {kind!r}; choose from {sorted(PHOTO_SOURCES)}") from None
    ims = [_photo(nm) for nm in names]
    rng = np.random.default_rng(seed)
    out = np.empty((n, 3, size, size), np.uint8)
    labels = rng.integers(0, len(ims), n)
    for k in range(n):
        im = ims[labels[k]]
        h, w = im.shape[:2]
        s = int(rng.integers(min_crop, min(h, w, max_crop)))
        y0, x0 = rng.integers(0, h - s + 1), rng.integers(0, w - s + 1)
        a = np.asarray(Image.fromarray(im[y0 : y0 + s, x0 : x0 + s]).resize((size, size), Image.BOX))
        if rng.random() < 0.5:
            a = a[:, ::-1]
        out[k] = a.transpose(2, 0, 1)
    return out, labels.astype(np.int64)


def make_patch_dataset(kind: str, out_dir, n_train: int, n_test: int, seed: int = 0) -> tuple:
    x, y = photo_patches(kind, n_train + n_test, seed)
    extra = {"source": f"photo-patches-{kind.upper()}", "photos": list(PHOTO_SOURCES[kind.upper()]), "seed": seed}
    a = save_dataset(out_dir, f"patches{kind.upper()}-train", x[:n_train], y[:n_train], 10, "uint8", extra=extra)
    b = save_dataset(out_dir, f"patches{kind.upper()}-test", x[n_train:], y[n_train:], 10, "uint8", extra=extra)
    return a, b
