"""Toy segmentor / conditional discriminator, snapshots and checkpoint files."""
from __future__ import annotations

import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, Tensor
from .data import class_palette, derive_seed
from .io import atomic_write_bytes
from .optim import ParameterSet

CHECKPOINT_MAGIC = b"LOAD"
CHECKPOINT_VERSION = 1
SCORE_EPS = 1e-7


def _he_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


@dataclass(frozen=True)
class SegmentorSpec:
    height: int
    width: int
    num_classes: int
    hidden: tuple[int, ...] = (16, 16, 16)
    kernel: int = 3


@dataclass(frozen=True)
class DiscriminatorSpec:
    height: int
    width: int
    num_classes: int
    channels: tuple[int, ...] = (16, 32)
    kernel: int = 3

    @property
    def in_channels(self) -> int:
        return 3 * self.num_classes


class Segmentor:
    """3x3 conv + relu stack with a 1x1 conv head producing K logits per pixel."""

    kind = "segmentor"

    def __init__(self, spec: SegmentorSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.params = ParameterSet()
        rng = np.random.default_rng(derive_seed(seed, "segmentor-init"))
        k = spec.kernel
        cin = 3
        for i, cout in enumerate(spec.hidden):
            self.params.add(f"conv{i}.w", Tensor(_he_init(rng, (k, k, cin, cout), k * k * cin, dtype)))
            self.params.add(f"conv{i}.b", Tensor(np.zeros(cout, dtype=dtype)))
            cin = cout
        self.params.add("head.w", Tensor(_he_init(rng, (1, 1, cin, spec.num_classes), cin, dtype)))
        self.params.add("head.b", Tensor(np.zeros(spec.num_classes, dtype=dtype)))

    def descriptor(self) -> dict:
        return {"kind": self.kind, **asdict(self.spec)}

    def forward(self, images) -> Tensor:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=self.params["head.w"].dtype)
        if x.data.ndim != 4 or x.shape[1:] != (self.spec.height, self.spec.width, 3):
            raise ContractError(
                f"segmentor expects (N, {self.spec.height}, {self.spec.width}, 3) input, got {x.shape}"
            )
        pad = self.spec.kernel // 2
        for i in range(len(self.spec.hidden)):
            x = ad.relu(ad.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], padding=pad))
        return ad.conv2d(x, self.params["head.w"], self.params["head.b"])


class Discriminator:
    """Strided convs, global average pool and a dense sigmoid head."""

    kind = "discriminator"

    def __init__(self, spec: DiscriminatorSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.params = ParameterSet()
        rng = np.random.default_rng(derive_seed(seed, "discriminator-init"))
        k = spec.kernel
        cin = spec.in_channels
        for i, cout in enumerate(spec.channels):
            self.params.add(f"conv{i}.w", Tensor(_he_init(rng, (k, k, cin, cout), k * k * cin, dtype)))
            self.params.add(f"conv{i}.b", Tensor(np.zeros(cout, dtype=dtype)))
            cin = cout
        self.params.add("fc.w", Tensor((rng.standard_normal((cin, 1)) * np.sqrt(1.0 / cin)).astype(dtype)))
        self.params.add("fc.b", Tensor(np.zeros(1, dtype=dtype)))

    def descriptor(self) -> dict:
        return {"kind": self.kind, **asdict(self.spec)}

    def forward(self, stacked) -> Tensor:
        x = stacked if isinstance(stacked, Tensor) else Tensor(np.asarray(stacked), dtype=self.params["fc.w"].dtype)
        expected = (self.spec.height, self.spec.width, self.spec.in_channels)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise ContractError(f"discriminator expects (N, {expected[0]}, {expected[1]}, {expected[2]}) input, got {x.shape}")
        pad = self.spec.kernel // 2
        for i in range(len(self.spec.channels)):
            x = ad.relu(ad.conv2d(x, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], stride=2, padding=pad))
        pooled = ad.mean(x, axis=(1, 2))
        logit = ad.dense(pooled, self.params["fc.w"], self.params["fc.b"])
        prob = ad.clip(ad.sigmoid(logit), SCORE_EPS, 1 - SCORE_EPS)
        return ad.reshape(prob, (x.shape[0],))


def segmentor_forward(model: Segmentor, image) -> Tensor:
    """Logits for one image (H, W, 3) -> (H, W, K), or a batch (N, H, W, 3) -> (N, H, W, K)."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim == 3:
        return ad.reshape(model.forward(data[None]), data.shape[:2] + (model.spec.num_classes,))
    return model.forward(image)


def predict_label_map(logits) -> np.ndarray:
    """Per-pixel argmax over the last axis; ties go to the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if not np.all(np.isfinite(data)):
        raise NumericError("logits contain NaN or Inf")
    return np.argmax(data, axis=-1).astype(np.uint8)


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and int(labels.max()) >= num_classes:
        raise ContractError(f"class index {int(labels.max())} out of range for K={num_classes}")
    return np.eye(num_classes, dtype=dtype)[labels]


def class_split_stack(image, class_weights) -> Tensor:
    """Mask the image by each class's weight and stack the K masked copies.

    ``image`` is (..., H, W, 3) and ``class_weights`` (..., H, W, K); the
    result is (..., H, W, 3K) with channels ``3c..3c+2`` holding class ``c``.
    Differentiable in both arguments.
    """
    img = image if isinstance(image, Tensor) else ad.as_tensor(np.asarray(image))
    w = class_weights if isinstance(class_weights, Tensor) else ad.as_tensor(np.asarray(class_weights), like=img)
    if img.shape[:-1] != w.shape[:-1] or img.shape[-1] != 3:
        raise ContractError(f"image {img.shape} and weights {w.shape} are incompatible")
    if np.any(w.data < 0) or np.any(w.data > 1):
        raise ContractError("class weights must lie in [0, 1]")
    k = w.shape[-1]
    lead = img.shape[:-1]
    img5 = ad.reshape(img, lead + (1, 3))
    w5 = ad.reshape(w, lead + (k, 1))
    return ad.reshape(ad.mul(img5, w5), lead + (3 * k,))


def discriminator_forward(model: Discriminator, stacked) -> Tensor:
    """Probability that each stacked (image, map) input is ground truth."""
    data = stacked.data if isinstance(stacked, Tensor) else np.asarray(stacked)
    if data.shape[-1] != model.spec.in_channels:
        raise ContractError(f"expected {model.spec.in_channels} channels, got {data.shape[-1]}")
    if data.ndim == 3:
        return model.forward(ad.reshape(ad.as_tensor(stacked), (1,) + data.shape))
    return model.forward(stacked)


def build_model(descriptor: dict, seed: int = 0, dtype=np.float32):
    d = dict(descriptor)
    kind = d.pop("kind")
    if kind == Segmentor.kind:
        d["hidden"] = tuple(d["hidden"])
        return Segmentor(SegmentorSpec(**d), seed=seed, dtype=dtype)
    if kind == Discriminator.kind:
        d["channels"] = tuple(d["channels"])
        return Discriminator(DiscriminatorSpec(**d), seed=seed, dtype=dtype)
    raise ContractError(f"unknown model kind {kind!r}")


def oracle_segmentor(spec: SegmentorSpec) -> Segmentor:
    """Hand-set weights that classify each pixel by its nearest palette color.

    Hidden layers pass the RGB input through unchanged (identity taps); the
    head scores class ``c`` as ``2 p_c . x - |p_c|^2``. On generated data this
    reproduces the ground truth exactly.
    """
    model = Segmentor(spec)
    c = spec.kernel // 2
    for i, width in enumerate(spec.hidden):
        w = model.params[f"conv{i}.w"]
        w.data = np.zeros_like(w.data)
        for ch in range(3):
            w.data[c, c, ch, ch] = 1.0
        model.params[f"conv{i}.b"].data = np.zeros(width, dtype=w.dtype)
    palette = class_palette(spec.num_classes)
    head = np.zeros((1, 1, spec.hidden[-1], spec.num_classes), dtype=np.float32)
    head[0, 0, :3, :] = 2.0 * palette.T
    model.params["head.w"].data = head
    model.params["head.b"].data = (-(palette**2).sum(axis=1)).astype(np.float32)
    return model


# ---- snapshots -----------------------------------------------------------

_snapshot_ids = itertools.count(1)


@dataclass(frozen=True)
class ModelSnapshot:
    """Immutable copy of a parameter set; ``tag`` is start | peak | ending | initial."""

    id: int
    tag: str
    descriptor: str
    arrays: tuple[tuple[str, np.ndarray], ...] = field(repr=False)

    def payload_bytes(self) -> bytes:
        return b"".join(a.tobytes() for _, a in self.arrays)


def _params_of(model_or_params) -> tuple[ParameterSet, str]:
    if isinstance(model_or_params, ParameterSet):
        sig = [(n, list(s), str(model_or_params[n].dtype)) for n, s in model_or_params.shapes()]
        return model_or_params, json.dumps({"kind": "params", "shapes": sig}, sort_keys=True)
    params = model_or_params.params
    return params, json.dumps(model_or_params.descriptor(), sort_keys=True)


def snapshot(model_or_params, tag: str) -> ModelSnapshot:
    params, desc = _params_of(model_or_params)
    arrays = []
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"cannot snapshot non-finite parameter {name!r}")
        a = t.data.copy()
        a.setflags(write=False)
        arrays.append((name, a))
    return ModelSnapshot(next(_snapshot_ids), tag, desc, tuple(arrays))


def restore(snap: ModelSnapshot, into):
    """Copy snapshot weights into ``into`` (model or ParameterSet) and reset optimizer slots."""
    params, desc = _params_of(into)
    if desc != snap.descriptor and not isinstance(into, ParameterSet):
        raise ContractError("snapshot architecture does not match the target model")
    names = params.names()
    if names != [n for n, _ in snap.arrays]:
        raise ContractError("snapshot parameter names do not match the target")
    for name, a in snap.arrays:
        t = params[name]
        if t.shape != a.shape or t.dtype != a.dtype:
            raise ContractError(f"snapshot parameter {name!r} has shape {a.shape}, target {t.shape}")
    for name, a in snap.arrays:
        params[name].data = a.copy()
        params[name].grad = None
    params.reset_slots()
    return into


def same_weights(model_or_params, snap: ModelSnapshot) -> bool:
    params, _ = _params_of(model_or_params)
    live = [(n, t.data) for n, t in params.items()]
    if [n for n, _ in live] != [n for n, _ in snap.arrays]:
        return False
    return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
               for (_, a), (_, b) in zip(live, snap.arrays))


# ---- checkpoint files ----------------------------------------------------

def checkpoint_to_bytes(model) -> bytes:
    """Binary checkpoint: magic, version, descriptor, then named float32 arrays."""
    desc = json.dumps(model.descriptor(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<HI", CHECKPOINT_VERSION, len(desc)) + desc
    out += struct.pack("<I", len(model.params))
    for name, t in model.params.items():
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<B", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}I", *t.shape)
        out += t.data.astype("<f4").tobytes()
    return bytes(out)


def checkpoint_from_bytes(blob: bytes):
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ContractError("not a checkpoint file (bad magic)")
    version, dlen = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    pos = 10
    descriptor = json.loads(blob[pos : pos + dlen].decode("utf-8"))
    pos += dlen
    model = build_model(descriptor)
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    if count != len(model.params):
        raise ContractError("checkpoint parameter count does not match its architecture")
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(dims)
        pos += 4 * n
        if name not in model.params or model.params[name].shape != tuple(dims):
            raise ContractError(f"checkpoint parameter {name!r} does not fit the architecture")
        model.params[name].data = arr
    if pos != len(blob):
        raise ContractError("checkpoint has trailing bytes")
    return model


def save_checkpoint(model, path) -> None:
    atomic_write_bytes(Path(path), checkpoint_to_bytes(model))


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return checkpoint_from_bytes(path.read_bytes())
