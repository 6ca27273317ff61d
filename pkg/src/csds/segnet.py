"""BN-free U-shaped encoder-decoder and its binary checkpoint format.

Layer list for ``depth = D`` and ``base_width = w`` (widths ``w_i = w * 2**i``):

* ``enc{i}.conv{1,2}`` for i < D: 3x3 convs ``in -> w_i -> w_i``, then 2x2 max-pool
* ``mid.conv{1,2}``: 3x3 convs ``w_{D-1} -> w_D -> w_D``
* ``dec{i}.conv{1,2}`` for i = D-1 .. 0: nearest x2 upsample of the level below,
  concat with ``enc{i}`` features, 3x3 convs ``w_{i+1} + w_i -> w_i -> w_i``
* ``head``: 1x1 conv ``w_0 -> num_classes``

Every conv has a bias and is followed by ReLU, except the head. Inputs in
[0, 1] are mapped to [-1, 1] before the first conv.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ndcore as nd
from .errors import ConfigError, DimensionError, IncompatibleStateError
from .ndcore import Rng, Tensor

MAGIC = b"CSDSCKPT"
VERSION = 1


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 3
    num_classes: int = 2
    base_width: int = 16
    depth: int = 3
    seed: int = 0

    def validate(self) -> None:
        if self.base_width < 4:
            raise ConfigError("base_width must be >= 4", key="base_width")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1", key="depth")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", key="num_classes")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1", key="in_channels")

    def fingerprint(self) -> str:
        arch = {k: v for k, v in asdict(self).items() if k != "seed"}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()


def layer_specs(cfg: SegNetConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) for every conv in forward order."""
    w = [cfg.base_width * 2**i for i in range(cfg.depth + 1)]
    specs = []
    cin = cfg.in_channels
    for i in range(cfg.depth):
        specs += [(f"enc{i}.conv1", cin, w[i], 3), (f"enc{i}.conv2", w[i], w[i], 3)]
        cin = w[i]
    specs += [("mid.conv1", cin, w[cfg.depth], 3), ("mid.conv2", w[cfg.depth], w[cfg.depth], 3)]
    for i in reversed(range(cfg.depth)):
        specs += [(f"dec{i}.conv1", w[i + 1] + w[i], w[i], 3), (f"dec{i}.conv2", w[i], w[i], 3)]
    specs.append(("head", w[0], cfg.num_classes, 1))
    return specs


def parameter_count(cfg: SegNetConfig) -> int:
    return sum(co * ci * k * k + co for _, ci, co, k in layer_specs(cfg))


class ModelState:
    """Ordered named parameters of one network plus its architecture fingerprint."""

    def __init__(self, cfg: SegNetConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.fingerprint = cfg.fingerprint()

    def names(self) -> list[str]:
        return list(self.params)

    def tensors(self) -> list[Tensor]:
        return list(self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> ModelState:
        return ModelState(
            self.cfg, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        )

    def load_from(self, other: ModelState) -> None:
        check_compatible(self, other)
        for name, t in self.params.items():
            t.data = other.params[name].data.copy()

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


def check_compatible(a: ModelState, b: ModelState) -> None:
    if a.fingerprint != b.fingerprint:
        raise IncompatibleStateError("architecture fingerprints differ")
    if list(a.params) != list(b.params):
        raise IncompatibleStateError("parameter names differ")
    for name in a.params:
        if a.params[name].shape != b.params[name].shape:
            raise IncompatibleStateError(f"shape mismatch for {name}")


def build(cfg: SegNetConfig, rng: Rng | None = None, dtype=np.float32) -> ModelState:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    cfg.validate()
    rng = rng if rng is not None else Rng(cfg.seed)
    params: dict[str, Tensor] = {}
    for name, cin, cout, k in layer_specs(cfg):
        std = np.sqrt(2.0 / (cin * k * k))
        w = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
    return ModelState(cfg, params)


def _conv(state: ModelState, name: str, x: Tensor, act: bool = True) -> Tensor:
    w = state.params[f"{name}.weight"]
    pad = w.shape[-1] // 2
    y = nd.conv2d(x, w, state.params[f"{name}.bias"], stride=1, pad=pad)
    return nd.relu(y) if act else y


def _forward(state: ModelState, x: Tensor) -> Tensor:
    cfg = state.cfg
    skips = []
    h = (x - 0.5) * 2.0  # fixed centering of [0, 1] inputs
    for i in range(cfg.depth):
        h = _conv(state, f"enc{i}.conv2", _conv(state, f"enc{i}.conv1", h))
        skips.append(h)
        h = nd.max_pool2d(h)
    h = _conv(state, "mid.conv2", _conv(state, "mid.conv1", h))
    for i in reversed(range(cfg.depth)):
        h = nd.concat([nd.upsample_nearest(h, 2), skips[i]], axis=1)
        h = _conv(state, f"dec{i}.conv2", _conv(state, f"dec{i}.conv1", h))
    return _conv(state, "head", h, act=False)


def forward(state: ModelState, batch, train_mode: bool = True) -> Tensor:
    """Logits [B, C, H, W] at input resolution; eval mode records no graph."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=state.params["head.weight"].dtype)
    if x.ndim != 4 or x.shape[1] != state.cfg.in_channels:
        raise DimensionError(f"expected [B, {state.cfg.in_channels}, H, W] input, got {x.shape}")
    f = 2**state.cfg.depth
    if x.shape[2] % f or x.shape[3] % f:
        raise DimensionError(f"H and W must be divisible by {f}, got {x.shape[2]}x{x.shape[3]}")
    if train_mode:
        return _forward(state, x)
    with nd.no_grad():
        return _forward(state, x)


def predict(state: ModelState, batch) -> np.ndarray:
    """Per-pixel argmax labels [B, H, W]; ties go to the lower class index."""
    return np.argmax(forward(state, batch, train_mode=False).data, axis=1)


# -- checkpoint I/O -----------------------------------------------------------
#
# Layout (little-endian):
#   8s magic "CSDSCKPT" | u32 version | 64s fingerprint (hex ascii) | u32 count
#   per tensor: u16 name_len | name utf-8 | u8 ndim | u32 dims[ndim] | f32 data

def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(state: ModelState, path) -> Path:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION), state.fingerprint.encode("ascii"), struct.pack("<I", len(state.params))]
    for name, t in state.params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    _atomic_write(path, b"".join(chunks))
    _atomic_write(path.with_suffix(path.suffix + ".json"), json.dumps(asdict(state.cfg), indent=2).encode())
    return path


def load_checkpoint(path, cfg: SegNetConfig | None = None) -> ModelState:
    path = Path(path)
    if cfg is None:
        cfg = SegNetConfig(**json.loads(path.with_suffix(path.suffix + ".json").read_text()))
    buf = path.read_bytes()
    if buf[:8] != MAGIC:
        raise IncompatibleStateError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise IncompatibleStateError(f"{path}: unsupported version {version}")
    fingerprint = buf[12:76].decode("ascii")
    if fingerprint != cfg.fingerprint():
        raise IncompatibleStateError(f"{path}: fingerprint does not match config")
    (count,) = struct.unpack_from("<I", buf, 76)
    off = 80
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape))
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape).astype(np.float32)
        off += 4 * size
        params[name] = Tensor(data, requires_grad=True)
    state = ModelState(cfg, params)
    check_compatible(state, build(cfg))
    return state
