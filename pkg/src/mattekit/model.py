"""U-shaped convolutional matting network and its checkpoint format.

The network maps a fused RGB image, optionally concatenated with a 3-channel
one-hot trimap, to a raw alpha matte in (0,1). A copy rule then overwrites
known pixels with their trimap-mandated values, so gradients reach the
network only through the unknown region.

Checkpoints are single binary files: the magic string ``MKCKPT01``, a JSON
echo of the model config, one (name, shape, little-endian float32 data)
record per entry, and a trailing SHA-256 checksum. A sidecar ``*.manifest.txt``
lists the same inventory in human-readable form.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import engine
from .engine import Parameter, Tensor
from .synth import LABEL_FOREGROUND, LABEL_UNKNOWN

CHECKPOINT_MAGIC = b"MKCKPT01"
_CHECKSUM_BYTES = 32  # SHA-256

# Parameter-name prefixes; load stages select which groups a checkpoint
# overwrites (everything else keeps its fresh initialization).
ENCODER_PREFIX = "enc."
DECODER_PREFIX = "dec."
HEAD_PREFIX = "head."
LOAD_STAGES = {
    "encoder_only": (ENCODER_PREFIX,),
    "encoder_decoder": (ENCODER_PREFIX, DECODER_PREFIX, HEAD_PREFIX),
}


@dataclass(frozen=True)
class ModelConfig:
    """Topology of the encoder-decoder.

    input_channels is 6 (channels 0-2 fused RGB, 3-5 one-hot trimap as
    background/unknown/foreground) or 3 (image only, for the no-trimap-input
    training arm). Checkpoints embed this config, so the channel layout is
    part of the file format.
    """

    base_channels: int = 16
    depth: int = 3
    input_channels: int = 6
    skip_connections: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.input_channels not in (3, 6):
            raise ValueError(
                "input_channels must be 6 (image + one-hot trimap) or 3 "
                f"(image only), got {self.input_channels}")

    @property
    def spatial_multiple(self) -> int:
        """Input height/width must be divisible by this (2**depth)."""
        return 2 ** self.depth


class _ConvSpec(NamedTuple):
    name: str
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int


def _conv_specs(config: ModelConfig) -> list[_ConvSpec]:
    """Every conv layer in declaration (and rng-draw) order.

    Encoder stage i halves resolution and outputs base*2**(i-1) channels;
    decoder block j upsamples, concatenates the matching-resolution skip
    (the raw input for the final block), and mirrors the channel widths
    back down; the head is a 1x1 conv to a single alpha channel.
    """
    specs = []
    skip_channels = [config.input_channels]  # index s = channels at H / 2**s
    chans = config.input_channels
    for i in range(1, config.depth + 1):
        out = config.base_channels * 2 ** (i - 1)
        specs.append(_ConvSpec(f"enc.block{i}.conv1", chans, out, 3, 2, 1))
        specs.append(_ConvSpec(f"enc.block{i}.conv2", out, out, 3, 1, 1))
        chans = out
        if i < config.depth:
            skip_channels.append(out)
    for j in range(1, config.depth + 1):
        s = config.depth - j
        skip = skip_channels[s] if config.skip_connections else 0
        out = config.base_channels * 2 ** (s - 1) if s >= 1 else config.base_channels
        specs.append(_ConvSpec(f"dec.block{j}.conv", chans + skip, out, 3, 1, 1))
        chans = out
    specs.append(_ConvSpec("head.conv", chans, 1, 1, 1, 0))
    return specs


def parameter_count(config: ModelConfig) -> int:
    """Total trainable values; a pure function of the config."""
    return sum(s.out_channels * (s.in_channels * s.kernel ** 2 + 1)
               for s in _conv_specs(config))


def parameter_names(config: ModelConfig) -> list[str]:
    """The stable, ordered parameter-name list for a config."""
    return [s.name + suffix for s in _conv_specs(config)
            for suffix in (".weight", ".bias")]


class MattingNet:
    """The network: an ordered, named parameter collection plus its config.

    Forward passes are read-only with respect to the parameters; updating
    them (the trainer's job) requires exclusive access.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self._params = params

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def parameter_names(self) -> list[str]:
        return list(self._params)

    def param(self, name: str) -> Parameter:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"model has no parameter named {name!r}") from None

    def parameter_count(self) -> int:
        return sum(p.values.size for p in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Copies of all parameter arrays, keyed by name, in order."""
        return {name: p.values.copy() for name, p in self._params.items()}

    def zero_grads(self) -> None:
        engine.zero_grads(self.parameters())

    def _conv(self, x: Tensor, layer: str, stride: int, padding: int) -> Tensor:
        return engine.conv2d(x, self._params[layer + ".weight"].tensor,
                             self._params[layer + ".bias"].tensor,
                             stride=stride, padding=padding)

    def forward(self, fused, trimap_onehot=None) -> Tensor:
        """Raw alpha batch (N,1,H,W) with values strictly inside (0,1).

        fused: (N,3,H,W) array or Tensor; trimap_onehot: (N,3,H,W) with
        channel order (background, unknown, foreground), required exactly
        when the model was built with input_channels=6. Spatial dims must
        be divisible by 2**depth.
        """
        like = next(iter(self._params.values())).tensor
        x = fused if isinstance(fused, Tensor) else engine.constant(fused, like=like)
        if x.values.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"fused input must be (N,3,H,W), got {x.shape}")
        if self.config.input_channels == 6:
            if trimap_onehot is None:
                raise ValueError(
                    "model was built with input_channels=6; a one-hot trimap "
                    "batch is required")
            t = (trimap_onehot if isinstance(trimap_onehot, Tensor)
                 else engine.constant(trimap_onehot, like=like))
            if t.shape != x.shape:
                raise ValueError(
                    f"trimap one-hot shape {t.shape} does not match image {x.shape}")
            x = engine.concat_channels(x, t)
        elif trimap_onehot is not None:
            raise ValueError(
                "model was built with input_channels=3 and takes no trimap input")
        _, _, h, w = x.shape
        multiple = self.config.spatial_multiple
        if h % multiple or w % multiple:
            raise ValueError(
                f"input spatial dims {h}x{w} must be multiples of {multiple} "
                f"(depth {self.config.depth}); pad the input first")
        skips = [x]
        for i in range(1, self.config.depth + 1):
            x = engine.relu(self._conv(x, f"enc.block{i}.conv1", 2, 1))
            x = engine.relu(self._conv(x, f"enc.block{i}.conv2", 1, 1))
            if i < self.config.depth:
                skips.append(x)
        for j in range(1, self.config.depth + 1):
            x = engine.upsample2x(x)
            if self.config.skip_connections:
                x = engine.concat_channels(x, skips[self.config.depth - j])
            x = engine.relu(self._conv(x, f"dec.block{j}.conv", 1, 1))
        return engine.sigmoid(self._conv(x, "head.conv", 1, 0))

    def save(self, path, extra_entries: dict[str, np.ndarray] | None = None) -> None:
        """Write a checkpoint of all parameters (plus optional extra entries,
        e.g. optimizer state under an ``optim.`` prefix)."""
        entries = {name: p.values for name, p in self._params.items()}
        if extra_entries:
            for name in extra_entries:
                if name in entries:
                    raise ValueError(f"extra entry {name!r} collides with a parameter")
            entries.update(extra_entries)
        save_checkpoint(path, self.config, entries)


def build(config: ModelConfig, rng: np.random.Generator) -> MattingNet:
    """Initialize a network: each conv weight is drawn uniformly from
    [-sqrt(6/fan_in), sqrt(6/fan_in)] (He bound — without normalization
    layers a smaller scale attenuates the signal to a near-constant output
    by the head) in declaration order; biases are zero, so the rng stream
    alone fixes every value."""
    params: dict[str, Parameter] = {}
    for spec in _conv_specs(config):
        fan_in = spec.in_channels * spec.kernel ** 2
        bound = math.sqrt(6.0 / fan_in)
        weight = rng.uniform(-bound, bound, (spec.out_channels, spec.in_channels,
                                             spec.kernel, spec.kernel))
        bias = np.zeros(spec.out_channels, dtype=np.float32)
        for suffix, values in ((".weight", weight.astype(np.float32)), (".bias", bias)):
            name = spec.name + suffix
            params[name] = Parameter(Tensor(values, requires_grad=True), name)
    return MattingNet(config, params)


def merge_with_copy_rule(raw_pred: Tensor, trimap) -> Tensor:
    """Final alpha: raw prediction on unknown pixels, exactly 1 on foreground
    and 0 on background. Differentiable, with zero gradient at known pixels;
    idempotent (merging a merged prediction changes nothing).

    trimap: a Trimap, an (H,W) label plane, or an (N,H,W) label batch.
    """
    if raw_pred.values.ndim != 4 or raw_pred.shape[1] != 1:
        raise ValueError(f"raw prediction must be (N,1,H,W), got {raw_pred.shape}")
    labels = trimap.labels if hasattr(trimap, "labels") else np.asarray(trimap)
    if labels.ndim == 2:
        labels = labels[None]
    try:
        labels = np.broadcast_to(labels[:, None], raw_pred.shape)
    except ValueError:
        raise ValueError(
            f"trimap labels {labels.shape} do not match prediction {raw_pred.shape}"
        ) from None
    unknown = engine.constant(labels == LABEL_UNKNOWN, like=raw_pred)
    foreground = engine.constant(labels == LABEL_FOREGROUND, like=raw_pred)
    return engine.add(engine.mul(raw_pred, unknown), foreground)


# --------------------------------------------------------------------------
# Checkpoint container


class CheckpointError(ValueError):
    """A checkpoint file is malformed, corrupted, or mismatched."""


@dataclass(frozen=True)
class Checkpoint:
    config: ModelConfig
    entries: dict[str, np.ndarray]  # float32 arrays, file order


@dataclass(frozen=True)
class LoadReport:
    """What a parameter load did: which model parameters took checkpoint
    values, which kept their fresh initialization, and which checkpoint
    entries went unused (e.g. optimizer state during a weights-only load)."""

    loaded: tuple[str, ...]
    reinitialized: tuple[str, ...]
    ignored: tuple[str, ...]


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.txt")


def save_checkpoint(path, config: ModelConfig, entries: dict[str, np.ndarray]) -> None:
    """Write the binary checkpoint and its sidecar manifest.

    Identical (config, entries) inputs produce byte-identical files.
    """
    payload = bytearray(CHECKPOINT_MAGIC)
    config_blob = json.dumps(asdict(config), sort_keys=False).encode()
    payload += struct.pack("<I", len(config_blob))
    payload += config_blob
    payload += struct.pack("<I", len(entries))
    manifest_rows = []
    for name, values in entries.items():
        arr = np.ascontiguousarray(values, dtype="<f4")
        name_bytes = name.encode()
        payload += struct.pack("<H", len(name_bytes))
        payload += name_bytes
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += arr.tobytes()
        manifest_rows.append((name, arr.shape, arr.size))
    digest = hashlib.sha256(payload).digest()
    path = Path(path)
    path.write_bytes(bytes(payload) + digest)
    manifest_path(path).write_text(
        _render_manifest(config, manifest_rows, digest.hex()))


def _render_manifest(config: ModelConfig, rows, checksum_hex: str) -> str:
    lines = [
        "format: MKCKPT01",
        f"checksum: sha256:{checksum_hex}",
        "config: " + " ".join(f"{k}={v}" for k, v in asdict(config).items()),
        "prefixes: enc.=encoder dec.=decoder head.=prediction-head "
        "optim.=optimizer-state",
        f"entries: {len(rows)} ({sum(size for _, _, size in rows)} values)",
    ]
    lines += [f"  {name}  shape={'x'.join(map(str, shape)) or 'scalar'}  "
              f"values={size}" for name, shape, size in rows]
    return "\n".join(lines) + "\n"


class _Reader:
    def __init__(self, buf: bytes, label: str):
        self.buf = buf
        self.off = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(f"{self.label}: truncated checkpoint body")
        chunk = self.buf[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    """Parse and checksum-verify a checkpoint file."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + _CHECKSUM_BYTES:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a mattekit checkpoint")
    body, stored = raw[:-_CHECKSUM_BYTES], raw[-_CHECKSUM_BYTES:]
    if hashlib.sha256(body).digest() != stored:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    reader = _Reader(body, str(path))
    reader.take(len(CHECKPOINT_MAGIC))
    (config_len,) = reader.unpack("<I")
    try:
        config = ModelConfig(**json.loads(reader.take(config_len)))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad config echo ({exc})") from None
    (count,) = reader.unpack("<I")
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode()
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(reader.take(4 * size), dtype="<f4")
        entries[name] = data.reshape(shape).astype(np.float32)
    if reader.off != len(body):
        raise CheckpointError(f"{path}: {len(body) - reader.off} trailing bytes")
    return Checkpoint(config=config, entries=entries)


def load_parameters(net: MattingNet, entries: dict[str, np.ndarray],
                    stage: str = "encoder_decoder") -> LoadReport:
    """Copy checkpoint entries into the matching model parameters.

    The stage selects which name prefixes are loaded ("encoder_only" loads
    enc.* and leaves the decoder/head at their fresh initialization;
    "encoder_decoder" loads everything). Any selected parameter missing
    from the checkpoint, or present with the wrong shape, aborts with the
    offending names before the model is touched.
    """
    try:
        prefixes = LOAD_STAGES[stage]
    except KeyError:
        raise ValueError(
            f"unknown load stage {stage!r}; expected one of {sorted(LOAD_STAGES)}"
        ) from None
    names = net.parameter_names()
    wanted = [n for n in names if n.startswith(prefixes)]
    missing = [n for n in wanted if n not in entries]
    if missing:
        raise CheckpointError(
            f"checkpoint lacks parameters required by stage {stage!r}: "
            + ", ".join(missing))
    mismatched = [
        f"{n} (checkpoint {entries[n].shape} vs model {net.param(n).values.shape})"
        for n in wanted if entries[n].shape != net.param(n).values.shape]
    if mismatched:
        raise CheckpointError("checkpoint shape mismatch: " + "; ".join(mismatched))
    for n in wanted:
        tensor = net.param(n).tensor
        tensor.values = entries[n].astype(tensor.dtype, copy=True)
        tensor.grad = None
    return LoadReport(
        loaded=tuple(wanted),
        reinitialized=tuple(n for n in names if n not in set(wanted)),
        ignored=tuple(k for k in entries if k not in set(wanted)),
    )


def load_model(path, *, stage: str = "encoder_decoder",
               rng: np.random.Generator | None = None) -> tuple[MattingNet, LoadReport]:
    """Rebuild a network from a checkpoint file. The rng seeds whatever the
    stage leaves unloaded (irrelevant for a full encoder_decoder load)."""
    ckpt = load_checkpoint(path)
    net = build(ckpt.config, rng if rng is not None else np.random.default_rng(0))
    report = load_parameters(net, ckpt.entries, stage=stage)
    return net, report
