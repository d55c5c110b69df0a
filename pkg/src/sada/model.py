"""
TinySegNet: a small fully-convolutional segmentation network.

Layer groups (their names are what adaptation selects by):

    stem    conv3x3  3 -> 16          + BN + ReLU
    block2  conv3x3 16 -> 32, stride 2 + BN + ReLU
    block3  conv3x3 32 -> 32          + BN + ReLU
    block4  conv3x3 32 -> 64, stride 2 + BN + ReLU
    block5  conv3x3 64 -> 64          + BN + ReLU
    head    conv1x1 64 -> C, bilinear upsample x4 to the input size

Checkpoints use the SACK container: magic ``SACK``, version 0x01, u32 entry
count, entries of (u16 name length, UTF-8 name, SADT tensor), and a trailing
u32 CRC32 over everything before it.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import numpy as np

from . import sadt
from .exceptions import (
    SadaArchitectureError,
    SadaArtifactError,
    SadaContractError,
    SadaDataError,
    SadaShapeError,
    SadaValidationError,
)
from .norm import BatchNorm2d, NormStats, SanConfig, set_norm_mode
from .tensor import Tensor, bilinear_resize, conv2d, relu

logger = logging.getLogger(__name__)

ARCH_TAG = "tinysegnet"
ARCH_VERSION = 1
DEFAULT_NUM_CLASSES = 5
OUTPUT_STRIDE = 4

# (group, in channels, out channels, stride)
BLOCK_LAYOUT = (
    ("stem", 3, 16, 1),
    ("block2", 16, 32, 2),
    ("block3", 32, 32, 1),
    ("block4", 32, 64, 2),
    ("block5", 64, 64, 1),
)
HEAD_IN = 64
GROUP_NAMES = tuple(name for name, *_ in BLOCK_LAYOUT) + ("head",)
DEFAULT_ADAPT_GROUPS = ("block4", "block5", "head")

CKPT_MAGIC = b"SACK"
CKPT_VERSION = 0x01
META_ENTRY = "__meta__"


class ConvBlock:
    """conv3x3 (pad 1) + BatchNorm2d + ReLU."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator) -> None:
        std = math.sqrt(2.0 / (c_in * 9))
        self.weight = Tensor(rng.normal(0.0, std, size=(c_out, c_in, 3, 3)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        self.bn = BatchNorm2d(c_out)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return relu(self.bn(conv2d(x, self.weight, self.bias, stride=self.stride, pad=1)))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("conv.weight", self.weight),
            ("conv.bias", self.bias),
            ("bn.gamma", self.bn.gamma),
            ("bn.beta", self.bn.beta),
        ]


class SegHead:
    """conv1x1 classifier followed by bilinear upsampling to the input grid."""

    def __init__(self, c_in: int, num_classes: int, rng: np.random.Generator) -> None:
        std = math.sqrt(2.0 / c_in)
        self.weight = Tensor(rng.normal(0.0, std, size=(num_classes, c_in, 1, 1)), requires_grad=True)
        self.bias = Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor, out_h: int, out_w: int) -> Tensor:
        return bilinear_resize(conv2d(x, self.weight, self.bias), out_h, out_w)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [("conv.weight", self.weight), ("conv.bias", self.bias)]


class TinySegNet:
    """Fully-convolutional segmentation network with named layer groups.

    Attributes:
        num_classes: Number of output channels C
        blocks: Conv blocks keyed by group name, in forward order
        head: The classifier head
        meta: Training-recipe metadata carried through checkpoints
    """

    def __init__(self, num_classes: int = DEFAULT_NUM_CLASSES, seed: int = 0) -> None:
        if num_classes < 2 or num_classes > 255:
            raise SadaValidationError(
                f"num_classes must lie in [2, 255], got {num_classes}",
                parameter="num_classes",
            )
        rng = np.random.default_rng(seed)
        self.num_classes = num_classes
        self.blocks: dict[str, ConvBlock] = {
            name: ConvBlock(c_in, c_out, stride, rng) for name, c_in, c_out, stride in BLOCK_LAYOUT
        }
        self.head = SegHead(HEAD_IN, num_classes, rng)
        self.meta: dict[str, Any] = {"init_seed": seed}
        self.training = False
        self.eval()

    # ---- modes ----

    def train(self) -> "TinySegNet":
        self.training = True
        for layer in self.norm_layers():
            layer.training = True
        return self

    def eval(self) -> "TinySegNet":
        self.training = False
        for layer in self.norm_layers():
            layer.training = False
        return self

    # ---- parameters ----

    def norm_layers(self) -> list[BatchNorm2d]:
        return [block.bn for block in self.blocks.values()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        named = []
        for group, block in self.blocks.items():
            named.extend((f"{group}.{name}", t) for name, t in block.named_parameters())
        named.extend((f"head.{name}", t) for name, t in self.head.named_parameters())
        return named

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        named = []
        for group, block in self.blocks.items():
            named.append((f"{group}.bn.running_mean", block.bn.running.mean))
            named.append((f"{group}.bn.running_var", block.bn.running.var))
        return named

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def requires_grad_(self, flag: bool, groups: Optional[Iterable[str]] = None) -> None:
        """Switch gradient tracking for the given groups (all groups by default)."""
        params = self.parameters() if groups is None else select_params(self, groups)
        for t in params:
            t.requires_grad = flag

    def clone(self) -> "TinySegNet":
        """Independent deep copy (for running sessions side by side)."""
        return copy.deepcopy(self)

    # ---- forward ----

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise SadaShapeError(f"TinySegNet expects N x 3 x H x W input, got {x.shape}", shapes=[x.shape])
        _, _, h, w = x.shape
        if h % OUTPUT_STRIDE or w % OUTPUT_STRIDE:
            raise SadaShapeError(
                f"Input extents must be multiples of {OUTPUT_STRIDE}, got {h}x{w}",
                shapes=[x.shape],
            )
        out = x
        for block in self.blocks.values():
            out = block(out)
        return self.head(out, h, w)


def forward(net: TinySegNet, x: Tensor, norm: Optional[SanConfig] = None) -> Tensor:
    """Logits N x C x H x W; ``norm`` (if given) is applied to all BN layers first."""
    if norm is not None:
        set_norm_mode(net, norm)
    return net(x)


def _group_parameters(net: TinySegNet, group: str) -> list[Tensor]:
    if group == "head":
        return [t for _, t in net.head.named_parameters()]
    return [t for _, t in net.blocks[group].named_parameters()]


def select_params(net: TinySegNet, groups: Iterable[str]) -> list[Tensor]:
    """Conv weights/biases and BN gamma/beta of the named groups, in network order.

    Raises:
        SadaValidationError: If a group name is unknown
    """
    wanted = set(groups)
    unknown = sorted(wanted - set(GROUP_NAMES))
    if unknown:
        raise SadaValidationError(
            f"Unknown layer group(s): {', '.join(unknown)}",
            parameter="groups",
            valid_values=list(GROUP_NAMES),
        )
    params: list[Tensor] = []
    for group in GROUP_NAMES:
        if group in wanted:
            params.extend(_group_parameters(net, group))
    return params


def parameter_count(net: TinySegNet, groups: Iterable[str]) -> int:
    """Number of scalar parameters in the named groups."""
    return sum(t.size for t in select_params(net, groups))


# ============================================
# Snapshot / reset
# ============================================

@dataclass(frozen=True)
class ParamSnapshot:
    """Bitwise copy of every parameter and running statistic of a network."""

    arch: tuple[str, int, int]
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    counts: dict[str, int] = field(default_factory=dict)


def _arch_key(net: TinySegNet) -> tuple[str, int, int]:
    return (ARCH_TAG, ARCH_VERSION, net.num_classes)


def snapshot_params(net: TinySegNet) -> ParamSnapshot:
    """Copy the current parameters and running statistics (theta_0)."""
    return ParamSnapshot(
        arch=_arch_key(net),
        params={name: t.data.copy() for name, t in net.named_parameters()},
        buffers={name: arr.copy() for name, arr in net.named_buffers()},
        counts={group: block.bn.running.count for group, block in net.blocks.items()},
    )


def restore_params(net: TinySegNet, snapshot: ParamSnapshot) -> None:
    """Make every parameter and running statistic bitwise equal to ``snapshot``.

    Raises:
        SadaContractError: If the snapshot was taken from a different architecture
    """
    if snapshot.arch != _arch_key(net):
        raise SadaContractError(
            f"Snapshot architecture {snapshot.arch} does not match network {_arch_key(net)}",
            parameter="snapshot",
        )
    for name, t in net.named_parameters():
        np.copyto(t.data, snapshot.params[name])
        t.zero_grad()
    for group, block in net.blocks.items():
        block.bn.running = NormStats(
            snapshot.buffers[f"{group}.bn.running_mean"].copy(),
            snapshot.buffers[f"{group}.bn.running_var"].copy(),
            count=snapshot.counts.get(group, 0),
        )


# ============================================
# Checkpoints
# ============================================

@dataclass
class Checkpoint:
    """Decoded SACK container.

    Attributes:
        arch_tag: Architecture name (``tinysegnet``)
        arch_version: Architecture revision
        num_classes: Output channels of the stored head
        tensors: Parameters and running statistics by name, in file order
        recipe: Training-recipe metadata (epochs, seed, source domain, ...)
    """

    arch_tag: str
    arch_version: int
    num_classes: int
    tensors: dict[str, np.ndarray]
    recipe: dict[str, Any] = field(default_factory=dict)


def encode_checkpoint(net: TinySegNet) -> bytes:
    """Serialize ``net`` (parameters, running statistics, ``net.meta``)."""
    meta = {
        "arch": ARCH_TAG,
        "arch_version": ARCH_VERSION,
        "num_classes": net.num_classes,
        "recipe": net.meta,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    entries: list[tuple[str, np.ndarray]] = [(META_ENTRY, np.frombuffer(meta_bytes, dtype=np.uint8))]
    entries.extend((name, t.data) for name, t in net.named_parameters())
    entries.extend(net.named_buffers())

    body = bytearray(CKPT_MAGIC + bytes([CKPT_VERSION]) + struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw + sadt.encode(arr)
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    return bytes(body)


def decode_checkpoint(buf: bytes, path: Optional[str] = None) -> Checkpoint:
    """Parse and verify a SACK buffer without touching any network."""
    if len(buf) < len(CKPT_MAGIC) + 1 + 4 + 4:
        raise SadaArtifactError("Checkpoint is truncated", path=path)
    if buf[:4] != CKPT_MAGIC:
        raise SadaArtifactError(f"Bad checkpoint magic {bytes(buf[:4])!r}", path=path)
    if buf[4] != CKPT_VERSION:
        raise SadaArtifactError(f"Unsupported checkpoint version {buf[4]}", path=path)
    (stored_crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored_crc:
        raise SadaArtifactError(
            "Checkpoint CRC mismatch (file truncated or corrupted)",
            path=path,
            suggestion="Re-run training or copy the checkpoint again",
        )

    body = buf[:-4]
    (count,) = struct.unpack_from("<I", body, 5)
    pos = 9
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = bytes(body[pos:pos + name_len]).decode("utf-8")
            pos += name_len
            tensors[name], pos = sadt.decode_from(body, pos)
    except (struct.error, UnicodeDecodeError, SadaArtifactError) as e:
        raise SadaArtifactError(f"Malformed checkpoint entry: {e}", path=path) from e
    if pos != len(body):
        raise SadaArtifactError(f"{len(body) - pos} stray bytes after the last entry", path=path)
    if META_ENTRY not in tensors:
        raise SadaArtifactError("Checkpoint has no metadata entry", path=path)

    meta = json.loads(tensors.pop(META_ENTRY).tobytes().decode("utf-8"))
    return Checkpoint(
        arch_tag=meta.get("arch", ""),
        arch_version=int(meta.get("arch_version", -1)),
        num_classes=int(meta.get("num_classes", -1)),
        tensors=tensors,
        recipe=meta.get("recipe", {}),
    )


def save_checkpoint(net: TinySegNet, path: Union[str, Path]) -> None:
    """Write ``net`` to ``path`` as a SACK checkpoint."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_checkpoint(net))
    except OSError as e:
        raise SadaDataError(f"Cannot write checkpoint {path}: {e}", path=str(path)) from e
    logger.info(f"Saved checkpoint to {path}")


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise SadaDataError(f"Cannot read checkpoint {path}: {e}", path=str(path)) from e
    return decode_checkpoint(buf, path=str(path))


def load_checkpoint(path: Union[str, Path], net: Optional[TinySegNet] = None) -> TinySegNet:
    """Load a checkpoint into ``net`` (or a freshly built network).

    Nothing is written into ``net`` unless the whole file verifies.

    Raises:
        SadaArtifactError: Bad magic/version, truncation or CRC mismatch
        SadaArchitectureError: Architecture tag or tensor shapes do not match
    """
    ckpt = read_checkpoint(path)
    if ckpt.arch_tag != ARCH_TAG or ckpt.arch_version != ARCH_VERSION:
        raise SadaArchitectureError(
            f"Checkpoint architecture {ckpt.arch_tag} v{ckpt.arch_version} is not {ARCH_TAG} v{ARCH_VERSION}",
            path=str(path),
        )
    if net is None:
        net = TinySegNet(num_classes=ckpt.num_classes)
    if ckpt.num_classes != net.num_classes:
        raise SadaArchitectureError(
            f"Checkpoint has {ckpt.num_classes} classes, network has {net.num_classes}",
            path=str(path),
        )

    expected = [(name, t.shape) for name, t in net.named_parameters()]
    expected += [(name, arr.shape) for name, arr in net.named_buffers()]
    for name, shape in expected:
        if name not in ckpt.tensors:
            raise SadaArchitectureError(f"Checkpoint lacks tensor '{name}'", path=str(path))
        if ckpt.tensors[name].shape != shape:
            raise SadaArchitectureError(
                f"Tensor '{name}' has shape {ckpt.tensors[name].shape}, network expects {shape}",
                path=str(path),
            )
    extra = sorted(set(ckpt.tensors) - {name for name, _ in expected})
    if extra:
        raise SadaArchitectureError(f"Checkpoint has unexpected tensors: {', '.join(extra)}", path=str(path))

    for name, t in net.named_parameters():
        np.copyto(t.data, ckpt.tensors[name])
        t.zero_grad()
    for group, block in net.blocks.items():
        block.bn.running = NormStats(
            ckpt.tensors[f"{group}.bn.running_mean"].copy(),
            ckpt.tensors[f"{group}.bn.running_var"].copy(),
            count=block.bn.running.count,
        )
    net.meta = dict(ckpt.recipe)
    net.eval()
    logger.info(f"Loaded {ARCH_TAG} checkpoint ({ckpt.num_classes} classes) from {path}")
    return net
