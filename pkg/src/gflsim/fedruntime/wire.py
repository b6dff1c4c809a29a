"""Binary framing for round messages and model checkpoints.

Frame: ``<u32 length><u8 kind><u32 round><u32 client>`` then the payload,
all little-endian.  ``length`` counts every byte after itself.  Broadcasts
carry client id 0xFFFFFFFF.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path
from typing import Union

from ..encoder import AggregatedContext, HiddenPacket, ModelParams

BROADCAST_ID = 0xFFFFFFFF
_LEN = struct.Struct("<I")
_HEAD = struct.Struct("<BII")
CHECKPOINT_MAGIC = b"GFLCKPT1"
_CKPT = struct.Struct("<8sQ")

Payload = Union[ModelParams, HiddenPacket, AggregatedContext]


class FrameError(ValueError):
    pass


class MessageKind(IntEnum):
    MODEL_UPLOAD = 1
    MODEL_BROADCAST = 2
    HIDDEN_UPLOAD = 3
    AGG_BROADCAST = 4


PAYLOAD_TYPES = {
    MessageKind.MODEL_UPLOAD: ModelParams,
    MessageKind.MODEL_BROADCAST: ModelParams,
    MessageKind.HIDDEN_UPLOAD: HiddenPacket,
    MessageKind.AGG_BROADCAST: AggregatedContext,
}


@dataclass(frozen=True)
class RoundMessage:
    kind: MessageKind
    round: int
    client_id: int | None
    payload: Payload

    def __post_init__(self):
        object.__setattr__(self, "kind", MessageKind(self.kind))
        if self.round < 0:
            raise ValueError("round must be nonnegative")
        if not isinstance(self.payload, PAYLOAD_TYPES[self.kind]):
            raise TypeError(f"{self.kind.name} carries {PAYLOAD_TYPES[self.kind].__name__}")
        if self.kind is MessageKind.MODEL_BROADCAST and self.client_id is not None:
            raise ValueError("model broadcasts have no client id")
        if self.kind is not MessageKind.MODEL_BROADCAST and self.client_id is None:
            raise ValueError(f"{self.kind.name} needs a client id")


def encode_message(m: RoundMessage) -> bytes:
    client = BROADCAST_ID if m.client_id is None else m.client_id
    body = _HEAD.pack(int(m.kind), m.round, client) + m.payload.to_bytes()
    return _LEN.pack(len(body)) + body


def frame_size(buf: bytes) -> int | None:
    """Total size of the first frame in ``buf`` or None if the prefix is incomplete."""
    if len(buf) < _LEN.size:
        return None
    return _LEN.size + _LEN.unpack_from(buf)[0]


def decode_message(buf: bytes) -> RoundMessage:
    buf = bytes(buf)
    total = frame_size(buf)
    if total is None or len(buf) < total:
        raise FrameError("incomplete frame")
    if len(buf) != total:
        raise FrameError(f"length mismatch: header says {total} bytes, got {len(buf)}")
    if total < _LEN.size + _HEAD.size:
        raise FrameError("frame shorter than its header")
    tag, rnd, client = _HEAD.unpack_from(buf, _LEN.size)
    try:
        kind = MessageKind(tag)
    except ValueError:
        raise FrameError(f"unknown message kind 0x{tag:02X}") from None
    try:
        payload = PAYLOAD_TYPES[kind].from_bytes(buf[_LEN.size + _HEAD.size :])
    except ValueError as exc:
        raise FrameError(f"bad {kind.name} payload: {exc}") from None
    return RoundMessage(kind, rnd, None if client == BROADCAST_ID else client, payload)


def write_checkpoint(path, params: ModelParams, round_number: int) -> None:
    Path(path).write_bytes(_CKPT.pack(CHECKPOINT_MAGIC, round_number) + params.to_bytes())


def read_checkpoint(path) -> tuple[int, ModelParams]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT.size:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, rnd = _CKPT.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    return rnd, ModelParams.from_bytes(raw[_CKPT.size :])
