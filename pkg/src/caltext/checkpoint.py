"""Versioned binary checkpoint container.

Layout, all integers little-endian:

    magic   8 bytes  b"CALTCKPT"
    version u32
    hlen    u32      length of the UTF-8 JSON header
    header  hlen bytes: {"encoder": {...}, "decoder": {...},
                         "vocab": [...], "array_count": N,
                         "has_optimizer": bool}
    N array records:
        nlen  u16, name nlen bytes
        dlen  u8,  numpy dtype string dlen bytes (e.g. "<f8")
        ndim  u8,  ndim u32 extents
        raw   data bytes, C order
    crc32  u32 over every preceding byte

Optimizer accumulators ride along as ordinary arrays under the reserved
prefixes opt.square_avg. and opt.acc_delta.; save is atomic via rename.
"""

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

MAGIC = b"CALTCKPT"
FORMAT_VERSION = 1
_OPT_SQ = "opt.square_avg."
_OPT_ACC = "opt.acc_delta."


class CheckpointError(Exception):
    """Base for all checkpoint read failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    format_version: int
    encoder_config: dict
    decoder_config: dict
    vocab_symbols: list
    arrays: dict  # name -> np.ndarray (model weights and running stats)
    optimizer: dict = None  # {"square_avg": {...}, "acc_delta": {...}} or None


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    # np.ascontiguousarray would promote 0-dim arrays to 1-dim
    arr = np.asarray(arr, order="C")
    dtype_str = arr.dtype.newbyteorder("<").str
    data = arr.astype(dtype_str, copy=False).tobytes()
    name_b = name.encode("utf-8")
    out = [struct.pack("<H", len(name_b)), name_b,
           struct.pack("<B", len(dtype_str)), dtype_str.encode("ascii"),
           struct.pack("<B", arr.ndim),
           struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"",
           data]
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, "
                f"file holds {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    arrays = dict(checkpoint.arrays)
    if checkpoint.optimizer is not None:
        for name, arr in checkpoint.optimizer["square_avg"].items():
            arrays[_OPT_SQ + name] = arr
        for name, arr in checkpoint.optimizer["acc_delta"].items():
            arrays[_OPT_ACC + name] = arr

    header = json.dumps({
        "encoder": checkpoint.encoder_config,
        "decoder": checkpoint.decoder_config,
        "vocab": checkpoint.vocab_symbols,
        "array_count": len(arrays),
        "has_optimizer": checkpoint.optimizer is not None,
    }).encode("utf-8")

    body = [MAGIC, struct.pack("<I", checkpoint.format_version),
            struct.pack("<I", len(header)), header]
    for name in sorted(arrays):
        body.append(_pack_array(name, arrays[name]))
    blob = b"".join(body)
    blob += struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF)

    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) + 8 + 4:
        raise CheckpointTruncatedError(
            f"checkpoint too small ({len(blob)} bytes) to hold a header")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(
            f"bad magic bytes {blob[:len(MAGIC)]!r}; not a checkpoint file")

    stored_crc = struct.unpack("<I", blob[-4:])[0]
    actual_crc = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointChecksumError(
            f"checksum mismatch: stored {stored_crc:#010x}, "
            f"computed {actual_crc:#010x}")

    reader = _Reader(blob[:-4])
    reader.take(len(MAGIC))
    (version,) = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version}, this build reads "
            f"{FORMAT_VERSION}")
    (hlen,) = reader.unpack("<I")
    try:
        header = json.loads(reader.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointFormatError(f"unreadable header: {err}") from err

    arrays = {}
    for _ in range(header["array_count"]):
        (nlen,) = reader.unpack("<H")
        name = reader.take(nlen).decode("utf-8")
        (dlen,) = reader.unpack("<B")
        dtype = np.dtype(reader.take(dlen).decode("ascii"))
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        raw = reader.take(count * dtype.itemsize)
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if reader.pos != len(reader.blob):
        raise CheckpointFormatError(
            f"{len(reader.blob) - reader.pos} unexpected trailing bytes")

    optimizer = None
    if header.get("has_optimizer"):
        optimizer = {"square_avg": {}, "acc_delta": {}}
        for name in list(arrays):
            if name.startswith(_OPT_SQ):
                optimizer["square_avg"][name[len(_OPT_SQ):]] = arrays.pop(name)
            elif name.startswith(_OPT_ACC):
                optimizer["acc_delta"][name[len(_OPT_ACC):]] = arrays.pop(name)

    return Checkpoint(format_version=version,
                      encoder_config=header["encoder"],
                      decoder_config=header["decoder"],
                      vocab_symbols=header["vocab"],
                      arrays=arrays,
                      optimizer=optimizer)


def checkpoint_from_model(recognizer, opt_state=None) -> Checkpoint:
    optimizer = None
    if opt_state is not None:
        optimizer = {"square_avg": dict(opt_state.square_avg),
                     "acc_delta": dict(opt_state.acc_delta)}
    return Checkpoint(
        format_version=FORMAT_VERSION,
        encoder_config=asdict(recognizer.config.encoder),
        decoder_config=asdict(recognizer.config.decoder),
        vocab_symbols=list(recognizer.vocab.symbols),
        arrays={name: arr.copy() for name, arr in recognizer.arrays().items()},
        optimizer=optimizer,
    )


def model_from_checkpoint(checkpoint: Checkpoint, seed: int = 0):
    from .decoder import DecoderConfig
    from .encoder import EncoderConfig
    from .model import ModelConfig, Recognizer
    from .objective import OptimizerState
    from .vocab import Vocabulary

    config = ModelConfig(EncoderConfig(**checkpoint.encoder_config),
                         DecoderConfig(**checkpoint.decoder_config))
    recognizer = Recognizer(config, Vocabulary(checkpoint.vocab_symbols), seed=seed)
    recognizer.load_arrays(checkpoint.arrays)

    opt_state = None
    if checkpoint.optimizer is not None:
        opt_state = OptimizerState(
            square_avg={k: v.copy() for k, v in checkpoint.optimizer["square_avg"].items()},
            acc_delta={k: v.copy() for k, v in checkpoint.optimizer["acc_delta"].items()})
    return recognizer, opt_state
