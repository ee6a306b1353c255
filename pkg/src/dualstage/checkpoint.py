"""Bit-exact model persistence and the binary tensor fixture format.

Checkpoint layout:

    bytes 0..8    magic "DSTCKPT1"
    bytes 8..12   u32 little-endian header length
    header        canonical JSON (sorted keys, no whitespace): format
                  version, model config, config SHA-256, vocabulary, epoch,
                  training seed, optional optimizer step count, and a tensor
                  directory of (name, dtype, shape, offset, nbytes)
    payload       raw little-endian tensor bytes, each 64-byte aligned

Saving the result of a load reproduces the original file byte for byte.
Writes go through a temp file and rename, so a crash cannot leave a torn
checkpoint behind.

Tensor fixtures (for tests and tooling) are simpler: magic "DST1", u8 rank,
rank little-endian u32 dims, then row-major little-endian float32 data.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct

import numpy as np

from .data import PreprocessConfig
from .errors import CheckpointError
from .fusion import DualStageModel, build_model
from .swin import SwinConfig
from .train import AdamState
from .vit import ViTConfig

MAGIC = b"DSTCKPT1"
VERSION = 1
ALIGN = 64

_DTYPE_CODES = {np.dtype(np.float32): "<f4", np.dtype(np.float64): "<f8"}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def config_dict(model: DualStageModel, preprocess: PreprocessConfig | None = None) -> dict:
    cfg = {
        "vit": dataclasses.asdict(model.vit_config),
        "swin": dataclasses.asdict(model.swin_config),
        "vocabulary": list(model.vocabulary),
        "precision": "float64" if model.dtype == np.float64 else "float32",
    }
    if preprocess is not None:
        cfg["preprocess"] = {
            "target_size": preprocess.target_size,
            "normalization": preprocess.normalization,
            "channel_mean": list(preprocess.channel_mean) if preprocess.channel_mean else None,
            "channel_std": list(preprocess.channel_std) if preprocess.channel_std else None,
        }
    return cfg


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def config_sha256(model: DualStageModel) -> str:
    return hashlib.sha256(_canonical(config_dict(model))).hexdigest()


def _aligned(offset: int) -> int:
    return (offset + ALIGN - 1) // ALIGN * ALIGN


def _named_tensors(model: DualStageModel, state: AdamState | None):
    for name, p in model.named_parameters():
        yield name, p.data
    if state is not None:
        for name, _ in model.named_parameters():
            yield f"adam.m.{name}", state.m[name]
        for name, _ in model.named_parameters():
            yield f"adam.v.{name}", state.v[name]


def save_checkpoint(
    path: str,
    model: DualStageModel,
    state: AdamState | None = None,
    epoch: int = 0,
    seed: int = 0,
    preprocess: PreprocessConfig | None = None,
) -> None:
    tensors = list(_named_tensors(model, state))
    cfg = config_dict(model, preprocess)
    header: dict = {
        "version": VERSION,
        "config": cfg,
        "config_sha256": hashlib.sha256(_canonical(cfg)).hexdigest(),
        "epoch": int(epoch),
        "seed": int(seed),
        "adam_t": None if state is None else int(state.t),
        "tensors": [],
    }
    # first pass with zero offsets fixes the header length, second fills them in
    for name, arr in tensors:
        header["tensors"].append(
            {
                "name": name,
                "dtype": _DTYPE_CODES[arr.dtype],
                "shape": list(arr.shape),
                "offset": 0,
                "nbytes": int(arr.nbytes),
            }
        )
    base = _aligned(len(MAGIC) + 4 + len(_canonical(header)))
    while True:
        offset = base
        for entry, (_, arr) in zip(header["tensors"], tensors):
            entry["offset"] = offset
            offset += _aligned(arr.nbytes)
        new_base = _aligned(len(MAGIC) + 4 + len(_canonical(header)))
        if new_base == base:
            break
        base = new_base
    blob = _canonical(header)
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(b"\x00" * (base - len(MAGIC) - 4 - len(blob)))
        for entry, (_, arr) in zip(header["tensors"], tensors):
            fh.write(b"\x00" * (entry["offset"] - fh.tell()))
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)


@dataclasses.dataclass
class CheckpointBundle:
    model: DualStageModel
    state: AdamState | None
    epoch: int
    seed: int
    preprocess: PreprocessConfig | None


def load_checkpoint(path: str, expected_vocabulary: list[str] | None = None) -> CheckpointBundle:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not a checkpoint)")
    if len(raw) < len(MAGIC) + 4:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    if start + hlen > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('version')} unsupported (expected {VERSION})"
        )
    cfg = header["config"]
    if hashlib.sha256(_canonical(cfg)).hexdigest() != header["config_sha256"]:
        raise CheckpointError(f"{path}: config hash mismatch (corrupted header)")
    vocabulary = list(cfg["vocabulary"])
    if expected_vocabulary is not None and list(expected_vocabulary) != vocabulary:
        raise CheckpointError(
            f"{path}: vocabulary mismatch\n  checkpoint: {vocabulary}\n  expected:   {list(expected_vocabulary)}"
        )
    dtype = np.float64 if cfg["precision"] == "float64" else np.float32
    model = build_model(
        ViTConfig(**cfg["vit"]),
        SwinConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["swin"].items()}),
        vocabulary,
        seed=0,
        dtype=dtype,
    )
    arrays: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        off, nbytes = entry["offset"], entry["nbytes"]
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated tensor data for {entry['name']!r}")
        if entry["dtype"] not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown tensor dtype {entry['dtype']!r}")
        arr = np.frombuffer(raw, dtype=entry["dtype"], count=nbytes // np.dtype(entry["dtype"]).itemsize, offset=off)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(_CODE_DTYPES[entry["dtype"]], copy=True)
    param_names = [name for name, _ in model.named_parameters()]
    missing = [n for n in param_names if n not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    for name, p in model.named_parameters():
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {arrays[name].shape}, expected {p.data.shape}"
            )
        p.data = arrays[name]
    state = None
    if header.get("adam_t") is not None:
        state = AdamState(t=int(header["adam_t"]))
        for name in param_names:
            try:
                state.m[name] = arrays[f"adam.m.{name}"]
                state.v[name] = arrays[f"adam.v.{name}"]
            except KeyError as exc:
                raise CheckpointError(f"{path}: missing optimizer tensor for {name!r}") from exc
    preprocess = None
    if cfg.get("preprocess") is not None:
        pp = cfg["preprocess"]
        preprocess = PreprocessConfig(
            target_size=pp["target_size"],
            normalization=pp["normalization"],
            channel_mean=tuple(pp["channel_mean"]) if pp["channel_mean"] else None,
            channel_std=tuple(pp["channel_std"]) if pp["channel_std"] else None,
        )
    return CheckpointBundle(
        model=model,
        state=state,
        epoch=int(header["epoch"]),
        seed=int(header["seed"]),
        preprocess=preprocess,
    )


FIXTURE_MAGIC = b"DST1"


def write_tensor_fixture(path: str, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise CheckpointError("fixture rank exceeds u8")
    with open(path, "wb") as fh:
        fh.write(FIXTURE_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tensor_fixture(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FIXTURE_MAGIC:
        raise CheckpointError(f"{path}: bad fixture magic")
    rank = raw[4]
    dims = struct.unpack_from(f"<{rank}I", raw, 5)
    data_off = 5 + 4 * rank
    expected = int(np.prod(dims)) * 4 if rank else 4
    if len(raw) - data_off != expected:
        raise CheckpointError(f"{path}: fixture payload size mismatch")
    return np.frombuffer(raw, dtype="<f4", offset=data_off).reshape(dims).astype(np.float32)
