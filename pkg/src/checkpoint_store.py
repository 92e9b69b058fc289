"""
Binary training checkpoints and their directory layout
"""

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from dqn_agent import AgentConfig, TrainState, build_network, make_optimizer
from errors import CorruptFile, FormatVersionMismatch

MAGIC = b"CSTS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_CRC = struct.Struct("<I")


def _tensor_arrays(prefix: str, tensors: Dict[str, torch.Tensor]) -> List[Tuple[str, np.ndarray]]:
    return [(f"{prefix}{name}", t.detach().cpu().numpy().astype("<f4")) for name, t in tensors.items()]


def _optimizer_arrays(optimizer: torch.optim.Optimizer) -> Tuple[List[Tuple[str, np.ndarray]], Dict[str, Any]]:
    """Tensor state as named arrays; param groups and plain values go to the metadata"""
    state_dict = optimizer.state_dict()
    arrays, plain = [], {}
    for index, slots in sorted(state_dict["state"].items()):
        for key, value in sorted(slots.items()):
            name = f"optim.{index}.{key}"
            if torch.is_tensor(value):
                arrays.append((name, value.detach().cpu().numpy().astype("<f4")))
            else:
                plain[name] = value
    return arrays, {"param_groups": state_dict["param_groups"], "plain": plain}


def write_checkpoint(path: Union[str, Path], state: TrainState, config: AgentConfig,
                     grid_size: int, metadata: Optional[Dict[str, Any]] = None,
                     extra_arrays: Optional[Dict[str, Dict[str, torch.Tensor]]] = None) -> str:
    """
    Layout: magic, u32 version, u32 metadata length, UTF-8 JSON metadata,
    float32 little-endian arrays in the order the metadata lists them, CRC32
    of everything before it.
    """
    arrays = _tensor_arrays("online.", state.online.state_dict())
    arrays += _tensor_arrays("target.", state.target.state_dict())
    optim_arrays, optim_meta = _optimizer_arrays(state.optimizer)
    arrays += optim_arrays
    for prefix, tensors in (extra_arrays or {}).items():
        arrays += _tensor_arrays(f"{prefix}.", tensors)

    meta = {
        "agent": asdict(config),
        "architecture": state.online.architecture(),
        "grid_size": grid_size,
        "step": state.step,
        "updates": state.updates,
        "rng_state": state.rng.bit_generator.state,
        "optimizer": optim_meta,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in arrays],
        "extra": metadata or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = bytearray(_HEADER.pack(MAGIC, FORMAT_VERSION, len(meta_bytes)))
    body += meta_bytes
    for _, a in arrays:
        body += np.ascontiguousarray(a).tobytes()
    body += _CRC.pack(zlib.crc32(bytes(body)) & 0xFFFFFFFF)

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(body))
    tmp.replace(path)
    return str(path)


def read_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Validated metadata and named arrays"""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + _CRC.size:
        raise CorruptFile(f"{path}: truncated checkpoint ({len(raw)} bytes)")
    magic, version, meta_len = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}",
                                    {'found': version, 'expected': FORMAT_VERSION})
    (crc,) = _CRC.unpack_from(raw, len(raw) - _CRC.size)
    if zlib.crc32(raw[:-_CRC.size]) & 0xFFFFFFFF != crc:
        raise CorruptFile(f"{path}: checksum mismatch")
    offset = _HEADER.size
    try:
        meta = json.loads(raw[offset:offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"{path}: unreadable metadata ({e})")
    offset += meta_len

    arrays: Dict[str, np.ndarray] = {}
    end = len(raw) - _CRC.size
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > end:
            raise CorruptFile(f"{path}: array {entry['name']} runs past the end of the file")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        offset += nbytes
    if offset != end:
        raise CorruptFile(f"{path}: {end - offset} unexpected trailing bytes")
    return meta, arrays


def _prefixed(arrays: Dict[str, np.ndarray], prefix: str) -> Dict[str, torch.Tensor]:
    return {name[len(prefix):]: torch.from_numpy(a.astype(np.float32))
            for name, a in arrays.items() if name.startswith(prefix)}


def load_checkpoint(path: Union[str, Path]) -> Tuple[TrainState, AgentConfig, Dict[str, Any], Dict[str, np.ndarray]]:
    """Rebuild the training state; also returns the extra metadata and all arrays"""
    meta, arrays = read_checkpoint(path)
    config = AgentConfig(**meta["agent"])
    grid_size = int(meta["grid_size"])
    online = build_network(config, grid_size)
    online.load_state_dict(_prefixed(arrays, "online."))
    target = build_network(config, grid_size)
    target.load_state_dict(_prefixed(arrays, "target."))
    target.requires_grad_(False)

    optimizer = make_optimizer(config, online)
    optim_state: Dict[int, Dict[str, Any]] = {}
    for name, a in arrays.items():
        if name.startswith("optim."):
            _, index, key = name.split(".", 2)
            optim_state.setdefault(int(index), {})[key] = torch.from_numpy(a.astype(np.float32))
    for name, value in meta["optimizer"]["plain"].items():
        _, index, key = name.split(".", 2)
        optim_state.setdefault(int(index), {})[key] = value
    optimizer.load_state_dict({"state": optim_state, "param_groups": meta["optimizer"]["param_groups"]})

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    state = TrainState(online, target, optimizer, int(meta["step"]), rng, int(meta.get("updates", 0)))
    return state, config, meta["extra"], arrays


class CheckpointStore:
    """Numbered checkpoints in a run directory"""

    def __init__(self, checkpoint_dir: str = "checkpoints", logger: Optional[Any] = None):
        self.checkpoint_dir = Path(checkpoint_dir)
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        self.logger = logger

    def path_for(self, step: int) -> Path:
        return self.checkpoint_dir / f"checkpoint_{step:010d}.csts"

    def save(self, state: TrainState, config: AgentConfig, grid_size: int, name: Optional[str] = None,
             metadata: Optional[Dict[str, Any]] = None,
             extra_arrays: Optional[Dict[str, Dict[str, torch.Tensor]]] = None) -> str:
        path = self.checkpoint_dir / name if name else self.path_for(state.step)
        written = write_checkpoint(path, state, config, grid_size, metadata, extra_arrays)
        if self.logger:
            self.logger.info(f"Saved checkpoint at step {state.step} to {written}")
        return written

    def latest(self) -> Optional[Path]:
        found = sorted(self.checkpoint_dir.glob("checkpoint_*.csts"))
        return found[-1] if found else None

    def list_checkpoints(self) -> List[Dict[str, Any]]:
        return [{'path': str(p), 'size': p.stat().st_size}
                for p in sorted(self.checkpoint_dir.glob("*.csts"))]
