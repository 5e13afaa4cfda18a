"""Checkpoint container and heatmap export.

Checkpoint layout::

    CRFTCKPT <version> <header-length, 10 digits>\\n
    <JSON header, header-length bytes>
    <raw little-endian float64 payload>

The header is indented, key-sorted JSON: kind, config, meta and a tensor
directory of ``{name, shape, offset, nbytes}`` with offsets relative to the
start of the payload.  Writing the same object twice yields the same bytes.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from .autodiff import DTYPE
from .info_flow import CrftConfig, InfoGrid
from .intervention import InterventionParams, ParamSet
from .model import MicroTransformer, ModelConfig

MAGIC = b"CRFTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(kind: str, config: dict, meta: dict, tensors: list[tuple[str, torch.Tensor]]) -> bytes:
    directory, chunks, offset = [], [], 0
    for name, t in tensors:
        raw = t.detach().to(DTYPE).contiguous().numpy().astype("<f8").tobytes()
        directory.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"format": "crft-checkpoint", "version": VERSION, "kind": kind, "config": config,
         "meta": meta, "tensors": directory},
        indent=1, sort_keys=True,
    ).encode() + b"\n"
    first = MAGIC + b" %d %010d\n" % (VERSION, len(header))
    return first + header + b"".join(chunks)


def _unpack(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    nl = data.find(b"\n")
    if nl < 0 or not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        _, version, hlen = data[:nl].split(b" ")
        version, hlen = int(version), int(hlen)
    except ValueError:
        raise CheckpointError("corrupt checkpoint preamble") from None
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    start = nl + 1
    if len(data) < start + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(data[start:start + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"header version {header.get('version')} unsupported")
    payload = data[start + hlen:]
    tensors = {}
    for entry in header.get("tensors", []):
        shape, off, nbytes = entry["shape"], entry["offset"], entry["nbytes"]
        if nbytes != 8 * math.prod(shape):
            raise CheckpointError(f"tensor {entry['name']}: shape {shape} does not match {nbytes} bytes")
        if off + nbytes > len(payload):
            raise CheckpointError(f"truncated payload for tensor {entry['name']}")
        arr = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=off).astype(np.float64)
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(shape).copy())
    if sum(e["nbytes"] for e in header.get("tensors", [])) != len(payload):
        raise CheckpointError("payload size does not match the tensor directory")
    return header, tensors


def model_bytes(model: MicroTransformer) -> bytes:
    return _pack("model", model.cfg.to_dict(), {"step": model.step, "seed": model.seed},
                 sorted(model.state_dict().items()))


def params_bytes(params: InterventionParams, crft_cfg: CrftConfig | None = None) -> bytes:
    config = {"d": params.d, "rank": params.rank, "train_R": params.train_R,
              "crft": crft_cfg.to_dict() if crft_cfg is not None else None}
    return _pack("intervention", config, {}, list(params.named_tensors()))


def save_checkpoint(path: str | Path, obj: MicroTransformer | InterventionParams,
                    crft_cfg: CrftConfig | None = None) -> None:
    if isinstance(obj, MicroTransformer):
        atomic_write(path, model_bytes(obj))
    elif isinstance(obj, InterventionParams):
        atomic_write(path, params_bytes(obj, crft_cfg))
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def loads_checkpoint(data: bytes):
    header, tensors = _unpack(data)
    kind = header.get("kind")
    if kind == "model":
        try:
            cfg = ModelConfig(**header["config"])
        except TypeError as exc:
            raise CheckpointError(f"bad model config: {exc}") from None
        model = MicroTransformer(cfg, seed=header["meta"].get("seed", 0))
        model.step = header["meta"].get("step", 0)
        expected = model.state_dict()
        if set(expected) != set(tensors):
            raise CheckpointError("tensor directory does not match the model layout")
        for name, t in tensors.items():
            if tuple(t.shape) != tuple(expected[name].shape):
                raise CheckpointError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(expected[name].shape)}")
        model.load_state_dict(tensors)
        return model
    if kind == "intervention":
        cfg = header["config"]
        sets: dict[tuple[int, int], dict] = {}
        for name, t in tensors.items():
            lpart, gpart, tname = name.split(".")
            key = (int(lpart[len("layer"):]), int(gpart[len("group"):]))
            sets.setdefault(key, {})[tname] = t
        built = {}
        for key, parts in sets.items():
            if set(parts) != {"R", "W", "b"}:
                raise CheckpointError(f"incomplete parameter set for layer/group {key}")
            r, d = cfg["rank"], cfg["d"]
            if parts["R"].shape != (r, d) or parts["W"].shape != (r, d) or parts["b"].shape != (r,):
                raise CheckpointError(f"shape mismatch in parameter set {key}")
            built[key] = ParamSet(R=parts["R"], W=parts["W"], b=parts["b"])
        params = InterventionParams(cfg["d"], cfg["rank"], built, train_R=cfg["train_R"])
        params.crft_config = CrftConfig(**cfg["crft"]) if cfg.get("crft") else None
        return params
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def load_checkpoint(path: str | Path):
    return loads_checkpoint(Path(path).read_bytes())


# --- heatmaps ----------------------------------------------------------------

def grid_csv(values: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.asarray(values))


def parse_csv(text: str) -> np.ndarray:
    return np.array([[float(x) for x in line.split(",")] for line in text.splitlines() if line])


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def grid_pgm(values: np.ndarray, maxval: int = 255) -> str:
    """Plain (P2) graymap; each cell is ``round(maxval * v / max(v))``."""
    vals = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(vals)):
        raise ValueError("grid contains non-finite values")
    h, w = vals.shape
    top = float(vals.max()) if vals.size else 0.0
    lines = [f"P2\n{w} {h}\n{maxval}\n"]
    for row in vals:
        px = [min(max(_round_half_away(maxval * float(v) / top), 0), maxval) if top > 0 else 0 for v in row]
        lines.append(" ".join(str(p) for p in px) + "\n")
    return "".join(lines)


def export_heatmap(grid: InfoGrid | np.ndarray, path: str | Path, fmt: str = "csv") -> Path:
    values = grid.values if isinstance(grid, InfoGrid) else np.asarray(grid)
    if fmt == "csv":
        text = grid_csv(values)
    elif fmt == "pgm":
        text = grid_pgm(values)
    else:
        raise ValueError(f"unknown heatmap format {fmt!r}")
    path = Path(path)
    try:
        atomic_write(path, text.encode("ascii"))
    except OSError as exc:
        raise OSError(f"cannot write heatmap to {path}: {exc}") from exc
    return path
