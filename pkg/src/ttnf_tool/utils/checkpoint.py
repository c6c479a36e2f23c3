"""Binary TensorTrain container with a JSON sidecar, and QTT grid checkpoints.

Container layout (little-endian)::

    b"TTNF"  u32 version  u32 D  u32 payload
    D x u32 modes  (D+1) x u32 ranks  D x u8 identity mask
    cores, each row-major float64

The sidecar ``<name>.json`` mirrors shape and rank metadata. Grid checkpoints
add a ``grid`` section (levels, channels, r_max, bounding box).
"""

import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from ttnf_tool.core.qtt import QttGrid, QttGridConfig
from ttnf_tool.core.tt import TensorTrain, TtRank, TtShape
from ttnf_tool.errors import ArtifactIOError, TtnfError

log = logging.getLogger(__name__)

MAGIC = b"TTNF"
FORMAT_VERSION = 1
_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix(".json")


def _metadata(tt: TensorTrain) -> dict:
    return {
        "format": "ttnf",
        "version": FORMAT_VERSION,
        "modes": list(tt.shape.modes),
        "payload": tt.shape.payload,
        "ranks": list(tt.rank.ranks),
        "identity_mask": list(tt.identity_mask),
        "dtype": tt.dtype.name,
        "params": int(sum(tt.cores[k].size for k in tt.trainable)),
    }


def encode_tt(tt: TensorTrain) -> bytes:
    D = tt.ndim
    header = np.array([FORMAT_VERSION, D, tt.shape.payload, *tt.shape.modes, *tt.rank.ranks], dtype=_U32)
    mask = np.array(tt.identity_mask, dtype=np.uint8)
    body = b"".join(np.ascontiguousarray(c, dtype=_F64).tobytes() for c in tt.cores)
    return MAGIC + header.tobytes() + mask.tobytes() + body


def decode_tt(blob: bytes, dtype=np.float64) -> TensorTrain:
    if blob[:4] != MAGIC:
        raise ArtifactIOError("not a TT container (bad magic)")
    offset = 4
    try:
        version, D, payload = np.frombuffer(blob, dtype=_U32, count=3, offset=offset)
        offset += 12
        if version != FORMAT_VERSION:
            raise ArtifactIOError(f"unsupported container version {version}")
        D = int(D)
        modes = np.frombuffer(blob, dtype=_U32, count=D, offset=offset)
        offset += 4 * D
        ranks = np.frombuffer(blob, dtype=_U32, count=D + 1, offset=offset)
        offset += 4 * (D + 1)
        mask = np.frombuffer(blob, dtype=np.uint8, count=D, offset=offset)
        offset += D
        cores = []
        for k in range(D):
            extents = (int(ranks[k]), int(modes[k]), int(ranks[k + 1]))
            n = extents[0] * extents[1] * extents[2]
            core = np.frombuffer(blob, dtype=_F64, count=n, offset=offset).reshape(extents)
            cores.append(core.astype(dtype))
            offset += 8 * n
    except ValueError as exc:
        raise ArtifactIOError(f"truncated TT container: {exc}") from exc
    if offset != len(blob):
        raise ArtifactIOError(f"TT container has {len(blob) - offset} trailing bytes")
    try:
        return TensorTrain(TtShape(tuple(modes), int(payload)), TtRank(tuple(ranks)), cores, tuple(bool(b) for b in mask))
    except TtnfError as exc:
        raise ArtifactIOError(f"inconsistent TT container: {exc}") from exc


def save_tt(path: Path, tt: TensorTrain, extra: Optional[dict] = None) -> Path:
    """Write the container and its sidecar; returns the container path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        path.write_bytes(encode_tt(tt))
        meta = _metadata(tt)
        if extra:
            meta.update(extra)
        sidecar_path(path).write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    log.debug("saved TT %s modes=%s ranks=%s", path, tt.shape.modes, tt.rank.ranks)
    return path


def read_sidecar(path: Path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        return {}
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise ArtifactIOError(f"corrupt sidecar {side}: {exc}") from exc


def load_tt(path: Path) -> TensorTrain:
    """Read a container; cores come back in the dtype recorded in the sidecar (float64 by default)."""
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f"checkpoint not found: {path}")
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    dtype = np.dtype(read_sidecar(path).get("dtype", "float64"))
    return decode_tt(blob, dtype)


def save_grid(path: Path, grid: QttGrid) -> Path:
    cfg = grid.config
    header = {
        "grid": {
            "levels": cfg.levels,
            "channels": cfg.payload,
            "r_max": cfg.r_max,
            "box_min": list(cfg.box_min),
            "box_max": list(cfg.box_max),
        }
    }
    return save_tt(path, grid.tt, header)


def load_grid(path: Path) -> QttGrid:
    tt = load_tt(path)
    meta = read_sidecar(path).get("grid")
    if meta is None:
        raise ArtifactIOError(f"{path} is a plain TT checkpoint, not a grid")
    try:
        cfg = QttGridConfig(
            int(meta["levels"]),
            int(meta["channels"]),
            int(meta["r_max"]),
            tuple(meta["box_min"]),
            tuple(meta["box_max"]),
        )
        return QttGrid(cfg, tt)
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactIOError(f"invalid grid header in {sidecar_path(path)}: {exc}") from exc
