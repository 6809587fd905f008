"""Artifact persistence.

Checkpoints are a JSON manifest plus one little-endian float32 blob::

    base.ckpt             {"format_version": 1, "kind": ..., "tensors": {key: {dtype, shape, byte_offset}}, ...}
    base.ckpt.<hash>.bin  concatenated float32 arrays

Every write goes to a temporary file in the target directory and is moved
into place with ``os.replace``, so readers never see a partial artifact. The
blob name carries a content hash and the manifest is replaced last, so a
manifest always names the blob it was written with.
"""

import csv
import hashlib
import io
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from packaging import version

from demem import __version__
from demem.errors import FormatVersionError
from demem.models.flownet import Parameters
from demem.models.maskengine import MaskSet
from demem.models.spec import ModelSpec

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BLOB_DTYPE = "<f4"
CSV_HEADER = f"# format_version={FORMAT_VERSION}"
BLOB_HASH_SIZE = 16


@dataclass
class Checkpoint:
    """Decoded checkpoint.

    Attributes:
        kind: What the tensors describe ("parameters", "masks", "corpus")
        tensors: key -> float64 tensor
        spec: Model spec dictionary, if any
        meta: Free-form metadata written with the checkpoint
        config_digest: Digest of the config that produced the artifact
    """

    kind: str
    tensors: dict[str, torch.Tensor]
    spec: dict | None = None
    meta: dict = field(default_factory=dict)
    config_digest: str | None = None


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write bytes to a temporary sibling, then move it over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def _check_version(data: dict, path: Path) -> None:
    """Reject unknown format versions; warn about artifacts from newer builds."""
    found = data.get("format_version")
    if found != FORMAT_VERSION:
        raise FormatVersionError(
            f"{path} has format_version {found!r}; this build reads version {FORMAT_VERSION}"
        )
    writer = data.get("demem_version")
    if writer:
        try:
            if version.parse(writer) > version.parse(__version__):
                logger.warning(f"{path} was written by demem {writer}, newer than {__version__}")
        except version.InvalidVersion:
            logger.debug(f"Unparseable writer version {writer!r} in {path}")


def write_json(path: Path, data: dict) -> None:
    """Write a JSON artifact; ``format_version`` is always the first key."""
    payload = {"format_version": FORMAT_VERSION, "demem_version": __version__}
    payload.update({k: v for k, v in data.items() if k not in payload})
    atomic_write_bytes(Path(path), (json.dumps(payload, indent=2) + "\n").encode("utf-8"))


def read_json(path: Path) -> dict:
    """Read a JSON artifact and validate its format version."""
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path} must contain a JSON object")
    _check_version(data, path)
    return data


def write_csv(path: Path, rows: list[dict], fieldnames: list[str]) -> None:
    """Write rows as CSV behind a ``# format_version`` comment line."""
    buffer = io.StringIO()
    buffer.write(CSV_HEADER + "\n")
    writer = csv.DictWriter(buffer, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: row[key] for key in fieldnames})
    atomic_write_bytes(Path(path), buffer.getvalue().encode("utf-8"))


def read_csv(path: Path) -> list[dict]:
    """Read a CSV artifact written by :func:`write_csv` (values stay strings)."""
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as f:
        first = f.readline().strip()
        if first != CSV_HEADER:
            raise FormatVersionError(f"{path} does not start with {CSV_HEADER!r}")
        return list(csv.DictReader(f))


def blob_path(path: Path) -> Path | None:
    """Blob named by the manifest at ``path``, or None if there is no readable manifest."""
    path = Path(path)
    try:
        name = read_json(path).get("blob")
    except (OSError, ValueError):
        return None
    return path.parent / name if name else None


def write_checkpoint(
    path: Path,
    kind: str,
    tensors: dict[str, torch.Tensor],
    spec: ModelSpec | None = None,
    meta: dict | None = None,
    config_digest: str | None = None,
) -> None:
    """Write tensors as manifest + float32 blob.

    Args:
        path: Manifest path; the blob goes next to it as
            ``<name>.<content hash>.bin``
        kind: Artifact kind tag
        tensors: key -> tensor, stored in insertion order
        spec: Model spec recorded in the manifest
        meta: Extra metadata
        config_digest: Digest of the producing config
    """
    path = Path(path)
    chunks = []
    entries = {}
    offset = 0
    for key, tensor in tensors.items():
        array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=BLOB_DTYPE)
        chunk = array.tobytes()
        entries[key] = {"dtype": "f32", "shape": list(array.shape), "byte_offset": offset}
        chunks.append(chunk)
        offset += len(chunk)

    payload = b"".join(chunks)
    tag = hashlib.sha256(payload).hexdigest()[:BLOB_HASH_SIZE]
    blob = path.with_name(f"{path.name}.{tag}.bin")
    previous = blob_path(path)
    atomic_write_bytes(blob, payload)
    try:
        write_json(
            path,
            {
                "kind": kind,
                "config_digest": config_digest,
                "spec": spec.to_dict() if spec is not None else None,
                "meta": meta or {},
                "blob": blob.name,
                "tensors": entries,
            },
        )
    except BaseException:
        if blob != previous:
            blob.unlink(missing_ok=True)
        raise
    if previous is not None and previous != blob:
        previous.unlink(missing_ok=True)
    logger.debug(f"Wrote {kind} checkpoint {path} ({offset} bytes)")


def read_checkpoint(path: Path, kind: str | None = None) -> Checkpoint:
    """Read a checkpoint written by :func:`write_checkpoint`.

    Args:
        path: Manifest path
        kind: Expected kind tag, checked when given

    Returns:
        Decoded Checkpoint with float64 tensors
    """
    path = Path(path)
    manifest = read_json(path)
    missing = [name for name in ("kind", "blob", "tensors") if name not in manifest]
    if missing:
        raise ValueError(f"{path} is not a checkpoint manifest, missing {missing}")
    if kind is not None and manifest.get("kind") != kind:
        raise ValueError(f"{path} holds a {manifest.get('kind')!r} artifact, expected {kind!r}")

    raw = (path.parent / manifest["blob"]).read_bytes()
    tensors = {}
    for key, entry in manifest["tensors"].items():
        if entry["dtype"] != "f32":
            raise ValueError(f"Unsupported dtype {entry['dtype']!r} for {key} in {path}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        array = np.frombuffer(raw, dtype=BLOB_DTYPE, count=count, offset=entry["byte_offset"])
        tensors[key] = torch.from_numpy(array.reshape(shape).astype(np.float64))
    return Checkpoint(
        kind=manifest["kind"],
        tensors=tensors,
        spec=manifest.get("spec"),
        meta=manifest.get("meta", {}),
        config_digest=manifest.get("config_digest"),
    )


def stored_digest(path: Path) -> str | None:
    """Config digest recorded in an artifact, or None if missing/unreadable."""
    try:
        return read_json(Path(path)).get("config_digest")
    except (OSError, ValueError):
        return None


def save_parameters(
    path: Path, params: Parameters, config_digest: str | None = None, meta: dict | None = None
) -> None:
    write_checkpoint(path, "parameters", params.tensors, params.spec, meta, config_digest)


def load_parameters(path: Path) -> Parameters:
    ckpt = read_checkpoint(path, kind="parameters")
    return Parameters(ModelSpec.from_dict(ckpt.spec or {}), ckpt.tensors)


def save_maskset(
    path: Path, maskset: MaskSet, config_digest: str | None = None, meta: dict | None = None
) -> None:
    """Write mask logits under kind-tagged keys (``mask/ffn`` ...)."""
    meta = dict(meta or {})
    meta.update(
        {"gamma": maskset.gamma, "delta": maskset.delta, "kinds": list(maskset.enabled_kinds)}
    )
    tensors = {f"mask/{kind}": logits for kind, logits in maskset.logits.items()}
    write_checkpoint(path, "masks", tensors, maskset.spec, meta, config_digest)


def load_maskset(path: Path) -> MaskSet:
    ckpt = read_checkpoint(path, kind="masks")
    missing = [name for name in ("gamma", "delta") if name not in ckpt.meta]
    if missing:
        raise ValueError(f"{path} lacks mask relaxation constants {missing}")
    logits = {key.split("/", 1)[1]: tensor for key, tensor in ckpt.tensors.items()}
    return MaskSet(
        spec=ModelSpec.from_dict(ckpt.spec or {}),
        logits=logits,
        gamma=float(ckpt.meta["gamma"]),
        delta=float(ckpt.meta["delta"]),
    )


class SnapshotRotation:
    """Periodic mask snapshots, keeping only the most recent ones.

    Snapshots are named ``<prefix>-step<NNNNNN>.ckpt`` inside ``directory``.
    """

    def __init__(self, directory: Path, prefix: str = "masks", max_snapshots: int = 5):
        """Initialize rotation.

        Args:
            directory: Where snapshots are written
            prefix: File name prefix
            max_snapshots: Number of snapshots to keep (default 5)
        """
        self.directory = Path(directory)
        self.prefix = prefix
        self.max_snapshots = max_snapshots

    def snapshots(self) -> list[Path]:
        return sorted(self.directory.glob(f"{self.prefix}-step*.ckpt"))

    def snapshot(self, maskset: MaskSet, step: int) -> Path | None:
        """Write a snapshot and prune older ones.

        Returns:
            Path to the snapshot, or None if writing failed
        """
        target = self.directory / f"{self.prefix}-step{step:06d}.ckpt"
        try:
            save_maskset(target, maskset, meta={"step": step})
            existing = self.snapshots()
            if len(existing) > self.max_snapshots:
                for old in existing[: -self.max_snapshots]:
                    blob = blob_path(old)
                    old.unlink()
                    if blob is not None:
                        blob.unlink(missing_ok=True)
            return target
        except OSError as e:
            logger.warning(f"Could not write mask snapshot {target}: {e}")
            return None
