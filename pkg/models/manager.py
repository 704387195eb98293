import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import torch

from control.errors import CheckpointError

log = logging.getLogger("ckpt")

FORMAT_VERSION = 1


@dataclass
class LoadedCheckpoint:
    kind: str
    architecture: dict
    state_dict: dict
    skeleton_hash: str
    optimizer: Optional[dict] = None
    scheduler: Optional[dict] = None
    rng_state: Optional[torch.Tensor] = None
    extra: dict = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)


class CheckpointManager:
    """
    Saves and validates model checkpoints.
    Each checkpoint is a pair:
      - <name>.pt    torch payload (architecture, parameters, optimizer/scheduler/RNG state)
      - <name>.json  manifest (format version, kind, skeleton hash, SHA-256 of the payload)
    Loading checks, in order:
      1. manifest present and format_version supported
      2. payload checksum matches the manifest
      3. kind and skeleton hash match what the caller expects
      4. state_dict keys and shapes match the rebuilt architecture (done by the caller's load_state_dict)
    """

    # ---------- Filesystem utilities ----------

    @staticmethod
    def _sha256(path: str) -> str:
        h = hashlib.sha256()
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(8192), b""):
                h.update(chunk)
        return h.hexdigest()

    @staticmethod
    def manifest_path(path: str) -> str:
        return os.path.splitext(path)[0] + ".json"

    # ---------- Public methods ----------

    def save(self, path: str, kind: str, architecture: dict, model: torch.nn.Module,
             skeleton_hash: str, optimizer=None, scheduler=None, extra: Optional[dict] = None) -> dict:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        payload = {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "architecture": architecture,
            "state_dict": model.state_dict(),
            "optimizer": optimizer.state_dict() if optimizer is not None else None,
            "scheduler": scheduler.state_dict() if scheduler is not None else None,
            "rng_state": torch.get_rng_state(),
        }
        # atomic replace
        tmp = path + ".tmp"
        torch.save(payload, tmp)
        os.replace(tmp, path)

        manifest = {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "skeleton_hash": skeleton_hash,
            "architecture": architecture,
            "payload": os.path.basename(path),
            "payload_sha256": self._sha256(path),
            "extra": extra or {},
        }
        with open(self.manifest_path(path), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        log.debug(f"saved {kind} checkpoint {path}")
        return manifest

    def read_manifest(self, path: str) -> dict:
        man_path = self.manifest_path(path)
        try:
            with open(man_path, "r", encoding="utf-8") as f:
                manifest = json.load(f)
        except FileNotFoundError:
            raise CheckpointError(f"checkpoint manifest not found: {man_path}")
        except json.JSONDecodeError as e:
            raise CheckpointError(f"corrupt checkpoint manifest {man_path}: {e}")
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{man_path}: format_version {manifest.get('format_version')} not supported (expected {FORMAT_VERSION})")
        return manifest

    def load(self, path: str, kind: Optional[str] = None,
             skeleton_hash: Optional[str] = None) -> LoadedCheckpoint:
        manifest = self.read_manifest(path)
        if not os.path.exists(path):
            raise CheckpointError(f"checkpoint payload not found: {path}")

        actual = self._sha256(path)
        if actual != manifest.get("payload_sha256"):
            raise CheckpointError(
                f"checkpoint SHA mismatch for {path}: got {actual}, expected {manifest.get('payload_sha256')}")
        if kind is not None and manifest["kind"] != kind:
            raise CheckpointError(f"{path} holds a '{manifest['kind']}' checkpoint, expected '{kind}'")
        if skeleton_hash is not None and manifest["skeleton_hash"] != skeleton_hash:
            raise CheckpointError(
                f"skeleton mismatch: checkpoint {path} was trained on {manifest['skeleton_hash'][:12]}, "
                f"got {skeleton_hash[:12]}")

        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as e:
            raise CheckpointError(f"cannot read checkpoint payload {path}: {e}")

        return LoadedCheckpoint(
            kind=payload["kind"], architecture=payload["architecture"],
            state_dict=payload["state_dict"], skeleton_hash=manifest["skeleton_hash"],
            optimizer=payload.get("optimizer"), scheduler=payload.get("scheduler"),
            rng_state=payload.get("rng_state"), extra=manifest.get("extra", {}), manifest=manifest)


def load_into(model: torch.nn.Module, ckpt: LoadedCheckpoint, path: str = "?"):
    """load_state_dict with shape errors reported as CheckpointError."""
    try:
        model.load_state_dict(ckpt.state_dict, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint {path} does not fit the model: {e}")
    return model
