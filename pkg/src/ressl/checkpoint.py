"""Checkpoint container: digest-checked, versioned, written atomically."""

import hashlib
import io
import logging
import os
import random
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .errors import CheckpointError, CheckpointIntegrityError, CheckpointVersionError, ConfigMismatchError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
MAGIC = b"RESSL-CKPT\n"
DIGEST_LEN = 64


def capture_rng_state() -> Dict:
    state = {
        "python": random.getstate(),
        "numpy": np.random.get_state(),
        "torch": torch.get_rng_state(),
    }
    if torch.cuda.is_available():
        state["cuda"] = torch.cuda.get_rng_state_all()
    return state


def restore_rng_state(state: Dict):
    random.setstate(state["python"])
    np.random.set_state(state["numpy"])
    torch.set_rng_state(state["torch"])
    if "cuda" in state and torch.cuda.is_available():
        torch.cuda.set_rng_state_all(state["cuda"])


def save_checkpoint(state: Dict, path) -> Path:
    """Serialize ``state`` with a sha256 header; the file appears only once fully written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload_buffer = io.BytesIO()
    torch.save({"schema_version": CHECKPOINT_VERSION, **state}, payload_buffer)
    payload = payload_buffer.getvalue()
    digest = hashlib.sha256(payload).hexdigest().encode()

    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(digest)
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    tmp.replace(path)
    logger.info(f"Saved checkpoint {path} (step {state.get('step')})")
    return path


def load_checkpoint(path, expected_hash: Optional[str] = None, force: bool = False) -> Dict:
    """Read and verify a checkpoint. A differing config hash is refused unless ``force``."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    blob = path.read_bytes()
    header = len(MAGIC) + DIGEST_LEN
    if len(blob) < header or not blob.startswith(MAGIC):
        raise CheckpointIntegrityError(f"{path} is not a ressl checkpoint or is truncated")
    digest = blob[len(MAGIC):header].decode(errors="replace")
    payload = blob[header:]
    if hashlib.sha256(payload).hexdigest() != digest:
        raise CheckpointIntegrityError(f"{path} failed its integrity check (truncated or corrupted)")

    state = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=False)
    version = state.get("schema_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path} has checkpoint schema {version}, this build reads {CHECKPOINT_VERSION}; "
            f"migrate it explicitly before loading"
        )
    if expected_hash is not None and state.get("config_hash") != expected_hash:
        if not force:
            raise ConfigMismatchError(
                f"{path} was written by config {state.get('config_hash')}, current config is {expected_hash}; "
                f"pass --force to load it anyway"
            )
        logger.warning(f"Loading {path} despite config hash mismatch ({state.get('config_hash')} != {expected_hash})")
    return state
