"""
Offline artifact persistence: one .npz archive per record with a JSON header.

A record is valid when its format version and config fingerprint match the
caller's; anything else (stale, corrupt, missing) is a miss.
"""
import hashlib
import json
import logging
import os
import zipfile
from datetime import datetime, timezone
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from .exceptions import MissingArtifactError

logger = logging.getLogger(__name__)

ARTIFACT_DIR = os.getenv("STOMSFEM_ARTIFACT_DIR", "artifacts")
ARTIFACT_FORMAT_VERSION = 1
_HEADER = "__header__"


def fingerprint(payload: Mapping[str, Any]) -> str:
    """sha256 of the canonical JSON form of the offline-relevant settings."""
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _get_artifact_path(key: str, directory: Optional[str] = None) -> str:
    directory = directory or ARTIFACT_DIR
    if not os.path.exists(directory):
        os.makedirs(directory, exist_ok=True)
    return os.path.join(directory, f"{key}.npz")


def _read_header(archive) -> Dict[str, Any]:
    return json.loads(str(archive[_HEADER][()]))


def is_artifact_valid(key: str, expected_fingerprint: str, directory: Optional[str] = None) -> bool:
    filepath = _get_artifact_path(key, directory)
    if not os.path.exists(filepath):
        return False
    try:
        with np.load(filepath, allow_pickle=False) as archive:
            header = _read_header(archive)
        return (header.get("version") == ARTIFACT_FORMAT_VERSION
                and header.get("fingerprint") == expected_fingerprint)
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile):
        return False


def load_artifact(key: str, expected_fingerprint: str,
                  directory: Optional[str] = None) -> Optional[Tuple[Dict[str, np.ndarray], Dict[str, Any]]]:
    """(arrays, metadata) or None on a miss."""
    if not is_artifact_valid(key, expected_fingerprint, directory):
        return None
    filepath = _get_artifact_path(key, directory)
    try:
        with np.load(filepath, allow_pickle=False) as archive:
            header = _read_header(archive)
            arrays = {name: archive[name] for name in archive.files if name != _HEADER}
    except (OSError, ValueError, KeyError, EOFError, zipfile.BadZipFile):
        return None
    return arrays, header.get("metadata", {})


def require_artifact(key: str, expected_fingerprint: str, directory: Optional[str] = None):
    loaded = load_artifact(key, expected_fingerprint, directory)
    if loaded is None:
        raise MissingArtifactError(
            f"offline artifact '{key}' is missing or stale in {directory or ARTIFACT_DIR}; run the offline stage first"
        )
    return loaded


def save_artifact(key: str, arrays: Mapping[str, np.ndarray], expected_fingerprint: str,
                  metadata: Optional[Mapping[str, Any]] = None, directory: Optional[str] = None) -> str:
    filepath = _get_artifact_path(key, directory)
    header = {
        "version": ARTIFACT_FORMAT_VERSION,
        "fingerprint": expected_fingerprint,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "metadata": dict(metadata or {}),
    }
    tmp = filepath + ".tmp.npz"
    np.savez(tmp, **{_HEADER: np.array(json.dumps(header, default=str))}, **dict(arrays))
    os.replace(tmp, filepath)
    logger.debug("saved artifact %s", filepath)
    return filepath
