import os
import json
import hashlib
import logging
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, Optional

from config.settings import TOOL_VERSION
from utils.errors import FormatError, InputError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def ensure_dir(folder: str) -> str:
    os.makedirs(folder, exist_ok=True)
    return folder


def payload_path(header_path: str) -> str:
    """Raw payload paired with a JSON header: 'dwi.json' -> 'dwi.raw'."""
    return os.path.splitext(header_path)[0] + ".raw"


def write_json(path: str, payload: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")


def read_json_header(path: str, expected_format: str, supported_versions: Optional[Iterable[int]] = None) -> Dict[str, Any]:
    """
    Load a JSON header and check its `format` and `version` fields.
    Missing files are input errors; malformed headers are format errors.
    """
    if not os.path.exists(path):
        raise InputError(f"File '{path}' does not exist")
    try:
        with open(path, "r", encoding="utf-8") as f:
            header = json.load(f)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: header is not valid JSON ({e})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")
    if header.get("format") != expected_format:
        raise FormatError(f"{path}: field 'format' is {header.get('format')!r}, expected {expected_format!r}")
    if supported_versions is None:
        return header
    supported = list(supported_versions)
    if header.get("version") not in supported:
        raise FormatError(f"{path}: field 'version' is {header.get('version')!r}, supported {supported}")
    return header


def require(header: Dict[str, Any], key: str, path: str) -> Any:
    if key not in header:
        raise FormatError(f"{path}: missing field '{key}'")
    return header[key]


def read_payload(path: str, expected_bytes: int) -> bytes:
    if not os.path.exists(path):
        raise FormatError(f"{path}: payload file missing")
    with open(path, "rb") as f:
        data = f.read()
    if len(data) != expected_bytes:
        raise FormatError(f"{path}: payload has {len(data)} bytes, expected {expected_bytes}")
    return data


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def input_hashes(paths: Iterable[Optional[str]]) -> Dict[str, str]:
    """sha256 of each input file; a JSON header also hashes its paired payload."""
    hashes = {}
    for path in paths:
        if path is None or not os.path.isfile(path):
            continue
        hashes[path] = sha256_file(path)
        raw = payload_path(path)
        if path.endswith(".json") and os.path.isfile(raw):
            hashes[raw] = sha256_file(raw)
    return hashes


def write_manifest(output_folder: str, command: str, config: Dict[str, Any], inputs: Iterable[Optional[str]],
                   wall_time: float, extra: Optional[Dict[str, Any]] = None) -> str:
    manifest = {
        "command": command,
        "tool_version": TOOL_VERSION,
        "created": datetime.now(timezone.utc).isoformat(),
        "wall_time_s": round(wall_time, 3),
        "config": config,
        "inputs": input_hashes(inputs),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(ensure_dir(output_folder), MANIFEST_NAME)
    write_json(path, manifest)
    logger.info(f"Wrote manifest to {path}")
    return path
