"""
Stage artifacts: line-delimited UTF-8 record files with a one-line schema header,
stage stamps and config hashes.
"""

import hashlib
import json
from pathlib import Path

from errors import ArtifactVersionError, ConfigHashMismatchError, MissingArtifactError

SCHEMA_VERSION = 1


def config_hash(section):
    """Stable short hash of a JSON-serialisable config section"""
    payload = json.dumps(section, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def records_digest(records):
    """Content hash of a record sequence, independent of where it was read from"""
    digest = hashlib.sha256()
    for record in records:
        digest.update(json.dumps(record, sort_keys=True, ensure_ascii=False).encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()[:16]


def file_digest(path):
    """Content hash of a referenced input file; the path itself when it cannot be read"""
    if not path:
        return None
    try:
        with open(path, "rb") as stream:
            return hashlib.sha256(stream.read()).hexdigest()[:16]
    except OSError:
        return str(path)


def _check_header(header, schema, path, expected_hash):
    if header.get("schema") != schema:
        raise ArtifactVersionError(
            f"{path} holds schema '{header.get('schema')}', expected '{schema}'"
        )
    if header.get("version") != SCHEMA_VERSION:
        raise ArtifactVersionError(
            f"{path} was written with schema version {header.get('version')}, "
            f"this build reads version {SCHEMA_VERSION}; re-run the producing stage"
        )
    if expected_hash is not None and header.get("config_hash") != expected_hash:
        raise ConfigHashMismatchError(
            f"{path} was produced with config hash {header.get('config_hash')}, "
            f"current config hashes to {expected_hash}; re-run the producing stage"
        )


def write_records(path, schema, records, config_hash="", meta=None):
    header = {"schema": schema, "version": SCHEMA_VERSION, "config_hash": config_hash}
    if meta:
        header["meta"] = meta
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        out.write(json.dumps(header, sort_keys=True, ensure_ascii=False) + "\n")
        count = 0
        for record in records:
            out.write(json.dumps(record, ensure_ascii=False) + "\n")
            count += 1
    return count


def read_records(path, schema, expected_hash=None, stage=None):
    """Return (header, records); raises if the file is missing or incompatible"""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(stage or schema, path)
    with open(path, "r", encoding="utf-8") as stream:
        first = stream.readline()
        if not first.strip():
            raise ArtifactVersionError(f"{path} has no schema header")
        header = json.loads(first)
        _check_header(header, schema, path, expected_hash)
        records = [json.loads(line) for line in stream if line.strip()]
    return header, records


def stamp_path(workspace, stage):
    return Path(workspace) / f"{stage}.stamp.json"


def write_stamp(workspace, stage, config_hash, outputs, extra=None):
    stamp = dict(extra or {})
    stamp.update({
        "schema": f"stamp/{stage}",
        "version": SCHEMA_VERSION,
        "config_hash": config_hash,
        "outputs": sorted(str(o) for o in outputs),
    })
    path = stamp_path(workspace, stage)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as out:
        json.dump(stamp, out, sort_keys=True, indent=2)
        out.write("\n")
    return path


def require_stamp(workspace, stage, expected_hash=None):
    """Check that an upstream stage ran with a compatible config"""
    path = stamp_path(workspace, stage)
    if not path.exists():
        raise MissingArtifactError(stage, path)
    with open(path, "r", encoding="utf-8") as stream:
        stamp = json.load(stream)
    _check_header(stamp, f"stamp/{stage}", path, expected_hash)
    return stamp
