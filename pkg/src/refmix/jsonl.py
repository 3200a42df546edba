"""JSON-Lines manifests with resumable, byte-stable writing.

Every manifest starts with a header record carrying schema_version; data
records follow one per line. Records are serialized canonically (sorted
keys, compact separators) so a rerun with the same seed produces the
same bytes. A sidecar state file tracks completed ids and the config
hash, and the reader tolerates a trailing partial line so an interrupted
job can resume cleanly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ConfigError, ManifestError

SCHEMA_VERSION = 1


def canonical_json(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def read_records(path: str | Path, *, allow_partial_tail: bool = False):
    """Returns (header, records). Raises ManifestError on unreadable files."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"cannot read manifest {p}: {e}") from e
    lines = text.split("\n")
    header = None
    records = []
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            if allow_partial_tail and i == len(lines) - 1:
                break
            raise ManifestError(f"{p}: line {i + 1} is not valid JSON")
        if i == 0:
            if "schema_version" not in obj:
                raise ManifestError(f"{p}: first record must be a schema_version header")
            header = obj
        else:
            records.append(obj)
    if header is None:
        raise ManifestError(f"{p}: empty manifest (missing header)")
    return header, records


class ManifestWriter:
    """Append-ordered writer; one record per line, flushed per write."""

    def __init__(self, path: str | Path, header: dict):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists()
        if fresh:
            self._fh = open(self.path, "w", encoding="utf-8")
            self._fh.write(canonical_json(header) + "\n")
            self._fh.flush()
        else:
            # Re-opening an interrupted manifest: drop any partial last line.
            existing = self.path.read_text(encoding="utf-8")
            if existing and not existing.endswith("\n"):
                existing = existing[: existing.rfind("\n") + 1]
                self.path.write_text(existing, encoding="utf-8")
            self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(canonical_json(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class JobState:
    """Completed-id ledger for one stage, bound to a config hash."""

    def __init__(self, path: str | Path, stage: str, cfg_hash: str):
        self.path = Path(path)
        self.stage = stage
        self.cfg_hash = cfg_hash
        self.completed: list[str] = []
        if self.path.exists():
            data = json.loads(self.path.read_text(encoding="utf-8"))
            if data.get("config_hash") != cfg_hash:
                raise ConfigError(
                    f"refusing to resume {stage}: the saved job used a different "
                    f"configuration (hash {data.get('config_hash')!r} vs {cfg_hash!r}); "
                    "finish or delete the old job, or restore its config"
                )
            if data.get("stage") != stage:
                raise ConfigError(f"state file {self.path} belongs to stage {data.get('stage')}")
            self.completed = list(data.get("completed_ids", []))

    def mark(self, item_id: str) -> None:
        if item_id in self.completed:
            return
        self.completed.append(item_id)
        self._save()

    def _save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "schema_version": SCHEMA_VERSION,
            "stage": self.stage,
            "config_hash": self.cfg_hash,
            "completed_ids": self.completed,
        }
        self.path.write_text(canonical_json(payload) + "\n", encoding="utf-8")
