"""Run manifests: the reproducibility record every command leaves behind.

A manifest snapshots the command, its resolved configuration, every seed
involved, and the artifact paths it produced.  It is written atomically
at run end, exactly one per output directory.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

MANIFEST_NAME = "manifest.json"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    command: str
    argv: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    tool_version: str = __version__
    started_at: str = field(default_factory=_now)
    finished_at: str = ""

    def finish(self) -> "RunManifest":
        self.finished_at = _now()
        return self


def write_manifest(out_dir, manifest: RunManifest) -> Path:
    """Atomic write (temp file + rename) of <out_dir>/manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not manifest.finished_at:
        manifest.finish()
    payload = json.dumps(asdict(manifest), sort_keys=True, indent=2) + "\n"
    fd, tmp = tempfile.mkstemp(dir=out, prefix=".manifest-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(payload)
        os.replace(tmp, out / MANIFEST_NAME)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return out / MANIFEST_NAME


def read_manifest(out_dir) -> dict:
    return json.loads((Path(out_dir) / MANIFEST_NAME).read_text())
