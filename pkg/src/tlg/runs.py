"""Run directories, manifests and CSV persistence."""

from __future__ import annotations

import csv
import datetime as _dt
import json
import os
import subprocess
from pathlib import Path

from filelock import FileLock

MANIFEST = "manifest.json"


def runs_root(default: str | Path = "runs") -> Path:
    return Path(os.environ.get("TLG_RUNS_DIR", default))


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class RunDir:
    """A run directory holding exactly one manifest; writers hold a file lock."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.path / ".lock"))

    @classmethod
    def create(cls, command: str, config_hash: str, root: str | Path | None = None) -> "RunDir":
        root = Path(root) if root is not None else runs_root()
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        base = f"{command}-{stamp}-{config_hash[:8]}"
        path = root / base
        n = 1
        while path.exists():
            path = root / f"{base}-{n}"
            n += 1
        return cls(path)

    def write_manifest(self, **fields) -> Path:
        with self.lock:
            target = self.path / MANIFEST
            data = {}
            if target.exists():
                data = json.loads(target.read_text())
            data.update(fields)
            data.setdefault("git_revision", git_revision())
            data.setdefault("created", now())
            data["updated"] = now()
            target.write_text(json.dumps(data, indent=2, sort_keys=True))
            return target

    def read_manifest(self) -> dict:
        return json.loads((self.path / MANIFEST).read_text())

    def write_csv(self, name: str, rows: list[dict]) -> Path:
        target = self.path / name
        with self.lock:
            fields = []
            for r in rows:
                for k in r:
                    if k not in fields:
                        fields.append(k)
            with target.open("w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=fields)
                w.writeheader()
                w.writerows(rows)
        return target

    def write_json(self, name: str, payload) -> Path:
        target = self.path / name
        with self.lock:
            target.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return target
