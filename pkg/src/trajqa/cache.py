"""Content-addressed on-disk cache of per-video trajectory sets.

Layout::

    <root>/objects/<key[:2]>/<key>.json   serialized TrajectorySet
    <root>/index.json                     key -> {video_id, content_hash, fingerprint}

``key`` is the SHA-256 of ``content_hash:fingerprint`` (256-bit, so collisions
are not a practical concern). Writes go to a temp file then ``os.replace``.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, Optional

from filelock import FileLock

from .core import TrajectorySet


def file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class TrajectoryCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(content_hash: str, fingerprint: str) -> str:
        return hashlib.sha256(f"{content_hash}:{fingerprint}".encode()).hexdigest()

    def _object_path(self, key: str) -> Path:
        return self.root / "objects" / key[:2] / f"{key}.json"

    def get(self, content_hash: str, fingerprint: str) -> Optional[TrajectorySet]:
        path = self._object_path(self.key(content_hash, fingerprint))
        if not path.exists():
            self.misses += 1
            return None
        self.hits += 1
        return TrajectorySet.from_json(path.read_text())

    def put(self, content_hash: str, fingerprint: str, traj_set: TrajectorySet) -> str:
        key = self.key(content_hash, fingerprint)
        _atomic_write(self._object_path(key), traj_set.to_json())
        self.root.mkdir(parents=True, exist_ok=True)
        with FileLock(str(self.root / "index.json.lock")):
            index = self.index()
            index[key] = {"video_id": traj_set.video_id, "content_hash": content_hash, "fingerprint": fingerprint}
            _atomic_write(self.root / "index.json", json.dumps(index, indent=2, sort_keys=True))
        return key

    def index(self) -> Dict[str, dict]:
        path = self.root / "index.json"
        return json.loads(path.read_text()) if path.exists() else {}
