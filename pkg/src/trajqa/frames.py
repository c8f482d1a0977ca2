"""Frame access: map ``(video_id, timestamp)`` to a frame reference.

The engine never decodes pixels. A provider hands out opaque references
(paths or symbolic ids) that are forwarded to remote model backends.
"""
from __future__ import annotations

import subprocess
from pathlib import Path
from typing import List, Protocol, Sequence


class FrameProvider(Protocol):
    def frame_ref(self, video_id: str, t: float) -> str: ...


def frame_refs(provider: FrameProvider, video_id: str, times: Sequence[float]) -> List[str]:
    return [provider.frame_ref(video_id, t) for t in times]


class SymbolicFrameProvider:
    """References of the form ``video_id@12.500``; used for tests and text-only runs."""

    def frame_ref(self, video_id: str, t: float) -> str:
        return f"{video_id}@{t:.3f}"


class DirectoryFrameProvider:
    """Pre-extracted frames laid out as ``<root>/<video_id>/<milliseconds>.<ext>``.

    When ``nearest`` is set, the closest existing frame is returned instead of the
    exact-timestamp path.
    """

    def __init__(self, root: str | Path, ext: str = "jpg", nearest: bool = True):
        self.root = Path(root)
        self.ext = ext
        self.nearest = nearest
        self._index: dict = {}

    def _frames(self, video_id: str) -> List[int]:
        if video_id not in self._index:
            d = self.root / video_id
            stamps = []
            if d.is_dir():
                for p in d.glob(f"*.{self.ext}"):
                    if p.stem.isdigit():
                        stamps.append(int(p.stem))
            self._index[video_id] = sorted(stamps)
        return self._index[video_id]

    def frame_ref(self, video_id: str, t: float) -> str:
        ms = int(round(t * 1000))
        if self.nearest:
            stamps = self._frames(video_id)
            if stamps:
                ms = min(stamps, key=lambda s: (abs(s - ms), s))
        return str(self.root / video_id / f"{ms:08d}.{self.ext}")


class CommandFrameProvider:
    """Delegates decoding to an external program run once per requested frame.

    ``command`` is an argv template; ``{video}``, ``{seconds}`` and ``{out}`` are
    substituted. Example for ffmpeg::

        ["ffmpeg", "-loglevel", "error", "-y", "-ss", "{seconds}", "-i", "{video}",
         "-frames:v", "1", "{out}"]
    """

    def __init__(self, command: Sequence[str], videos: dict, out_dir: str | Path, ext: str = "jpg"):
        self.command = list(command)
        self.videos = dict(videos)
        self.out_dir = Path(out_dir)
        self.ext = ext

    def frame_ref(self, video_id: str, t: float) -> str:
        out = self.out_dir / video_id / f"{int(round(t * 1000)):08d}.{self.ext}"
        if not out.exists():
            out.parent.mkdir(parents=True, exist_ok=True)
            subs = {"video": str(self.videos[video_id]), "seconds": f"{t:.3f}", "out": str(out)}
            argv = [part.format(**subs) for part in self.command]
            subprocess.run(argv, check=True, capture_output=True)
        return str(out)
