"""Run manifests: everything needed to reproduce a CLI stage bit-identically."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

VOLATILE_PREFIXES = ("timestamp ", "wall_clock ")


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()[:16]


@dataclass
class RunManifest:
    command: str
    master_seed: int
    config: dict[str, object] = field(default_factory=dict)
    streams: dict[str, int] = field(default_factory=dict)
    input_hash: str = ""
    outputs: list[tuple[str, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    started: float = field(default_factory=time.monotonic)
    timestamp: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S"))

    def warn(self, message: str) -> None:
        self.warnings.append(message)

    def add_output(self, path: Path, base: Path) -> None:
        self.outputs.append((str(path.relative_to(base)), _file_hash(path)))

    def add_outputs(self, paths: list[Path], base: Path) -> None:
        for p in paths:
            self.add_output(p, base)

    def to_text(self) -> str:
        lines = [
            "MASKDIFF-RUN-1",
            f"command {self.command}",
            f"timestamp {self.timestamp}",
            f"wall_clock {time.monotonic() - self.started:.3f}",
            f"master_seed {self.master_seed}",
            f"input_hash {self.input_hash}",
        ]
        for key, value in sorted(self.config.items()):
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"config {key} {value}")
        for name in sorted(self.streams):
            lines.append(f"stream {name} {self.streams[name]}")
        for rel, digest in sorted(self.outputs):
            lines.append(f"output {rel} {digest}")
        for w in self.warnings:
            lines.append(f"warning {w}")
        lines.append("end")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> Path:
        """Atomic write at the end of a run."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "manifest.txt"
        tmp = Path(str(path) + ".tmp")
        tmp.write_text(self.to_text())
        tmp.replace(path)
        return path


def stable_lines(manifest_text: str) -> str:
    """Manifest text with timestamp/wall-clock stripped, for rerun comparison."""
    keep = [
        line
        for line in manifest_text.splitlines()
        if not any(line.startswith(p) for p in VOLATILE_PREFIXES)
    ]
    return "\n".join(keep) + "\n"
