"""Run manifests: one append-only record per artifact-producing invocation."""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List


def artifact_root() -> Path:
    """Artifact root directory; ``TIMEWEAVER_HOME`` overrides the default."""
    return Path(os.environ.get("TIMEWEAVER_HOME", Path.cwd() / "timeweaver_artifacts"))


def hash_inputs(paths: List[str | Path]) -> str:
    """Content hash over sorted input files (directories are walked)."""
    digest = hashlib.sha256()
    files: List[Path] = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(q for q in p.rglob("*") if q.is_file()))
        elif p.is_file():
            files.append(p)
    for f in sorted(files):
        digest.update(str(f).encode())
        digest.update(hashlib.sha256(f.read_bytes()).digest())
    return digest.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    config: Dict[str, Any]
    seed: int
    input_hash: str = ""
    outputs: List[str] = field(default_factory=list)
    metrics: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)
    started: float = field(default_factory=time.time)
    finished: float | None = None
    run_id: str = ""

    def __post_init__(self):
        if not self.run_id:
            blob = json.dumps({"cmd": self.subcommand, "cfg": self.config,
                               "seed": self.seed, "in": self.input_hash},
                              sort_keys=True).encode()
            stamp = int(self.started * 1000)
            self.run_id = f"{self.subcommand}-{hashlib.sha256(blob).hexdigest()[:10]}-{stamp}"

    def add_output(self, path: str | Path) -> None:
        self.outputs.append(str(path))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "subcommand": self.subcommand,
            "config": self.config,
            "seed": self.seed,
            "input_hash": self.input_hash,
            "outputs": self.outputs,
            "metrics": self.metrics,
            "extra": self.extra,
            "started": self.started,
            "finished": self.finished,
        }

    def write(self, root: Path | None = None) -> Path:
        """Persist the manifest and append a line to the run index."""
        self.finished = time.time()
        root = Path(root) if root is not None else artifact_root()
        runs = root / "runs"
        runs.mkdir(parents=True, exist_ok=True)
        path = runs / f"{self.run_id}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        index = runs / "index.jsonl"
        with index.open("a") as fh:
            fh.write(json.dumps({"run_id": self.run_id, "subcommand": self.subcommand,
                                 "finished": self.finished}, sort_keys=True) + "\n")
        return path
