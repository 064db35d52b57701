from __future__ import annotations

import os
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

MANIFEST_NAME = "run.json"


class RunStatus(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    SUCCEEDED = "SUCCEEDED"
    FAILED = "FAILED"


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


class RunManifest(BaseModel):
    """Lifecycle record of one command, stored as run.json in its output directory."""
    model_config = ConfigDict(extra="forbid")

    command: str
    config_hash: str
    status: RunStatus = RunStatus.PENDING
    created_at: datetime = Field(default_factory=utcnow)
    started_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None
    attempt_count: int = 0

    # Outputs
    result_ref: Optional[str] = None  # path to result.json
    last_error: Optional[str] = None

    @classmethod
    def path_in(cls, out_dir: Path) -> Path:
        return Path(out_dir) / MANIFEST_NAME

    @classmethod
    def load(cls, out_dir: Path) -> Optional["RunManifest"]:
        path = cls.path_in(out_dir)
        if not path.exists():
            return None
        return cls.model_validate_json(path.read_text(encoding="utf-8"))

    def save(self, out_dir: Path) -> Path:
        path = self.path_in(out_dir)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        os.replace(tmp, path)
        return path

    def __repr__(self) -> str:
        return f"<RunManifest {self.command} Status={self.status.value}>"
