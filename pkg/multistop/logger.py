"""
multistop - Run Logger

Captures config, solver diagnostics and artifacts of one run and appends
them to a YAML run record.
"""

from datetime import datetime, timezone
from pathlib import Path
import json
import uuid

import numpy as np
import yaml

from .schema import Event, RunConfig, RunRecord, hash_content


def _plain(obj):
    """numpy scalars and arrays to plain Python, so the record stays safe_load-able."""
    return json.loads(json.dumps(obj, default=lambda o: o.tolist() if isinstance(o, (np.ndarray, np.generic)) else str(o)))


class RunLog:
    """
    Append-only run logger.

    Every artifact written by a run is logged with its content hash; the
    record alone is enough to re-execute the run and compare the outputs.
    """

    def __init__(self, record: RunRecord, record_file: Path | str | None = None):
        self.record = record
        self.record_file = Path(record_file) if record_file else None

        if self.record_file:
            self.record_file.parent.mkdir(parents=True, exist_ok=True)
            self._save()

    @classmethod
    def new_run(cls, config: RunConfig, record_file: str | Path | None = None) -> "RunLog":
        """Start a record for a parsed config and log the config event."""
        run_id = str(uuid.uuid4())[:8]
        record = RunRecord(run_id=run_id, config=config, config_hash=config.config_hash(), seed=config.seed)
        if record_file is None:
            record_file = f".multistop/{run_id}.yaml"
        log = cls(record, record_file)
        log.log("config", subcommand=config.subcommand, config_hash=record.config_hash)
        return log

    @classmethod
    def load(cls, record_file: str | Path) -> "RunLog":
        """Load an existing record without rewriting it."""
        record_file = Path(record_file)
        with open(record_file) as f:
            data = yaml.safe_load(f)
        log = cls.__new__(cls)
        log.record = RunRecord.from_dict(data)
        log.record_file = record_file
        return log

    def _save(self) -> None:
        if self.record_file:
            with open(self.record_file, "w") as f:
                yaml.dump(self.record.to_dict(), f, default_flow_style=False, sort_keys=False)

    def _now(self) -> str:
        return datetime.now(timezone.utc).isoformat()

    def log(self, type: str, **payload) -> Event:
        event = Event(type=type, timestamp=self._now(), payload=_plain(payload))
        self.record.append(event)
        self._save()
        return event

    def log_solve(self, engine: str, **metadata) -> Event:
        return self.log("solve", engine=engine, **metadata)

    def log_diagnostic(self, message: str, **metadata) -> Event:
        return self.log("diagnostic", message=message, **metadata)

    def log_artifact(self, path: str | Path, content: str) -> Event:
        """Record an artifact by path and content hash."""
        return self.log("artifact", path=str(path), hash=hash_content(content))

    @property
    def header(self) -> str:
        """Comment line embedded at the top of CSV artifacts."""
        return f"config_hash={self.record.config_hash} seed={self.record.seed}"

    @property
    def event_count(self) -> int:
        return len(self.record.events)
