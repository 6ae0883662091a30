"""
multistop - Run Replayer

Replay(record) := execute(record.config) in a fresh workspace, then compare
the artifact hashes with the recorded ones. Same config and seed must give
byte-identical artifacts; only the run record carries timestamps.
"""

from dataclasses import replace
from pathlib import Path
import os
import shutil
import tempfile

from .schema import RunRecord
from .logger import RunLog


class Replayer:
    """
    Re-execution of a recorded run.

    Artifacts are redirected into the workspace under their recorded file
    names; the record of the replay itself goes there too.
    """

    def __init__(self, record: RunRecord, workspace: Path | str | None = None):
        self.record = record
        if workspace:
            self.workspace = Path(workspace)
            self.workspace.mkdir(parents=True, exist_ok=True)
            self._temp_dir = None
        else:
            self._temp_dir = tempfile.mkdtemp(prefix="multistop_replay_")
            self.workspace = Path(self._temp_dir)

    def run(self) -> RunLog:
        from .cli import execute

        config = self.record.config
        if config.out:
            config = replace(config, out=str(self.workspace / Path(config.out).name))
        runlog = RunLog.new_run(config, self.workspace / f"replay-{self.record.run_id}.yaml")
        execute(config, runlog)
        return runlog

    def cleanup(self) -> None:
        if self._temp_dir and os.path.exists(self._temp_dir):
            shutil.rmtree(self._temp_dir)

    def __enter__(self):
        return self

    def __exit__(self, *args):
        self.cleanup()


def compare_runs(r1: RunRecord, r2: RunRecord) -> dict:
    """
    Compare two run records by config hash and artifact hashes.

    Artifacts are matched by file name since a replay writes elsewhere.
    """
    a1 = {Path(p).name: h for p, h in r1.artifacts.items()}
    a2 = {Path(p).name: h for p, h in r2.artifacts.items()}
    status = {}
    for name in sorted(set(a1) | set(a2)):
        if name not in a2:
            status[name] = "missing"
        elif name not in a1:
            status[name] = "extra"
        else:
            status[name] = "identical" if a1[name] == a2[name] else "differs"
    return {
        "config_match": r1.config_hash == r2.config_hash,
        "seed_match": r1.seed == r2.seed,
        "artifacts": status,
        "identical": r1.config_hash == r2.config_hash and all(s == "identical" for s in status.values()),
    }


def replay_run(record_file: str | Path, workspace: Path | str | None = None) -> dict:
    """
    Load a run record, re-execute it and compare.

    The config hash covers the model file content, so an edited model shows
    up as a config mismatch rather than as differing artifacts.
    """
    original = RunLog.load(record_file).record
    with Replayer(original, workspace) as r:
        again = r.run().record
        result = compare_runs(original, again)
    return result
