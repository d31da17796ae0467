# rtdlab/job_utils.py
"""Run directory bookkeeping: manifest, status, heartbeat and cooperative stop."""
import enum
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Dict, Optional

import pytz

from .errors import DataError

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'


class JobStatus(enum.Enum):
    IDLE = "IDLE"           # directory created, nothing run yet
    RUNNING = "RUNNING"
    STOPPING = "STOPPING"   # stop requested; the trainer checkpoints and exits at the next check
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


def utc_now() -> datetime:
    return datetime.now(pytz.utc)


def utc_timestamp(moment: datetime = None) -> str:
    return (moment or utc_now()).strftime('%Y%m%dT%H%M%SZ')


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    preset: str
    variant: str
    start_step: int = 0
    end_step: Optional[int] = None
    status: str = JobStatus.IDLE.value
    created_at: str = ''
    last_updated: str = ''
    last_error: Optional[str] = None
    artifacts: Dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def create_run_dir(runs_dir: str, config_hash: str) -> str:
    """`<runs_dir>/<hash[:12]>-<UTC timestamp>`, made unique with a numeric suffix if needed."""
    base = os.path.join(runs_dir, f"{config_hash[:12]}-{utc_timestamp()}")
    path, suffix = base, 1
    while os.path.exists(path):
        suffix += 1
        path = f"{base}-{suffix}"
    os.makedirs(path)
    return path


def write_manifest(run_dir: str, manifest: RunManifest) -> None:
    path = os.path.join(run_dir, MANIFEST_NAME)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, 'w', encoding='utf-8') as f:
        f.write(manifest.to_json())
    os.replace(tmp_path, path)


def read_manifest(run_dir: str) -> RunManifest:
    path = os.path.join(run_dir, MANIFEST_NAME)
    try:
        with open(path, encoding='utf-8') as f:
            return RunManifest(**json.load(f))
    except FileNotFoundError as e:
        raise DataError(f"No run manifest in '{run_dir}'") from e
    except (json.JSONDecodeError, TypeError) as e:
        raise DataError(f"Corrupt run manifest in '{run_dir}': {e}") from e


def check_run_should_stop(run_dir: str) -> bool:
    """True when someone flipped the manifest to STOPPING."""
    if run_dir is None:
        return False
    try:
        return read_manifest(run_dir).status == JobStatus.STOPPING.value
    except DataError as e:
        logger.error(f"Error checking run status for {run_dir}: {e}")
        return False


def request_stop(run_dir: str) -> bool:
    manifest = read_manifest(run_dir)
    if manifest.status != JobStatus.RUNNING.value:
        return False
    manifest.status = JobStatus.STOPPING.value
    manifest.last_updated = utc_now().isoformat()
    write_manifest(run_dir, manifest)
    return True


def update_run_heartbeat(run_dir: str, step: int = None, message: str = None) -> bool:
    """Touch `last_updated` and optionally record progress / a message."""
    try:
        manifest = read_manifest(run_dir)
        manifest.last_updated = utc_now().isoformat()
        if step is not None:
            manifest.end_step = step
        if message is not None:
            manifest.last_error = message
        write_manifest(run_dir, manifest)
        return True
    except (DataError, OSError) as e:
        logger.error(f"Failed to update heartbeat for {run_dir}: {e}")
        return False


def cleanup_run_state(run_dir: str, status: JobStatus = JobStatus.IDLE, error_msg: str = None,
                      artifacts: Dict[str, str] = None) -> bool:
    try:
        manifest = read_manifest(run_dir)
        manifest.status = status.value
        if error_msg:
            manifest.last_error = error_msg
        if artifacts:
            manifest.artifacts.update(artifacts)
        manifest.last_updated = utc_now().isoformat()
        write_manifest(run_dir, manifest)
        return True
    except (DataError, OSError) as e:
        logger.error(f"Failed to clean up run state for {run_dir}: {e}")
    return False
