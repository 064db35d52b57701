import json
from pathlib import Path
from typing import Any, Optional

import structlog

from src.domain.runners import RUNNERS
from src.infrastructure.models import RunManifest, RunStatus, utcnow
from src.run_config import RunConfig
from src.utils import canonicalize_params

logger = structlog.get_logger()

RESULT_NAME = "result.json"


def execute_run(command: str, config: RunConfig, out_dir: Path,
                options: Optional[dict[str, Any]] = None) -> dict[str, Any]:
    """
    Runs one command inside its output directory.

    The run manifest (run.json) moves RUNNING -> SUCCEEDED or FAILED; on
    success the runner's summary is persisted as canonical JSON in result.json.
    """
    if command not in RUNNERS:
        raise ValueError(f"unknown command '{command}'")
    out_dir = Path(out_dir)
    config_hash = config.config_hash()
    logger.info("run_received", command=command, config_hash=config_hash, out_dir=str(out_dir))

    # 1. Claim the manifest
    previous = RunManifest.load(out_dir)
    if previous and previous.status == RunStatus.SUCCEEDED and previous.config_hash == config_hash \
            and previous.command == command:
        logger.info("run_already_succeeded", command=command, result=previous.result_ref)
    manifest = RunManifest(
        command=command,
        config_hash=config_hash,
        status=RunStatus.RUNNING,
        started_at=utcnow(),
        attempt_count=(previous.attempt_count if previous else 0) + 1,
    )
    manifest.save(out_dir)

    try:
        # 2. Execute
        runner = RUNNERS[command]()
        result = runner.run(config, out_dir, options or {})
        result = {**result, "command": command, "config_hash": config_hash}

        # 3. Persist result
        canonical_json, _ = canonicalize_params(json.loads(json.dumps(result, default=str)))
        result_path = out_dir / RESULT_NAME
        result_path.write_text(canonical_json + "\n", encoding="utf-8")

        # 4. Finalize success
        manifest.status = RunStatus.SUCCEEDED
        manifest.result_ref = str(result_path)
        manifest.finished_at = utcnow()
        manifest.save(out_dir)
        logger.info("run_completed", command=command, status="SUCCEEDED")
        return result

    except Exception as e:
        logger.exception("run_failed", command=command, error=str(e))
        manifest.status = RunStatus.FAILED
        manifest.last_error = str(e)
        manifest.finished_at = utcnow()
        try:
            manifest.save(out_dir)
        except OSError as io_e:
            logger.error("failed_to_update_status", error=str(io_e))
        raise
