from pathlib import Path
from typing import Any

import structlog

from src.domain.imagedata import generate_synthetic
from src.domain.runners.base import BaseRunner
from src.domain.runners.common import write_dataset
from src.run_config import RunConfig

logger = structlog.get_logger()


class GenDataRunner(BaseRunner):
    """Writes the synthetic dataset as PPM files named <index>_c<label>.ppm."""
    command = "gen-data"

    def run(self, config: RunConfig, out_dir: Path, options: dict[str, Any]) -> dict[str, Any]:
        spec = config.data.synthetic
        samples = generate_synthetic(spec)
        directory = Path(out_dir) / "data"
        paths = write_dataset(samples, directory)
        logger.info("dataset_written", dir=str(directory), count=len(paths), seed=spec.seed)
        return {"dir": str(directory), "count": len(paths),
                "labels": [label for _, label in samples]}
