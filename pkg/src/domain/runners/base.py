from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any

from src.run_config import RunConfig


class BaseRunner(ABC):
    #: subcommand name, e.g. "train-ae"
    command: str = ""

    @abstractmethod
    def run(self, config: RunConfig, out_dir: Path, options: dict[str, Any]) -> dict[str, Any]:
        """
        Executes one command with a resolved configuration.

        Args:
            config: The resolved RunConfig (file < env < flags).
            out_dir: Directory that receives every output of the command.
            options: Command-specific inputs such as checkpoint paths.

        Returns:
            A JSON-serializable dictionary summarizing the outputs.

        Raises:
            VitokError: If the command fails.
        """
        pass
