from src.domain.runners.ablation import AblateLossRunner, AblateRegRunner
from src.domain.runners.base import BaseRunner
from src.domain.runners.data import GenDataRunner
from src.domain.runners.evaluation import BenchRunner, EvalRunner
from src.domain.runners.inference import ReconstructRunner, SampleRunner
from src.domain.runners.training import TrainAutoencoderRunner, TrainFlowRunner

RUNNERS: dict[str, type[BaseRunner]] = {
    runner.command: runner
    for runner in (
        GenDataRunner,
        TrainAutoencoderRunner,
        TrainFlowRunner,
        ReconstructRunner,
        SampleRunner,
        EvalRunner,
        BenchRunner,
        AblateLossRunner,
        AblateRegRunner,
    )
}

__all__ = ["BaseRunner", "RUNNERS"]
