"""Query execution, cost accounting, bulk scheduling and benchmarks."""

from .bench import (
    BenchResult,
    ConfigError,
    SCENARIOS,
    fit_r2,
    make_config,
    replay_chat,
    replay_chat_figure,
    replay_nested_figure,
    replay_rag_figure,
    run_benchmark,
)
from .execute import (
    CapacityError,
    CostCoeffs,
    CostReport,
    ExecParams,
    ExecuteError,
    RequestCost,
    attention_cost,
    execute,
    to_baseline,
)
from .model import Corpus, LexicalRetriever, MockModel, mock_generate
from .scheduler import BulkQuery, BulkSchedule, replay_bulk, schedule_bulk

__all__ = [
    "BenchResult", "BulkQuery", "BulkSchedule", "CapacityError", "ConfigError", "Corpus",
    "CostCoeffs", "CostReport", "ExecParams", "ExecuteError", "LexicalRetriever", "MockModel",
    "RequestCost", "SCENARIOS", "attention_cost", "execute", "fit_r2", "make_config",
    "mock_generate", "replay_bulk", "replay_chat", "replay_chat_figure", "replay_nested_figure",
    "replay_rag_figure", "run_benchmark", "schedule_bulk", "to_baseline",
]
