"""Hub / aggregator / bank protocol for oblivious training and inference."""
from ..noise import NoiseSpec, noise_default
from ..transport import PartyId, Role
from .parties import (Aggregator, Bank, Hub, ProtocolError, SelectionRound, TrainBatchJob,
                      UnknownAccountError, rows_per_chunk)
from .session import (FederatedResult, InferResult, LeakageLedger, SessionConfig, SessionResult,
                      STRATEGIES, apply_strategy, build_parties, infer, infer_batch, leakage_report,
                      noise_for_clip, ot_rows, training_plan, TrainingPlan, run_parties, run_tcp, train, train_batch)

__all__ = [
    "Aggregator", "Bank", "Hub", "ProtocolError", "SelectionRound", "TrainBatchJob",
    "UnknownAccountError", "rows_per_chunk", "FederatedResult", "InferResult", "LeakageLedger",
    "SessionConfig", "SessionResult", "STRATEGIES", "apply_strategy", "build_parties", "infer",
    "infer_batch", "leakage_report", "noise_for_clip", "ot_rows", "run_parties", "run_tcp",
    "train", "train_batch", "training_plan", "TrainingPlan", "NoiseSpec", "noise_default", "PartyId", "Role",
]
