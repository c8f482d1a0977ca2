"""Object-trajectory pipeline for compositional video question answering."""
from .aggregation import LinkConfig, aggregate
from .bench import BenchItem, Fact, ReasoningChain, cohen_kappa, enumerate_chains, validate_chain
from .core import Observation, StateAtom, Trajectory, TrajectorySet
from .metrics import MetricReport, a_cons, a_sub, a_target, compute_report, paired_bootstrap
from .pipeline import Pipeline, PipelineConfig, run_audit, run_grid
from .synthetic import make_corpus

__version__ = "0.1.0"

__all__ = [
    "BenchItem", "Fact", "LinkConfig", "MetricReport", "Observation", "Pipeline", "PipelineConfig",
    "ReasoningChain", "StateAtom", "Trajectory", "TrajectorySet", "a_cons", "a_sub", "a_target",
    "aggregate", "cohen_kappa", "compute_report", "enumerate_chains", "make_corpus", "paired_bootstrap",
    "run_audit", "run_grid", "validate_chain",
]
