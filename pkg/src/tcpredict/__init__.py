"""Performance prediction for BLAS-based tensor contraction algorithms."""

from .analysis import AnalysisError, BenchmarkVariant, CacheConfig, OperandAnalysis, analyze_call, enumerate_variants
from .contraction import Contraction, ContractionError, MemoryRegion, SizeModel, Tensor, parse_contraction, parse_sizes
from .generator import Algorithm, KernelCall, Loop, emit_code, generate_algorithms, invocation_count
from .harness import MachineConfig, TimingResult, flops_of, run_micro_benchmark
from .predictor import Prediction, predict, rank, sweep
from .setup import SetupError, SetupList, build_setup

__all__ = [
    "Algorithm", "AnalysisError", "BenchmarkVariant", "CacheConfig", "Contraction", "ContractionError",
    "KernelCall", "Loop", "MachineConfig", "MemoryRegion", "OperandAnalysis", "Prediction", "SetupError",
    "SetupList", "SizeModel", "Tensor", "TimingResult", "analyze_call", "build_setup", "emit_code",
    "enumerate_variants", "flops_of", "generate_algorithms", "invocation_count", "parse_contraction",
    "parse_sizes", "predict", "rank", "run_micro_benchmark", "sweep",
]

__version__ = "0.1.0"
