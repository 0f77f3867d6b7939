"""Co-evolutionary neural architecture search over module and blueprint graphs."""

from .assembly import LayerGraph, assemble
from .datasets import Dataset, SplitSpec, load_csv, load_idx, subsample_split, synthetic_glyphs
from .evaluation import SurrogateEvaluator, SurrogateSpec, TrainerEvaluator, evaluate_generation
from .fitness import WORST, FitnessScore
from .graph import GenotypeGraph, Node, random_graph, topological_order, validate
from .orchestrator import RunConfig, config_from_text, load_config, run_evolution
from .tables import Tables, experiment_tables, parse_tables
from .variation import GenerationRates, mutate, uniform_crossover

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FitnessScore",
    "GenerationRates",
    "GenotypeGraph",
    "LayerGraph",
    "Node",
    "RunConfig",
    "SplitSpec",
    "SurrogateEvaluator",
    "SurrogateSpec",
    "Tables",
    "TrainerEvaluator",
    "WORST",
    "assemble",
    "config_from_text",
    "evaluate_generation",
    "experiment_tables",
    "load_config",
    "load_csv",
    "load_idx",
    "mutate",
    "parse_tables",
    "random_graph",
    "run_evolution",
    "subsample_split",
    "synthetic_glyphs",
    "topological_order",
    "uniform_crossover",
    "validate",
]
