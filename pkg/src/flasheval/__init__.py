"""Generator-evaluator reranking: an independent per-list evaluator versus a
joint evaluator that encodes the candidate pool once and scores all lists in
one pass, with the autodiff, data generator, oracles and benchmark harness
needed to compare them."""

from .evaluators import VARIANTS, Evaluator, EvaluatorConfig, select_top1
from .synthgen import NO_BIAS, BiasSpec, Dataset, gen_dataset, make_world
from .tensor import FlopCounter, NumericalError, Tape, Tensor, counting

__all__ = [
    "VARIANTS",
    "BiasSpec",
    "Dataset",
    "Evaluator",
    "EvaluatorConfig",
    "FlopCounter",
    "NO_BIAS",
    "NumericalError",
    "Tape",
    "Tensor",
    "counting",
    "gen_dataset",
    "make_world",
    "select_top1",
]

__version__ = "0.1.0"
