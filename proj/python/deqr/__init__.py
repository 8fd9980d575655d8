"""Deep-equilibrium algorithmic reasoning: generation, training, evaluation."""

from deqr._core import (
    algorithms,
    cayley_edges,
    cayley_order,
    choose_n,
    evaluate,
    generate_dataset,
    timing,
    train,
)

__all__ = [
    "algorithms",
    "cayley_edges",
    "cayley_order",
    "choose_n",
    "evaluate",
    "generate_dataset",
    "timing",
    "train",
]
