"""Motion prompt tuning on synthetic micro-motion data.

Pipeline modules: ``diffcore`` (autodiff tensors), ``seqio`` (containers and
the synthetic generator), ``magnify`` (Eulerian motion magnification),
``encode`` (tokenization), ``model`` (frozen transformer + adapters), and
``harness`` (training, LOSO evaluation, reports).
"""

from .diffcore import Tensor, backward
from .harness import EvalReport, TrainConfig, run_experiment
from .magnify import BandpassSpec, magnify_sequence
from .model import ModelConfig, count_tunable, init_params
from .seqio import Manifest, Sequence, SynthConfig, generate_synthetic

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "EvalReport",
    "TrainConfig",
    "run_experiment",
    "BandpassSpec",
    "magnify_sequence",
    "ModelConfig",
    "count_tunable",
    "init_params",
    "Manifest",
    "Sequence",
    "SynthConfig",
    "generate_synthetic",
    "__version__",
]
