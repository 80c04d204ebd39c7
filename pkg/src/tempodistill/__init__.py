"""Dynamic-aware video distillation at desk scale.

Q-learning picks a temporal resolution per class, distribution matching
optimizes the synthetic pixels, and a teacher scores each choice. The
submodules ``distill`` and ``partition`` hold the functions of the same name.
"""

__version__ = "0.1.0"

from .corpus import ClassSpec, CorpusConfig, LabeledVideoSet, generate, staticize  # noqa: E402
from .distill import DistillConfig, SyntheticSet, dm_loss, early_iters  # noqa: E402
from .encoder import EncoderParams, TrainConfig, evaluate, forward, backward  # noqa: E402
from .numkit import ContractError, DivergenceError, RngStream  # noqa: E402
from .partition import crop, expand, expand_adjoint  # noqa: E402
from .policy import ActionSpace, QTable, RlConfig, temporal_policy_learning  # noqa: E402

__all__ = [
    "ActionSpace", "ClassSpec", "ContractError", "CorpusConfig", "DistillConfig", "DivergenceError",
    "EncoderParams", "LabeledVideoSet", "QTable", "RlConfig", "RngStream", "SyntheticSet", "TrainConfig",
    "backward", "crop", "dm_loss", "early_iters", "evaluate", "expand", "expand_adjoint",
    "forward", "generate", "staticize", "temporal_policy_learning",
]
