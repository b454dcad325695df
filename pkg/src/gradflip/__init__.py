"""Speaker labels as auxiliary supervision for end-to-end transcription:
multi-task and adversarial training, probing, and evaluation on a
synthetic speaker-conditioned dataset."""

from gradflip.tensor import Tensor, ParamStore, backward, sgd_step, no_grad
from gradflip.rng import RngStream

__version__ = "0.1.0"

__all__ = ["Tensor", "ParamStore", "backward", "sgd_step", "no_grad", "RngStream", "__version__"]
