"""msmamba: multi-scale state-space image restoration, from scratch on numpy.

A small reverse-mode autodiff engine (``tensor``, ``ops``), selective-scan
state-space kernels (``ssm``), window/direction layout transforms
(``layouts``), the restoration blocks and UNet (``blocks``, ``network``),
losses and metrics (``losses``, ``metrics``), synthetic degradations
(``data``), and an AdamW trainer with binary checkpoints (``trainer``).
"""

from .tensor import Tape, Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "backward", "no_grad", "__version__"]
