"""Cross-view geo-localization laboratory.

Small vision transformer with heat-sorted region alignment, cross-view
metric losses, a synthetic paired-view dataset, and retrieval
evaluation, all on a self-contained numpy autodiff engine.
"""

from fsra.autodiff import Tensor, backward, grad_check, no_grad

__all__ = ["Tensor", "backward", "grad_check", "no_grad"]
__version__ = "0.1.0"
