"""One-shot, gradient-free unlearning for low-rank-adapter recommenders."""

from ucan.attenuate import unlearn
from ucan.risk import UcanConfig

__version__ = "0.1.0"
__all__ = ["UcanConfig", "unlearn", "__version__"]
