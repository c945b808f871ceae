"""Budgeted two-node ventricular-arrhythmia detection: synthetic paired
rhythm data, a from-scratch 1D-CNN engine, confidence-gated cooperative
inference between an implantable and a wearable node, and the cloud-side
personalization pipeline (MMD domain adaptation over 32 freeze/fine-tune
candidates plus a policy-gradient candidate selector).
"""

__version__ = "0.1.0"

from . import adapt, baseline, coopsim, detect, evalkit, pipeline, policy, rhythm, tinynn

__all__ = [
    "adapt",
    "baseline",
    "coopsim",
    "detect",
    "evalkit",
    "pipeline",
    "policy",
    "rhythm",
    "tinynn",
    "__version__",
]
