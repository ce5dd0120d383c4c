"""Membership-inference auditing for tokenized-action (VLA-style) policies.

Modules:

* :mod:`vlamia.core` - domain types, errors, NDJSON artifacts, seeding
* :mod:`vlamia.corpus` - synthetic trajectories, splits, evaluation manifests
* :mod:`vlamia.surrogate` - a small trainable policy that can be audited
* :mod:`vlamia.attacks` - sample- and trajectory-level membership scores
* :mod:`vlamia.metrics` - ROC, AUC, TPR at low FPR, reports
* :mod:`vlamia.mitigations` - inference-time defenses
* :mod:`vlamia.pipeline` / :mod:`vlamia.cli` - end-to-end runs
"""
from __future__ import annotations

__version__ = "0.1.0"

from .attacks import AttackName, run_attack  # noqa: E402
from .core import (AccessRegimeViolation, InferenceRecord, ScoredExample,  # noqa: E402
                   SchemaError, Trajectory, VlaMiaError)
from .metrics import auc, roc_curve, tpr_at_fpr  # noqa: E402

__all__ = ["AccessRegimeViolation", "AttackName", "InferenceRecord", "SchemaError",
           "ScoredExample", "Trajectory", "VlaMiaError", "auc", "roc_curve", "run_attack",
           "tpr_at_fpr", "__version__"]
