"""Counterfactual multi-task CTR/CVR estimation with a small autodiff core.

Submodules: ``synthgen`` (synthetic worlds), ``diffcore`` (reverse-mode
autodiff), ``model`` (shared-embedding towers), ``risks`` (losses and
IPS/DR estimators), ``trainer`` (Adam loop), ``metrics``, ``causal_diag``
(PSM, causal risk ratio, sweeps), ``ingest`` (external logs), ``experiment``
and ``cli``.
"""

__version__ = "0.1.0"
