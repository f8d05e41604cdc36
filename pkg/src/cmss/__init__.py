"""Curriculum-weighted multi-source domain adaptation.

An adversarial scorer learns per-sample weights over a pooled source set
with hidden domain structure, steering feature alignment toward the
sources that transfer best to an unlabeled target. Ships with DANN, IWAN
and source-only baselines, a rotated-cluster benchmark, and diagnostics
for the learned curriculum.
"""

__version__ = "0.1.0"
