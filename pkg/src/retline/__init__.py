"""Retentive sequence decoding for line-level text recognition, from scratch.

Subpackages cover the tensor/autodiff substrate, retention operators and
gamma schedules, the attention-retention fusion layer, the decoder model and
its softmax-attention twin, beam-search decoding over recurrent states vs.
KV caches, and the analytic cost model that cross-checks all of it.
"""

__version__ = "0.1.0"
