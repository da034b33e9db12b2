"""Subject-agnostic fMRI-to-video decoding at desk scale.

Hierarchical stream encoders aligned to stimulus embeddings, a
token-redistribution adapter separating semantic from subject content,
explicit decode heads with cyclic loss scheduling, a trial-based
evaluation protocol, and a synthetic data harness with planted
cross-subject structure.
"""

__version__ = "0.1.0"
