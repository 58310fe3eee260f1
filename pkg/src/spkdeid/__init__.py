"""Speaker de-identification toolkit for fixed-length speaker embeddings.

Synthetic labelled corpora stand in for real x-vector extractions; an
adversarial autoencoder scrubs speaker characteristics from the embeddings,
and a verification-style harness (EER / Cllr / minCllr / attribute probes)
measures how much identity information survives.
"""

__version__ = "0.1.0"
