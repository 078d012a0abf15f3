"""Tri-modal fake talking face detection: tensors, preprocessing, model, training.

Submodules are imported explicitly (``import ftfd.tensor``) so that the CLI
can configure BLAS thread limits before numpy is loaded.
"""

__version__ = "0.1.0"
