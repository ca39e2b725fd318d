"""Sparse-view CT and undersampled radial MRI reconstruction with learned primal-dual networks.

Subpackages are imported lazily by their users; the top level only exposes
the version string.
"""

__version__ = "0.1.0"
