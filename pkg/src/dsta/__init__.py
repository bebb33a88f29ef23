"""Dynamic spatial-temporal attention for early accident anticipation.

Submodules: ``numgrad`` (autodiff core), ``features`` (data and file format),
``model`` (the network), ``objective`` (losses), ``trainer``, ``metrics``,
``fusion``, ``checkpoint``, ``gradcheck`` and ``cli``.
"""

__version__ = "0.1.0"
