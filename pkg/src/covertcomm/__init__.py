"""Covert communication over learned autoencoder wireless links.

Modules: :mod:`nn` (numpy network engine), :mod:`channel`, :mod:`autoencoder`,
:mod:`covert`, :mod:`baseline`, :mod:`config`, :mod:`harness`, :mod:`cli`.
"""

__version__ = "0.1.0"
