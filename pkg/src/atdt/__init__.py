"""Cross-task feature transfer across visual domains, at desk scale.

Submodules: ``tensor`` (autodiff), ``nets``, ``scenegen``, ``training``,
``metrics``, ``pipeline``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
