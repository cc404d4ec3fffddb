"""Weighted adversarial imitation learning for session recommendation.

Pipeline: synthetic catalog and simulator (``env``), a learned world model,
a scripted expert that produces demonstrations (``expert``), a discriminator
(``irl``), demonstration weights (``weighting``), actor-critic training
(``policy``) and the evaluation bench (``evalbench``).
"""

__version__ = "0.1.0"

from .errors import (ConfigError, DataError, ILRecError, NumericError, PrerequisiteError,  # noqa: F401
                     ProviderError, UsageError)
