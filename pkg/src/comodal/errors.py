"""Exception types.

Every error carries a short ``category`` string; the CLI prints it as the
first token of its one-line stderr diagnostic.
"""

from __future__ import annotations


class ComodalError(Exception):
    category = "error"


class ShapeError(ComodalError, ValueError):
    category = "shape"


class ParameterError(ComodalError, ValueError):
    category = "parameter"


class ContractError(ComodalError, ValueError):
    category = "contract"


class ConfigError(ComodalError, ValueError):
    category = "config"


class CapabilityError(ComodalError):
    category = "capability"


class ModalityLookupError(ComodalError, KeyError):
    category = "lookup"

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown modality"


class CheckpointFormatError(ComodalError):
    category = "format"


class DivergenceError(ComodalError, FloatingPointError):
    category = "divergence"

    def __init__(self, message: str, term: str | None = None) -> None:
        super().__init__(message)
        self.term = term
