"""
Error types raised on bad data or configuration
"""

from typing import Any, Dict, Optional


class ActionParseError(Exception):
    """Base exception for data and configuration errors"""

    def __init__(self, message: str, context: Optional[Dict[str, Any]] = None):
        self.message = message
        self.context = context or {}
        super().__init__(self.message)

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.message} ({details})"


class SchemaParseError(ActionParseError):
    """Schema file is not well-formed"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message, {"line": line})


class SchemaError(ActionParseError):
    """Schema is well-formed but violates a structural rule"""

    def __init__(self, message: str, node_id: Optional[str] = None):
        self.node_id = node_id
        super().__init__(message, {"node_id": node_id})


class TreeFormatError(ActionParseError):
    """Tree document does not match the schema shape"""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(message, {"key": key})


class TemplateLibraryError(ActionParseError):
    """Template library references or compositions are invalid"""

    def __init__(self, message: str, template_id: Optional[str] = None, object_id: Optional[str] = None):
        self.template_id = template_id
        self.object_id = object_id
        super().__init__(message, {"template_id": template_id, "object_id": object_id})


class CorpusFormatError(ActionParseError):
    """Malformed corpus or annotation line"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        super().__init__(message, {"line_number": line_number})


class RephraseError(ActionParseError):
    """Span word map does not fit the original tree or the rephrased sentence"""

    def __init__(self, message: str, node_id: Optional[str] = None):
        self.node_id = node_id
        super().__init__(message, {"node_id": node_id})


class SamplerConfigError(ActionParseError):
    """Sampler pools cannot serve the target distribution"""


class GradientError(ActionParseError):
    """Non-finite gradient met by the optimiser"""

    def __init__(self, message: str, parameter: Optional[str] = None):
        self.parameter = parameter
        super().__init__(message, {"parameter": parameter})


class TrainingError(ActionParseError):
    """Training aborted, e.g. on a non-finite loss"""


class CheckpointError(ActionParseError):
    """Checkpoint is malformed or does not match the schema in use"""
