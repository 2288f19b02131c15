"""Exception hierarchy shared by all modules.

Each class carries a short ``category`` used by the CLI for its one-line
diagnostic.
"""


class BitformerError(Exception):
    category = "error"


class DimensionError(BitformerError, ValueError):
    category = "dimension"


class ContractError(BitformerError):
    category = "contract"


class TrainingError(BitformerError, FloatingPointError):
    category = "training"


class ParameterError(BitformerError, ValueError):
    category = "parameter"


class EncodingError(BitformerError, ValueError):
    category = "encoding"


class ScheduleError(BitformerError, ValueError):
    category = "schedule"


class ArchitectureError(BitformerError, ValueError):
    category = "architecture"


class InputError(BitformerError, ValueError):
    category = "input"


class FormatError(BitformerError, ValueError):
    category = "format"


class SchemaError(BitformerError, ValueError):
    category = "schema"


class RowError(BitformerError, ValueError):
    category = "row"

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class ConfigError(BitformerError, ValueError):
    category = "config"
