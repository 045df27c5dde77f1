"""Exception hierarchy; the CLI maps each family to an exit code."""


class HetfxError(Exception):
    exit_code = 1


class ConfigError(HetfxError):
    exit_code = 2


class DataValidationError(HetfxError):
    exit_code = 3


class SchemaError(DataValidationError):
    pass


class EmptyFrameError(DataValidationError):
    pass


class DomainError(DataValidationError, ValueError):
    pass


class EstimationError(HetfxError):
    exit_code = 4


class DegenerateTreatmentError(EstimationError):
    pass
