"""Exception types; the CLI maps each to an exit status."""


class ArannotError(Exception):
    exit_code = 1


class ConfigError(ArannotError):
    exit_code = 1


class IOFailure(ArannotError):
    exit_code = 2


class ValidationError(ArannotError, ValueError):
    exit_code = 3


class GenerationError(ValidationError):
    pass
