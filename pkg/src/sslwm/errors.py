"""Exception hierarchy shared by every stage of the toolkit."""


class SSLWMError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(SSLWMError, ValueError):
    pass


class DimensionError(SSLWMError, ValueError):
    pass


class DegenerateInputError(SSLWMError, ValueError):
    pass


class ArityError(SSLWMError, ValueError):
    pass


class CapacityError(SSLWMError, ValueError):
    pass


class CorpusLookupError(SSLWMError, KeyError):
    pass


class DataError(SSLWMError, ValueError):
    pass


class TrainingFailure(SSLWMError, RuntimeError):
    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class TransportError(SSLWMError, ConnectionError):
    def __init__(self, message, retries, transcript=None):
        super().__init__(f"{message} after {retries} retries")
        self.retries = retries
        self.transcript = transcript


class ProtocolError(SSLWMError, ValueError):
    def __init__(self, message, transcript=None):
        super().__init__(message)
        self.transcript = transcript


class DependencyError(SSLWMError, FileNotFoundError):
    """A pipeline stage ran before the stage that produces its inputs."""

    def __init__(self, stage, missing):
        super().__init__(f"missing artifact from stage '{stage}': {missing}")
        self.stage = stage
        self.missing = missing


class IntegrityError(SSLWMError, RuntimeError):
    pass
