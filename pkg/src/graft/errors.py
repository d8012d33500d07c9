"""Exception hierarchy shared by every graft module."""


class GraftError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(GraftError):
    """File does not conform to the container format."""


class CorruptFileError(GraftError):
    """Header and data section disagree (truncation, bad offsets)."""


class InvalidValueError(GraftError, ValueError):
    """A tensor or scalar holds a value outside its allowed domain."""


class CheckpointIOError(GraftError, OSError):
    """Underlying filesystem failure while reading or writing."""


class ShapeError(GraftError, ValueError):
    pass


class InvalidConfigError(GraftError, ValueError):
    pass


class PairingError(GraftError):
    """LoRA A/B tensors do not pair up by adapter name."""

    def __init__(self, adapter: str, detail: str = ""):
        self.adapter = adapter
        super().__init__(f"{adapter}: {detail}" if detail else adapter)


class ObjectiveError(GraftError):
    pass


class InvalidTraceError(GraftError):
    pass


class TrainingError(GraftError):
    pass
