"""Exception hierarchy shared by every module of the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by ondevice_stt."""


class TooShort(PipelineError):
    pass


class SilentSignal(PipelineError):
    pass


class BadAudio(PipelineError):
    pass


class ShapeMismatch(PipelineError):
    pass


class TapeReuse(PipelineError):
    pass


class Infeasible(PipelineError):
    """Label cannot be emitted within the available frames.

    ``index`` is set when the failure comes from one item of a batch.
    """

    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"item {index}: {message}")
        self.index = index


class BudgetExceeded(PipelineError):
    pass


class NonFiniteLoss(PipelineError):
    pass


class NonFinite(PipelineError):
    pass


class EmptyDataset(PipelineError):
    pass


class CheckpointError(PipelineError):
    pass


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ConfigMismatch(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class CorruptFile(CheckpointError):
    pass


class BadTranscript(PipelineError):
    def __init__(self, transcript, offending):
        chars = "".join(sorted(set(offending)))
        super().__init__(f"transcript {transcript!r} contains unsupported characters: {chars!r}")
        self.offending = chars


class NotReady(PipelineError):
    pass


class EmptyGrid(PipelineError):
    pass
