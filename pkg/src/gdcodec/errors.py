"""Exception hierarchy; every decode-side rejection derives from :class:`CodecError`."""


class CodecError(ValueError):
    """Base class for typed codec failures."""


class StreamError(CodecError):
    """Malformed or incompatible coded stream."""


class BadMagicError(StreamError):
    pass


class UnsupportedVersionError(StreamError):
    pass


class StreamTruncatedError(StreamError):
    """A section is shorter than its declared length, or lengths disagree with the data."""


class InvalidHeaderError(StreamError):
    """Header field outside its legal range."""


class ChecksumMismatchError(StreamError):
    def __init__(self, stream_checksum: bytes, model_checksum: bytes):
        self.stream_checksum = stream_checksum
        self.model_checksum = model_checksum
        super().__init__(
            f"stream was produced with model {stream_checksum.hex()} "
            f"but the loaded model is {model_checksum.hex()}"
        )


class RenormFormatError(StreamError):
    """Renormalization parameter payload is truncated or inconsistent."""


class MissingCheckpointError(CodecError, FileNotFoundError):
    pass


class AdapterMismatchError(CodecError):
    """Adapter checkpoint was trained against a different prior."""
