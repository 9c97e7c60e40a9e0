"""Exception types shared by the file formats and the command line.

Each carries an ``exit_code`` that ``talkfield`` returns when it escapes ``main``.
"""


class TalkfieldError(Exception):
    exit_code = 1
    category = "error"


class MissingFileError(TalkfieldError):
    exit_code = 3
    category = "missing-file"


class FormatError(TalkfieldError):
    exit_code = 5
    category = "format"


class BadMagicError(FormatError):
    category = "bad-magic"


class TruncatedPayloadError(FormatError):
    category = "truncated"


class ChecksumError(FormatError):
    category = "checksum"


class VersionMismatchError(TalkfieldError):
    exit_code = 4
    category = "version"


class DimensionMismatchError(TalkfieldError):
    exit_code = 6
    category = "dimension"

    def __init__(self, name: str, found, expected):
        super().__init__(f"dimension mismatch {name}: file has {found}, requested {expected}")
        self.name, self.found, self.expected = name, found, expected


class KeypointsRequiredError(TalkfieldError):
    exit_code = 7
    category = "keypoints"


class DegenerateLandmarksError(TalkfieldError):
    exit_code = 7
    category = "keypoints"


class DivergenceError(TalkfieldError):
    exit_code = 8
    category = "divergence"
