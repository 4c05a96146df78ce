"""Exception hierarchy shared across the toolkit.

Each exception carries an ``exit_code`` used by the CLI:
2 for usage/config errors, 3 for I/O errors, 4 for numeric failures.
"""


class ESDDError(Exception):
    exit_code = 2


class ConfigError(ESDDError):
    exit_code = 2


class IoError(ESDDError):
    exit_code = 3


class NumericError(ESDDError):
    exit_code = 4


# audio / frontend
class MalformedWav(IoError):
    pass


class UnsupportedEncoding(IoError):
    pass


class EmptyAudio(IoError):
    pass


class ClipTooShort(IoError):
    pass


class ConfigMismatch(ConfigError):
    pass


class BandOverflow(ConfigError):
    pass


class BadFeatureFile(IoError):
    pass


# autodiff / model
class ShapeMismatch(NumericError):
    pass


class NonFiniteValue(NumericError):
    pass


class NonScalarRoot(NumericError):
    pass


class GraphConsumed(NumericError):
    pass


class UnknownGroup(ConfigError):
    pass


class CorruptCheckpoint(IoError):
    pass


# losses / augmentation
class LabelNotSimplex(NumericError):
    pass


class BadMargin(ConfigError):
    pass


class ClassOutOfRange(NumericError):
    pass


class BatchTooSmall(ConfigError):
    pass


# training
class EmptyDataset(ConfigError):
    pass


class MissingGeneratorLabels(ConfigError):
    pass


# metrics
class EmptyScoreSet(ConfigError):
    pass


class OneClassOnly(ConfigError):
    pass


class ClipMismatch(ConfigError):
    pass


class LabelMismatch(ConfigError):
    pass


# dataset
class BadHeader(ConfigError):
    pass


class InvalidRow(ConfigError):
    pass


class EmptySplit(ConfigError):
    pass
