"""
Exceptions of termclust.
Three families map to the exit codes of the command line tool:
ValidationError (2), DataError (3) and NumericError (4).
"""


class TermclustError(Exception):
    """
    The base exception of the package.
    """
    exit_code = 1


class ValidationError(TermclustError):
    """
    The exception occurs when a parameter or a configuration value is invalid.
    """
    exit_code = 2


class DataError(TermclustError):
    """
    The exception occurs when an input file or an input array is malformed
    or does not match other inputs.
    """
    exit_code = 3


class NumericError(TermclustError):
    """
    The exception occurs when a computation meets non-finite values.
    """
    exit_code = 4


class SynthSpecError(ValidationError):
    """
    The exception occurs when a SynthSpec breaks its invariants.
    """
    pass


class ConfigError(ValidationError):
    """
    The exception occurs when a TrainConfig, LossHyper or a config file
    is invalid.
    """
    pass


class NeighborCountError(ValidationError):
    """
    The exception occurs when the number of neighbors m is out of range
    (1 <= m <= n - 1) or larger than a neighbor table holds.
    """
    pass


class GuardError(ValidationError):
    """
    The exception occurs when an input is too large for an operation with
    a size guard (e.g. the brute force evaluator).
    """
    pass


class VocabularyParseError(DataError):
    """
    The exception occurs when a vocabulary line is malformed.
    """
    def __init__(self, path, line_number, msg):
        """
        Parameters
        ----------
        path: str
            A path of the file being parsed.
        line_number: int
            1-based number of the malformed line.
        msg: str
            A message of the exception.
        """
        super(VocabularyParseError, self).__init__(path, line_number, msg)
        self.path = path
        self.line_number = line_number
        self._msg = msg


    def __str__(self):
        return '%s:%d: %s' % (self.path, self.line_number, self._msg)


class EmptyVocabularyError(DataError):
    """
    The exception occurs when a vocabulary has no terms.
    """
    pass


class NoMultiTermConceptError(DataError):
    """
    The exception occurs when anchors are requested but no concept
    has at least two terms.
    """
    pass


class SingletonConceptError(DataError):
    """
    The exception occurs when positives are requested for a term whose
    concept has no other term.
    """
    pass


class EmptySurfaceError(DataError):
    """
    The exception occurs when a surface string is empty.
    """
    def __init__(self, msg, index=None):
        """
        Parameters
        ----------
        msg: str
            A message of the exception.
        index: int
            A position of the surface in a batch (None for single calls).
        """
        super(EmptySurfaceError, self).__init__(msg, index)
        self.index = index
        self._msg = msg


    def __str__(self):
        if self.index is None:
            return self._msg
        return '%s (batch index %d)' % (self._msg, self.index)


class FormatError(DataError):
    """
    The exception occurs when a binary artifact has a wrong magic,
    version or length.
    """
    pass


class SizeMismatchError(DataError):
    """
    The exception occurs when shapes or term counts of inputs disagree.
    """
    pass


class ArtifactIOError(DataError):
    """
    The exception occurs when an input file can not be read or an output
    file can not be written.
    """
    def __init__(self, path, reason):
        """
        Parameters
        ----------
        path: str
            A path of the file.
        reason: str
            A message of the operating system.
        """
        super(ArtifactIOError, self).__init__(path, reason)
        self.path = path
        self.reason = reason


    def __str__(self):
        return '%s: %s' % (self.path, self.reason)


class NonFiniteError(NumericError):
    """
    The exception occurs when an array contains NaN or infinity.
    """
    pass


class ZeroVectorError(NumericError):
    """
    The exception occurs when a cosine is requested for a zero vector.
    """
    pass
