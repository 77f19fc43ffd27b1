"""Exception hierarchy.

``UserError`` subclasses map to exit code 2 on the command line; everything
else deriving from ``LabError`` is treated as an internal failure.
"""


class LabError(Exception):
    pass


class UserError(LabError, ValueError):
    """Bad input or configuration supplied by the caller."""


class ZeroVector(LabError, ValueError):
    pass


class EmptyText(UserError):
    pass


class DimMismatch(LabError, ValueError):
    pass


class ShapeMismatch(LabError, ValueError):
    pass


class StaleCache(LabError, RuntimeError):
    pass


class LabelRange(UserError):
    pass


class InconsistentK(UserError):
    pass


class NoPositive(UserError):
    pass


class AllZeroRow(UserError):
    pass


class NeedsHardNegatives(UserError):
    pass


class NoOrderedPairs(UserError):
    pass


class BadDistribution(UserError):
    pass


class ParseError(UserError):
    def __init__(self, line_no, msg=""):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {msg}" if msg else f"line {line_no}")


class MixedSchema(ParseError):
    pass


class NeedsBinary(UserError):
    pass


class NeedsOneNegative(UserError):
    pass


class NotEnoughNegatives(UserError):
    pass


class EmptyDataset(UserError):
    pass


class EmptyResult(UserError):
    pass


class ConfigInvalid(UserError):
    pass


class NonFiniteGrad(LabError, FloatingPointError):
    pass


class EmptyCorpus(UserError):
    pass
