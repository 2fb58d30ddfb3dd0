"""Exception hierarchy shared by every module."""


class RankfxError(Exception):
    """Base class for all errors raised by rankfx."""


# datamodel
class MissingColumn(RankfxError):
    pass


class TypeViolation(RankfxError):
    def __init__(self, message, rows=()):
        super().__init__(message)
        self.rows = list(rows)


class DuplicateCell(RankfxError):
    pass


class EmptySelection(RankfxError):
    pass


class EmptySlice(RankfxError):
    pass


# simulate
class ConfigInvalid(RankfxError):
    pass


class NotSimulated(RankfxError):
    pass


# ranking
class SingletonClass(RankfxError):
    pass


class EmptyScores(RankfxError):
    pass


# hdfe
class AllRowsDropped(RankfxError):
    pass


class NoConvergence(RankfxError):
    pass


class RankDeficientFocal(RankfxError):
    pass


# specs
class TooFewClasses(RankfxError):
    pass


class MissingRanks(RankfxError):
    pass


class MissingGroups(RankfxError):
    pass


class FeNotRecovered(RankfxError):
    pass


# analysis
class MissingGrade2(RankfxError):
    pass


class MethodInfeasible(RankfxError):
    pass


class EmptySubset(RankfxError):
    pass


class IoFailure(RankfxError):
    pass
