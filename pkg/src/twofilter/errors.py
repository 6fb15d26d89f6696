"""Exception hierarchy shared by every stage of the estimation pipeline."""


class TwoFilterError(Exception):
    """Base class for all errors raised by :mod:`twofilter`."""


class NotHurwitz(TwoFilterError):
    pass


class NotSchurStable(TwoFilterError):
    pass


class NotSPD(TwoFilterError):
    pass


class Indefinite(TwoFilterError):
    pass


class Singular(TwoFilterError):
    pass


class OffGrid(TwoFilterError):
    pass


class NonFinite(TwoFilterError):
    pass


class NotBalanced(TwoFilterError):
    pass


class PatternMismatch(TwoFilterError):
    pass


class ConfigError(TwoFilterError):
    """Invalid run configuration; ``field`` names the offending entry."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class MissingInput(TwoFilterError):
    """A pipeline stage needs a file that an earlier stage should have written."""

    def __init__(self, path):
        self.path = path
        super().__init__(f"missing input file: {path}")
