"""Exception hierarchy. Everything raised on purpose derives from DescDetError."""


class DescDetError(Exception):
    pass


class ZeroVectorError(DescDetError, ValueError):
    pass


class DimMismatchError(DescDetError, ValueError):
    pass


class EmptyInputError(DescDetError, ValueError):
    pass


class EmptySeedError(DescDetError, ValueError):
    def __init__(self, category):
        super().__init__(f"category {category!r} has no seed descriptors")
        self.category = category


class UnknownCategoryError(DescDetError, KeyError):
    def __init__(self, category, known=()):
        msg = f"unknown category {category!r}"
        if known:
            msg += f"; known: {', '.join(sorted(known))}"
        super().__init__(msg)
        self.category = category

    def __str__(self):
        return self.args[0]


class IndexOutOfRangeError(DescDetError, IndexError):
    pass


class EmptyCategoryError(DescDetError, ValueError):
    pass


class FormatError(DescDetError, ValueError):
    """Malformed persisted file. ``where`` names the line or field at fault."""

    def __init__(self, message, where=None):
        super().__init__(f"{message} (at {where})" if where else message)
        self.where = where


class InvalidBoxError(DescDetError, ValueError):
    pass


class EmptyPayloadError(DescDetError, ValueError):
    pass


class LlmUnavailable(DescDetError, RuntimeError):
    pass


class MissingScript(LlmUnavailable):
    pass


class InvalidSpecError(DescDetError, ValueError):
    pass


class InvalidCategoryError(DescDetError, ValueError):
    pass


class InvalidQueryError(DescDetError, ValueError):
    pass


class ConfigError(DescDetError, ValueError):
    pass
