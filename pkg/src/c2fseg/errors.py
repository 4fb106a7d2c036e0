"""Error taxonomy shared across the package.

Each class maps onto one CLI exit code so that failures stay
machine-distinguishable end to end:

* ``UsageError``      -> exit 2 (bad flags / inconsistent options)
* ``DataFormatError`` -> exit 3 (corrupt or mismatched files on disk)
* ``NumericsError``   -> exit 4 (NaN/Inf or an ill-posed numeric request)
"""


class UsageError(ValueError):
    pass


class DataFormatError(RuntimeError):
    pass


class NumericsError(RuntimeError):
    pass
