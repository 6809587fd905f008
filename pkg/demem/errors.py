"""Exception types shared across demem."""


class NumericalError(FloatingPointError):
    """A loss, parameter or latent became non-finite."""


class FormatVersionError(ValueError):
    """An artifact was written with a format version this build cannot read."""
