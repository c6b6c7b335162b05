"""Error types shared across the package."""


class FormatError(Exception):
    """A file or byte stream does not conform to an expected format."""
