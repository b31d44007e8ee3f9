"""
Exception hierarchy for camfit
"""


class CamfitError(Exception):
    """Base class for every error raised by camfit"""

    kind = "internal"
    exit_code = 2


class InputError(CamfitError):
    """Bad arguments, missing files or inconsistent inputs"""

    kind = "input"
    exit_code = 1


class FormatError(InputError):
    """A file on disk does not follow its container format"""

    kind = "format"


class ConfigError(InputError):
    """Run configuration rejected (unknown key or invalid value)"""

    kind = "config"


class GeometryError(InputError):
    """Invalid geometric input: behind-camera points, nonpositive depth, bad ranges"""

    kind = "geometry"


class SceneError(InputError):
    """Synthetic scene specification cannot be rendered"""

    kind = "scene"


class NumericalError(CamfitError):
    """Non-finite losses or diverging optimizations"""

    kind = "numerical"
    exit_code = 2
