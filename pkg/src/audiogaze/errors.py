"""Exception types shared across the package."""


class AudioGazeError(Exception):
    """Base class for all package errors."""


class ParseError(AudioGazeError):
    pass


class ValidationError(AudioGazeError, ValueError):
    pass


class TooFewScenes(AudioGazeError, ValueError):
    pass


class ShapeMismatch(AudioGazeError, ValueError):
    pass


class NotScalar(AudioGazeError, ValueError):
    pass


class NegativeDt(AudioGazeError, ValueError):
    pass


class TooFewPoints(AudioGazeError, ValueError):
    pass


class LengthMismatch(AudioGazeError, ValueError):
    pass


class EmptySequence(AudioGazeError, ValueError):
    pass


class NonMonotonicTime(AudioGazeError, ValueError):
    pass


class DivergedLoss(AudioGazeError, RuntimeError):
    def __init__(self, scene_id, value):
        super().__init__(f"non-finite loss {value!r} on scene {scene_id!r}")
        self.scene_id = scene_id
        self.value = value


class ConfigError(AudioGazeError, ValueError):
    pass
