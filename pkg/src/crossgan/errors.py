"""Exception hierarchy shared by every stage of the pipeline."""


class CrossGanError(Exception):
    pass


class ConfigurationError(CrossGanError, ValueError):
    """Invalid configuration, missing inputs or a mismatched checkpoint."""


class ShapeError(CrossGanError, ValueError):
    pass


class DegenerateVideoError(CrossGanError, ValueError):
    """Video too short to form a frame pair."""


class GroundTruthMissingError(CrossGanError):
    pass


class FlowFormatError(CrossGanError, ValueError):
    pass


class NumericError(CrossGanError, ArithmeticError):
    pass


class UndefinedMetricError(CrossGanError, ValueError):
    """ROC quantities need both classes to be present."""


class TrainingDivergenceError(CrossGanError, RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
