class EmNetError(Exception):
    pass


class ShapeError(EmNetError, ValueError):
    """Operand shapes are incompatible; the message names the offending axes."""


class ConfigError(EmNetError, ValueError):
    pass


class DegenerateComponentError(EmNetError):
    """An EM component received zero total responsibility.

    ``components`` lists the empty component indices and ``partial`` holds
    the re-estimated bases with the degenerate rows left unchanged.
    """

    def __init__(self, components, partial=None):
        self.components = list(components)
        self.partial = partial
        super().__init__(f"degenerate EM components (empty clusters): {self.components}")


class ManifestError(EmNetError, ValueError):
    pass


class CheckpointError(EmNetError, ValueError):
    pass


class TrainingDivergedError(EmNetError, RuntimeError):
    pass
