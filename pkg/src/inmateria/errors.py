"""Exception types shared across the pipeline."""


class InmateriaError(Exception):
    pass


class EmptyAfterTrim(InmateriaError):
    pass


class AllZero(InmateriaError):
    pass


class UnsupportedEncoding(InmateriaError):
    pass


class MalformedWav(InmateriaError):
    pass


class EmptyClass(InmateriaError):
    pass


class StepTooLarge(InmateriaError):
    pass


class NoSettle(InmateriaError):
    pass


class SchemaMismatch(InmateriaError):
    pass


class ShapeError(InmateriaError):
    pass


class Divergence(InmateriaError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"loss diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


class ConfigError(InmateriaError):
    pass


class MissingArtifact(InmateriaError):
    pass


class HashMismatch(InmateriaError):
    pass
