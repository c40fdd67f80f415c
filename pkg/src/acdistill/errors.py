class ShapeMismatchError(ValueError):
    pass


class StepRangeError(ValueError):
    pass


class NumericalHealthError(ArithmeticError):
    """Raised when a tensor or loss that must be finite is not."""


class FrozenTeacherError(RuntimeError):
    pass


def check_finite(x, what: str) -> None:
    import torch

    if not bool(torch.isfinite(x).all()):
        raise NumericalHealthError(f"non-finite values in {what}")
