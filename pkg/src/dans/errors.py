"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        detail = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class ParseError(ValueError):
    """A dataset file line could not be parsed."""

    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = str(path)
        self.line_no = line_no


class DataError(ValueError):
    """A dataset is structurally unusable (empty split, too few entities...)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class TrainingDiverged(RuntimeError):
    """A loss became NaN; carries the step index where it happened."""

    def __init__(self, step: int, which: str):
        super().__init__(f"non-finite {which} loss at step {step}")
        self.step = step
        self.which = which
