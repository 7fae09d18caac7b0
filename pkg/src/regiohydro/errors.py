"""Exception hierarchy shared across the toolkit."""


class HydroError(Exception):
    """Base class for all toolkit errors."""


class UserError(HydroError):
    """Bad input supplied by the caller (config, files, arguments)."""


# domain grid
class CycleDetected(HydroError):
    def __init__(self, cell):
        self.cell = cell
        super().__init__(f"flow directions contain a cycle through cell {cell}")


class DanglingFlowDirection(HydroError):
    def __init__(self, cell, reason):
        self.cell = cell
        super().__init__(f"cell {cell}: {reason}")


class InactiveCell(HydroError):
    pass


class ConstantDescriptor(HydroError):
    pass


class DimensionMismatch(HydroError):
    pass


class InvalidWeights(HydroError):
    pass


# forward model / objective
class InvalidForcing(HydroError):
    pass


class ZeroVarianceObs(HydroError):
    pass


class LengthMismatch(HydroError):
    pass


class MissingBackground(HydroError):
    pass


class GaugeError(HydroError):
    """An objective error annotated with the offending gauge id."""

    def __init__(self, gauge_id, cause):
        self.gauge_id = gauge_id
        self.cause = cause
        super().__init__(f"gauge {gauge_id}: {cause}")


# mapping
class OutOfOpenInterval(HydroError):
    pass


class PriorOnBound(HydroError):
    def __init__(self, index, value):
        self.index = index
        self.value = value
        super().__init__(
            f"prior component {index} = {value!r} lies on a bound; "
            "the inverse sigmoid has no finite preimage there"
        )


# optimizers
class NonFiniteCost(HydroError):
    pass


class LineSearchFailure(HydroError):
    pass


# bayes
class NonPositiveJmin(HydroError):
    pass


class DegenerateWeights(HydroError):
    pass


class ZeroVarianceComponent(HydroError):
    def __init__(self, components):
        self.components = list(components)
        super().__init__(f"zero posterior variance in components {self.components}")


# experiment
class SpecInvalid(UserError):
    pass


class ConfigError(UserError):
    pass
