"""Dissipative one-axis-twist sensing toolkit."""

from .params import (EffectiveRates, PhysicalParams, SchemeKind, ValidityWarning, WorkingPoint,
                     rates_from_physical, rates_from_working_point, scheme_rates)

__all__ = ["EffectiveRates", "PhysicalParams", "SchemeKind", "ValidityWarning", "WorkingPoint",
           "rates_from_physical", "rates_from_working_point", "scheme_rates"]
__version__ = "0.1.0"
