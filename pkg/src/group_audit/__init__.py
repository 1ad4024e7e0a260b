"""Group-importance audits of risk-adjustment payment formulas."""

from .domain import (AuditConfig, FormulaProfile, GroupSignature, GroupStats, MARKETPLACES, MEDICARE,
                     Panel, PersonYear, canonicalize)

__all__ = ["AuditConfig", "FormulaProfile", "GroupSignature", "GroupStats", "MARKETPLACES",
           "MEDICARE", "Panel", "PersonYear", "canonicalize"]
__version__ = "0.1.0"
