#!/usr/bin/env python3
"""
Exception types raised by the LSE library.

Library code raises these; the service wrappers translate them into
``{"status": "error", ...}`` results and the CLI into exit codes.
"""


class LseError(Exception):
    """Base class for every LSE error"""

    kind = "runtime"

    def __init__(self, message, contract=None, diagnostics=None):
        super().__init__(message)
        self.contract = contract
        self.diagnostics = diagnostics or {}

    def as_dict(self):
        result = {"status": "error", "kind": self.kind, "message": str(self)}
        if self.contract:
            result["contract"] = self.contract
        if self.diagnostics:
            result["diagnostics"] = self.diagnostics
        return result


class ValidationError(LseError, ValueError):
    """Input violates a documented invariant or precondition"""

    kind = "validation"


class MatrixFormatError(ValidationError):
    """A matrix file could not be decoded"""

    def __init__(self, message, path=None, location=None):
        where = []
        if path is not None:
            where.append(str(path))
        if location is not None:
            where.append(str(location))
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message, contract="matrix-format")
        self.path = path
        self.location = location


class NumericalError(LseError, ArithmeticError):
    """A linear-algebra step failed (singular system, no convergence)"""

    kind = "numerical"
