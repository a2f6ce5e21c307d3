"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems exit 2, depth-budget
exhaustion exits 3, oracle mismatches exit 4.
"""


class LhecnnError(Exception):
    """Base class for all package errors."""


class ValidationError(LhecnnError):
    """A model configuration, tensor shape, or argument is inconsistent."""


class CapacityError(ValidationError):
    """A packing does not fit into the available ciphertext slots."""


class DepthBudgetError(LhecnnError):
    """A multiplication was attempted with no encryption level left."""

    def __init__(self, message: str, phase: str = ""):
        if phase:
            message = f"{message} (in phase '{phase}')"
        super().__init__(message)
        self.phase = phase


class KeyMismatchError(LhecnnError):
    """Operands of a ciphertext operation were produced under different keys."""


class AuthorizationError(LhecnnError):
    """An operation required secret key material the caller does not hold."""


class MissingCostError(LhecnnError):
    """The cost table has no entry for an (operation, level) pair in the ledger."""


class AttestationError(LhecnnError):
    """Attestation of the trusted environment failed; no keys were released."""

    def __init__(self, message: str, transcript=None, ledger=None):
        super().__init__(message)
        self.transcript = transcript
        self.ledger = ledger


class OracleMismatchError(LhecnnError):
    """Decrypted pipeline outputs disagree with the plaintext reference."""
