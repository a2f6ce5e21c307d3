"""Packed leveled-HE CNN inference and training over a pluggable SIMD
ciphertext backend, with exact-arithmetic simulation and per-level operation
accounting."""

from .errors import (
    AttestationError,
    AuthorizationError,
    CapacityError,
    DepthBudgetError,
    KeyMismatchError,
    LhecnnError,
    MissingCostError,
    OracleMismatchError,
    ValidationError,
)
from .geometry import (
    ConvLayer,
    FcLayer,
    ModelConfig,
    PackingPlan,
    compute_packing_factor,
    derive_combined_params,
    derive_output_grid,
    validate_model,
)
from .he import Ciphertext, ExactBackend, HeBackend, KeyMaterial
from .ledger import CostTable, OpLedger, estimate_time_us, render_csv, render_text
from .oracle import PlainModel, finite_diff_grad, plain_backward, plain_forward
from .packing import (
    ActivationGrid,
    EncryptedModel,
    encrypt_model,
    pack_inputs,
    pack_inputs_for_plan,
    unpack_outputs,
)
from .forward import infer, run_forward
from .backward import train_step
from .protocol import SessionResult, Tee, run_session

__all__ = [
    "ActivationGrid", "AttestationError", "AuthorizationError", "CapacityError",
    "Ciphertext", "ConvLayer", "CostTable", "DepthBudgetError", "EncryptedModel",
    "ExactBackend", "FcLayer", "HeBackend", "KeyMaterial", "KeyMismatchError",
    "LhecnnError", "MissingCostError", "ModelConfig", "OpLedger",
    "OracleMismatchError", "PackingPlan", "PlainModel", "SessionResult", "Tee",
    "ValidationError", "compute_packing_factor", "derive_combined_params",
    "derive_output_grid", "encrypt_model", "estimate_time_us",
    "finite_diff_grad", "infer", "pack_inputs", "pack_inputs_for_plan",
    "plain_backward", "plain_forward", "render_csv", "render_text",
    "run_forward", "run_session", "train_step", "unpack_outputs",
    "validate_model",
]

__version__ = "0.1.0"
