"""In-process simulation of the four-party outsourcing framework.

Model provider, data provider, TEE, and REE run in one process with explicit
message records. The TEE generates the session keys, holds the only secret
handle, and touches ciphertexts exactly three ways: decrypting final results,
refreshing during weight updates, and producing the final-layer training
gradient. The REE executes all homomorphic computation with a public handle
and cannot decrypt. Attestation is a stub with fault injection.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .backward import train_step
from .errors import AttestationError, AuthorizationError, LhecnnError
from .forward import infer
from .geometry import TYPE_I, TYPE_II, ModelConfig, PackingPlan, validate_model
from .he import ExactBackend
from .ledger import OpLedger
from .packing import (
    ActivationGrid,
    EncryptedModel,
    FC_TYPE1,
    FC_TYPE2,
    encrypt_model,
    pack_inputs_for_plan,
    unpack_outputs,
)

MODEL_PROVIDER = "ModelProvider"
DATA_PROVIDER = "DataProvider"
TEE = "TEE"
REE = "REE"


@dataclass
class TranscriptEntry:
    step: int
    sender: str
    receiver: str
    kind: str
    size: int = 0

    def format(self) -> str:
        return (f"step={self.step} from={self.sender} to={self.receiver} "
                f"kind={self.kind} bytes={self.size}")


@dataclass
class SessionTranscript:
    entries: list = field(default_factory=list)

    def add(self, step, sender, receiver, kind, size=0):
        if self.entries and step < self.entries[-1].step:
            raise LhecnnError("transcript steps must be non-decreasing")
        self.entries.append(TranscriptEntry(step, sender, receiver, kind, size))

    def format_lines(self) -> list[str]:
        return [e.format() for e in self.entries]


@dataclass
class WrappedResult:
    """Result re-encrypted under the data provider's token (opaque wrap)."""

    token: str
    payload: np.ndarray

    def unwrap(self, token: str) -> np.ndarray:
        if token != self.token:
            raise AuthorizationError("wrong token for the wrapped result")
        return self.payload.copy()


class Tee:
    """Trusted side of the session: key custody plus decrypt/re-encrypt
    services. Requests are served one at a time; ``refresh_counts`` records
    how often each service ran, keyed by reason."""

    def __init__(self, backend: ExactBackend, security: int = 128):
        self._backend = backend
        self._security = security
        self._keys = None
        self.refresh_counts: Counter = Counter()

    def provision(self, levels: int, slot_count: int):
        self._keys = self._backend.keygen(self._security, levels, slot_count)
        return self._keys.public()

    @property
    def public_keys(self):
        return self._keys.public()

    def refresh(self, ct, ledger: OpLedger, reason: str = "weight-update"):
        """Decrypt-and-re-encrypt: same payload at a fresh level."""
        self.refresh_counts[reason] += 1
        with ledger.phase("TEE-Refresh"):
            payload = self._backend.decrypt(ct, self._keys, ledger)
            return self._backend.encrypt(payload, self._keys, ledger)

    def decrypt_result(self, grid: ActivationGrid, plan: PackingPlan,
                       ledger: OpLedger) -> np.ndarray:
        self.refresh_counts["result-decrypt"] += 1
        with ledger.phase("TEE-Result"):
            return unpack_outputs(grid, plan, self._backend, self._keys, ledger)

    def final_gradient(self, grid: ActivationGrid, labels, plan: PackingPlan,
                       ledger: OpLedger) -> list:
        """Mean-squared-error gradient of the final layer, computed in
        plaintext and re-encrypted in the final layer's output layout."""
        self.refresh_counts["final-gradient"] += 1
        labels = np.asarray(labels, dtype=np.float64)
        fcp = plan.fc[-1]
        n = plan.n
        if labels.shape != (n, fcp.out_neurons):
            raise LhecnnError(
                f"labels must have shape {(n, fcp.out_neurons)}, got {labels.shape}")
        with ledger.phase("TEE-FinalGrad"):
            logits = unpack_outputs(grid, plan, self._backend, self._keys, ledger)
            g = 2.0 * (logits - labels) / n
            cts = []
            if fcp.fc_type == TYPE_II:
                per_ct = plan.slot_count // n
                for i in range(fcp.output_ct_count):
                    vec = np.zeros(plan.slot_count)
                    for w_local in range(per_ct):
                        w = i * per_ct + w_local
                        if w >= fcp.out_neurons:
                            break
                        vec[w_local * n:(w_local + 1) * n] = g[:, w]
                    cts.append(self._backend.encrypt(vec, self._keys, ledger))
            else:
                reps = plan.slot_count // n
                for w in range(fcp.out_neurons):
                    vec = np.tile(g[:, w], reps)
                    cts.append(self._backend.encrypt(vec, self._keys, ledger))
            return cts

    def wrap_result(self, logits: np.ndarray, token: str) -> WrappedResult:
        return WrappedResult(token=token, payload=np.asarray(logits).copy())

    def export_model(self, enc_model: EncryptedModel, plan: PackingPlan):
        """Decrypt a packed model back to plaintext tensors (session owner's
        exit path for updated weights)."""
        from .packing import decrypt_model

        return decrypt_model(enc_model, plan, self._backend, self._keys)


@dataclass
class SessionResult:
    logits: np.ndarray
    transcript: SessionTranscript
    ledger: OpLedger
    plan: PackingPlan
    tee: Tee
    encrypted_model: EncryptedModel
    updated_model: EncryptedModel | None = None
    backend: ExactBackend | None = None


def _ct_bytes(count: int, slot_count: int) -> int:
    return count * slot_count * 8


def run_session(plain_model, config: ModelConfig, batch, labels=None, *,
                eta: float = 0.01, activations: bool = True,
                packing: str = "auto", workers: int = 1, seed: int = 0,
                fail_model_attestation: bool = False,
                fail_data_attestation: bool = False) -> SessionResult:
    """Execute the ten-step session: attestations, key provisioning, model and
    data upload, REE inference (plus a training step when labels are given),
    and result return through the TEE."""
    plan = validate_model(config, packing)
    ledger = OpLedger()
    transcript = SessionTranscript()
    backend = ExactBackend(key_prefix=f"session{seed}")
    tee = Tee(backend)
    S = plan.slot_count

    step = 0
    try:
        step = 1
        if fail_model_attestation:
            raise AttestationError("model provider attestation failed",
                                   transcript=transcript, ledger=ledger)
        transcript.add(1, MODEL_PROVIDER, TEE, "attest+model-secret+hyperparams")

        step = 2
        public = tee.provision(plan.levels, S)
        transcript.add(2, TEE, MODEL_PROVIDER, "public-key")

        step = 3
        enc_model = encrypt_model(plain_model, plan, backend, public, ledger)
        model_cts = ledger.totals()["enc"]
        transcript.add(3, MODEL_PROVIDER, REE, "encrypted-model",
                       _ct_bytes(model_cts, S))

        step = 4
        transcript.add(4, TEE, REE, "public+eval-keys")

        step = 5
        if fail_data_attestation:
            raise AttestationError("data provider attestation failed",
                                   transcript=transcript, ledger=ledger)
        data_token = f"data-token-{seed}"
        transcript.add(5, DATA_PROVIDER, TEE, "attest+data-secret")

        step = 6
        transcript.add(6, TEE, DATA_PROVIDER, "public-key")

        step = 7
        with ledger.phase("Enc.Inputs"):
            input_grid = pack_inputs_for_plan(batch, plan, backend, public, ledger)
        input_cts = len(input_grid.flat())
        transcript.add(7, DATA_PROVIDER, REE, "encrypted-inputs",
                       _ct_bytes(input_cts, S))

        step = 8
        final = infer(enc_model, input_grid, plan, backend, ledger,
                      activations=activations, workers=workers)
        updated = None
        if labels is not None:
            with ledger.phase("train"):
                updated, _ = train_step(enc_model, input_grid, labels, plan,
                                        backend, ledger, tee, eta=eta,
                                        activations=activations, workers=workers)
        transcript.add(8, REE, TEE, "inference-result",
                       _ct_bytes(len(final.cts), S))

        step = 9
        logits = tee.decrypt_result(final, plan, ledger)
        wrapped = tee.wrap_result(logits, data_token)
        transcript.add(9, TEE, DATA_PROVIDER, "wrapped-result",
                       wrapped.payload.nbytes)

        step = 10
        result = wrapped.unwrap(data_token)
        transcript.add(10, DATA_PROVIDER, DATA_PROVIDER, "decrypt-result")
    except AttestationError:
        raise
    except LhecnnError as exc:
        exc.args = (f"protocol step {step}: {exc.args[0]}",) + exc.args[1:]
        raise

    return SessionResult(logits=result, transcript=transcript, ledger=ledger,
                         plan=plan, tee=tee, encrypted_model=enc_model,
                         updated_model=updated, backend=backend)


def ree_handle(session: SessionResult):
    """The key handle the REE holds: public material only."""
    return session.tee.public_keys
