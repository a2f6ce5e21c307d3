"""Slot encodings for inputs, filters, and dense weight matrices.

The packing discipline: n parallel inputs occupy n consecutive slots (a
pi-set); a ciphertext carries one pi-set per output-grid position, row-major;
replica or channel-group blocks sit at a fixed block stride. Unused slots are
always exactly zero, which the propagation algorithms rely on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ValidationError
from .geometry import (
    BASELINE,
    CROSS_CHANNEL,
    CROSS_FILTER,
    TYPE_I,
    TYPE_II,
    PackingPlan,
)

CONV = "conv"
FC_TYPE1 = "fc_type1"      # tight pi-sets, no replication
FC_TYPE2 = "fc_type2"      # one pi-set replicated S/n times per ciphertext


@dataclass
class ActivationGrid:
    """Ciphertexts for one layer boundary.

    Conv grids index ``cts[group][u][v]``; dense grids hold a flat ciphertext
    list. ``replicated`` marks conv grids whose ciphertexts carry the packing
    factor's worth of identical replica blocks.
    """

    kind: str
    cts: list
    replicated: bool = False

    def flat(self) -> list:
        if self.kind != CONV:
            return list(self.cts)
        return [ct for grid in self.cts for row in grid for ct in row]


@dataclass
class EncryptedModel:
    """Packed model parameters: filter banks indexed [k][i][x][y] per conv
    layer and weight ciphertexts indexed [i][j] per dense layer."""

    conv: list = field(default_factory=list)
    fc: list = field(default_factory=list)


def _batch_array(batch, config) -> np.ndarray:
    arr = np.asarray(batch, dtype=np.float64)
    channels = config.conv[0].channels if config.conv else 1
    expect = (config.n, channels, config.input_side, config.input_side)
    if arr.shape != expect:
        raise ValidationError(f"input batch must have shape {expect}, got {arr.shape}")
    return arr


def _window_vector(image_stack: np.ndarray, u: int, v: int, side: int,
                   stride: int) -> np.ndarray:
    """Pi-set payload for grid anchor (u, v): values at (u + a*stride,
    v + b*stride) over the side x side output grid, inputs innermost."""
    stop_u = u + stride * (side - 1) + 1
    stop_v = v + stride * (side - 1) + 1
    window = image_stack[:, u:stop_u:stride, v:stop_v:stride]
    return np.transpose(window, (1, 2, 0)).ravel()


# -- input packing -----------------------------------------------------------


def pack_inputs(batch, plan: PackingPlan, backend, keys, ledger=None) -> ActivationGrid:
    """Baseline layout: one ciphertext per (channel, u, v) grid anchor."""
    config = plan.config
    arr = _batch_array(batch, config)
    side = plan.output_grid_side
    g0, d0 = plan.combined[0]
    used = plan.n * side * side
    if used > plan.slot_count:
        raise CapacityError(f"{used} used slots exceed {plan.slot_count}")
    grids = []
    for i in range(config.conv[0].channels):
        grid = []
        for u in range(g0):
            row = []
            for v in range(g0):
                vec = np.zeros(plan.slot_count)
                vec[:used] = _window_vector(arr[:, i], u, v, side, d0)
                row.append(backend.encrypt(vec, keys, ledger))
            grid.append(row)
        grids.append(grid)
    return ActivationGrid(kind=CONV, cts=grids)


def pack_inputs_cross_channel(batch, plan: PackingPlan, backend, keys,
                              ledger=None) -> ActivationGrid:
    """Group channels r at a time; block b of group g holds channel g*r+b."""
    config = plan.config
    arr = _batch_array(batch, config)
    side = plan.output_grid_side
    g0, d0 = plan.combined[0]
    r = plan.pack_factor
    used = plan.n * side * side
    channels = config.conv[0].channels
    groups = -(-channels // r)
    grids = []
    for g in range(groups):
        grid = []
        for u in range(g0):
            row = []
            for v in range(g0):
                vec = np.zeros(plan.slot_count)
                for b in range(r):
                    ch = g * r + b
                    if ch >= channels:
                        break
                    base = b * plan.block_stride
                    vec[base:base + used] = _window_vector(arr[:, ch], u, v, side, d0)
                row.append(backend.encrypt(vec, keys, ledger))
            grid.append(row)
        grids.append(grid)
    return ActivationGrid(kind=CONV, cts=grids)


def pack_inputs_replicated(batch, plan: PackingPlan, backend, keys,
                           ledger=None) -> ActivationGrid:
    """r identical replicas of the baseline payload, for cross-filter layers."""
    config = plan.config
    arr = _batch_array(batch, config)
    side = plan.output_grid_side
    g0, d0 = plan.combined[0]
    used = plan.n * side * side
    grids = []
    for i in range(config.conv[0].channels):
        grid = []
        for u in range(g0):
            row = []
            for v in range(g0):
                vec = np.zeros(plan.slot_count)
                payload = _window_vector(arr[:, i], u, v, side, d0)
                for b in range(plan.pack_factor):
                    base = b * plan.block_stride
                    vec[base:base + used] = payload
                row.append(backend.encrypt(vec, keys, ledger))
            grid.append(row)
        grids.append(grid)
    return ActivationGrid(kind=CONV, cts=grids, replicated=True)


def pack_inputs_flat(batch, plan: PackingPlan, backend, keys,
                     ledger=None) -> ActivationGrid:
    """No conv stack: flatten each input into tight pi-sets for the dense path."""
    config = plan.config
    arr = _batch_array(batch, config)
    layout = plan.fc[0].input_layout
    ct_count = plan.fc[0].input_ct_count
    flat = arr.reshape(plan.n, -1)
    pisets = flat.shape[1]
    cts = []
    for j in range(ct_count):
        vec = np.zeros(plan.slot_count)
        for k in range(layout.capacity):
            w = j * layout.capacity + k
            if w >= pisets:
                break
            base = layout.slot_base(k)
            vec[base:base + plan.n] = flat[:, w]
        cts.append(backend.encrypt(vec, keys, ledger))
    return ActivationGrid(kind=FC_TYPE1, cts=cts)


def pack_inputs_for_plan(batch, plan: PackingPlan, backend, keys,
                         ledger=None) -> ActivationGrid:
    if not plan.config.conv:
        return pack_inputs_flat(batch, plan, backend, keys, ledger)
    mode = plan.conv_modes[0]
    if mode == BASELINE:
        return pack_inputs(batch, plan, backend, keys, ledger)
    if mode == CROSS_CHANNEL:
        return pack_inputs_cross_channel(batch, plan, backend, keys, ledger)
    return pack_inputs_replicated(batch, plan, backend, keys, ledger)


# -- filter packing ----------------------------------------------------------


def _constant_blocks(plan: PackingPlan, values: list[float]) -> np.ndarray:
    """One constant per block, each filling the n * grid^2 used slots."""
    side = plan.output_grid_side
    used = plan.n * side * side
    vec = np.zeros(plan.slot_count)
    for b, val in enumerate(values):
        base = b * plan.block_stride
        vec[base:base + used] = val
    return vec


def pack_filters(filters, plan: PackingPlan, layer: int, backend, keys,
                 ledger=None) -> list:
    """Encrypt one conv layer's filter bank for its packing mode.

    Baseline: [filter][channel][x][y], each element replicated over the used
    slots. Cross-channel: channels grouped r at a time into the blocks of one
    ciphertext. Cross-filter: filters grouped r at a time.
    """
    cl = plan.config.conv[layer]
    arr = np.asarray(filters, dtype=np.float64)
    expect = (cl.filters, cl.channels, cl.kernel, cl.kernel)
    if arr.shape != expect:
        raise ValidationError(
            f"conv layer {layer + 1} filters must have shape {expect}, got {arr.shape}"
        )
    mode = plan.conv_modes[layer]
    r = plan.pack_factor
    bank = []
    if mode == BASELINE:
        for k in range(cl.filters):
            per_channel = []
            for i in range(cl.channels):
                rows = [[backend.encrypt(_constant_blocks(plan, [arr[k, i, x, y]]),
                                         keys, ledger)
                         for y in range(cl.kernel)] for x in range(cl.kernel)]
                per_channel.append(rows)
            bank.append(per_channel)
    elif mode == CROSS_CHANNEL:
        groups = -(-cl.channels // r)
        for k in range(cl.filters):
            per_group = []
            for g in range(groups):
                chans = [arr[k, g * r + b, :, :] if g * r + b < cl.channels else None
                         for b in range(r)]
                rows = [[backend.encrypt(
                            _constant_blocks(plan, [0.0 if ch is None else ch[x, y]
                                                    for ch in chans]),
                            keys, ledger)
                         for y in range(cl.kernel)] for x in range(cl.kernel)]
                per_group.append(rows)
            bank.append(per_group)
    elif mode == CROSS_FILTER:
        groups = -(-cl.filters // r)
        for kg in range(groups):
            per_channel = []
            filts = [arr[kg * r + b] if kg * r + b < cl.filters else None
                     for b in range(r)]
            for i in range(cl.channels):
                rows = [[backend.encrypt(
                            _constant_blocks(plan, [0.0 if f is None else f[i, x, y]
                                                    for f in filts]),
                            keys, ledger)
                         for y in range(cl.kernel)] for x in range(cl.kernel)]
                per_channel.append(rows)
            bank.append(per_channel)
    else:
        raise ValidationError(f"unknown conv mode {mode!r}")
    return bank


# -- dense weight packing ----------------------------------------------------


def pack_fc_weights_type1(matrix, plan: PackingPlan, layer: int, backend, keys,
                          ledger=None) -> list:
    """Weights for a multi-pi-set input layer: ciphertext (i, j) carries row
    i's coefficients for the pi-sets ciphertext j holds, each value
    replicated n times at its pi-set's slots."""
    fcp = plan.fc[layer]
    if fcp.fc_type != TYPE_I:
        raise ValidationError(f"fc layer {layer + 1} is not a Type I layer")
    M = np.asarray(matrix, dtype=np.float64)
    if M.shape != (fcp.out_neurons, fcp.in_neurons):
        raise ValidationError(
            f"fc layer {layer + 1} weights must have shape "
            f"{(fcp.out_neurons, fcp.in_neurons)}, got {M.shape}"
        )
    layout = fcp.input_layout
    n = plan.n
    weights = []
    for i in range(fcp.out_neurons):
        row = []
        for j in range(fcp.input_ct_count):
            vec = np.zeros(plan.slot_count)
            for k in range(layout.capacity):
                w = j * layout.capacity + k
                if w >= fcp.in_neurons:
                    continue
                base = layout.slot_base(k)
                vec[base:base + n] = M[i, w]
            row.append(backend.encrypt(vec, keys, ledger))
        weights.append(row)
    return weights


def pack_fc_weights_type2(matrix, plan: PackingPlan, layer: int, backend, keys,
                          ledger=None) -> list:
    """Weights for a replicated-input layer: ciphertext (i, j) carries, in
    block w - i*(S/n), the coefficient connecting input j to output w."""
    fcp = plan.fc[layer]
    if fcp.fc_type != TYPE_II:
        raise ValidationError(f"fc layer {layer + 1} is not a Type II layer")
    M = np.asarray(matrix, dtype=np.float64)
    if M.shape != (fcp.out_neurons, fcp.in_neurons):
        raise ValidationError(
            f"fc layer {layer + 1} weights must have shape "
            f"{(fcp.out_neurons, fcp.in_neurons)}, got {M.shape}"
        )
    n = plan.n
    per_ct = plan.slot_count // n
    weights = []
    for i in range(fcp.output_ct_count):
        row = []
        for j in range(fcp.in_neurons):
            vec = np.zeros(plan.slot_count)
            for w_local in range(per_ct):
                w = i * per_ct + w_local
                if w >= fcp.out_neurons:
                    break
                vec[w_local * n:(w_local + 1) * n] = M[w, j]
            row.append(backend.encrypt(vec, keys, ledger))
        weights.append(row)
    return weights


def encrypt_model(model, plan: PackingPlan, backend, keys, ledger=None) -> EncryptedModel:
    """Pack and encrypt every parameter tensor, phase-labelled per layer."""
    from contextlib import nullcontext

    def ph(label):
        return ledger.phase(label) if ledger is not None else nullcontext()

    enc = EncryptedModel()
    for l, filt in enumerate(model.conv):
        with ph(f"Enc.Filters.CL{l + 1}"):
            enc.conv.append(pack_filters(filt, plan, l, backend, keys, ledger))
    for l, M in enumerate(model.fc):
        with ph(f"Enc.Weights.FL{l + 1}"):
            if plan.fc[l].fc_type == TYPE_I:
                enc.fc.append(pack_fc_weights_type1(M, plan, l, backend, keys, ledger))
            else:
                enc.fc.append(pack_fc_weights_type2(M, plan, l, backend, keys, ledger))
    return enc


# -- output decoding ---------------------------------------------------------


def unpack_outputs(grid: ActivationGrid, plan: PackingPlan, backend, keys,
                   ledger=None) -> np.ndarray:
    """Read the documented slot positions of the final layer into an
    (n, out_neurons) array of per-input logits."""
    fcp = plan.fc[-1]
    n = plan.n
    logits = np.zeros((n, fcp.out_neurons))
    if fcp.fc_type == TYPE_II:
        per_ct = plan.slot_count // n
        payloads = [backend.decrypt(ct, keys, ledger) for ct in grid.cts]
        for w in range(fcp.out_neurons):
            block = w % per_ct
            vals = payloads[w // per_ct][block * n:(block + 1) * n]
            logits[:, w] = vals
    else:
        for w in range(fcp.out_neurons):
            logits[:, w] = backend.decrypt(grid.cts[w], keys, ledger)[:n]
    return logits


# -- decoders used by tests and by the TEE-side gradient packing -------------


def decode_input_packing(grid: ActivationGrid, plan: PackingPlan, backend, keys):
    """Inverse of pack_inputs: values[(i, u, v)][a, b, t]."""
    side = plan.output_grid_side
    n = plan.n
    out = {}
    for i, g in enumerate(grid.cts):
        for u, row in enumerate(g):
            for v, ct in enumerate(row):
                payload = backend.decrypt(ct, keys)
                used = payload[:n * side * side]
                out[(i, u, v)] = used.reshape(side, side, n)
    return out


def decode_conv_outputs(grid: ActivationGrid, plan: PackingPlan, backend, keys) -> np.ndarray:
    """Final conv-stack outputs as an (n, filters, side, side) array.

    Handles the three packing modes; replica blocks are read once, distinct
    filter blocks are split apart.
    """
    side = plan.output_grid_side
    n = plan.n
    last = plan.config.conv[-1]
    mode = plan.conv_modes[-1]
    out = np.zeros((n, last.filters, side, side))
    if mode == CROSS_FILTER:
        r = plan.pack_factor
        for kg, g in enumerate(grid.cts):
            payload = backend.decrypt(g[0][0], keys)
            for b in range(r):
                k = kg * r + b
                if k >= last.filters:
                    break
                base = b * plan.block_stride
                used = payload[base:base + n * side * side]
                out[:, k] = np.transpose(used.reshape(side, side, n), (2, 0, 1))
    else:
        for k, g in enumerate(grid.cts):
            payload = backend.decrypt(g[0][0], keys)
            used = payload[:n * side * side]
            out[:, k] = np.transpose(used.reshape(side, side, n), (2, 0, 1))
    return out


def decode_fc_pisets(cts, layout, count, n, backend, keys) -> np.ndarray:
    """Pi-set values of a Type I grid as a (count, n) array."""
    out = np.zeros((count, n))
    per_ct = layout.capacity
    payloads = [backend.decrypt(ct, keys) for ct in cts]
    for w in range(count):
        base = layout.slot_base(w % per_ct)
        out[w] = payloads[w // per_ct][base:base + n]
    return out


def decode_replicated(cts, n, backend, keys) -> np.ndarray:
    """First pi-set of each replicated ciphertext as a (len(cts), n) array."""
    return np.stack([backend.decrypt(ct, keys)[:n] for ct in cts])


def decode_input_gradient(grid: ActivationGrid, plan: PackingPlan, backend,
                          keys) -> np.ndarray:
    """Adjoint of pack_inputs: slot gradients summed back onto the pixels
    they were copied from. Shape (n, channels, side, side). Baseline only."""
    config = plan.config
    side = plan.output_grid_side
    g0, d0 = plan.combined[0]
    n = plan.n
    channels = config.conv[0].channels
    out = np.zeros((n, channels, config.input_side, config.input_side))
    for i, g in enumerate(grid.cts):
        for u in range(g0):
            for v in range(g0):
                payload = backend.decrypt(g[u][v], keys)
                vals = payload[:n * side * side].reshape(side, side, n)
                for a in range(side):
                    for b in range(side):
                        out[:, i, u + a * d0, v + b * d0] += vals[a, b]
    return out


def decode_filter_gradient_bank(bank, plan: PackingPlan, layer: int, backend,
                                keys) -> np.ndarray:
    """Each filter-gradient ciphertext sums to its scalar gradient."""
    cl = plan.config.conv[layer]
    out = np.zeros((cl.filters, cl.channels, cl.kernel, cl.kernel))
    for k in range(cl.filters):
        for i in range(cl.channels):
            for x in range(cl.kernel):
                for y in range(cl.kernel):
                    out[k, i, x, y] = backend.decrypt(bank[k][i][x][y], keys).sum()
    return out


def decode_fc_weight_gradients(grads, plan: PackingPlan, layer: int, backend,
                               keys) -> np.ndarray:
    """Per-pi-set slot sums of the weight-gradient ciphertexts, arranged as
    the (out_neurons, in_neurons) gradient matrix."""
    fcp = plan.fc[layer]
    n = plan.n
    out = np.zeros((fcp.out_neurons, fcp.in_neurons))
    if fcp.fc_type == TYPE_I:
        layout = fcp.input_layout
        for i in range(fcp.out_neurons):
            for j in range(fcp.input_ct_count):
                payload = backend.decrypt(grads[i][j], keys)
                for k in range(layout.capacity):
                    w = j * layout.capacity + k
                    if w >= fcp.in_neurons:
                        continue
                    base = layout.slot_base(k)
                    out[i, w] = payload[base:base + n].sum()
    else:
        per_ct = plan.slot_count // n
        for i in range(fcp.output_ct_count):
            for j in range(fcp.in_neurons):
                payload = backend.decrypt(grads[i][j], keys)
                for w_local in range(per_ct):
                    w = i * per_ct + w_local
                    if w >= fcp.out_neurons:
                        break
                    out[w, j] = payload[w_local * n:(w_local + 1) * n].sum()
    return out


def decrypt_model(enc: EncryptedModel, plan: PackingPlan, backend, keys):
    """Recover plaintext parameter tensors from a packed model."""
    from .oracle import PlainModel

    conv = []
    for l, bank in enumerate(enc.conv):
        cl = plan.config.conv[l]
        mode = plan.conv_modes[l]
        arr = np.zeros((cl.filters, cl.channels, cl.kernel, cl.kernel))
        r = plan.pack_factor
        for x in range(cl.kernel):
            for y in range(cl.kernel):
                if mode == BASELINE:
                    for k in range(cl.filters):
                        for i in range(cl.channels):
                            arr[k, i, x, y] = backend.decrypt(bank[k][i][x][y], keys)[0]
                elif mode == CROSS_CHANNEL:
                    for k in range(cl.filters):
                        for g in range(len(bank[k])):
                            payload = backend.decrypt(bank[k][g][x][y], keys)
                            for b in range(r):
                                ch = g * r + b
                                if ch < cl.channels:
                                    arr[k, ch, x, y] = payload[b * plan.block_stride]
                else:
                    for kg in range(len(bank)):
                        for i in range(cl.channels):
                            payload = backend.decrypt(bank[kg][i][x][y], keys)
                            for b in range(r):
                                k = kg * r + b
                                if k < cl.filters:
                                    arr[k, i, x, y] = payload[b * plan.block_stride]
        conv.append(arr)
    fc = []
    for l, weights in enumerate(enc.fc):
        fcp = plan.fc[l]
        M = np.zeros((fcp.out_neurons, fcp.in_neurons))
        n = plan.n
        if fcp.fc_type == TYPE_I:
            layout = fcp.input_layout
            for i in range(fcp.out_neurons):
                for j in range(fcp.input_ct_count):
                    payload = backend.decrypt(weights[i][j], keys)
                    for k in range(layout.capacity):
                        w = j * layout.capacity + k
                        if w >= fcp.in_neurons:
                            continue
                        M[i, w] = payload[layout.slot_base(k)]
        else:
            per_ct = plan.slot_count // n
            for i in range(fcp.output_ct_count):
                for j in range(fcp.in_neurons):
                    payload = backend.decrypt(weights[i][j], keys)
                    for w_local in range(per_ct):
                        w = i * per_ct + w_local
                        if w >= fcp.out_neurons:
                            break
                        M[w, j] = payload[w_local * n]
        fc.append(M)
    return PlainModel(conv=conv, fc=fc)
