"""Backward propagation and TEE-assisted weight updates.

Input gradients are the transposes of the forward dataflows, run entirely on
ciphertexts. Weight updates follow the eight-step protocol: fold each
gradient ciphertext onto a designated slot, mask with the negated learning
rate, merge disjoint ciphertexts, refresh the merged ciphertexts through the
trusted environment (its only involvement), split them back apart, broadcast
each value across its slot set, and add into the packed weights.

Gradients descend levels quickly; any multiply that would run below level 1
first refreshes its exhausted operands through the TEE (counted separately
from the protocol's step-5 refreshes).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import ValidationError
from .forward import run_forward, _log2_exact
from .geometry import BASELINE, TYPE_I, TYPE_II, PackingPlan
from .ledger import OpLedger
from .packing import CONV, ActivationGrid, EncryptedModel

GradientGrid = ActivationGrid


class TeeService(Protocol):
    def refresh(self, ct, ledger: OpLedger, reason: str = "weight-update"): ...


def _guarded_multiply(a, b, backend, ledger, tee):
    if min(a.level, b.level) < 1 and tee is not None:
        if a.level < 1:
            a = tee.refresh(a, ledger, reason="depth-guard")
        if b.level < 1:
            b = tee.refresh(b, ledger, reason="depth-guard")
    return backend.multiply(a, b, ledger)


def square_backward(pre_ct, post_grad_ct, backend, ledger, tee=None):
    """Gradient through the square activation: 2 * pre * grad_post, with the
    doubling done by a free-of-depth self-addition."""
    doubled = backend.add(pre_ct, pre_ct, ledger)
    return _guarded_multiply(doubled, post_grad_ct, backend, ledger, tee)


# -- dense layers --------------------------------------------------------------


def fc_backward_type1(out_grads, weights, plan: PackingPlan, layer: int,
                      backend, ledger: OpLedger, tee=None) -> list:
    """Input gradients of a Type I layer: for each input ciphertext i,
    accumulate output-gradient times weight ciphertext over all outputs."""
    fcp = plan.fc[layer]
    if len(out_grads) != fcp.out_neurons:
        raise ValidationError(
            f"fc layer {layer + 1} backward expects {fcp.out_neurons} gradient cts")
    grads = []
    for i in range(fcp.input_ct_count):
        acc = None
        for j in range(fcp.out_neurons):
            p = _guarded_multiply(out_grads[j], weights[j][i], backend, ledger, tee)
            acc = p if acc is None else backend.add(acc, p, ledger)
        grads.append(acc)
    return grads


def fc_backward_type2(out_grads, weights, plan: PackingPlan, layer: int,
                      backend, ledger: OpLedger, tee=None) -> list:
    """Input gradients of a Type II layer: accumulate over the output-block
    ciphertexts, then rotate-and-add so every block holds the full sum,
    recreating the replicated shape the forward pass consumed."""
    fcp = plan.fc[layer]
    if len(out_grads) != fcp.output_ct_count:
        raise ValidationError(
            f"fc layer {layer + 1} backward expects {fcp.output_ct_count} gradient cts")
    n = plan.n
    steps = _log2_exact(plan.slot_count // n)
    grads = []
    for i in range(fcp.in_neurons):
        acc = None
        for j in range(fcp.output_ct_count):
            p = _guarded_multiply(out_grads[j], weights[j][i], backend, ledger, tee)
            acc = p if acc is None else backend.add(acc, p, ledger)
        for j in range(1, steps + 1):
            acc = backend.add(acc, backend.rotate(acc, n * (1 << (j - 1)), ledger),
                              ledger)
        grads.append(acc)
    return grads


def fc_weight_gradient(out_grad_ct, act_ct, backend, ledger: OpLedger, tee=None):
    """One weight-gradient ciphertext: per-slot product of the replicated
    output gradient and the retained input activations."""
    return _guarded_multiply(out_grad_ct, act_ct, backend, ledger, tee)


def fc_weight_gradients(pre_grads, inputs, plan: PackingPlan, layer: int,
                        backend, ledger: OpLedger, tee=None) -> list:
    """All weight-gradient ciphertexts of one dense layer, indexed like the
    packed weights."""
    fcp = plan.fc[layer]
    if fcp.fc_type == TYPE_I:
        return [[fc_weight_gradient(pre_grads[i], inputs[j], backend, ledger, tee)
                 for j in range(fcp.input_ct_count)]
                for i in range(fcp.out_neurons)]
    return [[fc_weight_gradient(pre_grads[i], inputs[j], backend, ledger, tee)
             for j in range(fcp.in_neurons)]
            for i in range(fcp.output_ct_count)]


# -- weight-update protocol ----------------------------------------------------


def weight_update_targets(plan: PackingPlan, layer: int) -> list[tuple[int, int, int]]:
    """(i, j, target slot index) for every weight ciphertext of the layer.

    The target index within each n-slot set must be unique and below n, which
    bounds the layer sizes this update supports.
    """
    fcp = plan.fc[layer]
    n = plan.n
    entries = []
    if fcp.fc_type == TYPE_I:
        for i in range(fcp.out_neurons):
            for j in range(fcp.input_ct_count):
                entries.append((i, j, i * fcp.input_ct_count + j))
    else:
        for i in range(fcp.output_ct_count):
            for j in range(fcp.in_neurons):
                entries.append((i, j, j * fcp.output_ct_count + i))
    for i, j, p in entries:
        if p >= n:
            raise ValidationError(
                f"fc layer {layer + 1} weight update: target index {p} for "
                f"weight ciphertext ({i}, {j}) is not below n={n}; "
                "the layer is too large for the in-set merge"
            )
    return entries


def fold_onto_slot(ct, target: int, set_size: int, scale: float, backend,
                   ledger: OpLedger, tee=None):
    """Step 2: sum every set of ``set_size`` slots onto its in-set position
    ``target``, scaled, zero elsewhere.

    Doubling rotate-and-adds put each set's sum at its first slot; one
    rotation carries the sums to the target position, and a mask keeps it.
    A full-ring set needs no carry rotation since the fold leaves the total
    everywhere.
    """
    S = ct.slot_count
    acc = ct
    for j in range(1, _log2_exact(set_size) + 1):
        acc = backend.add(acc, backend.rotate(acc, 1 << (j - 1), ledger), ledger)
    if target and set_size < S:
        acc = backend.rotate(acc, S - target, ledger)
    mask = np.zeros(S)
    mask[target::set_size] = scale
    if acc.level < 1 and tee is not None:
        acc = tee.refresh(acc, ledger, reason="depth-guard")
    return backend.cmult(acc, mask, ledger)


def broadcast_slot(ct, target: int, set_size: int, backend, ledger: OpLedger):
    """Step 7: populate the single surviving value of each set (at in-set
    position ``target``) across all positions of its set."""
    S = ct.slot_count
    acc = ct
    if set_size == S:
        for j in range(1, _log2_exact(set_size) + 1):
            acc = backend.add(acc, backend.rotate(acc, 1 << (j - 1), ledger), ledger)
        return acc
    if target:
        acc = backend.rotate(acc, target, ledger)
    # Right-rotations never pull a neighbouring set's value into this set.
    for j in range(1, _log2_exact(set_size) + 1):
        acc = backend.add(acc, backend.rotate(acc, S - (1 << (j - 1)), ledger), ledger)
    return acc


def _split_mask(S: int, target: int, set_size: int) -> np.ndarray:
    mask = np.zeros(S)
    mask[target::set_size] = 1.0
    return mask


def _merge_disjoint(cts, backend, ledger):
    acc = cts[0]
    for ct in cts[1:]:
        acc = backend.add(acc, ct, ledger)
    return acc


def _apply_update_protocol(entries, grads, weights, set_size: int, group_size: int,
                           eta: float, plan: PackingPlan, backend,
                           ledger: OpLedger, tee) -> list:
    """Steps 2-8 over a flat entry list; returns updated weight cts in entry
    order. ``group_size`` ciphertexts share one refresh."""
    S = plan.slot_count
    masked = [fold_onto_slot(g, p, set_size, -eta, backend, ledger, tee)
              for (g, p) in zip(grads, (p for (_, _, p) in entries))]
    refreshed = []
    for lo in range(0, len(masked), group_size):
        merged = _merge_disjoint(masked[lo:lo + group_size], backend, ledger)
        refreshed.append(tee.refresh(merged, ledger, reason="weight-update"))
    updated = []
    for idx, ((_, _, p), w) in enumerate(zip(entries, weights)):
        src = refreshed[idx // group_size]
        isolated = backend.cmult(src, _split_mask(S, p, set_size), ledger)
        populated = broadcast_slot(isolated, p, set_size, backend, ledger)
        updated.append(backend.add(w, populated, ledger))
    return updated


def fc_weight_update(weight_grads, weights, plan: PackingPlan, layer: int,
                     eta: float, backend, ledger: OpLedger, tee) -> list:
    """Eight-step update of one dense layer's packed weights; decrypting the
    result gives exactly M - eta * (batch-summed gradient)."""
    entries = weight_update_targets(plan, layer)
    flat_grads = [weight_grads[i][j] for (i, j, _) in entries]
    flat_weights = [weights[i][j] for (i, j, _) in entries]
    with ledger.phase(f"Update-FL{layer + 1}"):
        flat_new = _apply_update_protocol(entries, flat_grads, flat_weights,
                                          set_size=plan.n, group_size=plan.n,
                                          eta=eta, plan=plan, backend=backend,
                                          ledger=ledger, tee=tee)
    rows = len(weights)
    cols = len(weights[0])
    new = [[None] * cols for _ in range(rows)]
    for (i, j, _), ct in zip(entries, flat_new):
        new[i][j] = ct
    return new


# -- convolutional layers --------------------------------------------------------


def conv_backward(out_grads: GradientGrid, bank, plan: PackingPlan, layer: int,
                  backend, ledger: OpLedger, tee=None) -> GradientGrid:
    """Transposed convolution on ciphertext grids: the gradient at output
    anchor (u, v) scatters through filter element (x, y) back to input anchor
    (stride*u + x, stride*v + y)."""
    cl = plan.config.conv[layer]
    in_side = plan.grid_side(layer)
    out_side = plan.grid_side(layer + 1)
    acc = [[[None] * in_side for _ in range(in_side)] for _ in range(cl.channels)]
    for i in range(cl.channels):
        for u in range(out_side):
            for v in range(out_side):
                for x in range(cl.kernel):
                    for y in range(cl.kernel):
                        pu, pv = cl.stride * u + x, cl.stride * v + y
                        for k in range(cl.filters):
                            p = _guarded_multiply(out_grads.cts[k][u][v],
                                                  bank[k][i][x][y],
                                                  backend, ledger, tee)
                            cur = acc[i][pu][pv]
                            acc[i][pu][pv] = p if cur is None else backend.add(
                                cur, p, ledger)
    return ActivationGrid(kind=CONV, cts=acc)


def conv_weight_gradient(out_grads: GradientGrid, acts_in: ActivationGrid,
                         plan: PackingPlan, layer: int, backend,
                         ledger: OpLedger, tee=None) -> list:
    """Filter-gradient ciphertexts: per (filter, channel, x, y), accumulate
    output-gradient times retained input activation over every anchor."""
    cl = plan.config.conv[layer]
    out_side = plan.grid_side(layer + 1)
    bank = []
    for k in range(cl.filters):
        per_channel = []
        for i in range(cl.channels):
            rows = []
            for x in range(cl.kernel):
                row = []
                for y in range(cl.kernel):
                    acc = None
                    for u in range(out_side):
                        for v in range(out_side):
                            p = _guarded_multiply(
                                out_grads.cts[k][u][v],
                                acts_in.cts[i][cl.stride * u + x][cl.stride * v + y],
                                backend, ledger, tee)
                            acc = p if acc is None else backend.add(acc, p, ledger)
                    row.append(acc)
                rows.append(row)
            per_channel.append(rows)
        bank.append(per_channel)
    return bank


def conv_filter_update(grad_bank, bank, plan: PackingPlan, layer: int,
                       eta: float, backend, ledger: OpLedger, tee) -> list:
    """The dense-layer update protocol applied to filter gradients: each
    gradient ciphertext folds over the whole ring (its scalar gradient is the
    sum of all its slots), so the slot sets span the full ciphertext and up
    to S ciphertexts merge per refresh."""
    cl = plan.config.conv[layer]
    S = plan.slot_count
    keys = [(k, i, x, y)
            for k in range(cl.filters) for i in range(cl.channels)
            for x in range(cl.kernel) for y in range(cl.kernel)]
    entries = [(0, 0, idx % S) for idx in range(len(keys))]
    flat_grads = [grad_bank[k][i][x][y] for (k, i, x, y) in keys]
    flat_weights = [bank[k][i][x][y] for (k, i, x, y) in keys]
    with ledger.phase(f"Update-CL{layer + 1}"):
        flat_new = _apply_update_protocol(entries, flat_grads, flat_weights,
                                          set_size=S, group_size=S, eta=eta,
                                          plan=plan, backend=backend,
                                          ledger=ledger, tee=tee)
    new = [[[[None] * cl.kernel for _ in range(cl.kernel)]
            for _ in range(cl.channels)] for _ in range(cl.filters)]
    for (k, i, x, y), ct in zip(keys, flat_new):
        new[k][i][x][y] = ct
    return new


# -- full training step ----------------------------------------------------------


@dataclass
class BackwardResult:
    fc_weight_grads: list
    fc_input_grads: list
    conv_filter_grads: list
    conv_input_grads: list
    input_gradient: GradientGrid | None


def backward_pass(model: EncryptedModel, retained, seed_grads, plan: PackingPlan,
                  backend, ledger: OpLedger, tee=None,
                  activations: bool = True) -> BackwardResult:
    """Propagate the final-layer gradient back through every layer, collecting
    weight-gradient ciphertexts along the way. Gradients are taken at the old
    weights throughout."""
    config = plan.config
    f = len(plan.fc)
    fc_weight_grads: list = [None] * f
    fc_input_grads: list = [None] * f
    grad = list(seed_grads)
    for l in range(f - 1, -1, -1):
        fcp = plan.fc[l]
        final = l == f - 1
        with ledger.phase(f"Bwd-FL{l + 1}"):
            squared = activations and (not final or config.final_activation)
            if squared:
                grad = [square_backward(pre, g, backend, ledger, tee)
                        for pre, g in zip(retained.fc_pre[l], grad)]
            fc_weight_grads[l] = fc_weight_gradients(
                grad, retained.fc_inputs[l], plan, l, backend, ledger, tee)
            if fcp.fc_type == TYPE_I:
                grad = fc_backward_type1(grad, model.fc[l], plan, l, backend,
                                         ledger, tee)
            else:
                grad = fc_backward_type2(grad, model.fc[l], plan, l, backend,
                                         ledger, tee)
        fc_input_grads[l] = grad

    c = len(config.conv)
    conv_filter_grads: list = [None] * c
    conv_input_grads: list = [None] * c
    input_gradient = None
    if c > 0:
        grid = ActivationGrid(kind=CONV, cts=[[[ct]] for ct in grad])
        for l in range(c - 1, -1, -1):
            with ledger.phase(f"Bwd-CL{l + 1}"):
                if activations:
                    grid = ActivationGrid(kind=CONV, cts=[
                        [[square_backward(pre, g, backend, ledger, tee)
                          for pre, g in zip(pre_row, g_row)]
                         for pre_row, g_row in zip(pre_grid, g_grid)]
                        for pre_grid, g_grid in zip(retained.conv_pre[l].cts,
                                                    grid.cts)])
                conv_filter_grads[l] = conv_weight_gradient(
                    grid, retained.conv_inputs[l], plan, l, backend, ledger, tee)
                grid = conv_backward(grid, model.conv[l], plan, l, backend,
                                     ledger, tee)
            conv_input_grads[l] = grid
        input_gradient = grid
    return BackwardResult(fc_weight_grads=fc_weight_grads,
                          fc_input_grads=fc_input_grads,
                          conv_filter_grads=conv_filter_grads,
                          conv_input_grads=conv_input_grads,
                          input_gradient=input_gradient)


@dataclass
class TrainStats:
    final_grid: ActivationGrid
    gradients: BackwardResult


def train_step(model: EncryptedModel, input_grid: ActivationGrid, labels,
               plan: PackingPlan, backend, ledger: OpLedger, tee,
               eta: float = 0.01, activations: bool = True,
               workers: int = 1) -> tuple[EncryptedModel, TrainStats]:
    """One SGD step on packed ciphertexts: forward with retention, final-layer
    gradient from the TEE, backward pass, then the weight-update protocol for
    every layer. Updated weights decrypt to W - eta * gradient exactly."""
    if any(m != BASELINE for m in plan.conv_modes):
        raise ValidationError(
            "training supports baseline conv packing only; re-plan with "
            "packing='baseline'"
        )
    final, retained = run_forward(model, input_grid, plan, backend, ledger,
                                  activations=activations, workers=workers,
                                  retain=True)
    seed = tee.final_gradient(final, labels, plan, ledger)
    grads = backward_pass(model, retained, seed, plan, backend, ledger, tee,
                          activations=activations)
    new_fc = [fc_weight_update(grads.fc_weight_grads[l], model.fc[l], plan, l,
                               eta, backend, ledger, tee)
              for l in range(len(plan.fc))]
    new_conv = [conv_filter_update(grads.conv_filter_grads[l], model.conv[l],
                                   plan, l, eta, backend, ledger, tee)
                for l in range(len(plan.config.conv))]
    return (EncryptedModel(conv=new_conv, fc=new_fc),
            TrainStats(final_grid=final, gradients=grads))
