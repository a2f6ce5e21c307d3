"""Homomorphic forward pass: conv layers in three packing modes, dense layers
with and without input replication, square activations, and the full pipeline.

Accumulators follow move-first-product-then-add: k products cost k-1
additions. Rotate-and-add folds use doubling offsets, so log2(m) steps sum m
block-aligned copies. Every output ciphertext is computed independently,
which is what makes the worker partitioning below safe.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from .errors import ValidationError
from .geometry import BASELINE, CROSS_CHANNEL, CROSS_FILTER, TYPE_I, PackingPlan
from .ledger import OpLedger
from .packing import CONV, FC_TYPE1, FC_TYPE2, ActivationGrid, EncryptedModel


def _log2_exact(x: int) -> int:
    steps = x.bit_length() - 1
    if 1 << steps != x:
        raise ValidationError(f"{x} is not a power of two")
    return steps


def _run_partitioned(count, compute_one, ledger: OpLedger, workers: int):
    """Evaluate compute_one(index, ledger) for every index, optionally split
    across workers with private ledgers merged back in partition order."""
    if workers <= 1 or count <= 1:
        return [compute_one(i, ledger) for i in range(count)]
    workers = min(workers, count)
    bounds = [(count * w) // workers for w in range(workers + 1)]
    parts = [(bounds[w], bounds[w + 1], ledger.spawn()) for w in range(workers)]

    def run_part(part):
        lo, hi, sub = part
        return [compute_one(i, sub) for i in range(lo, hi)]

    with ThreadPoolExecutor(max_workers=workers) as pool:
        chunks = list(pool.map(run_part, parts))
    for _, _, sub in parts:
        ledger.absorb(sub)
    return [ct for chunk in chunks for ct in chunk]


# -- convolutional layers ------------------------------------------------------


def _conv_mac(grid_cts, bank_entry, out_side, stride, kernel, backend, led):
    """Multiply-accumulate for one output anchor over one filter entry."""
    def one(uv, led):
        u, v = divmod(uv, out_side)
        acc = None
        for x in range(kernel):
            for y in range(kernel):
                for i in range(len(grid_cts)):
                    p = backend.multiply(
                        grid_cts[i][stride * u + x][stride * v + y],
                        bank_entry[i][x][y], led)
                    acc = p if acc is None else backend.add(acc, p, led)
        return acc
    return one


def conv_forward(grid: ActivationGrid, bank, plan: PackingPlan, layer: int,
                 backend, ledger: OpLedger, workers: int = 1) -> ActivationGrid:
    """Baseline conv layer: output (k, u, v) accumulates input (i, u', v')
    times the replicated filter element, over channels and kernel offsets."""
    cl = plan.config.conv[layer]
    out_side = plan.grid_side(layer + 1)
    if len(grid.cts) != cl.channels or len(grid.cts[0]) != plan.grid_side(layer):
        raise ValidationError(f"conv layer {layer + 1}: input grid shape mismatch")
    out = []
    for k in range(cl.filters):
        one = _conv_mac(grid.cts, bank[k], out_side, cl.stride, cl.kernel, backend, ledger)
        flat = _run_partitioned(out_side * out_side, one, ledger, workers)
        out.append([[flat[u * out_side + v] for v in range(out_side)]
                    for u in range(out_side)])
    return ActivationGrid(kind=CONV, cts=out)


def conv_forward_cross_channel(grid: ActivationGrid, bank, plan: PackingPlan,
                               layer: int, backend, ledger: OpLedger,
                               workers: int = 1) -> ActivationGrid:
    """Channel-grouped conv: accumulate over channel groups, then fold the
    packing factor's partial sums together with log2(r) rotate-and-adds.
    Outputs carry r identical replica blocks."""
    cl = plan.config.conv[layer]
    out_side = plan.grid_side(layer + 1)
    r = plan.pack_factor
    steps = _log2_exact(r)
    out = []
    for k in range(cl.filters):
        mac = _conv_mac(grid.cts, bank[k], out_side, cl.stride, cl.kernel, backend, ledger)

        def one(uv, led, mac=mac):
            acc = mac(uv, led)
            for j in range(1, steps + 1):
                off = plan.block_stride * (1 << (j - 1))
                acc = backend.add(acc, backend.rotate(acc, off, led), led)
            return acc

        flat = _run_partitioned(out_side * out_side, one, ledger, workers)
        out.append([[flat[u * out_side + v] for v in range(out_side)]
                    for u in range(out_side)])
    return ActivationGrid(kind=CONV, cts=out, replicated=True)


def conv_forward_cross_filter(grid: ActivationGrid, bank, plan: PackingPlan,
                              layer: int, backend, ledger: OpLedger,
                              workers: int = 1) -> ActivationGrid:
    """Filter-grouped conv over replicated inputs: each output ciphertext
    evaluates up to r filters at once, one per block; no rotations."""
    cl = plan.config.conv[layer]
    if not grid.replicated:
        raise ValidationError(
            f"conv layer {layer + 1} expects replicated (cross-filter) input")
    out_side = plan.grid_side(layer + 1)
    groups = -(-cl.filters // plan.pack_factor)
    out = []
    for kg in range(groups):
        one = _conv_mac(grid.cts, bank[kg], out_side, cl.stride, cl.kernel, backend, ledger)
        flat = _run_partitioned(out_side * out_side, one, ledger, workers)
        out.append([[flat[u * out_side + v] for v in range(out_side)]
                    for u in range(out_side)])
    return ActivationGrid(kind=CONV, cts=out)


def conv_layer_forward(grid, bank, plan, layer, backend, ledger, workers=1):
    mode = plan.conv_modes[layer]
    if mode == BASELINE:
        return conv_forward(grid, bank, plan, layer, backend, ledger, workers)
    if mode == CROSS_CHANNEL:
        return conv_forward_cross_channel(grid, bank, plan, layer, backend,
                                          ledger, workers)
    if mode == CROSS_FILTER:
        return conv_forward_cross_filter(grid, bank, plan, layer, backend,
                                         ledger, workers)
    raise ValidationError(f"unknown conv mode {mode!r}")


# -- activations ---------------------------------------------------------------


def square_activation(ct, backend, ledger: OpLedger):
    return backend.multiply(ct, ct, ledger)


def square_grid(grid: ActivationGrid, backend, ledger: OpLedger) -> ActivationGrid:
    if grid.kind == CONV:
        cts = [[[square_activation(ct, backend, ledger) for ct in row]
                for row in g] for g in grid.cts]
    else:
        cts = [square_activation(ct, backend, ledger) for ct in grid.cts]
    return ActivationGrid(kind=grid.kind, cts=cts, replicated=grid.replicated)


# -- dense layers --------------------------------------------------------------


def fc_forward_type1(cts, weights, plan: PackingPlan, layer: int, backend,
                     ledger: OpLedger, workers: int = 1,
                     trace: list | None = None) -> list:
    """Dense layer over a multi-pi-set input: per output neuron, accumulate
    ciphertext-weight products, then fold all pi-set positions together with
    log2(S/n) rotate-and-adds. Each output ciphertext ends up holding S/n
    replicas of its n per-input values."""
    fcp = plan.fc[layer]
    if len(cts) != fcp.input_ct_count:
        raise ValidationError(
            f"fc layer {layer + 1} expects {fcp.input_ct_count} input cts, got {len(cts)}")
    n = plan.n
    steps = _log2_exact(plan.slot_count // n)

    def one(i, led):
        acc = None
        for j in range(fcp.input_ct_count):
            p = backend.multiply(cts[j], weights[i][j], led)
            acc = p if acc is None else backend.add(acc, p, led)
        if trace is not None:
            trace.append(("product", i, acc))
        for j in range(1, steps + 1):
            acc = backend.add(acc, backend.rotate(acc, n * (1 << (j - 1)), led), led)
            if trace is not None:
                trace.append(("fold", i, acc))
        return acc

    if trace is not None:
        return [one(i, ledger) for i in range(fcp.out_neurons)]
    return _run_partitioned(fcp.out_neurons, one, ledger, workers)


def fc_forward_type2(cts, weights, plan: PackingPlan, layer: int, backend,
                     ledger: OpLedger, workers: int = 1) -> list:
    """Dense layer over replicated inputs: output ciphertext i accumulates
    every input ciphertext times its weight ciphertext; no rotations."""
    fcp = plan.fc[layer]
    if len(cts) != fcp.in_neurons:
        raise ValidationError(
            f"fc layer {layer + 1} expects {fcp.in_neurons} input cts, got {len(cts)}")

    def one(i, led):
        acc = None
        for j in range(fcp.in_neurons):
            p = backend.multiply(cts[j], weights[i][j], led)
            acc = p if acc is None else backend.add(acc, p, led)
        return acc

    return _run_partitioned(fcp.output_ct_count, one, ledger, workers)


# -- full pipeline -------------------------------------------------------------


@dataclass
class ForwardRetention:
    """Ciphertexts retained for backpropagation."""

    conv_inputs: list
    conv_pre: list
    fc_inputs: list
    fc_pre: list
    final: ActivationGrid


def run_forward(model: EncryptedModel, grid: ActivationGrid, plan: PackingPlan,
                backend, ledger: OpLedger, activations: bool = True,
                workers: int = 1, retain: bool = False,
                capture: dict | None = None):
    """Full forward pass. Conv layers run in their plan-selected modes, dense
    layers alternate between the two input types starting from Type I, and
    the final dense layer skips its activation unless configured otherwise.
    """
    config = plan.config
    conv_inputs, conv_pre, fc_inputs, fc_pre = [], [], [], []
    cur = grid
    for l in range(len(config.conv)):
        if retain:
            conv_inputs.append(cur)
        with ledger.phase(f"CL{l + 1}"):
            cur = conv_layer_forward(cur, model.conv[l], plan, l, backend,
                                     ledger, workers)
        if retain:
            conv_pre.append(cur)
        if activations:
            with ledger.phase(f"CL{l + 1}-Square"):
                cur = square_grid(cur, backend, ledger)
        if capture is not None:
            capture[f"CL{l + 1}"] = cur
    if config.conv:
        assert plan.grid_side(len(config.conv)) == 1
        cts = [g[0][0] for g in cur.cts]
    else:
        cts = list(cur.cts)
    for l, fcp in enumerate(plan.fc):
        if retain:
            fc_inputs.append(cts)
        with ledger.phase(f"FL{l + 1}"):
            if fcp.fc_type == TYPE_I:
                cts = fc_forward_type1(cts, model.fc[l], plan, l, backend,
                                       ledger, workers)
            else:
                cts = fc_forward_type2(cts, model.fc[l], plan, l, backend,
                                       ledger, workers)
        if retain:
            fc_pre.append(cts)
        final = l == len(plan.fc) - 1
        if activations and (not final or config.final_activation):
            with ledger.phase(f"FL{l + 1}-Square"):
                cts = [square_activation(ct, backend, ledger) for ct in cts]
        if capture is not None:
            capture[f"FL{l + 1}"] = cts
    kind = FC_TYPE2 if plan.fc[-1].fc_type == TYPE_I else FC_TYPE1
    final_grid = ActivationGrid(kind=kind, cts=cts)
    if retain:
        return final_grid, ForwardRetention(conv_inputs, conv_pre, fc_inputs,
                                            fc_pre, final_grid)
    return final_grid, None


def infer(model: EncryptedModel, grid: ActivationGrid, plan: PackingPlan,
          backend, ledger: OpLedger, activations: bool = True,
          workers: int = 1, capture: dict | None = None) -> ActivationGrid:
    final, _ = run_forward(model, grid, plan, backend, ledger,
                           activations=activations, workers=workers,
                           capture=capture)
    return final
