"""Packing geometry: combined-layer parameters and plan validation.

A stack of strided valid convolutions is equivalent to a single "combined"
convolution whose kernel side and stride determine how inputs are packed once
at the start and then flow through every layer without repacking. This module
derives those combined parameters, the output grid side, the power-of-two
packing factor used by the cross-channel/cross-filter optimizations, and the
per-layer fully-connected packing descriptors, and validates a model
configuration into a complete PackingPlan.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

from .errors import CapacityError, ValidationError

BASELINE = "baseline"
CROSS_CHANNEL = "cross_channel"
CROSS_FILTER = "cross_filter"

TYPE_I = "I"
TYPE_II = "II"


class InexactGridWarning(UserWarning):
    """Input side minus combined kernel is not a stride multiple; trailing
    pixels are never packed (valid-convolution semantics, no padding)."""


@dataclass(frozen=True)
class ConvLayer:
    channels: int
    filters: int
    kernel: int
    stride: int


@dataclass(frozen=True)
class FcLayer:
    in_neurons: int
    out_neurons: int


@dataclass
class ModelConfig:
    """Hyperparameters of a conv-then-dense model plus packing inputs.

    ``n`` is the number of simultaneously processed inputs and must be a
    power of two no larger than ``slot_count``.
    """

    input_side: int
    n: int
    slot_count: int
    conv: list[ConvLayer] = field(default_factory=list)
    fc: list[FcLayer] = field(default_factory=list)
    final_activation: bool = False

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        try:
            conv = [ConvLayer(channels=c["channels"], filters=c["filters"],
                              kernel=c["kernel"], stride=c["stride"])
                    for c in raw.get("conv", [])]
            fc = [FcLayer(in_neurons=f["in"], out_neurons=f["out"])
                  for f in raw.get("fc", [])]
            return cls(
                input_side=raw["input_side"],
                n=raw["n"],
                slot_count=raw["slot_count"],
                conv=conv,
                fc=fc,
                final_activation=bool(raw.get("final_activation", False)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed model config: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "n": self.n,
            "slot_count": self.slot_count,
            "conv": [
                {"channels": c.channels, "filters": c.filters,
                 "kernel": c.kernel, "stride": c.stride}
                for c in self.conv
            ],
            "fc": [{"in": f.in_neurons, "out": f.out_neurons} for f in self.fc],
            "final_activation": self.final_activation,
        }


@dataclass(frozen=True)
class PisetLayout:
    """Slot addressing of the pi-sets inside one ciphertext.

    Pi-sets live in ``blocks`` blocks of ``pisets_per_block`` each; block b
    starts at slot b*block_stride and pi-set k within a block starts at
    offset k*n. A tight layout has a single block.
    """

    n: int
    blocks: int
    block_stride: int
    pisets_per_block: int

    @property
    def capacity(self) -> int:
        return self.blocks * self.pisets_per_block

    def slot_base(self, piset: int) -> int:
        if not 0 <= piset < self.capacity:
            raise ValidationError(f"pi-set index {piset} out of range")
        block, within = divmod(piset, self.pisets_per_block)
        return block * self.block_stride + within * self.n

    @classmethod
    def tight(cls, n: int, pisets: int) -> "PisetLayout":
        return cls(n=n, blocks=1, block_stride=0, pisets_per_block=pisets)


@dataclass(frozen=True)
class FcLayerPlan:
    index: int
    fc_type: str                 # TYPE_I or TYPE_II
    in_neurons: int
    out_neurons: int
    input_ct_count: int          # number of input ciphertexts
    input_layout: PisetLayout | None   # pi-set addressing (Type I only)
    output_ct_count: int
    weight_ct_count: int

    @property
    def pisets_per_ct(self) -> int:
        if self.input_layout is None:
            return 1
        return self.input_layout.capacity


@dataclass
class PackingPlan:
    """Derived geometry for one model configuration. Deterministic."""

    config: ModelConfig
    slot_count: int
    n: int
    levels: int
    combined: list[tuple[int, int]]      # per conv layer: (kernel side, stride)
    output_grid_side: int
    grid_exact: bool
    pack_factor: int
    block_stride: int                    # slot stride between replica/group blocks
    conv_modes: list[str]
    fc: list[FcLayerPlan]

    @property
    def conv_depth(self) -> int:
        return len(self.config.conv)

    @property
    def fc_depth(self) -> int:
        return len(self.config.fc)

    def grid_side(self, layer: int) -> int:
        """Ciphertext grid side at the input of conv layer ``layer``; the
        grid side after the last layer is 1."""
        if layer < self.conv_depth:
            return self.combined[layer][0]
        return 1

    def input_groups(self, layer: int) -> int:
        """Number of ciphertext grids feeding conv layer ``layer``."""
        cl = self.config.conv[layer]
        if self.conv_modes[layer] == CROSS_CHANNEL:
            return -(-cl.channels // self.pack_factor)
        return cl.channels

    def output_groups(self, layer: int) -> int:
        cl = self.config.conv[layer]
        if self.conv_modes[layer] == CROSS_FILTER:
            return -(-cl.filters // self.pack_factor)
        return cl.filters

    def summary_lines(self) -> list[str]:
        lines = [
            f"slots S={self.slot_count}  n={self.n}  levels L={self.levels}",
            f"output grid side = {self.output_grid_side}"
            + ("" if self.grid_exact else "  (inexact: trailing pixels unpacked)"),
            f"packing factor r = {self.pack_factor}",
        ]
        for l, (g, d) in enumerate(self.combined):
            lines.append(
                f"conv {l + 1}: combined kernel {g}, combined stride {d}, "
                f"mode {self.conv_modes[l]}"
            )
        for fp in self.fc:
            lines.append(
                f"fc {fp.index + 1}: type {fp.fc_type}, inputs {fp.in_neurons} in "
                f"{fp.input_ct_count} ct(s), outputs {fp.out_neurons} in "
                f"{fp.output_ct_count} ct(s), weight cts {fp.weight_ct_count}"
            )
        return lines


def derive_combined_params(conv: list[ConvLayer]) -> list[tuple[int, int]]:
    """Combined kernel side and stride of the stack from each layer onward.

    Closed forms: side_l = 1 + sum_{i=l}^{c-1} (kernel_i - 1) * prod_{j=l}^{i-1} stride_j
    and stride_l = prod_{i=l}^{c-1} stride_i. Cross-checked against the
    recurrences side_l = kernel_l + stride_l * (side_{l+1} - 1) and
    stride_l = stride_l_own * stride_{l+1}.
    """
    c = len(conv)
    if c < 1:
        raise ValidationError("combined parameters need at least one conv layer")
    sides: list[int] = []
    strides: list[int] = []
    for l in range(c):
        side = 1
        for i in range(l, c):
            prod = 1
            for j in range(l, i):
                prod *= conv[j].stride
            side += (conv[i].kernel - 1) * prod
        stride = math.prod(layer.stride for layer in conv[l:])
        sides.append(side)
        strides.append(stride)
    # Recurrence cross-check; these are identities of the closed forms.
    assert sides[c - 1] == conv[c - 1].kernel
    assert strides[c - 1] == conv[c - 1].stride
    for l in range(c - 1):
        assert sides[l] == conv[l].kernel + conv[l].stride * (sides[l + 1] - 1)
        assert strides[l] == conv[l].stride * strides[l + 1]
    return list(zip(sides, strides))


def derive_output_grid(input_side: int, combined_kernel: int,
                       combined_stride: int) -> tuple[int, bool]:
    """Window positions per axis for the combined layer, plus an exactness
    flag telling whether the windows tile the input without remainder."""
    if input_side < combined_kernel:
        raise ValidationError(
            f"input side {input_side} smaller than combined kernel {combined_kernel}"
        )
    span = input_side - combined_kernel
    side = 1 + span // combined_stride
    return side, span % combined_stride == 0


def compute_packing_factor(slot_count: int, n: int, grid_side: int) -> int:
    """Largest power of two that fits S / (n * grid_side^2); at least 1."""
    footprint = n * grid_side * grid_side
    if footprint > slot_count:
        raise CapacityError(
            f"{n} inputs x {grid_side}^2 grid = {footprint} slots "
            f"exceed the {slot_count} available"
        )
    return 1 << (slot_count // footprint).bit_length() - 1


def _is_pow2(x: int) -> bool:
    return x >= 1 and (x & (x - 1)) == 0


def _select_conv_modes(config: ModelConfig, r: int) -> list[str]:
    c = len(config.conv)
    if c == 0:
        return []
    if r <= 1:
        return [BASELINE] * c
    first = config.conv[0]
    if first.channels > 1:
        mode = CROSS_CHANNEL
    elif first.filters > 1:
        mode = CROSS_FILTER
    else:
        return [BASELINE] * c
    modes = [mode]
    for _ in range(1, c):
        # Cross-channel output carries replicas (cross-filter input); the
        # cross-filter output is cross-channel packed. The modes alternate.
        modes.append(CROSS_FILTER if modes[-1] == CROSS_CHANNEL else CROSS_CHANNEL)
    return modes


def _first_fc_input(config: ModelConfig, plan_side: int, r: int,
                    conv_modes: list[str], slot_count: int):
    """Ciphertext count and pi-set layout delivered to the first dense layer."""
    n = config.n
    if not config.conv:
        # Flat single-channel input packed as tight pi-sets.
        pisets = config.input_side ** 2
        per_ct = slot_count // n
        if pisets <= per_ct:
            return 1, PisetLayout.tight(n, pisets), pisets
        if pisets % per_ct != 0:
            raise ValidationError(
                f"flat input of {pisets} pi-sets does not split evenly into "
                f"ciphertexts of {per_ct} pi-sets"
            )
        return pisets // per_ct, PisetLayout.tight(n, per_ct), pisets
    last = config.conv[-1]
    pisets = last.filters * plan_side * plan_side
    mode = conv_modes[-1]
    if mode == CROSS_FILTER:
        groups = -(-last.filters // r)
        layout = PisetLayout(n=n, blocks=r, block_stride=slot_count // r,
                             pisets_per_block=plan_side * plan_side)
        return groups, layout, pisets
    # Baseline output is tight; cross-channel output carries replicas whose
    # extra blocks are zeroed by the weight masks, so block 0 is what counts.
    layout = PisetLayout.tight(n, plan_side * plan_side)
    return last.filters, layout, pisets


def validate_model(config: ModelConfig,
                   packing: str = "auto") -> PackingPlan:
    """Validate a configuration and derive its complete packing plan.

    ``packing`` forces the conv packing mode family: "auto" follows the
    packing factor, "baseline" disables the optimizations, "cross-channel" /
    "cross-filter" force the first layer's optimized mode.
    """
    S = config.slot_count
    n = config.n
    if not _is_pow2(S):
        raise ValidationError(f"slot count must be a power of two, got {S}")
    if not _is_pow2(n):
        raise ValidationError(f"input count n must be a power of two, got {n}")
    if n > S:
        raise CapacityError(f"n={n} exceeds slot count {S}")
    if len(config.fc) < 1:
        raise ValidationError("at least one fully-connected layer is required")
    if config.input_side < 1:
        raise ValidationError("input side must be positive")
    for l, cl in enumerate(config.conv):
        if min(cl.channels, cl.filters, cl.kernel, cl.stride) < 1:
            raise ValidationError(f"conv layer {l + 1} has a non-positive field")
        if l > 0 and cl.channels != config.conv[l - 1].filters:
            raise ValidationError(
                f"conv layer {l + 1} expects {cl.channels} channels but layer "
                f"{l} emits {config.conv[l - 1].filters}"
            )
    for l, fl in enumerate(config.fc):
        if min(fl.in_neurons, fl.out_neurons) < 1:
            raise ValidationError(f"fc layer {l + 1} has a non-positive dimension")

    c = len(config.conv)
    if c > 0:
        combined = derive_combined_params(config.conv)
        grid_side, exact = derive_output_grid(config.input_side,
                                              combined[0][0], combined[0][1])
        if not exact:
            warnings.warn(
                f"(input_side - combined_kernel) = {config.input_side - combined[0][0]} "
                f"is not a multiple of the combined stride {combined[0][1]}; "
                "trailing pixels will not be packed",
                InexactGridWarning,
                stacklevel=2,
            )
        r = compute_packing_factor(S, n, grid_side)
    else:
        combined = []
        grid_side, exact = config.input_side, True
        r = 1

    if packing == "auto":
        conv_modes = _select_conv_modes(config, r)
    elif packing == "baseline":
        conv_modes = [BASELINE] * c
    elif packing in ("cross-channel", "cross-filter"):
        if r <= 1:
            raise ValidationError(
                f"packing mode {packing!r} requested but the packing factor is 1"
            )
        first = CROSS_CHANNEL if packing == "cross-channel" else CROSS_FILTER
        conv_modes = [first]
        for _ in range(1, c):
            conv_modes.append(
                CROSS_FILTER if conv_modes[-1] == CROSS_CHANNEL else CROSS_CHANNEL)
    else:
        raise ValidationError(f"unknown packing mode {packing!r}")

    effective_r = r if any(m != BASELINE for m in conv_modes) else 1

    # Dense-layer plan: types alternate starting from Type I.
    fc_plans: list[FcLayerPlan] = []
    in_cts, in_layout, upstream = _first_fc_input(config, grid_side, effective_r,
                                                  conv_modes, S)
    per_ct_cap = S // n
    for l, fl in enumerate(config.fc):
        if fl.in_neurons != upstream:
            raise ValidationError(
                f"fc layer {l + 1} expects {fl.in_neurons} inputs but the "
                f"previous stage emits {upstream}"
            )
        fc_type = TYPE_I if l % 2 == 0 else TYPE_II
        if fc_type == TYPE_I:
            if in_layout.capacity * n > S:
                raise CapacityError(
                    f"fc layer {l + 1}: {in_layout.capacity} pi-sets of {n} "
                    f"slots exceed the {S} available"
                )
            out_cts = fl.out_neurons
            plan = FcLayerPlan(
                index=l, fc_type=TYPE_I,
                in_neurons=fl.in_neurons, out_neurons=fl.out_neurons,
                input_ct_count=in_cts, input_layout=in_layout,
                output_ct_count=out_cts,
                weight_ct_count=fl.out_neurons * in_cts,
            )
            # Type I output: one replicated ciphertext per output neuron.
            in_cts, in_layout = fl.out_neurons, None
        else:
            if in_cts != fl.in_neurons:
                raise ValidationError(
                    f"fc layer {l + 1} (replicated input) needs one ciphertext "
                    f"per input neuron; have {in_cts} for {fl.in_neurons}"
                )
            out_cts = -(-fl.out_neurons * n // S)
            plan = FcLayerPlan(
                index=l, fc_type=TYPE_II,
                in_neurons=fl.in_neurons, out_neurons=fl.out_neurons,
                input_ct_count=in_cts, input_layout=None,
                output_ct_count=out_cts,
                weight_ct_count=fl.in_neurons * out_cts,
            )
            # Type II output: out_cts ciphertexts of tight pi-sets.
            if fl.out_neurons <= per_ct_cap:
                in_layout = PisetLayout.tight(n, fl.out_neurons)
            elif fl.out_neurons % per_ct_cap == 0:
                in_layout = PisetLayout.tight(n, per_ct_cap)
            else:
                if l + 1 < len(config.fc):
                    raise ValidationError(
                        f"fc layer {l + 2}: {fl.out_neurons} pi-sets do not "
                        f"split evenly into ciphertexts of {per_ct_cap}"
                    )
                in_layout = PisetLayout.tight(n, per_ct_cap)
            in_cts = out_cts
        fc_plans.append(plan)
        upstream = fl.out_neurons

    levels = 2 * (c + len(config.fc)) + (1 if config.final_activation else 0)
    return PackingPlan(
        config=config,
        slot_count=S,
        n=n,
        levels=levels,
        combined=combined,
        output_grid_side=grid_side,
        grid_exact=exact,
        pack_factor=effective_r,
        block_stride=S // effective_r,
        conv_modes=conv_modes,
        fc=fc_plans,
    )
