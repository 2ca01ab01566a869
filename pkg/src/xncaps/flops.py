"""Analytic operation counts and speed-up ratios for the xnorized projectors.

Counts are Python ints. A binary term ``n / 64`` that is not a whole number of
64-bit words is rounded up (a partially filled word still costs one
instruction). Ratios use the exact real-valued formulas.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .routing import ProjectorConfig

BINARY_OPS_PER_CLOCK = 64

# (input width, layer widths) of the dense classifier heads being replaced
FC_PRESETS = {
    "resnet50-fc": (2048, (1024, 512, 10)),
    "mobilenetv2-fc": (1280, (512, 256, 128, 10)),
}

DEFAULT_CONFIG = ProjectorConfig(caps_in=128, caps_out=10, dim_in=8, dim_out=16)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def lp_out_float_ops(cfg: ProjectorConfig) -> int:
    return cfg.caps_in * cfg.caps_out * cfg.dim_out * cfg.dim_in * cfg.dim_out


def lp_out_binary_ops(cfg: ProjectorConfig) -> int:
    return _ceil_div(lp_out_float_ops(cfg), BINARY_OPS_PER_CLOCK) + cfg.caps_out


def speedup_xnodr(cfg: ProjectorConfig) -> float:
    full = lp_out_float_ops(cfg)
    return full / (full / BINARY_OPS_PER_CLOCK + cfg.dim_in)


def lp_in_float_ops(cfg: ProjectorConfig) -> int:
    return cfg.caps_in * cfg.caps_out * cfg.dim_out**2


def lp_in_binary_ops(cfg: ProjectorConfig) -> int:
    return _ceil_div(lp_in_float_ops(cfg), BINARY_OPS_PER_CLOCK) + cfg.dim_out


def speedup_xnidr(cfg: ProjectorConfig) -> float:
    full = lp_in_float_ops(cfg)
    return full / (full / BINARY_OPS_PER_CLOCK + cfg.dim_out)


def generic_speedup(c: int, n_w: int, n_i: int) -> float:
    """Convolution vs. xnorized convolution: ``c*N_W*N_I / (c*N_W*N_I/64 + N_I)``."""
    if min(c, n_w, n_i) <= 0:
        raise ValueError("channel, weight and input counts must be positive")
    full = c * n_w * n_i
    return full / (full / BINARY_OPS_PER_CLOCK + n_i)


@dataclass(frozen=True)
class FcStack:
    input_width: int
    layer_widths: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(self.layer_widths))
        if not self.layer_widths:
            raise ValueError("an FC stack needs at least one layer")
        if min((self.input_width,) + self.layer_widths) < 1:
            raise ValueError("all FC widths must be >= 1")

    @classmethod
    def preset(cls, name: str) -> "FcStack":
        try:
            width, layers = FC_PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(FC_PRESETS)}") from None
        return cls(width, layers)


def fc_stack_flops(stack: FcStack) -> int:
    """FLOPs of a dense stack, one multiply-accumulate counted as 2 FLOPs."""
    widths = (stack.input_width,) + stack.layer_widths
    return 2 * sum(a * b for a, b in zip(widths, widths[1:]))


def bops_to_flops(bops: int) -> int:
    if bops < 0:
        raise ValueError("binary operation count must be non-negative")
    return bops // BINARY_OPS_PER_CLOCK


@dataclass(frozen=True)
class CostReport:
    variant: str
    float_ops: int
    binary_ops: int
    binary_ops_as_flops: float
    xnor_flops: int
    speedup: float
    binarized_elements: int
    binarization_flops: float
    baseline_flops: int
    ratio_to_baseline: float

    def as_dict(self) -> dict:
        return asdict(self)


def binarized_elements(cfg: ProjectorConfig, variant: str, batch: int = 1) -> int:
    """Number of elements passed through binarization for one forward pass."""
    if variant == "xnodr":
        return batch * cfg.caps_in * cfg.caps_out * cfg.dim_in + cfg.caps_in * cfg.caps_out * cfg.dim_in * cfg.dim_out
    if variant == "xnidr":
        per_iter = batch * cfg.caps_out * cfg.dim_out
        return batch * cfg.caps_in * cfg.caps_out * cfg.dim_out + per_iter * (cfg.iterations - 1)
    raise ValueError(f"unknown variant {variant!r}")


def cost_report(
    cfg: ProjectorConfig,
    variant: str,
    fc_baseline: FcStack,
    binarize_cost_per_element: float = 1.0,
) -> CostReport:
    """Assemble projector counts and compare against a dense baseline.

    ``binarize_cost_per_element`` is an unverified modelling constant; the
    published binarization column does not follow from any stated rule.
    """
    if variant == "xnodr":
        float_ops, binary_ops, speedup = lp_out_float_ops(cfg), lp_out_binary_ops(cfg), speedup_xnodr(cfg)
    elif variant == "xnidr":
        float_ops, binary_ops, speedup = lp_in_float_ops(cfg), lp_in_binary_ops(cfg), speedup_xnidr(cfg)
    else:
        raise ValueError(f"unknown variant {variant!r}; expected 'xnodr' or 'xnidr'")
    elements = binarized_elements(cfg, variant)
    bin_flops = binarize_cost_per_element * elements
    as_flops = binary_ops / BINARY_OPS_PER_CLOCK
    baseline = fc_stack_flops(fc_baseline)
    return CostReport(
        variant=variant,
        float_ops=float_ops,
        binary_ops=binary_ops,
        binary_ops_as_flops=as_flops,
        xnor_flops=bops_to_flops(binary_ops),
        speedup=speedup,
        binarized_elements=elements,
        binarization_flops=bin_flops,
        baseline_flops=baseline,
        ratio_to_baseline=(bin_flops + as_flops) / baseline,
    )
