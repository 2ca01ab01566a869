"""Print the analytic cost tables: projector speed-ups, FC FLOPs and BOPs.

    python3 scripts/reproduce_tables.py
"""

from xncaps import flops
from xncaps.cli import SPEEDUP_TABLE


def main() -> None:
    cfg = flops.DEFAULT_CONFIG
    computed = {"xnodr": flops.speedup_xnodr(cfg), "xnidr": flops.speedup_xnidr(cfg)}
    print(f"projector speed-up, config {cfg.caps_in}x{cfg.caps_out}x{cfg.dim_in}x{cfg.dim_out}")
    print(f"{'model':<20}{'published':>10}{'computed':>10}  note")
    for model, variant, published, reproducible in SPEEDUP_TABLE:
        value = computed[variant]
        note = "ok" if abs(value - published) <= 0.01 else "mismatch"
        if not reproducible:
            note += " (not derivable from the stated configuration)"
        print(f"{model:<20}{published:>10.2f}{value:>10.4f}  {note}")

    print("\ndense FC baselines")
    for name in flops.FC_PRESETS:
        stack = flops.FcStack.preset(name)
        print(f"{name:<20}{flops.fc_stack_flops(stack):>12,} FLOPs  widths {stack.input_width}->{stack.layer_widths}")

    print("\nprojector cost against the resnet50-fc baseline")
    base = flops.FcStack.preset("resnet50-fc")
    for variant in ("xnodr", "xnidr"):
        r = flops.cost_report(cfg, variant, base)
        print(
            f"{variant:<8}float {r.float_ops:>9,}  binary {r.binary_ops:>7,}  "
            f"as FLOPs {r.xnor_flops:>5,}  speed-up {r.speedup:.4f}"
        )

    print("\nBOPs to FLOPs")
    for bops in (40_960, 81_920):
        print(f"{bops:>8,} BOPs -> {flops.bops_to_flops(bops):>6,} FLOPs")


if __name__ == "__main__":
    main()
