"""The analytic cost model, cross-checked against execution.

The meter computes closed-form FLOP counts from a config; the autodiff
engine counts what a forward pass actually executes.  This script shows
them agreeing exactly, demonstrates that cost is affine in sequence
length (so two measurements predict any third), and prints the pinned
production-scale report with its serving-savings estimate.
"""

import numpy as np

import mixformer as mx
from mixformer import autodiff as ad


def main():
    cfg = mx.ModelConfig(n_heads=4, head_dim=32, n_blocks=2, max_seq_len=64)
    schema = mx.schema_from_widths(
        d_ns_user=20, d_ns_item=12, action_dim=6, max_seq_len=64
    )

    print("meter vs executed, desk-small shape:")
    print("  T   analytic      executed")
    store = mx.init_parameters(schema, cfg, seed=0)
    for t in (0, 8, 64):
        req = mx.Request(
            user_id=0, user_nonseq=[0],
            actions=np.zeros((t, 1), dtype=np.int64),
            candidates=np.zeros((1, 1), dtype=np.int64),
        )
        with ad.FlopTrace() as trace:
            mx.forward(req, 0, store)
        metered = mx.count_flops(cfg, schema, t, n_candidates=1).total
        flag = "==" if metered == trace.total else "MISMATCH"
        print(f"  {t:<3} {metered:>10,} {flag} {trace.total:>10,}")

    print("\ncost is affine in T: fit a line through two points,")
    f = lambda t: mx.count_flops(cfg, schema, t, n_candidates=1).total
    slope = (f(32) - f(8)) // (32 - 8)
    print(f"  slope from T=8,32:   {slope:,} flops per action")
    for t in (16, 48, 64):
        predicted = f(8) + slope * (t - 8)
        print(f"  predict T={t:<3} -> {predicted:,}  "
              f"(meter says {f(t):,}, match={predicted == f(t)})")

    print("\nper-component split at T=64, K=8, decoupled:")
    n_u, n_g = mx.allocate_heads(20, 12, 4)
    dcfg = mx.ModelConfig(
        n_heads=4, head_dim=32, n_blocks=2, max_seq_len=64,
        decoupling=mx.DecoupleConfig(True, n_u, n_g),
    )
    report = mx.count_flops(dcfg, schema, 64, n_candidates=8, rlb=True)
    for name, comp in report.components.items():
        print(f"  {name:>15}: user {comp.user:>12,}   item {comp.item:>12,}")
    print(f"  {'total':>15}: {report.total:,}")

    print("\npinned production shape:")
    savings, prod, assumptions = mx.production_savings()
    for key in ("n_heads", "head_dim", "n_blocks", "seq_len",
                "candidates_per_request", "savings_mode"):
        print(f"  {key}: {assumptions[key]}")
    print(f"  dense parameters: {prod.n_params:,}")
    print(f"  serving savings:  {savings:.1%}")


if __name__ == "__main__":
    main()
