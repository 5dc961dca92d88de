"""What each architectural switch costs, on a small live run.

Trains the base model once, then retrains single-switch variants on
identical data with the same seed: no head mixing, head mixing replaced
by self-attention, no query-mixer FFN, shared sequence/output FFNs, and
post-norm.  Prints parameter count, analytic FLOPs, and the holdout AUC
delta per variant.  Steps are capped so the tour finishes quickly; the
deltas are directional, not publication numbers.
"""

import numpy as np

import mixformer as mx
from mixformer.trainer import OptimizerConfig, run_ablation

MAX_STEPS = 60


def main():
    spec = mx.GeneratorSpec(
        n_users=300, n_items=80, n_clusters=8, n_requests=1200,
        candidates_per_request=4, seq_len_min=8, seq_len_max=8, seed=7,
    )
    data = mx.generate(spec)
    train, holdout = mx.split_holdout(data, 0.1)
    schema = data.dataset.schema

    cfg = mx.ModelConfig(n_heads=4, head_dim=32, n_blocks=2, max_seq_len=8)
    opt = OptimizerConfig(lr_dense=0.003, lr_sparse=0.05)
    print(f"base: training {MAX_STEPS} capped steps ...")
    base = mx.fit(
        train, cfg, seed=0, epochs=2, batch_size=128,
        optimizer_config=opt, holdout=holdout, max_steps=MAX_STEPS,
    )
    base_report = mx.count_flops(cfg, schema, 8)
    print(f"  auc {base.metrics.auc[0]:.4f}, "
          f"params {base_report.n_params:,}, flops {base_report.total:,}\n")

    header = f"{'variant':<16} {'params':>10} {'flops':>12} {'auc':>8} {'delta':>8}"
    print(header)
    print("-" * len(header))
    for name in mx.ABLATION_NAMES:
        res = run_ablation(
            name, cfg, train, holdout, base.metrics,
            seed=0, epochs=2, batch_size=128,
            optimizer_config=opt, max_steps=MAX_STEPS,
        )
        (field,) = res.changed_fields
        rep = mx.count_flops(mx.apply_ablation(cfg, name), schema, 8)
        assert np.all(np.isfinite(res.variant_losses)), name
        print(f"{name:<16} {rep.n_params:>10,} {rep.total:>12,} "
              f"{res.variant.auc[0]:>8.4f} {res.delta_auc[0]:>+8.4f}")
    print("\neach row's config differs from base by exactly one switch")


if __name__ == "__main__":
    main()
