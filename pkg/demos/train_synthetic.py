"""End-to-end learning on a corpus with a known ceiling.

Generates a synthetic world whose labels mix a user-item latent dot
product with a sequence-match count, tunes the noise so the true-
probability oracle scores AUC ~0.85, then trains a small model and a
mean-pooling logistic baseline on the same data.  The printout situates
the model between the two anchors: it must clear the baseline and it
cannot beat the oracle.

Takes a few minutes single-threaded; pass --fast for a shorter run.
"""

import argparse
import time

import mixformer as mx
from mixformer.trainer import OptimizerConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--fast", action="store_true", help="3 epochs instead of 10")
    args = ap.parse_args()

    spec = mx.GeneratorSpec(
        n_users=600, n_items=120, n_clusters=12,
        seq_len_min=16, seq_len_max=16,
        n_requests=3000, candidates_per_request=8,
        seed=17,
    )
    print("tuning noise temperature so the oracle lands near AUC 0.85 ...")
    spec, oracle_auc = mx.tune_noise_temperature(spec, (0.84, 0.86))
    print(f"  temperature {spec.noise_temperature:.4f}, oracle AUC {oracle_auc:.4f}")

    data = mx.generate(spec)
    train, holdout = mx.split_holdout(data, 0.12)
    print(f"  {len(train.requests)} train requests, {len(holdout)} holdout")

    t0 = time.perf_counter()
    base = mx.baseline_score(train, holdout, seed=0, epochs=3, batch_size=256)
    print(f"\npooled logistic baseline: AUC {base.auc[0]:.4f} "
          f"({time.perf_counter() - t0:.0f}s)")

    cfg = mx.ModelConfig(n_heads=4, head_dim=32, n_blocks=2, max_seq_len=16)
    epochs = 3 if args.fast else 10
    print(f"\ntraining {epochs} epochs "
          f"(N={cfg.n_heads}, D={cfg.head_dim}, L={cfg.n_blocks}) ...")
    t0 = time.perf_counter()
    res = mx.fit(
        train, cfg, seed=0, epochs=epochs, batch_size=64,
        optimizer_config=OptimizerConfig(lr_dense=0.003, lr_sparse=0.05),
        holdout=holdout,
    )
    took = time.perf_counter() - t0
    print(f"  {len(res.losses)} steps in {took:.0f}s; "
          f"loss {res.losses[0]:.3f} -> {res.losses[-1]:.3f}")

    model_auc = res.metrics.auc[0]
    print("\nwhere the model landed:")
    print(f"  baseline  {base.auc[0]:.4f}")
    print(f"  model     {model_auc:.4f}   (uauc {res.metrics.uauc[0]:.4f})")
    print(f"  oracle    {oracle_auc:.4f}")
    margin = model_auc - base.auc[0]
    print(f"\nmodel beats baseline by {margin:+.4f} AUC and sits "
          f"{oracle_auc - model_auc:.4f} under the ceiling")


if __name__ == "__main__":
    main()
