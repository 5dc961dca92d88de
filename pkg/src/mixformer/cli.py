"""Command-line interface.

Subcommands: gen (synthetic corpus), train, flops (cost reports),
bench-rlb (request-level batching benchmark), ablate (single-switch
variants).  Every command resolves defaults, then an optional JSON
config file, then explicit flags, and serializes the resolved
configuration into its outputs so runs can be reproduced from artifacts
alone.  Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .blocks import (
    DecoupleConfig,
    ModelConfig,
    config_from_dict,
    config_to_dict,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)
from .datagen import GeneratorSpec, generate, tune_noise_temperature
from .decouple import allocate_heads, build_mask, forward_decoupled, rlb_forward
from .errors import ConfigError, DataError, NumericError
from .features import (
    Dataset,
    read_dataset,
    read_schema,
    stack_requests,
    write_dataset,
    write_oracle,
    write_schema,
)
from .flopsmeter import (
    count_flops,
    production_savings,
    rlb_savings,
    scaling_report,
    schema_from_widths,
)
from .trainer import (
    ABLATION_NAMES,
    Optimizer,
    OptimizerConfig,
    apply_ablation,
    batch_loss,
    evaluate,
    fit,
    plan_batches,
    run_ablation,
)

DEFAULT_SEQ_POINTS = (512, 2048, 8192, 10000)


def _preset_invalid_small() -> ModelConfig:
    # the published small shape; head_dim 386 cannot be split into 16 heads
    raise ConfigError(
        "preset 'small-reported' (n_heads=16, head_dim=386) is invalid: 386 is "
        "not divisible by 16, so head mixing cannot slice it; use "
        "'small-corrected' (head_dim=384)"
    )


PRESETS = {
    "desk-small": lambda: ModelConfig(n_heads=4, head_dim=32, n_blocks=2, max_seq_len=64),
    "small-corrected": lambda: ModelConfig(
        n_heads=16, head_dim=384, n_blocks=4, max_seq_len=512
    ),
    "medium-corrected": lambda: ModelConfig(
        n_heads=16, head_dim=768, n_blocks=4, max_seq_len=512
    ),
    "small-reported": _preset_invalid_small,
}


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return obj


def _resolve(dc, file_cfg: dict, cli_args: dict):
    """defaults < config file < explicit CLI flags."""
    known = set(dc.__dataclass_fields__)
    unknown = set(file_cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = asdict(dc)
    merged.update(file_cfg)
    merged.update({k: v for k, v in cli_args.items() if v is not None and k in known})
    return type(dc)(**merged)


def _model_config(run) -> ModelConfig:
    if run.preset not in PRESETS:
        raise ConfigError(f"unknown preset '{run.preset}'; have {sorted(PRESETS)}")
    cfg = PRESETS[run.preset]()
    if run.model:
        merged = config_to_dict(cfg)
        for key, val in run.model.items():
            if key not in merged:
                raise ConfigError(f"unknown model config key '{key}'")
            if isinstance(merged[key], dict) and isinstance(val, dict):
                merged[key].update(val)
            else:
                merged[key] = val
        cfg = config_from_dict(merged)
    return cfg


def _decoupled(cfg: ModelConfig, schema) -> ModelConfig:
    n_u, n_g = allocate_heads(schema.d_ns_user, schema.d_ns_item, cfg.n_heads)
    return replace(
        cfg,
        decoupling=DecoupleConfig(enabled=True, n_user_heads=n_u, n_item_heads=n_g),
    )


# ----------------------------------------------------------------------
# gen
# ----------------------------------------------------------------------


@dataclass
class GenRun:
    seed: int = 0
    n_users: int = 2000
    n_items: int = 500
    n_requests: int = 20000
    candidates_per_request: int = 8
    seq_len: int = 32
    w_inter: float = 2.5
    w_seq: float = 0.6
    noise_temperature: float = 1.0
    tune_oracle: bool = True
    oracle_lo: float = 0.84
    oracle_hi: float = 0.86


def cmd_gen(args: argparse.Namespace) -> int:
    run = _resolve(
        GenRun(),
        _load_json(args.config),
        {
            "seed": args.seed,
            "n_users": args.users,
            "n_items": args.items,
            "n_requests": args.requests,
            "candidates_per_request": args.candidates,
            "seq_len": args.seq_len,
            "tune_oracle": args.tune_oracle,
        },
    )
    spec = GeneratorSpec(
        n_users=run.n_users,
        n_items=run.n_items,
        n_requests=run.n_requests,
        candidates_per_request=run.candidates_per_request,
        seq_len_min=run.seq_len,
        seq_len_max=run.seq_len,
        w_inter=run.w_inter,
        w_seq=run.w_seq,
        noise_temperature=run.noise_temperature,
        seed=run.seed,
    )
    achieved = None
    if run.tune_oracle:
        spec, achieved = tune_noise_temperature(spec, (run.oracle_lo, run.oracle_hi))
    data = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_schema(str(out / "schema.txt"), data.dataset.schema)
    write_dataset(str(out / "dataset.bin"), data.dataset)
    write_oracle(str(out / "oracle.csv"), data.oracle)
    resolved = asdict(run)
    resolved["noise_temperature"] = spec.noise_temperature
    record = {
        "run_config": resolved,
        "oracle_auc": achieved if achieved is not None else data.oracle_auc(0),
        "n_impressions": data.dataset.n_impressions,
    }
    (out / "gen_config.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    print(
        f"wrote {len(data.dataset.requests)} requests "
        f"({data.dataset.n_impressions} impressions) to {out}; "
        f"oracle AUC {record['oracle_auc']:.4f}"
    )
    return 0


# ----------------------------------------------------------------------
# train
# ----------------------------------------------------------------------


@dataclass
class TrainRun:
    preset: str = "desk-small"
    model: dict = field(default_factory=dict)
    seed: int = 0
    epochs: int = 1
    batch_size: int = 256
    max_steps: int | None = None
    holdout_fraction: float = 0.1
    eval_every: int = 0
    save_every: int = 0
    decouple: bool = False
    lr_dense: float = 0.01
    lr_sparse: float = 0.05


def _split_dataset(dataset: Dataset, fraction: float):
    n = len(dataset.requests)
    cut = max(1, min(n - 1, int(n * (1.0 - fraction)))) if 0 < fraction < 1 else n
    train = Dataset(schema=dataset.schema, requests=dataset.requests[:cut])
    holdout = dataset.requests[cut:] if cut < n else []
    return train, holdout


def cmd_train(args: argparse.Namespace) -> int:
    run = _resolve(
        TrainRun(),
        _load_json(args.config),
        {
            "preset": args.preset,
            "seed": args.seed,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "max_steps": args.max_steps,
            "holdout_fraction": args.holdout_fraction,
            "eval_every": args.eval_every,
            "save_every": args.save_every,
            "decouple": args.decouple or None,
            "lr_dense": args.lr_dense,
            "lr_sparse": args.lr_sparse,
        },
    )
    data_dir = Path(args.data)
    schema = read_schema(str(data_dir / "schema.txt"))
    dataset = read_dataset(str(data_dir / "dataset.bin"), schema)
    train_set, holdout = _split_dataset(dataset, run.holdout_fraction)
    opt_cfg = OptimizerConfig(lr_dense=run.lr_dense, lr_sparse=run.lr_sparse)

    start_epoch = 0
    start_step = 0
    if args.resume:
        store, dense_opt, extra = load_checkpoint(args.resume)
        if dense_opt is None:
            raise DataError(f"{args.resume} has no optimizer state; cannot resume")
        opt = Optimizer(store.dense, store.tables, opt_cfg)
        opt.rms_acc = dense_opt
        start_epoch = int(extra.get("epoch", 0))
        start_step = int(extra.get("step_in_epoch", 0))
        cfg = store.config
    else:
        cfg = _model_config(run)
        if run.decouple:
            cfg = _decoupled(cfg, schema)
        store = init_parameters(schema, cfg, run.seed)
        opt = Optimizer(store.dense, store.tables, opt_cfg)

    mask = (
        build_mask(cfg.n_heads, cfg.decoupling.n_user_heads, cfg.head_dim)
        if cfg.decoupling.enabled
        else None
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resolved = asdict(run)
    log_path = out / "train_log.csv"
    log_fh = open(log_path, "a" if args.resume else "w")
    if not args.resume:
        log_fh.write("# " + json.dumps(resolved, sort_keys=True) + "\n")
        log_fh.write("step,epoch,loss,holdout_auc0\n")

    global_step = 0
    done = 0
    t0 = time.perf_counter()
    try:
        for epoch in range(start_epoch, run.epochs):
            plan = plan_batches(train_set.requests, run.batch_size, run.seed, epoch)
            step = start_step if epoch == start_epoch else 0
            while step < len(plan):
                if run.max_steps is not None and done >= run.max_steps:
                    break
                batch = stack_requests([train_set.requests[i] for i in plan[step]])
                opt.zero_grad()
                loss = batch_loss(batch, store, mask)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
                loss.backward()
                opt.step()
                step += 1
                done += 1
                global_step += 1
                auc_cell = ""
                if run.eval_every and holdout and done % run.eval_every == 0:
                    summary = evaluate(holdout, store, mask)
                    auc_cell = f"{summary.auc[0]:.6f}"
                log_fh.write(f"{done},{epoch},{value:.9f},{auc_cell}\n")
                if run.save_every and done % run.save_every == 0:
                    save_checkpoint(
                        str(out / "checkpoint.bin"),
                        store,
                        dense_opt=opt.rms_acc,
                        extra={"epoch": epoch, "step_in_epoch": step},
                    )
            if run.max_steps is not None and done >= run.max_steps:
                save_checkpoint(
                    str(out / "checkpoint.bin"),
                    store,
                    dense_opt=opt.rms_acc,
                    extra={"epoch": epoch, "step_in_epoch": step},
                )
                break
        else:
            save_checkpoint(
                str(out / "checkpoint.bin"),
                store,
                dense_opt=opt.rms_acc,
                extra={"epoch": run.epochs, "step_in_epoch": 0},
            )
    finally:
        log_fh.close()

    summary = evaluate(holdout, store, mask) if holdout else None
    record = {
        "run_config": resolved,
        "model_config": config_to_dict(cfg),
        "steps": done,
        "wall_seconds": time.perf_counter() - t0,
        "metrics": asdict(summary) if summary else None,
    }
    (out / "metrics.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    if summary:
        print(
            f"trained {done} steps; holdout AUC "
            + ", ".join(f"task{t}={a:.4f}" for t, a in enumerate(summary.auc))
        )
    else:
        print(f"trained {done} steps (no holdout)")
    return 0


# ----------------------------------------------------------------------
# flops
# ----------------------------------------------------------------------


@dataclass
class FlopsRun:
    preset: str = "desk-small"
    model: dict = field(default_factory=dict)
    seq_len: int = 64
    candidates: int = 1
    rlb: bool = False
    decouple: bool = False
    d_ns_user: int = 80
    d_ns_item: int = 48
    action_dim: int = 20


def cmd_flops(args: argparse.Namespace) -> int:
    if args.production:
        savings, report, assumptions = production_savings()
        print("pinned production shape:")
        for key in (
            "n_heads", "head_dim", "n_blocks", "seq_len", "candidates_per_request",
            "d_ns_user", "d_ns_item", "savings_mode",
        ):
            print(f"  {key}: {assumptions[key]}")
        print(f"  dense params: {report.n_params:,}")
        print(f"  serving flops/request (batched): {report.total:,}")
        print(f"  savings vs unbatched: {savings:.4f}")
        return 0

    run = _resolve(
        FlopsRun(),
        _load_json(args.config),
        {
            "preset": args.preset,
            "seq_len": args.seq_len,
            "candidates": args.candidates,
            "rlb": args.rlb or None,
            "decouple": args.decouple or None,
        },
    )
    if args.schema:
        schema = read_schema(args.schema)
    else:
        schema = schema_from_widths(
            run.d_ns_user, run.d_ns_item, run.action_dim, max(run.seq_len, 1)
        )
    cfg = _model_config(run)
    if run.decouple or run.rlb:
        cfg = _decoupled(cfg, schema)

    if args.axis:
        if args.axis == "sequence":
            points = (
                [int(p) for p in args.points.split(",")]
                if args.points
                else list(DEFAULT_SEQ_POINTS)
            )
        else:
            if not args.points:
                raise ConfigError("dense axis needs --points like 384:4,768:4")
            points = []
            for tok in args.points.split(","):
                dim, _, blocks = tok.partition(":")
                points.append((int(dim), int(blocks) if blocks else cfg.n_blocks))
        rows = scaling_report(
            cfg, schema, args.axis, points, seq_len=run.seq_len,
            n_candidates=run.candidates,
        )
        lines = ["head_dim,n_blocks,seq_len,params,flops"]
        lines += [
            f"{r['head_dim']},{r['n_blocks']},{r['seq_len']},{r['params']},{r['flops']}"
            for r in rows
        ]
        text = "\n".join(lines) + "\n"
        if args.out:
            Path(args.out).write_text("# " + json.dumps(asdict(run), sort_keys=True) + "\n" + text)
            print(f"wrote {len(rows)} rows to {args.out}")
        else:
            print(text, end="")
        return 0

    report = count_flops(
        cfg, schema, run.seq_len, n_candidates=run.candidates, rlb=run.rlb
    )
    print(f"params (dense): {report.n_params:,}")
    print(
        f"flops for {report.n_candidates} candidate(s)"
        + (" with request-level batching" if report.rlb else "")
        + f": {report.total:,}"
    )
    for name, comp in report.components.items():
        print(f"  {name:>15}: user {comp.user:>16,}  item {comp.item:>16,}")
    if cfg.decoupling.enabled and run.candidates > 1:
        s = rlb_savings(cfg, schema, run.seq_len, run.candidates)
        print(f"savings at K={run.candidates}: {s:.4f}")
    return 0


# ----------------------------------------------------------------------
# bench-rlb
# ----------------------------------------------------------------------


def cmd_bench_rlb(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    schema = read_schema(str(data_dir / "schema.txt"))
    dataset = read_dataset(str(data_dir / "dataset.bin"), schema)
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset '{args.preset}'")
    cfg = _decoupled(PRESETS[args.preset](), schema)
    store = init_parameters(schema, cfg, args.seed)
    resolved = {
        "preset": args.preset,
        "seed": args.seed,
        "candidates_list": args.candidates_list,
        "requests": args.requests,
    }
    ks = [int(k) for k in args.candidates_list.split(",")]
    n_req = min(args.requests, len(dataset.requests))
    requests = dataset.requests[:n_req]
    rng = np.random.default_rng(args.seed)
    item_vocabs = [f.vocab_size for f in schema.item_fields()]

    rows = []
    print("k,wall_percand_s,wall_rlb_s,speedup,max_abs_diff,meter_savings")
    for k in ks:
        reqs_k = []
        for r in requests:
            cands = np.stack(
                [rng.integers(v, size=k) for v in item_vocabs], axis=1
            ).astype(np.int64)
            reqs_k.append(
                replace_candidates(r, cands)
            )
        t0 = time.perf_counter()
        per_cand = [
            np.stack([forward_decoupled(r, i, store) for i in range(k)])
            for r in reqs_k
        ]
        t_base = time.perf_counter() - t0
        t0 = time.perf_counter()
        batched = [rlb_forward(r, store) for r in reqs_k]
        t_rlb = time.perf_counter() - t0
        diff = max(
            float(np.max(np.abs(a - b))) for a, b in zip(per_cand, batched)
        )
        meter = rlb_savings(cfg, schema, requests[0].seq_len, k)
        speedup = t_base / t_rlb if t_rlb > 0 else float("inf")
        rows.append((k, t_base, t_rlb, speedup, diff, meter))
        print(f"{k},{t_base:.4f},{t_rlb:.4f},{speedup:.3f},{diff:.3e},{meter:.4f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("# " + json.dumps(resolved, sort_keys=True) + "\n")
            fh.write("k,wall_percand_s,wall_rlb_s,speedup,max_abs_diff,meter_savings\n")
            for row in rows:
                fh.write(
                    f"{row[0]},{row[1]:.6f},{row[2]:.6f},{row[3]:.4f},"
                    f"{row[4]:.6e},{row[5]:.6f}\n"
                )
        print(f"wrote {args.out}")
    return 0


def replace_candidates(request, candidates: np.ndarray):
    return replace(request, candidates=candidates, labels=None)


# ----------------------------------------------------------------------
# ablate
# ----------------------------------------------------------------------


def cmd_ablate(args: argparse.Namespace) -> int:
    data_dir = Path(args.data)
    schema = read_schema(str(data_dir / "schema.txt"))
    dataset = read_dataset(str(data_dir / "dataset.bin"), schema)
    train_set, holdout = _split_dataset(dataset, args.holdout_fraction)
    if not holdout:
        raise DataError("ablate needs a holdout; lower --holdout-fraction")
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset '{args.preset}'")
    cfg = PRESETS[args.preset]()

    base = fit(
        train_set, cfg, seed=args.seed, epochs=args.epochs,
        batch_size=args.batch_size, holdout=holdout, max_steps=args.max_steps,
    )
    resolved = {
        "preset": args.preset,
        "seed": args.seed,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "max_steps": args.max_steps,
        "holdout_fraction": args.holdout_fraction,
    }
    base_flops = count_flops(cfg, schema, schema.max_seq_len).total
    lines = [
        "# " + json.dumps(resolved, sort_keys=True),
        "name,changed_fields,params,flops,final_loss,auc0,delta_auc0",
        f"base,0,{count_flops(cfg, schema, schema.max_seq_len).n_params},"
        f"{base_flops},{base.losses[-1]:.6f},{base.metrics.auc[0]:.6f},0.0",
    ]
    print(lines[-1])
    for name in ABLATION_NAMES:
        res = run_ablation(
            name, cfg, train_set, holdout, base.metrics, seed=args.seed,
            epochs=args.epochs, batch_size=args.batch_size, max_steps=args.max_steps,
        )
        vcfg = apply_ablation(cfg, name)
        rep = count_flops(vcfg, schema, schema.max_seq_len)
        row = (
            f"{name},{len(res.changed_fields)},{rep.n_params},{rep.total},"
            f"{res.variant_losses[-1]:.6f},{res.variant.auc[0]:.6f},"
            f"{res.delta_auc[0]:+.6f}"
        )
        lines.append(row)
        print(row)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablations.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'ablations.csv'}")
    return 0


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mixformer",
        description="Unified ranking model: data generation, training, and cost analysis.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus with a known oracle")
    g.add_argument("--out", required=True, help="output directory for the corpus")
    g.add_argument("--config", help="JSON file of generator overrides")
    g.add_argument("--seed", type=int)
    g.add_argument("--users", type=int)
    g.add_argument("--items", type=int)
    g.add_argument("--requests", type=int)
    g.add_argument("--candidates", type=int)
    g.add_argument("--seq-len", dest="seq_len", type=int)
    g.add_argument(
        "--no-tune-oracle", dest="tune_oracle", action="store_false", default=None,
        help="keep the configured noise temperature instead of bisecting",
    )
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train on a generated corpus")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output directory for the run")
    t.add_argument("--config", help="JSON file of training overrides")
    t.add_argument("--preset", choices=sorted(PRESETS))
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--max-steps", dest="max_steps", type=int)
    t.add_argument("--holdout-fraction", dest="holdout_fraction", type=float)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--save-every", dest="save_every", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--decouple", action="store_true", default=False)
    t.add_argument("--lr-dense", dest="lr_dense", type=float)
    t.add_argument("--lr-sparse", dest="lr_sparse", type=float)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("flops", help="analytic cost reports")
    f.add_argument("--config", help="JSON file of flops-run overrides")
    f.add_argument("--preset", choices=sorted(PRESETS))
    f.add_argument("--schema", help="schema.txt to take widths from")
    f.add_argument("--seq-len", dest="seq_len", type=int)
    f.add_argument("--candidates", type=int)
    f.add_argument("--rlb", action="store_true", default=False)
    f.add_argument("--decouple", action="store_true", default=False)
    f.add_argument("--axis", choices=("dense", "sequence"))
    f.add_argument("--points", help="dense: 'dim:blocks,...'; sequence: 'T,...'")
    f.add_argument("--production", action="store_true", help="pinned production shape")
    f.add_argument("--out", help="write CSV here instead of stdout")
    f.set_defaults(func=cmd_flops)

    b = sub.add_parser("bench-rlb", help="compare per-candidate vs batched serving")
    b.add_argument("--data", required=True)
    b.add_argument("--preset", default="desk-small", choices=sorted(PRESETS))
    b.add_argument("--seed", type=int, default=0)
    b.add_argument(
        "--candidates-list", dest="candidates_list", default="1,2,4,8,16,32,64,128"
    )
    b.add_argument("--requests", type=int, default=20)
    b.add_argument("--out", help="write the CSV here instead of stdout")
    b.set_defaults(func=cmd_bench_rlb)

    a = sub.add_parser("ablate", help="train base plus all single-switch variants")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, help="output directory for ablations.csv")
    a.add_argument("--preset", default="desk-small", choices=sorted(PRESETS))
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--epochs", type=int, default=1)
    a.add_argument("--batch-size", dest="batch_size", type=int, default=256)
    a.add_argument("--max-steps", dest="max_steps", type=int)
    a.add_argument("--holdout-fraction", dest="holdout_fraction", type=float, default=0.1)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
