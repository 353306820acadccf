"""Command-line entry point.

Subcommands: gradcheck, train, eval-lengths, tp-check, paramcount, bench.
Exit codes: 0 success, 1 verification failure, 2 config or I/O error.
"""

import argparse
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import layer as ml
from . import tasks
from . import tp as tp_mod
from . import training as tr
from . import verify
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import load_config
from .recurrence import ConfigError

TP_TOL = 1e-10


def _ensure_out(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _task_k(task):
    return {"s2": 2, "s3": 3, "s4": 4, "s5": 5}[task]


def _model_spec(cfg):
    return tr.ModelSpec(kind=cfg.model, d_model=cfg.d_model, n_heads=cfg.n_heads,
                        k_dim=cfg.k_dim, v_dim=cfg.v_dim, hidden=cfg.hidden,
                        state_clip=cfg.state_clip if cfg.state_clip > 0 else None)


def _train_config(cfg):
    return tr.TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size,
                          peak_lr=cfg.peak_lr, warmup_frac=cfg.warmup_frac,
                          weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)


def metrics_to_csv(metrics):
    lines = ["step,split,loss,accuracy,lr,grad_norm"]
    for step, split, loss, acc, lr, gnorm in metrics:
        lines.append(f"{step},{split},{loss!r},{acc!r},{lr!r},{gnorm!r}")
    return "\n".join(lines) + "\n"


def cmd_gradcheck(cfg):
    rows = verify.run_gradcheck(n_seeds=cfg.gradcheck_seeds,
                                corrupt=cfg.corrupt_backward)
    report = "\n".join(verify.report_lines(rows)) + "\n"
    sys.stdout.write(report)
    out = _ensure_out(cfg)
    _write(os.path.join(out, "gradcheck.txt"), report)
    failures = [r for r in rows if not r.ok]
    if failures:
        sys.stdout.write(f"FAILED: {len(failures)} gradient(s) out of tolerance\n")
        for r in failures:
            sys.stdout.write(f"  {r.group}/{r.name}: rel_err={r.rel_err:.3e} > {r.tol:.0e}\n")
        return 1
    sys.stdout.write("all gradients within tolerance\n")
    return 0


def cmd_train(cfg):
    out = _ensure_out(cfg)
    if cfg.task == "char-lm":
        if cfg.corpus:
            with open(cfg.corpus, "rb") as fh:
                corpus = fh.read()
        else:
            corpus = tasks.synthetic_text_corpus(100_000, seed=cfg.seed)
        run = tr.train_char_lm(cfg.model, corpus, seq_len=cfg.seq_len,
                               seed=cfg.seed, spec=_model_spec(cfg),
                               cfg=_train_config(cfg))
        vocab_bytes = tr.load_corpus_tokens(corpus)[1]
        extra = {"vocab": vocab_bytes.astype(np.float64)}
    else:
        run = tr.train_state_tracking(cfg.model, _task_k(cfg.task), cfg.train_len,
                                      seed=cfg.seed, spec=_model_spec(cfg),
                                      cfg=_train_config(cfg))
        extra = {}
    tensors = dict(run.model.params)
    tensors.update(extra)
    save_checkpoint(os.path.join(out, "model.ckpt"), tensors)
    _write(os.path.join(out, "metrics.csv"), metrics_to_csv(run.metrics))
    final = run.metrics[-1]
    sys.stdout.write(f"trained {cfg.model} on {cfg.task}: final loss={final[2]:.4f} "
                     f"accuracy={final[3]:.4f}\n")
    sys.stdout.write(f"wrote {out}/model.ckpt and {out}/metrics.csv\n")
    return 0


def _rebuild_model(cfg, n_classes_vocab):
    vocab_size, n_classes = n_classes_vocab
    model = tr.SequenceModel(_model_spec(cfg), vocab_size=vocab_size,
                             n_classes=n_classes, seed=cfg.seed)
    ckpt = load_checkpoint(os.path.join(cfg.out, "model.ckpt"))
    for name, arr in model.params.items():
        if name not in ckpt:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        if ckpt[name].shape != arr.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape "
                                  f"{ckpt[name].shape} != model shape {arr.shape}")
        arr[...] = ckpt[name]
    return model


def cmd_eval_lengths(cfg):
    if cfg.task == "char-lm":
        raise ConfigError("eval-lengths applies to the state-tracking tasks")
    k = _task_k(cfg.task)
    order = len(tasks.sk_permutations(k))
    model = _rebuild_model(cfg, (order, order))
    accs = tr.evaluate_length_generalization(model, k, cfg.eval_lengths,
                                             seed=cfg.seed + 1)
    lines = ["length,accuracy"]
    for length in cfg.eval_lengths:
        lines.append(f"{length},{accs[length]!r}")
        sys.stdout.write(f"length {length}: accuracy {accs[length]:.4f}\n")
    _write(os.path.join(_ensure_out(cfg), "lengths.csv"), "\n".join(lines) + "\n")
    return 0


def cmd_tp_check(cfg):
    out = _ensure_out(cfg)
    params = ml.init_layer_params(cfg.d_model, cfg.n_heads, cfg.k_dim, cfg.v_dim,
                                  seed=cfg.seed, alpha_range=(1.0, 2.0),
                                  beta_range=(0.5, 1.5))
    rng = np.random.default_rng(cfg.seed + 1)
    x = rng.standard_normal((2, 6, cfg.d_model))
    dy = rng.standard_normal((2, 6, cfg.d_model))

    res = tp_mod.tp_layer_step(cfg.tp_scheme, cfg.tp_world, params, x, dy)
    _write(os.path.join(out, "comm_log.csv"), tp_mod.comm_log_to_csv(res.comm_log))

    fwd = sum(1 for r in res.comm_log if r.direction == "forward")
    bwd = sum(1 for r in res.comm_log if r.direction == "backward")
    lines = [f"scheme={cfg.tp_scheme} world={cfg.tp_world}",
             f"forward rounds={fwd} (extra {fwd - 1}), backward rounds={bwd} "
             f"(extra {bwd - 1})"]
    status = 0
    if cfg.tp_scheme == "topology-independent":
        o_ref, _, cache = ml.layer_forward_train(params, x)
        grads_ref, dx_ref = ml.layer_backward(params, cache, dy, clip=params.clip)
        dev = max(float(np.max(np.abs(res.output - o_ref))),
                  float(np.max(np.abs(res.dx - dx_ref))))
        for name in grads_ref:
            dev = max(dev, float(np.max(np.abs(res.grads[name] - grads_ref[name]))))
        lines.append(f"max deviation vs single device = {dev:.3e}")
        if dev > TP_TOL or fwd != 2 or bwd != 4:
            status = 1
    else:
        if fwd != 1 or bwd != 1:
            status = 1
        lines.append("per-shard blocks ran unmodified; no extra communication")
    lines.append("OK" if status == 0 else "FAILED")
    report = "\n".join(lines) + "\n"
    sys.stdout.write(report)
    _write(os.path.join(out, "tp_report.txt"), report)
    return status


def cmd_paramcount(cfg):
    lines = ["pattern,params,state_size"]
    sys.stdout.write(f"{'pattern':12s} {'params':>12s} {'state':>10s}\n")
    for tag in ml.PATTERNS:
        pattern = ml.HeadPattern(tag=tag, n_heads=cfg.n_heads, k_dim=cfg.k_dim,
                                 v_dim=cfg.v_dim, d_model=cfg.d_model)
        count = ml.param_count(pattern)
        state = ml.state_size(pattern)
        lines.append(f"{tag},{count},{state}")
        sys.stdout.write(f"{tag:12s} {count:12d} {state:10d}\n")
    _write(os.path.join(_ensure_out(cfg), "paramcount.csv"), "\n".join(lines) + "\n")
    return 0


def cmd_bench(cfg):
    rows = bench_mod.bench_recurrence(cfg.bench_b, cfg.bench_t, cfg.n_heads,
                                      cfg.k_dim, cfg.v_dim, reps=cfg.bench_reps,
                                      seed=cfg.seed)
    csv = bench_mod.rows_to_csv(rows)
    sys.stdout.write(csv)
    _write(os.path.join(_ensure_out(cfg), "bench.csv"), csv)
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval-lengths": cmd_eval_lengths,
    "tp-check": cmd_tp_check,
    "paramcount": cmd_paramcount,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="m2rnn",
        description="Matrix-state gated RNN: verification, training, TP simulation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="key = value config file")
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out", default=None, help="output directory")
        cmd.add_argument("--override", action="append", default=[],
                         metavar="KEY=VALUE")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.override, seed=args.seed, out=args.out)
        return COMMANDS[args.command](cfg)
    except (ConfigError, CheckpointError) as err:
        sys.stderr.write(f"error: {err}\n")
        return 2
    except OSError as err:
        sys.stderr.write(f"i/o error: {err}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
