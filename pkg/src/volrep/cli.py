"""Command-line entry point.

    volrep <command> [--config PATH] [--key=value ...]

Commands: gen-data, pretrain, probe, visualize, grad-check. Every
option is a config key (see config.py); --key=value overrides the
config file. Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import os
import sys

import numpy as np

from .config import Config, ConfigError, build_config
from .evaluate import (
    extract_features, gradient_fidelity_check, linear_probe,
    similarity_heatmap, write_heatmap_pgm,
)
from .synth import GenConfig, corpus_vocab, generate_corpus, load_corpus
from .tensor import set_default_dtype
from .text import Vocab
from .train import Trainer, build_model_for_eval
from . import plots

_USAGE = """usage: volrep <command> [--config PATH] [--key=value ...]

commands:
  gen-data    write a synthetic (volume, report) corpus to out_dir
              keys: seed, n, out_dir, vol_h/w/d, patch_h/w/d, lesion_min/max
  pretrain    train on a corpus; writes loss.csv, loss.png and a checkpoint
              keys: data_dir, out_dir, ckpt_out, steps, batch_size, seed,
              resume, save_every, enable_sa/il/wl, mask_ratio, top_k, ...
  probe       linear-probe frozen features; writes probe.csv and probe.png
              keys: data_dir, checkpoint, out_dir, label_ratio, seed
  visualize   per-sentence similarity heatmap; writes PGM slices, the
              top-K index list, and a montage PNG
              keys: data_dir, checkpoint, out_dir, sample_id,
              sentence_index, top_k
  grad-check  verify analytic gradients against finite differences
              keys: seed

`volrep <command> --help` shows this text. Unknown keys are rejected.
"""


class UsageError(Exception):
    pass


def _gen_config(cfg: Config) -> GenConfig:
    return GenConfig(
        dims=cfg.vol_dims,
        spacing=(cfg.spacing_x, cfg.spacing_y, cfg.spacing_z),
        patch_dims=cfg.patch_dims,
        lesion_min=cfg.lesion_min,
        lesion_max=cfg.lesion_max,
    )


def _load_vocab(cfg: Config) -> Vocab:
    if cfg.vocab:
        return Vocab.from_file(cfg.vocab)
    return corpus_vocab(_gen_config(cfg))


def _require(cfg: Config, *keys) -> None:
    for key in keys:
        if not getattr(cfg, key):
            raise UsageError(f"config key '{key}' is required for this command")


def cmd_gen_data(cfg: Config) -> None:
    _require(cfg, "out_dir")
    manifest = generate_corpus(cfg.seed, cfg.n, _gen_config(cfg), cfg.out_dir)
    print(f"wrote {cfg.n} samples; manifest at {manifest}")


def cmd_pretrain(cfg: Config) -> None:
    _require(cfg, "data_dir", "out_dir")
    set_default_dtype(np.float64 if cfg.dtype == "f64" else np.float32)
    corpus = load_corpus(cfg.data_dir)
    trainer = Trainer(cfg, corpus, _load_vocab(cfg))
    if cfg.resume:
        trainer.load(cfg.resume)
        print(f"resumed from {cfg.resume} at step {trainer.step}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_out = cfg.ckpt_out or os.path.join(cfg.out_dir, "model.ckpt")
    csv_path = os.path.join(cfg.out_dir, "loss.csv")
    reports = trainer.run(csv_path=csv_path, ckpt_out=ckpt_out,
                          save_every=cfg.save_every, print_fn=print)
    plots.save_loss_curves(csv_path, os.path.join(cfg.out_dir, "loss.png"))
    if reports:
        last = reports[-1]
        print(f"finished step {last.step}: total={last.l_total:.4f}")
    print(f"checkpoint: {ckpt_out}")


def cmd_probe(cfg: Config) -> None:
    _require(cfg, "data_dir", "checkpoint", "out_dir")
    set_default_dtype(np.float64 if cfg.dtype == "f64" else np.float32)
    corpus = load_corpus(cfg.data_dir)
    vocab = _load_vocab(cfg)
    model = build_model_for_eval(cfg, vocab, cfg.checkpoint)
    feats = extract_features(model, [s.volume for s in corpus])
    labels = np.stack([s.labels for s in corpus])
    result = linear_probe(feats, labels, cfg.label_ratio, cfg.seed,
                          cfg.probe_iters, cfg.probe_lr)
    os.makedirs(cfg.out_dir, exist_ok=True)
    names = _gen_config(cfg).type_names
    result.to_csv(os.path.join(cfg.out_dir, "probe.csv"), names)
    plots.save_probe_chart(result, os.path.join(cfg.out_dir, "probe.png"), names)
    print(f"macro AUC {result.macro_auc:.4f}  accuracy {result.accuracy:.4f} "
          f"(train {result.n_train}, test {result.n_test})")


def cmd_visualize(cfg: Config) -> None:
    _require(cfg, "data_dir", "checkpoint", "out_dir")
    set_default_dtype(np.float64 if cfg.dtype == "f64" else np.float32)
    corpus = load_corpus(cfg.data_dir)
    if not 0 <= cfg.sample_id < len(corpus):
        raise IndexError(f"sample_id {cfg.sample_id} out of range ({len(corpus)} samples)")
    sample = corpus[cfg.sample_id]
    vocab = _load_vocab(cfg)
    model = build_model_for_eval(cfg, vocab, cfg.checkpoint)
    hm = similarity_heatmap(model, sample.volume, sample.report_text, vocab,
                            cfg.sentence_index, cfg.top_k)
    stem = f"heatmap_s{cfg.sample_id:04d}_sent{cfg.sentence_index}"
    paths = write_heatmap_pgm(hm, cfg.out_dir, stem)
    truth = None
    if cfg.sentence_index < len(sample.truth):
        truth = sample.truth[cfg.sentence_index]
    montage = os.path.join(cfg.out_dir, f"{stem}.png")
    plots.save_heatmap_montage(hm, montage, truth)
    print("\n".join(paths + [montage]))


def cmd_grad_check(cfg: Config) -> None:
    result = gradient_fidelity_check(cfg.seed)
    worst = sorted(result["per_param"].items(), key=lambda kv: -kv[1])[:5]
    for name, err in worst:
        print(f"  {name}: {err:.3e}")
    status = "PASS" if result["passed"] else "FAIL"
    print(f"{status}: max relative gradient error {result['max_rel_err']:.3e} "
          f"({result['elapsed_s']:.1f}s)")
    if not result["passed"]:
        raise RuntimeError("gradient check failed")


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "visualize": cmd_visualize,
    "grad-check": cmd_grad_check,
}


def _parse_args(args) -> Config:
    config_path = None
    overrides = []
    i = 0
    while i < len(args):
        arg = args[i]
        if arg in ("-h", "--help"):
            raise UsageError("")
        if arg == "--config":
            if i + 1 >= len(args):
                raise UsageError("--config needs a path")
            config_path = args[i + 1]
            i += 2
            continue
        if arg.startswith("--config="):
            config_path = arg.split("=", 1)[1]
            i += 1
            continue
        if arg.startswith("--") and "=" in arg:
            overrides.append(arg[2:])
            i += 1
            continue
        raise UsageError(f"unrecognized argument: {arg}")
    return build_config(config_path, overrides)


def main(argv=None) -> int:
    args = list(sys.argv[1:] if argv is None else argv)
    if not args:
        print(_USAGE, file=sys.stderr)
        return 1
    if args[0] in ("-h", "--help"):
        print(_USAGE)
        return 0
    command = args[0]
    if command not in _COMMANDS:
        print(f"unknown command: {command}\n\n{_USAGE}", file=sys.stderr)
        return 1
    if any(a in ("-h", "--help") for a in args[1:]):
        print(_USAGE)
        return 0
    try:
        cfg = _parse_args(args[1:])
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}\n\n{_USAGE}", file=sys.stderr)
        return 1
    try:
        _COMMANDS[command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report, don't traceback
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


def entry() -> None:
    sys.exit(main())
