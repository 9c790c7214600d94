"""``lafurca`` command line: datagen, train, separate, evaluate, irm, gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, bad
config file, unparseable model spec). ``LAFURCA_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .audio import Waveform, WavError, generate_dataset, load_example, read_manifest, read_wav, write_wav
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, load_config
from .gradcheck import MODEL_TOL, PRIMITIVE_TOL, check_model, check_primitives
from .metrics import evaluate, irm_oracle, write_report
from .separator import LaFurca, ModelSpecError, parse_model_spec
from .trainer import TrainConfig, Trainer, model_from_checkpoint

__all__ = ["main", "build_parser", "UsageError"]

log = logging.getLogger("lafurca")

MODEL_KEYS = ["n_sources", "n_filters", "window", "stride", "hidden", "chunk_len", "hop",
              "branches", "norm_eps"]
TRAIN_KEYS = ["base_lr", "decay", "decay_every", "batch_size", "max_epochs", "max_restarts",
              "seed", "adam_eps", "beta1", "beta2", "clip_norm", "loss_eps"]
DATA_KEYS = ["train", "valid", "test", "duration", "seed", "sample_rate"]
STFT_KEYS = ["stft_frame", "stft_hop", "irm_eps"]


class UsageError(Exception):
    pass


def _add_keys(parser: argparse.ArgumentParser, keys):
    defaults = RunConfig()
    kinds = {"int": int, "float": float}
    group = parser.add_argument_group("settings (also accepted as config-file keys)")
    for key in keys:
        value = getattr(defaults, key)
        group.add_argument(f"--{key.replace('_', '-')}", dest=key, type=kinds[type(value).__name__],
                           default=None, metavar=type(value).__name__.upper(),
                           help=f"(default: {value})")


def _add_config(parser):
    parser.add_argument("--config", type=Path, default=None,
                        help="key = value settings file; flags win (default: none)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lafurca", description="Dual-path BiLSTM two-source separation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("datagen", help="write a synthetic corpus and its manifests")
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")
    _add_config(p)
    _add_keys(p, DATA_KEYS)
    p.set_defaults(func=cmd_datagen, keys=DATA_KEYS)

    p = sub.add_parser("train", help="train a model from manifest_{train,valid}.csv")
    p.add_argument("--model", default=None, help='model notation such as "LF(C,2,2)" (required unless --resume)')
    p.add_argument("--data", type=Path, required=True, help="directory holding the manifests (required)")
    p.add_argument("--out", type=Path, required=True, help="run directory (required)")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last.lfck (default: off)")
    _add_config(p)
    _add_keys(p, MODEL_KEYS + TRAIN_KEYS)
    p.set_defaults(func=cmd_train, keys=MODEL_KEYS + TRAIN_KEYS)

    p = sub.add_parser("separate", help="separate one WAV or every WAV in a directory")
    p.add_argument("--ckpt", type=Path, required=True, help="checkpoint file (required)")
    p.add_argument("--in", dest="inp", type=Path, required=True, help="WAV file or directory (required)")
    p.add_argument("--out", type=Path, required=True, help="output directory (required)")
    p.add_argument("--emit-stages", action="store_true",
                   help="also write every stage's estimates as NAME_stageK_sJ.wav (default: off)")
    p.set_defaults(func=cmd_separate, keys=[])

    p = sub.add_parser("evaluate", help="score a checkpoint or a directory of estimates")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path, help="checkpoint to run on every mixture")
    src.add_argument("--estimates", type=Path, help="directory of MIXSTEM_sJ.wav files")
    p.add_argument("--manifest", type=Path, required=True, help="manifest CSV (required)")
    p.add_argument("--out", type=Path, required=True, help="report CSV (required)")
    _add_config(p)
    _add_keys(p, ["loss_eps"])
    p.set_defaults(func=cmd_evaluate, keys=["loss_eps"])

    p = sub.add_parser("irm", help="score the STFT ideal-ratio-mask oracle")
    p.add_argument("--manifest", type=Path, required=True, help="manifest CSV (required)")
    p.add_argument("--out", type=Path, required=True, help="report CSV (required)")
    _add_config(p)
    _add_keys(p, STFT_KEYS + ["loss_eps"])
    p.set_defaults(func=cmd_irm, keys=STFT_KEYS + ["loss_eps"])

    p = sub.add_parser("gradcheck", help="finite-difference check of a tiny float64 model")
    p.add_argument("--model", required=True, help='model notation such as "LF(2)" (required)')
    p.add_argument("--seed", type=int, default=7, help="model and data seed (default: 7)")
    p.add_argument("--samples", type=int, default=None,
                   help=f"parameter entries to check (default: {RunConfig().gradcheck_samples})")
    p.set_defaults(func=cmd_gradcheck, keys=[])
    return parser


def _config(args) -> RunConfig:
    overrides = {k: getattr(args, k) for k in args.keys if getattr(args, k, None) is not None}
    try:
        return load_config(getattr(args, "config", None), overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _db(x: float) -> str:
    return f"{x:.2f}"


# -- commands -----------------------------------------------------------------------

def cmd_datagen(args) -> int:
    cfg = _config(args)
    manifests = generate_dataset(args.out, cfg.train, cfg.valid, cfg.test, cfg.duration,
                                 cfg.seed, cfg.sample_rate)
    for split, m in manifests.items():
        print(f"{split}: {len(m)} mixtures -> {args.out / f'manifest_{split}.csv'}")
    return 0


def _load_split(data: Path, split: str):
    manifest = read_manifest(data / f"manifest_{split}.csv")
    if not len(manifest):
        raise ValueError(f"manifest_{split}.csv is empty")
    return [load_example(manifest, r) for r in manifest]


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(**{k: getattr(cfg, k) for k in TRAIN_KEYS})


def cmd_train(args) -> int:
    cfg = _config(args)
    train_set = _load_split(args.data, "train")
    valid_set = _load_split(args.data, "valid")
    last = args.out / "last.lfck"
    if args.resume:
        if not last.exists():
            raise FileNotFoundError(f"cannot resume: {last} does not exist")
        ck = load_checkpoint(last)
        spec = parse_model_spec(ck.spec)
        if args.model is not None and parse_model_spec(args.model, **cfg.model_hyper()) != spec:
            raise UsageError(f"--model does not match the checkpoint's model {ck.spec}")
        model = model_from_checkpoint(ck)
    else:
        if args.model is None:
            raise UsageError("--model is required unless --resume is given")
        try:
            spec = parse_model_spec(args.model, **cfg.model_hyper())
        except ModelSpecError as exc:
            raise UsageError(f"bad --model: {exc}") from exc
        model = LaFurca(spec, seed=cfg.seed)

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.txt").write_text(f"model = {spec.to_string()}\n" + cfg.to_text())
    trainer = Trainer(model, _train_config(cfg), train_set, valid_set, args.out)
    if args.resume:
        trainer.resume(last, args.out / "best.lfck", args.out / "loss.csv")
    result = trainer.run()
    for ev in result.events:
        if ev["event"] == "restart":
            print(f"epoch {ev['epoch']}: validation rose, restored best "
                  f"(best {_db(ev['best_valid'])} dB), base lr now {ev['base_lr']:g}")
        else:
            print(f"epoch {ev['epoch']}: {ev['event']}, stopping")
    print(f"{spec.notation()}: {trainer.epoch} epochs, best validation loss "
          f"{_db(trainer.best_valid)} dB -> {args.out / 'best.lfck'}")
    return 0


def _separate_one(model: LaFurca, path: Path, out: Path, emit_stages: bool) -> int:
    wav = read_wav(path)
    outputs = model(wav.samples)
    name = path.stem
    stages = list(enumerate(outputs, start=1)) if emit_stages else []
    written = 0
    for j, est in enumerate(outputs[-1].data, start=1):
        write_wav(out / f"{name}_s{j}.wav", Waveform(est, wav.sample_rate_hz))
        written += 1
    for k, stage in stages:
        for j, est in enumerate(stage.data, start=1):
            write_wav(out / f"{name}_stage{k}_s{j}.wav", Waveform(est, wav.sample_rate_hz))
    return written


def cmd_separate(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    if args.inp.is_dir():
        inputs = sorted(args.inp.glob("*.wav"))
        if not inputs:
            raise FileNotFoundError(f"no .wav files in {args.inp}")
    elif args.inp.exists():
        inputs = [args.inp]
    else:
        raise FileNotFoundError(f"input {args.inp} does not exist")
    args.out.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        n = _separate_one(model, path, args.out, args.emit_stages)
        print(f"{path.name}: wrote {n} estimates")
    return 0


def _items(manifest):
    for r in manifest:
        mix, refs = load_example(manifest, r)
        yield Path(r.mixture).stem, mix, refs


def _finish_report(report, out: Path) -> int:
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, report)
    print(report.summary())
    if report.missing:
        print(f"missing estimates for: {', '.join(report.missing)}", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    manifest = read_manifest(args.manifest)
    if args.ckpt is not None:
        model = model_from_checkpoint(load_checkpoint(args.ckpt))

        def separate(name, mixture):
            return model(mixture)[-1].data
    else:
        if not args.estimates.is_dir():
            raise FileNotFoundError(f"estimates directory {args.estimates} does not exist")
        n_src = len(manifest.records[0].sources) if len(manifest) else 2

        def separate(name, mixture):
            files = [args.estimates / f"{name}_s{j}.wav" for j in range(1, n_src + 1)]
            if not all(f.exists() for f in files):
                return None
            return np.stack([read_wav(f).samples for f in files])

    report = evaluate(_items(manifest), separate, cfg.loss_eps)
    return _finish_report(report, args.out)


def cmd_irm(args) -> int:
    cfg = _config(args)
    items = list(_items(read_manifest(args.manifest)))
    refs = {name: r for name, _, r in items}

    def separate(name, mixture):
        return irm_oracle(mixture, refs[name], cfg.stft_frame, cfg.stft_hop, cfg.irm_eps)

    report = evaluate(items, separate, cfg.loss_eps)
    return _finish_report(report, args.out)


def cmd_gradcheck(args) -> int:
    samples = args.samples if args.samples is not None else RunConfig().gradcheck_samples
    if samples < 1:
        raise UsageError("--samples must be positive")
    try:
        parse_model_spec(args.model)
    except ModelSpecError as exc:
        raise UsageError(f"bad --model: {exc}") from exc
    prim = check_primitives(args.seed)
    prim_err = max(r.max_rel_err for r in prim.values())
    report = check_model(args.model, seed=args.seed, n_samples=samples)
    worst = report.worst()
    print(f"primitives: {len(prim)} checked, max rel err {prim_err:.3e} (tol {PRIMITIVE_TOL:g})")
    print(f"{args.model}: {len(report.entries)} entries, max rel err {report.max_rel_err:.3e} "
          f"(tol {MODEL_TOL:g}; worst {worst.name}{list(worst.index)})")
    ok = prim_err < PRIMITIVE_TOL and report.passed(MODEL_TOL) and not report.zero_grad_params
    if report.zero_grad_params:
        print(f"parameters with identically zero gradient: {', '.join(report.zero_grad_params)}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


# -- entry point ----------------------------------------------------------------------

def _threads() -> int | None:
    raw = os.environ.get("LAFURCA_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LAFURCA_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"LAFURCA_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        threads = _threads()
        if threads is None:
            return args.func(args)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lafurca {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, CheckpointError, WavError, FloatingPointError) as exc:
        print(f"lafurca {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
