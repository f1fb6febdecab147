"""``modese`` command line: synth -> prepare -> pretrain -> train -> evaluate / enhance.

Artifacts live under a base directory (``--base-dir``, else ``$MODESE_HOME``,
else the working directory).  Each command writes a ``run_<command>.json``
manifest next to its outputs and holds a lock file on its output directory
while writing.

Exit codes: 0 success, 1 usage error, 2 data/config/artifact error, 3 internal error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import traceback
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy
from filelock import FileLock, Timeout

from modese import __version__
from modese.config import RunConfig, dump_config, load_config
from modese.data import Dataset, SynthConfig, build_dataset, load_corpus, synth_corpus, write_corpus
from modese.dsp import extract_features, istft, stack_context
from modese.errors import ConfigError, DataError, ModeseError
from modese.eval import evaluate_enhancement, evaluate_masks, gate_analysis, mask_mse, ones_masks
from modese.mask import soft_enhance
from modese.mode import (
    build_mode_model,
    infer_mask,
    load_model,
    mode_forward,
    save_model,
)
from modese.pretrain import AutoencoderConfig, pretrain_model, save_pretrain_artifacts
from modese.training import TrainConfig, train_mode
from modese.wavio import read_wav, write_wav

log = logging.getLogger("modese")

ENV_HOME = "MODESE_HOME"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
PRETRAINED_NAME = "pretrained.mode"
MODEL_NAME = "model.mode"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- plumbing


def base_dir(args) -> Path:
    return Path(args.base_dir or os.environ.get(ENV_HOME) or ".")


def resolve(args, path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else base_dir(args) / path


def config_from_args(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_config(args.config, overrides)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, inputs: dict, outputs: list[Path],
                   results: dict | None = None) -> Path:
    """Run record: config hash, seed, library versions, input paths and output digests."""
    manifest = {
        "command": command,
        "config_hash": cfg.run_hash(),
        "feature_hash": cfg.feature_hash(),
        "seed": cfg.train.seed,
        "versions": {"modese": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {p.name: _sha256(p) for p in outputs},
        "results": results or {},
    }
    path = out_dir / f"run_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


@contextmanager
def locked(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".modese.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise DataError(f"{out_dir} is locked by another modese process ({out_dir / '.modese.lock'})") from None
    try:
        yield
    finally:
        lock.release()


def require(path: Path, what: str, hint: str = "") -> Path:
    if not path.exists():
        raise DataError(f"{what} not found: {path}" + (f" ({hint})" if hint else ""))
    return path


def load_dataset(path: Path, cfg: RunConfig, hint: str) -> Dataset:
    data = Dataset.load(require(path, "feature set", hint))
    if data.config_hash() != cfg.feature_hash():
        raise ConfigError(f"{path} was built with feature config {data.config_hash()} but the current config "
                          f"is {cfg.feature_hash()}; rerun 'modese prepare' or use the matching config")
    return data


def train_config(cfg: RunConfig, epochs: int, lr: float) -> TrainConfig:
    return TrainConfig(lr=lr, batch_size=cfg.train.batch_size, epochs=epochs, seed=cfg.train.seed)


def model_meta(cfg: RunConfig, stage: str) -> dict:
    d = cfg.to_dict()
    d.pop("paths")
    return {"stage": stage, "run_hash": cfg.run_hash(), "config": d}


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: RunConfig) -> int:
    out = resolve(args, args.out or Path(cfg.paths.corpora) / "synth")
    scfg = SynthConfig(num_utts=args.num_utts, seed=cfg.train.seed, sample_rate=cfg.stft.sample_rate,
                       duration=args.duration, hop=cfg.stft.hop)
    with locked(out):
        corpus = synth_corpus(scfg)
        clean_dir, noise_dir = write_corpus(corpus, out)
        cfg_path = dump_config(cfg, out / "config.yaml")
        outputs = [cfg_path] + sorted(clean_dir.glob("*.wav")) + sorted(noise_dir.glob("*.wav"))
        write_manifest(out, "synth", cfg, {}, outputs, {"num_utts": len(corpus.clean), "noises": len(corpus.noise)})
    print(f"wrote {len(corpus.clean)} utterances and {len(corpus.noise)} noises to {out}")
    return EXIT_OK


def cmd_prepare(args, cfg: RunConfig) -> int:
    corpus = resolve(args, args.corpus or Path(cfg.paths.corpora) / "synth")
    clean_dir = resolve(args, args.clean) if args.clean else corpus / "clean"
    noise_dir = resolve(args, args.noise) if args.noise else corpus / "noise"
    out = resolve(args, args.out) if args.out else corpus / "features"
    hint = "run 'modese synth' first or pass --clean/--noise"
    clean = load_corpus(require(clean_dir, "clean corpus", hint), cfg.stft.sample_rate)
    noise = load_corpus(require(noise_dir, "noise corpus", hint), cfg.stft.sample_rate)
    if len(clean) < 3:
        raise DataError(f"{clean_dir}: need at least 3 clean utterances for train/validation/test, found {len(clean)}")
    if not noise:
        raise DataError(f"{noise_dir}: no usable noise files")
    order = np.random.default_rng(cfg.train.seed).permutation(len(clean))
    n_test = min(len(clean) - 2, max(1, int(round(args.test_fraction * len(clean)))))
    test_utts = [clean[i] for i in sorted(order[:n_test])]
    train_utts = [clean[i] for i in sorted(order[n_test:])]
    seed = cfg.train.seed
    with locked(out):
        pool = build_dataset(train_utts, noise, cfg.data.snr_db, cfg.stft, cfg.model.context, seed, cfg.enhance.gamma)
        train, val = pool.split(cfg.data.val_fraction, seed)
        test = build_dataset(test_utts, noise, cfg.data.test_snr_db, cfg.stft, cfg.model.context, seed + 1,
                             cfg.enhance.gamma, all_conditions=True)
        outputs = [train.save(out / "train.ds"), val.save(out / "val.ds"), test.save(out / "test.ds"),
                   dump_config(cfg, out / "config.yaml")]
        sizes = {"train_frames": train.num_frames, "val_frames": val.num_frames, "test_frames": test.num_frames,
                 "test_utts": len(test.utts)}
        write_manifest(out, "prepare", cfg, {"clean": clean_dir, "noise": noise_dir}, outputs, sizes)
    print(f"features in {out}: " + ", ".join(f"{k}={v}" for k, v in sizes.items()))
    return EXIT_OK


def _features_dir(args, cfg: RunConfig) -> Path:
    return resolve(args, args.data or Path(cfg.paths.corpora) / "synth" / "features")


def _model_dir(args, cfg: RunConfig) -> Path:
    return resolve(args, args.model_dir or Path(cfg.paths.models) / "default")


def cmd_pretrain(args, cfg: RunConfig) -> int:
    feats = _features_dir(args, cfg)
    out = _model_dir(args, cfg)
    data = load_dataset(feats / "train.ds", cfg, "run 'modese prepare' first")
    with locked(out):
        model = build_mode_model(cfg.stft, cfg.model.m, cfg.model.context, tuple(cfg.model.hidden),
                                 tuple(cfg.model.gate_hidden) if cfg.model.gate_hidden else None,
                                 cfg.model.batchnorm, cfg.train.seed)
        p = cfg.pretrain
        ae_cfg = AutoencoderConfig(hidden=tuple(p.hidden), embedding_dim=p.embedding_dim, epochs=p.epochs,
                                   batch_size=cfg.train.batch_size, lr=cfg.train.lr, seed=cfg.train.seed)
        result = pretrain_model(model, data, ae_cfg, train_config(cfg, cfg.train.epochs, cfg.train.lr),
                                p.restarts, p.max_iters)
        sizes = np.bincount(result.labels, minlength=model.m).tolist()
        results = {"cluster_sizes": sizes, "wcss": result.clustering.wcss, "gate_accuracy": result.gate_accuracy,
                   "autoencoder_loss": result.autoencoder.final_loss,
                   "experts": result.expert_report}
        outputs = [save_model(model, out / PRETRAINED_NAME, model_meta(cfg, "pretrained")),
                   save_pretrain_artifacts(out / "pretrain.art", result, {"run_hash": cfg.run_hash()}),
                   dump_config(cfg, out / "config.yaml")]
        write_manifest(out, "pretrain", cfg, {"train": feats / "train.ds"}, outputs, results)
    print(f"cluster sizes {sizes}; gate accuracy on cluster labels {result.gate_accuracy:.3f}")
    print(f"pretrained model: {out / PRETRAINED_NAME}")
    return EXIT_OK


def _validation_summary(model, data: Dataset) -> dict:
    res = mode_forward(model, data.expert_inputs(), data.gate_inputs())
    report = gate_analysis(model, data)
    return {"val_mask_mse": mask_mse(res.combined_mask, data.targets), "utilization": report.utilization.tolist(),
            "argmax_share": report.argmax_share.tolist(), "gate_entropy": report.entropy, "gate_purity": report.purity}


def cmd_train(args, cfg: RunConfig) -> int:
    from modese.plots import plot_training_curves

    feats = _features_dir(args, cfg)
    out = _model_dir(args, cfg)
    train = load_dataset(feats / "train.ds", cfg, "run 'modese prepare' first")
    val = load_dataset(feats / "val.ds", cfg, "run 'modese prepare' first")
    if args.random_init:
        model = build_mode_model(cfg.stft, cfg.model.m, cfg.model.context, tuple(cfg.model.hidden),
                                 tuple(cfg.model.gate_hidden) if cfg.model.gate_hidden else None,
                                 cfg.model.batchnorm, cfg.train.seed)
        lr, init = cfg.train.lr, "random"
    else:
        src = require(out / PRETRAINED_NAME, "pretrained model", "run 'modese pretrain' first or pass --random-init")
        model = load_model(src)
        if model.m != cfg.model.m:
            raise ConfigError(f"{src} has {model.m} experts but the config asks for {cfg.model.m}")
        lr, init = cfg.train.lr * cfg.train.joint_lr_factor, "pretrained"
    if model.config_hash() != train.config_hash():
        raise ConfigError(f"model features ({model.config_hash()}) do not match {feats} ({train.config_hash()})")
    name = args.output_name or (MODEL_NAME if init == "pretrained" else "model_random.mode")
    with locked(out):
        history = train_mode(model, train, train_config(cfg, cfg.train.joint_epochs, lr),
                             lambda e, loss: print(f"epoch {e + 1}: loss {loss:.5f}", flush=True))
        summary = {"init": init, "lr": lr, "history": history, **_validation_summary(model, val)}
        outputs = [save_model(model, out / name, model_meta(cfg, f"joint-{init}")),
                   plot_training_curves({f"joint ({init} init)": history}, out / f"{Path(name).stem}_training.png")]
        write_manifest(out, "train" if init == "pretrained" else "train_random", cfg,
                       {"train": feats / "train.ds", "val": feats / "val.ds"}, outputs, summary)
    util = ", ".join(f"{u:.3f}" for u in summary["utilization"])
    print(f"validation mask MSE {summary['val_mask_mse']:.5f}; gate utilization [{util}]")
    print(f"model: {out / name}")
    return EXIT_OK


def cmd_enhance(args, cfg: RunConfig) -> int:
    noisy = read_wav(require(resolve(args, args.input), "input audio"), cfg.stft.sample_rate)
    output = resolve(args, args.output)
    if args.mask == "ones":
        feats = extract_features(noisy, cfg.stft)
        mask = np.ones((feats.spectrogram.num_frames, cfg.stft.n_bins))
    else:
        if not args.model:
            raise UsageError("--model is required unless --mask ones")
        model = load_model(require(resolve(args, args.model), "model file", "run 'modese train' first"))
        feats = extract_features(noisy, model.stft)
        strategy = args.strategy or cfg.enhance.strategy
        mask = infer_mask(model, stack_context(feats.log_spec, model.context),
                          stack_context(feats.mfcc, model.context), strategy)
    enhanced = istft(soft_enhance(feats.spectrogram, mask, cfg.enhance.beta))
    write_wav(output, enhanced)
    print(f"wrote {output}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from modese.plots import plot_expert_activity, plot_metric_vs_snr

    model_path = resolve(args, args.model) if args.model else _model_dir(args, cfg) / MODEL_NAME
    model = load_model(require(model_path, "model file", "run 'modese train' first or pass --model"))
    feats = _features_dir(args, cfg)
    data_path = resolve(args, args.test) if args.test else feats / "test.ds"
    data = Dataset.load(require(data_path, "test feature set", "run 'modese prepare' first"))
    if data.config_hash() != model.config_hash():
        raise ConfigError(f"{data_path} features ({data.config_hash()}) do not match {model_path} "
                          f"({model.config_hash()})")
    out = resolve(args, args.out or Path(cfg.paths.reports) / "default")
    strategies = args.strategies.split(",") if args.strategies else ["full", "top1"]
    with locked(out):
        report = evaluate_enhancement(model, data, strategies, cfg.enhance.beta, oracle=True)
        if args.ones:
            report.rows += [r for r in evaluate_masks(data, {"ones": ones_masks}, cfg.enhance.beta).rows
                            if r["method"] == "ones"]
        gate = gate_analysis(model, data)
        utt = args.utt
        if not 0 <= utt < len(data.utts):
            raise DataError(f"--utt {utt} out of range (test set has {len(data.utts)} utterances)")
        rows = np.arange(data.frames_of(utt).start, data.frames_of(utt).stop)
        res = mode_forward(model, data.expert_inputs(rows), data.gate_inputs(rows))
        text = report.to_text() + "\n\n" + gate.to_text() + "\n"
        outputs = [
            report.write_csv(out / "metrics.csv"),
            gate_analysis(model, data, utt).write_csv(out / "gate_probs.csv"),
            plot_metric_vs_snr(report, out / "si_sdr_vs_snr.png"),
            plot_metric_vs_snr(report, out / "seg_snr_vs_snr.png", "seg_snr_db"),
            plot_expert_activity(data.noisy_logspec[rows], res.gate_probs, res.expert_masks, res.combined_mask,
                                 out / "expert_activity.png", data.stft.sample_rate, data.stft.hop,
                                 data.frame_labels[rows]),
        ]
        (out / "report.txt").write_text(text)
        outputs.append(out / "report.txt")
        summary = {m: v for m, v in report.aggregate().items()}
        summary["gate"] = {"utilization": gate.utilization.tolist(), "entropy": gate.entropy, "purity": gate.purity}
        write_manifest(out, "evaluate", cfg, {"model": model_path, "test": data_path}, outputs, summary)
    print(text, end="")
    print(f"report written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config (defaults apply to missing keys)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value, e.g. --set model.m=3 (repeatable)")
    common.add_argument("--base-dir", help=f"base directory for relative paths (default ${ENV_HOME} or cwd)")
    common.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="modese", description="Mixture-of-experts spectral-mask speech enhancement.",
                epilog="exit codes: 0 ok, 1 usage, 2 data/config/artifact error, 3 internal error")
    p.add_argument("--version", action="version", version=f"modese {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write the synthetic three-class corpus")
    s.add_argument("--out", help="corpus directory (default <corpora>/synth)")
    s.add_argument("--num-utts", type=int, default=40)
    s.add_argument("--duration", type=float, default=1.5, help="seconds per utterance")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", parents=[common], help="mix, featurize and split a corpus into train/val/test")
    s.add_argument("--corpus", help="directory holding clean/ and noise/ (default <corpora>/synth)")
    s.add_argument("--clean", help="clean speech directory (overrides <corpus>/clean)")
    s.add_argument("--noise", help="noise directory (overrides <corpus>/noise)")
    s.add_argument("--out", help="feature directory (default <corpus>/features)")
    s.add_argument("--test-fraction", type=float, default=0.2, help="share of clean utterances held out for test")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("pretrain", parents=[common], help="cluster clean frames and pretrain gate and experts")
    s.add_argument("--data", help="feature directory from 'prepare'")
    s.add_argument("--model-dir", help="model directory (default <models>/default)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="joint training from the pretrained model")
    s.add_argument("--data", help="feature directory from 'prepare'")
    s.add_argument("--model-dir", help="model directory (default <models>/default)")
    s.add_argument("--random-init", action="store_true", help="skip pretraining; train from random weights at full lr")
    s.add_argument("--output-name", help=f"model file name (default {MODEL_NAME}, or model_random.mode)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enhance", parents=[common], help="enhance one 16-bit mono WAV file")
    s.add_argument("input", help="noisy WAV")
    s.add_argument("output", help="enhanced WAV")
    s.add_argument("--model", help="trained model file")
    s.add_argument("--mask", choices=("model", "ones"), default="model",
                   help="'ones' applies an all-pass mask (no model needed)")
    s.add_argument("--strategy", choices=("full", "top1"), help="default from enhance.strategy")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("evaluate", parents=[common], help="score model, oracle and noisy input on the test set")
    s.add_argument("--model", help=f"model file (default <model-dir>/{MODEL_NAME})")
    s.add_argument("--model-dir", help="model directory (default <models>/default)")
    s.add_argument("--data", help="feature directory from 'prepare'")
    s.add_argument("--test", help="test feature file (default <data>/test.ds)")
    s.add_argument("--out", help="report directory (default <reports>/default)")
    s.add_argument("--strategies", help="comma-separated inference strategies (default full,top1)")
    s.add_argument("--ones", action="store_true", help="also score the all-pass mask")
    s.add_argument("--utt", type=int, default=0, help="test utterance for the gate figure and gate_probs.csv")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"modese {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModeseError, OSError) as exc:
        print(f"modese {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        if args.verbose:
            traceback.print_exc()
        print(f"modese {args.command}: internal error: {type(exc).__name__}: {exc} (rerun with -v for details)",
              file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
