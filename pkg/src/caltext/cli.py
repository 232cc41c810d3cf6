"""Command-line surface: train, recognize, eval, viz.

Configuration comes from a line-oriented UTF-8 `key = value` file; the
command-line flags --seed, --beam, --preset, and --out override file values.
Exit status is 0 on success, 1 on input errors (bad arguments, unreadable
files, malformed config), and 2 on internal failures.

The environment variable CALTEXT_THREADS caps worker parallelism for
manifest-wide recognition; decoding jobs share read-only parameters.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .checkpoint import (CheckpointError, checkpoint_from_model,
                         load_checkpoint, model_from_checkpoint,
                         save_checkpoint)
from .data import load_and_preprocess, load_corpus, salt_pepper
from .images import write_png, write_ppm
from .metrics import corpus_report
from .model import ModelConfig, Recognizer
from .objective import LossConfig, OptimizerState, train
from .vocab import Vocabulary, encode_text


class InputError(Exception):
    """User-correctable problem: bad flag, missing file, malformed config."""


@dataclass
class RunConfig:
    manifest: str = None
    vocab: str = None
    image: str = None
    checkpoint: str = None
    out: str = "."
    preset: str = "toy"
    seed: int = 0
    beam: int = 5
    max_len: int = 150
    epochs: int = 50
    finetune_epochs: int = 0
    batch_size: int = 16
    probe_every: int = 1
    stop_cer: float = None
    target_height: int = 100
    target_width: int = 800
    weight_decay: float = 1e-4
    localization_weight: float = 1.0
    localization_mode: str = "literal"
    clip_threshold: float = 100.0
    decay_rate: float = 0.95
    stability_epsilon: float = 1e-6
    noise_amount: float = 0.04
    salt_fraction: float = 0.2
    split_seed: int = 0
    eval_split: str = "all"
    opacity: float = 0.6
    strict: bool = False

    def loss_config(self) -> LossConfig:
        return LossConfig(weight_decay=self.weight_decay,
                          localization_weight=self.localization_weight,
                          localization_mode=self.localization_mode,
                          clip_threshold=self.clip_threshold,
                          decay_rate=self.decay_rate,
                          stability_epsilon=self.stability_epsilon)


_BOOL_WORDS = {"true": True, "false": False, "yes": True, "no": False,
               "1": True, "0": False}


def parse_config_file(path) -> dict:
    """`key = value` lines; blank lines and # comments ignored."""
    known = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise InputError(f"cannot read config {path}: {err}") from err
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputError(f"{path}:{line_no}: expected `key = value`, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise InputError(f"{path}:{line_no}: unknown key {key!r}")
        out[key] = _coerce(key, value, known[key], f"{path}:{line_no}")
    return out


def _coerce(key, value, typ, where):
    if value.lower() == "none":
        return None
    try:
        if typ is bool or typ == "bool":
            return _BOOL_WORDS[value.lower()]
        if typ is int or typ == "int":
            return int(value)
        if typ is float or typ == "float":
            return float(value)
        return value
    except (ValueError, KeyError) as err:
        raise InputError(f"{where}: bad value {value!r} for {key}") from err


def build_run_config(args) -> RunConfig:
    values = {}
    if args.config:
        values.update(parse_config_file(args.config))
    for flag in ("seed", "beam", "preset", "out"):
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[flag] = flag_value
    try:
        return RunConfig(**values)
    except TypeError as err:
        raise InputError(f"bad configuration: {err}") from err


def _require(config: RunConfig, *names):
    for name in names:
        if getattr(config, name) is None:
            raise InputError(f"this command needs `{name}` in the config file")


def _read_path(kind, path):
    if not Path(path).is_file():
        raise InputError(f"{kind} file not found: {path}")
    return path


def _thread_budget() -> int:
    raw = os.environ.get("CALTEXT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise InputError(f"CALTEXT_THREADS must be an integer, got {raw!r}")


def _load_model(config: RunConfig):
    _require(config, "checkpoint")
    try:
        ckpt = load_checkpoint(_read_path("checkpoint", config.checkpoint))
    except CheckpointError as err:
        raise InputError(f"cannot load checkpoint: {err}") from err
    recognizer, opt_state = model_from_checkpoint(ckpt, seed=config.seed)
    return recognizer, opt_state


def _corpus(config: RunConfig, vocab: Vocabulary):
    _require(config, "manifest")
    split = load_corpus(_read_path("manifest", config.manifest), vocab,
                        seed=config.split_seed)
    for line_no, reason in split.rejected:
        print(f"rejected line {line_no}: {reason}", file=sys.stderr)
    for warning in split.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if config.strict and split.rejected:
        raise InputError(f"{len(split.rejected)} manifest lines rejected")
    return split


def _prepare(config: RunConfig, samples, vocab: Vocabulary):
    out = []
    for sample in samples:
        image = load_and_preprocess(sample.image_path, config.target_height,
                                    config.target_width)
        out.append((image, encode_text(sample.text, vocab), sample.text))
    return out


def _loss_curve_figure(path, history):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # sequential position, not s.epoch: a fine-tune phase restarts numbering
    positions = list(range(1, len(history) + 1))
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(positions, [s.mean_loss for s in history], color="tab:blue",
             label="loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean loss", color="tab:blue")
    probed = [(i, s.probe_cer) for i, s in zip(positions, history)
              if not np.isnan(s.probe_cer)]
    if probed:
        ax2 = ax1.twinx()
        ax2.plot(*zip(*probed), color="tab:red", label="probe CER")
        ax2.set_ylabel("probe CER %", color="tab:red")
    ax1.set_title("training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _error_rate_figure(path, report):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [line.line_id for line in report.lines]
    ax.bar(range(len(labels)), [line.cer for line in report.lines],
           color="tab:blue")
    ax.axhline(report.aggregate_cer, color="tab:red", linestyle="--",
               label=f"corpus CER {report.aggregate_cer:.2f}%")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel("CER %")
    ax.set_title("per-line character error rate")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def cmd_train(config: RunConfig) -> int:
    _require(config, "manifest", "vocab")
    vocab = Vocabulary.load(_read_path("vocabulary", config.vocab))
    split = _corpus(config, vocab)
    if not split.train:
        raise InputError("no training samples survived corpus loading")
    train_samples = _prepare(config, split.train, vocab)
    probe_source = split.val if split.val else split.train
    probe_samples = [(img, text) for img, _t, text in
                     _prepare(config, probe_source, vocab)]

    recognizer = Recognizer(ModelConfig.preset(config.preset, vocab.size),
                            vocab, seed=config.seed)

    augment = None
    if config.noise_amount > 0:
        augment = lambda image, rng: salt_pepper(image, config.noise_amount,
                                                 config.salt_fraction, rng)

    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    opt_state = OptimizerState.for_parameters(recognizer.parameters())
    history = train(recognizer, train_samples, probe_samples,
                    config.loss_config(), seed=config.seed,
                    epochs=config.epochs, batch_size=config.batch_size,
                    augment=augment, probe_every=config.probe_every,
                    log=print, opt_state=opt_state)
    finetune_history = []
    if config.finetune_epochs > 0:
        # second phase with frozen normalization statistics so training
        # features match inference features exactly
        finetune_history = train(
            recognizer, train_samples, probe_samples, config.loss_config(),
            seed=config.seed + 1, epochs=config.finetune_epochs,
            batch_size=config.batch_size, stop_cer=config.stop_cer,
            require_exact=config.stop_cer is not None,
            probe_every=config.probe_every, opt_state=opt_state,
            encoder_mode="infer",
            log=lambda line: print(f"finetune {line}"))

    save_path = out_dir / "model.ckpt"
    save_checkpoint(save_path, checkpoint_from_model(recognizer, opt_state))

    log_path = out_dir / "train_log.tsv"
    with open(log_path, "w", encoding="utf-8") as f:
        f.write("phase\tepoch\tloss\tprobe_cer\n")
        for phase, rows in (("train", history), ("finetune", finetune_history)):
            for s in rows:
                f.write(f"{phase}\t{s.epoch}\t{s.mean_loss:.6f}\t{s.probe_cer:.4f}\n")
    _loss_curve_figure(out_dir / "loss_curve.png", history + finetune_history)
    print(f"checkpoint written to {save_path}")
    return 0


def _recognize_many(recognizer, config: RunConfig, samples):
    def job(sample):
        image = load_and_preprocess(sample.image_path, config.target_height,
                                    config.target_width)
        text, _hyp = recognizer.recognize(image, beam_width=config.beam,
                                          max_len=config.max_len)
        return text

    threads = _thread_budget()
    if threads == 1 or len(samples) == 1:
        return [job(s) for s in samples]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, samples))


def cmd_recognize(config: RunConfig) -> int:
    recognizer, _ = _load_model(config)
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.image:
        image = load_and_preprocess(_read_path("image", config.image),
                                    config.target_height, config.target_width)
        text, _hyp = recognizer.recognize(image, beam_width=config.beam,
                                          max_len=config.max_len)
        print(text)
        (out_dir / "predictions.tsv").write_text(
            f"{config.image}\t{text}\n", encoding="utf-8")
        return 0

    split = _corpus(config, recognizer.vocab)
    samples = split.all_samples()
    if not samples:
        raise InputError("manifest produced no usable lines")
    texts = _recognize_many(recognizer, config, samples)
    with open(out_dir / "predictions.tsv", "w", encoding="utf-8") as f:
        for sample, text in zip(samples, texts):
            f.write(f"{sample.image_path}\t{text}\n")
            print(f"{sample.image_path}\t{text}")
    return 0


def cmd_eval(config: RunConfig) -> int:
    recognizer, _ = _load_model(config)
    split = _corpus(config, recognizer.vocab)
    chosen = {"train": split.train, "val": split.val, "test": split.test,
              "all": split.all_samples()}.get(config.eval_split)
    if chosen is None:
        raise InputError(f"eval_split must be train/val/test/all, "
                         f"got {config.eval_split!r}")
    if not chosen:
        raise InputError(f"split {config.eval_split!r} holds no samples")

    outputs = _recognize_many(recognizer, config, chosen)
    report = corpus_report([(s.text, o) for s, o in zip(chosen, outputs)],
                           line_ids=[Path(s.image_path).name for s in chosen])

    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_report.tsv").write_text(report.to_tsv(), encoding="utf-8")
    _error_rate_figure(out_dir / "error_rates.png", report)
    print(f"CER {report.aggregate_cer:.4f}")
    print(f"WER {report.aggregate_wer:.4f}")
    print(f"character_accuracy {report.character_accuracy:.4f}")
    print(f"word_accuracy {report.word_accuracy:.4f}")
    if report.excluded:
        print(f"excluded {len(report.excluded)} blank-target lines: "
              f"{', '.join(report.excluded)}")
    return 0


def cmd_viz(config: RunConfig) -> int:
    from .viz import attention_overlay

    recognizer, _ = _load_model(config)
    _require(config, "image")
    image = load_and_preprocess(_read_path("image", config.image),
                                config.target_height, config.target_width)
    grid = recognizer.encoder.encode(image, "infer")
    hyp = recognizer.decoder.beam_search(grid, config.beam, config.max_len)
    from .vocab import decode_indices
    text = decode_indices(hyp.sequence, recognizer.vocab)

    raster = attention_overlay(image.data[:, :, 0], hyp.alphas,
                               (grid.h, grid.w), opacity=config.opacity)
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ppm_path = out_dir / "attention.ppm"
    write_ppm(ppm_path, raster)
    write_png(out_dir / "attention.png", raster)
    print(text)
    print(f"overlay written to {ppm_path}")
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InputError(message)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="caltext",
                     description="Handwritten text-line recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("train", "train a model on a manifest corpus"),
                            ("recognize", "decode one image or a manifest"),
                            ("eval", "report corpus CER/WER"),
                            ("viz", "write an attention overlay raster")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=False,
                       help="path to a key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--beam", type=int, default=None)
        p.add_argument("--preset", choices=("toy", "full"), default=None)
        p.add_argument("--out", default=None)
    return parser


COMMANDS = {"train": cmd_train, "recognize": cmd_recognize,
            "eval": cmd_eval, "viz": cmd_viz}


def main(argv=None) -> int:
    try:
        args = make_parser().parse_args(argv)
        config = build_run_config(args)
        return COMMANDS[args.command](config)
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        raise
    except Exception as err:  # internal failure contract
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
