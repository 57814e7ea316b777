"""Command-line entry point: ``avsync <command> [flags]``.

Every command resolves its configuration (flags > config file > defaults),
writes ``manifest.json`` into its output directory and only then starts work.
Errors are reported as one line ``E_CODE: message`` on stderr with exit
status 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import torch

from . import __version__
from . import config as config_mod
from .corpus import build_corpus, read_corpus_config, read_split, write_corpus
from .errors import AVSyncError, ConfigError, MissingArtifactError
from .evaluation import (
    TASKS,
    EvalConditions,
    alignment_matrix,
    append_result,
    diagonal_dominance,
    heatmap_export,
    run_task,
)
from .model import AVSyncModel, load_model
from .plotting import plot_ablation, plot_losses
from .srhead import SRHead, load_head, pretrain_srhead, save_head
from .train import Trainer, fit_cross_adapter

logger = logging.getLogger("avsync")

OUT_ROOT_ENV = "AVSYNC_OUT_ROOT"
DEFAULT_OUT_ROOT = "runs"
TASK_NAMES = {t.lower(): t for t in TASKS}
ABLATION_AXES = ("lambda", "modality", "adapter")
MANIFEST = "manifest.json"


def out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, DEFAULT_OUT_ROOT))


# --------------------------------------------------------------------------- plumbing


def prepare_out_dir(path: Path, force: bool) -> Path:
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output path {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise ConfigError(f"output directory {path} is not empty; pass --force to reuse it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, command: str, args, resolved: dict, seed: int) -> dict:
    manifest = {
        "command": command,
        "config_path": str(args.config) if args.config else None,
        "resolved_config": resolved,
        "seed": seed,
        "out_dir": str(out),
        "tool_version": __version__,
        "argv": list(args.argv),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def begin(command: str, args, overrides: dict, seed_section: str):
    """Resolve config, prepare the output directory and write the manifest."""
    if getattr(args, "seed", None) is not None:
        overrides.setdefault(seed_section, {})["seed"] = args.seed
    resolved = config_mod.resolve(args.config, overrides)
    out = prepare_out_dir(Path(args.out) if args.out else out_root() / command, args.force)
    seed = resolved[seed_section]["seed"]
    write_manifest(out, command, args, resolved, seed)
    torch.manual_seed(seed)
    return resolved, config_mod.build(resolved), out


def require(path, what: str, hint: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(f"{what} not found at {p}; {hint}")
    return p


def head_path(args) -> Path:
    return require(args.head or out_root() / "pretrain-head" / "head.npz", "SR head checkpoint",
                   "run `avsync pretrain-head` first or pass --head")


def corpus_path(args) -> Path:
    p = require(args.corpus or out_root() / "gen-corpus", "corpus directory",
                "run `avsync gen-corpus` first or pass --corpus")
    require(p / "corpus.json", "corpus metadata", "run `avsync gen-corpus` first or pass --corpus")
    return p


def checkpoint_path(args) -> Path:
    return require(args.checkpoint or out_root() / "train" / "checkpoint.npz", "model checkpoint",
                   "run `avsync train` first or pass --checkpoint")


def load_head_for(corpus_dir: Path, path: Path):
    head, head_sum = load_head(path)
    ccfg = read_corpus_config(corpus_dir)
    if head.cfg.vocab_size != ccfg.vocab_size or head.cfg.mel_bins != ccfg.mel_bins:
        raise ConfigError("SR head vocabulary / mel bins do not match the corpus")
    return head, head_sum


def train_model(built: dict, head: SRHead, head_sum: str, samples, out: Path, cross: bool = True):
    """Joint training plus the optional cross-attention adapter stage; writes log, figure and checkpoint."""
    tcfg = built["train"]
    torch.manual_seed(tcfg.seed)
    model = AVSyncModel(built["backbone"], built["adapter"])
    log_path = out / "train_log.jsonl"
    if log_path.exists():
        log_path.unlink()
    trainer = Trainer(model, head, head_sum, samples, tcfg, out_dir=out)
    trainer.fit(log_path=log_path)
    extra = {}
    if cross and tcfg.cross_adapter_steps > 0:
        losses = fit_cross_adapter(model, head, samples, tcfg.cross_adapter_steps, lr=tcfg.lr,
                                   batch_size=tcfg.batch_size, seed=tcfg.seed)
        extra["cross_adapter_final_loss"] = losses[-1]
    trainer.save(out / "checkpoint.npz", extra)
    records = [json.loads(line) for line in log_path.read_text().splitlines()]
    plot_losses(records, out / "losses.png")
    return model, records


def conditions_for(task: str, base: EvalConditions, checkpoint_id: str) -> EvalConditions:
    snr = base.snr_db if task == "AVSR_noisy" else math.inf
    return replace(base, snr_db=snr, checkpoint_id=checkpoint_id)


# --------------------------------------------------------------------------- commands


def cmd_gen_corpus(args) -> int:
    _, built, out = begin("gen-corpus", args, {}, "corpus")
    cfg = built["corpus"]
    write_corpus(out, build_corpus(cfg), cfg)
    logger.info("wrote corpus to %s", out)
    print(out)
    return 0


def cmd_pretrain_head(args) -> int:
    resolved, built, out = begin("pretrain-head", args, {}, "pretrain")
    pre = dict(built["pretrain"])
    corpus = build_corpus(built["pretrain_corpus"])
    head, head_sum, info = pretrain_srhead(corpus["train"], corpus["val"], built["srhead"], **pre)
    save_head(out / "head.npz", head, info)
    print(json.dumps({"head": str(out / "head.npz"), "checksum": head_sum, **info}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    corpus_dir = corpus_path(args)
    hp = head_path(args)
    overrides = {"train": {"lambda": args.lam, "steps": args.steps}}
    resolved, built, out = begin("train", args, overrides, "train")
    head, head_sum = load_head_for(corpus_dir, hp)
    _, records = train_model(built, head, head_sum, read_split(corpus_dir, "train"), out)
    print(json.dumps({"checkpoint": str(out / "checkpoint.npz"), "final": records[-1] if records else None},
                     sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    if args.task is None:
        raise ConfigError(f"--task is required; one of {sorted(TASK_NAMES)}")
    task = TASK_NAMES.get(args.task.lower())
    if task is None:
        raise ConfigError(f"unknown task {args.task!r}; one of {sorted(TASK_NAMES)}")
    corpus_dir = corpus_path(args)
    hp = head_path(args)
    ckpt = checkpoint_path(args)
    overrides = {"eval": {"snr_db": args.snr, "beam": args.beam, "split": args.split}}
    resolved, built, out = begin("eval", args, overrides, "eval")
    head, head_sum = load_head_for(corpus_dir, hp)
    model, meta = load_model(ckpt)
    if meta.get("head_checksum") not in (None, head_sum):
        raise ConfigError("checkpoint was trained against a different SR head")
    cond = conditions_for(task, built["eval"], meta.get("checksum", "")[:12])
    report = run_task(task, model, head, read_split(corpus_dir, cond.split), cond)
    append_result(out / "results.jsonl", report)
    write_results_table(out / "results.jsonl", out / "results.csv")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


RESULT_COLUMNS = ["task", "metric", "value", "baseline", "snr_db", "beam", "split", "checkpoint"]


def write_results_table(jsonl: Path, path: Path) -> Path:
    """Render every record in a results JSONL file as one CSV row."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RESULT_COLUMNS)
        for line in jsonl.read_text().splitlines():
            r = json.loads(line)
            c = r["conditions"]
            w.writerow([r["task"], r["metric_name"], r["value"], r.get("baseline", ""),
                        c["snr_db"], c["beam"], c["split"], c["checkpoint_id"]])
    return path


def cmd_heatmap(args) -> int:
    corpus_dir = corpus_path(args)
    ckpt = checkpoint_path(args)
    resolved, built, out = begin("heatmap", args, {"eval": {"split": args.split}}, "eval")
    model, _ = load_model(ckpt)
    samples = read_split(corpus_dir, built["eval"].split)
    if not 0 <= args.index < len(samples):
        raise ConfigError(f"--index {args.index} out of range for {len(samples)} samples")
    s = samples[args.index]
    S = alignment_matrix(model, s.mel, s.video)
    files = heatmap_export(S, out / "heatmap")
    dom = diagonal_dominance(S, args.band) if S.shape[0] > args.band + 1 else None
    summary = {"utt_id": s.utt_id, "band": args.band, "diagonal_dominance": dom,
               "files": {k: str(v) for k, v in files.items()}}
    (out / "heatmap.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def parse_axis_value(axis: str, text: str):
    try:
        if axis == "lambda":
            return float(text)
        if axis == "modality":
            probs = tuple(float(x) for x in text.replace(",", "/").split("/"))
            if len(probs) != 3:
                raise ValueError
            return probs
    except ValueError:
        raise ConfigError(f"cannot parse {axis} value {text!r}") from None
    return text


def axis_label(value) -> str:
    return "/".join(map(str, value)) if isinstance(value, tuple) else str(value)


def ablation_overrides(axis: str, value) -> dict:
    if axis == "lambda":
        return {"train": {"lambda": value}}
    if axis == "modality":
        return {"train": {"modality_probs": list(value)}}
    return {"adapter": {"arm": value}}


def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise ConfigError(f"--axis must be one of {ABLATION_AXES}")
    if not args.values:
        raise ConfigError("--values needs at least one entry")
    values = [parse_axis_value(args.axis, v) for v in args.values]
    corpus_dir = corpus_path(args)
    hp = head_path(args)
    overrides = {"train": {"lambda": args.lam, "steps": args.steps}}
    resolved, built, out = begin("ablate", args, overrides, "train")
    head, head_sum = load_head_for(corpus_dir, hp)
    train_set = read_split(corpus_dir, "train")
    cond = built["eval"]
    test_set = read_split(corpus_dir, cond.split)
    rows = []
    for value in values:
        arm_cfg = resolved
        for section, vals in ablation_overrides(args.axis, value).items():
            arm_cfg = config_mod.merge_section(arm_cfg, section, vals)
        arm_built = config_mod.build(arm_cfg)
        label = axis_label(value)
        arm_dir = out / f"{args.axis}={label.replace('/', '_')}"
        arm_dir.mkdir(parents=True, exist_ok=True)
        logger.info("ablation %s=%s", args.axis, value)
        # the ablation table does not use AVSR_clean, so the cross adapter stage is skipped
        model, _ = train_model(arm_built, head, head_sum, train_set, arm_dir, cross=False)
        vsr = run_task("VSR", model, head, test_set, conditions_for("VSR", cond, ""))
        noisy = run_task("AVSR_noisy", model, head, test_set, conditions_for("AVSR_noisy", cond, ""))
        sync = run_task("SYNC", model, head, test_set, conditions_for("SYNC", cond, ""))
        for rep in (vsr, noisy, sync):
            append_result(arm_dir / "results.jsonl", rep)
        rows.append({args.axis: label,
                     "vsr_wer": vsr.value, "avsr_noisy_wer": noisy.value, "sync_auc": sync.value,
                     "audio_only_wer": noisy.baseline})
    write_ablation_table(out / "ablation.csv", args.axis, rows)
    plot_ablation(rows, args.axis, out / "ablation.png")
    print((out / "ablation.csv").read_text(), end="")
    return 0


def write_ablation_table(path: Path, axis: str, rows: List[dict]) -> Path:
    cols = [axis, "vsr_wer", "avsr_noisy_wer", "sync_auc", "audio_only_wer"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def read_ablation_table(path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avsync", description="Audio-visual sync training and evaluation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="YAML config or a previous run's manifest.json")
        p.add_argument("--out", help=f"output directory (default ${OUT_ROOT_ENV}/<command>)")
        p.add_argument("--force", action="store_true", help="reuse a non-empty output directory")
        if seed:
            p.add_argument("--seed", type=int)

    def artifacts(p, checkpoint=False, head=True):
        p.add_argument("--corpus", help="corpus directory written by gen-corpus")
        if head:
            p.add_argument("--head", help="SR head checkpoint written by pretrain-head")
        if checkpoint:
            p.add_argument("--checkpoint", help="model checkpoint written by train")

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpus")
    common(p)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain-head", help="pretrain and freeze the SR head")
    common(p)
    p.set_defaults(func=cmd_pretrain_head)

    p = sub.add_parser("train", help="joint contrastive + generative training")
    common(p)
    artifacts(p)
    p.add_argument("--lambda", dest="lam", type=float, help="contrastive loss weight")
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one task")
    common(p)
    artifacts(p, checkpoint=True)
    p.add_argument("--task", help=f"one of {', '.join(sorted(TASK_NAMES))}")
    p.add_argument("--snr", type=float, help="babble SNR in dB for avsr_noisy")
    p.add_argument("--beam", type=int)
    p.add_argument("--split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="export an alignment heatmap")
    common(p)
    artifacts(p, checkpoint=True, head=False)
    p.add_argument("--split")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--band", type=int, default=1)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("ablate", help="train + evaluate one run per axis value")
    common(p)
    artifacts(p)
    p.add_argument("--axis", required=True, help="lambda | modality | adapter")
    p.add_argument("--values", nargs="*", default=[], help="e.g. 0 1 | 0.2/0.4/0.4 | none full")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AVSyncError as e:
        print(f"{e.code}: {' '.join(str(e).split())}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"E_IO: {' '.join(str(e).split())}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
