"""Run configuration: YAML file sections merged over defaults, then CLI overrides.

Sections mirror the dataclass field names of the owning modules::

    corpus:   CorpusConfig        (the desk corpus written by gen-corpus)
    backbone: BackboneConfig
    adapter:  AdapterConfig       (``arm``: none | ffn_mha | gateffn_mha_norep | full overrides the
                                   upsampler / ffn / use_attention fields when set)
    srhead:   SRHeadConfig
    pretrain: head pretraining settings, including its own ``corpus`` section
    train:    TrainConfig         (``lambda`` for the loss weight)
    eval:     EvalConditions defaults

A run manifest can be passed wherever a config file is expected; its
``resolved_config`` snapshot is used.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .adapter import ARMS, AdapterConfig
from .backbone import BackboneConfig
from .corpus import CorpusConfig
from .errors import ConfigError, MissingArtifactError
from .evaluation import EvalConditions
from .srhead import SRHeadConfig
from .train import TrainConfig, desk_train_config

SECTIONS = ("corpus", "backbone", "adapter", "srhead", "pretrain", "train", "eval")

PRETRAIN_DEFAULTS = {
    "steps": 1500,
    "batch_size": 32,
    "lr": 2e-3,
    "warmup_steps": 50,
    "seed": 0,
    "min_accuracy": 0.95,
    "eval_every": 100,
    "corpus": {"seed": 1000, "num_utterances": 2000, "split_fractions": [0.9, 0.05, 0.05]},
}

EVAL_DEFAULTS = {"snr_db": 0.0, "beam": 3, "split": "test", "seed": 0, "min_shift": 2, "candidates": 2}


def default_config() -> Dict[str, Any]:
    return {
        "corpus": CorpusConfig().to_dict(),
        "backbone": BackboneConfig().to_dict(),
        "adapter": dict(AdapterConfig().to_dict(), arm=None),
        "srhead": SRHeadConfig().to_dict(),
        "pretrain": copy.deepcopy(PRETRAIN_DEFAULTS),
        "train": desk_train_config().to_dict(),
        "eval": dict(EVAL_DEFAULTS),
    }


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    open_keys = where == "pretrain.corpus."
    for k, v in over.items():
        if open_keys and k not in CorpusConfig.__dataclass_fields__:
            raise ConfigError(f"unknown config key {where}{k}")
        if k not in out and not open_keys:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(out.get(k), dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    if "resolved_config" in data:
        data = data["resolved_config"]
    return data


def resolve(path=None, overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> dict:
    """defaults < config file < overrides; validated by building every section."""
    cfg = default_config()
    if path is not None:
        cfg = _merge(cfg, read_config_file(path))
    for section, values in (overrides or {}).items():
        cfg = _merge(cfg, {section: {k: v for k, v in values.items() if v is not None}})
    build(cfg)
    return cfg


def adapter_config(cfg: dict) -> AdapterConfig:
    d = dict(cfg["adapter"])
    arm = d.pop("arm", None)
    a = AdapterConfig.from_dict(d)
    if arm is not None:
        if arm not in ARMS:
            raise ConfigError(f"unknown adapter arm {arm!r}; expected one of {sorted(ARMS)}")
        a = a.with_arm(arm)
    return a


def eval_conditions(cfg: dict) -> EvalConditions:
    e = dict(cfg["eval"])
    snr = e.get("snr_db")
    e["snr_db"] = float("inf") if snr in (None, "clean", "inf") else float(snr)
    unknown = set(e) - set(EvalConditions.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown eval keys: {sorted(unknown)}")
    return EvalConditions(**e)


def build(cfg: dict) -> dict:
    """Typed objects for every section (raises ConfigError on invalid values)."""
    missing = [s for s in SECTIONS if s not in cfg]
    if missing:
        raise ConfigError(f"config is missing sections {missing}")
    head = SRHeadConfig.from_dict(cfg["srhead"])
    corpus = CorpusConfig.from_dict(cfg["corpus"])
    if head.vocab_size != corpus.vocab_size or head.mel_bins != corpus.mel_bins:
        raise ConfigError("srhead vocab_size/mel_bins must match the corpus")
    backbone = BackboneConfig.from_dict(cfg["backbone"])
    adapter = adapter_config(cfg)
    if adapter.in_dim != backbone.feat_dim or adapter.out_dim != head.d_model:
        raise ConfigError("adapter in_dim/out_dim must match backbone feat_dim and srhead d_model")
    pre = dict(cfg["pretrain"])
    pre_corpus = CorpusConfig.from_dict(dict(cfg["corpus"], **pre.pop("corpus", {})))
    return {
        "corpus": corpus,
        "backbone": backbone,
        "adapter": adapter,
        "srhead": head,
        "pretrain": pre,
        "pretrain_corpus": pre_corpus,
        "train": TrainConfig.from_dict(cfg["train"]),
        "eval": eval_conditions(cfg),
    }


def merge_section(cfg: dict, section: str, values: dict) -> dict:
    """Copy of ``cfg`` with ``values`` merged into one section (keys are checked)."""
    return _merge(cfg, {section: values})


def dump(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True)

