"""Run configuration: a flat key=value file drives every stage."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps this to exit code 2."""


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    corpus_spec: str = "default"      # "default" or a path to a JSON spec
    corpus_dir: str = ""              # where gen-data wrote the manifests

    # model dims (desk scale)
    d_feat: int = 16
    d_emb: int = 64
    d_enc: int = 64
    d_dec: int = 64
    d_tree: int = 64
    d_plm: int = 64
    d_svg: int = 64
    d_clm: int = 64
    dtype: str = "float32"

    # optimizer / schedule
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    asr_pretrain_epochs: int = 2
    lm_pretrain_epochs: int = 3
    joint_epochs: int = 1
    valid_subset: int = 120

    # decoding
    beam_size: int = 8
    shortlist_k: int = 2
    svg_beam: int = 1
    svg_max_len: int = 20
    rescore_lambda: float = 0.3

    # knowledge integration
    tcpgen_asr: bool = True
    tcpgen_svg: bool = True
    pgen_input: bool = True
    pipeline_mode: bool = False
    p_gen_max: float = 0.9
    n_negative_slots: int = 3
    asr_distractors_lo: int = 10
    asr_distractors_hi: int = 20
    svg_distractors: int = 5
    biasing_drop: float = 0.3
    biasing_max_train_count: int = 30  # inference biasing lists: entities with f < this
    freeze_plm: bool = False

    # evaluation scope
    multi_turn: bool = False
    zero_shot_slots: tuple[str, ...] = ()

    def validate(self) -> "RunConfig":
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.pipeline_mode and self.tcpgen_svg:
            raise ConfigError("pipeline_mode has no audio-grounded generator; "
                              "tcpgen_svg must be off")
        if not (0.0 <= self.p_gen_max <= 1.0):
            raise ConfigError("p_gen_max must lie in [0, 1]")
        if self.beam_size < 1 or self.shortlist_k < 1:
            raise ConfigError("beam_size and shortlist_k must be positive")
        if self.asr_distractors_hi < self.asr_distractors_lo:
            raise ConfigError("asr distractor range is inverted")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        return self

    # ------------------------------------------------------------- parsing
    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["zero_shot_slots"] = list(self.zero_shot_slots)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "zero_shot_slots" in kwargs:
            kwargs["zero_shot_slots"] = tuple(kwargs["zero_shot_slots"])
        return cls(**kwargs).validate()

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        data: dict = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            data[key] = _coerce(fields[key], value, f"{path}:{lineno}")
        return cls(**data).validate()


def _coerce(f: dataclasses.Field, value: str, where: str):
    t = f.type
    try:
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
        if t == "bool":
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if t.startswith("tuple"):
            return tuple(v.strip() for v in value.split(",") if v.strip())
        return value
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {value!r} for {f.name}") from exc
