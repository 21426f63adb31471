"""Experiment configuration: one JSON file describes a full pipeline run.

The config hash (sha256 over the canonical JSON, output directory excluded)
stamps every artifact so reruns are attributable and reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .classifiers import TrainConfig
from .corpus import DEFAULT_MAX_LEN, SyntheticSpec
from .evaluation import LMConfig
from .genmodel import GumbelConfig, StageConfig
from .baseline import SubstitutionConfig
from .utils import stable_hash


@dataclass
class SplitSpec:
    """One synthetic data split: per-cell counts plus a seed tag."""
    counts: int | dict[str, int]
    seed_tag: str

    def to_dict(self) -> dict:
        return {"counts": self.counts, "seed_tag": self.seed_tag}


@dataclass
class VocabConfig:
    min_freq: int = 1
    max_size: int | None = None


@dataclass
class GenModelConfig:
    embed_dim: int = 64
    hidden_dim: int = 256
    code_dim: int = 256
    max_decode_len: int = 30


@dataclass
class AttackRunConfig:
    max_examples: int | None = None
    tau: float = 0.1
    candidates: list[int] | None = None


@dataclass
class EvalRunConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    category_counts: tuple[int, ...] = (2, 4, 6, 8, 10)
    pool_size: int = 500
    curve_sample_size: int = 300
    retrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=8))
    lm: LMConfig = field(default_factory=LMConfig)


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str
    synthetic: SyntheticSpec
    splits: dict[str, SplitSpec]
    vocab: VocabConfig = field(default_factory=VocabConfig)
    max_len: int = DEFAULT_MAX_LEN
    task_classifier: TrainConfig = field(default_factory=TrainConfig)
    attribute_classifier: TrainConfig = field(default_factory=TrainConfig)
    genmodel: GenModelConfig = field(default_factory=GenModelConfig)
    pretrain: StageConfig = field(default_factory=StageConfig)
    attr_stage: StageConfig = field(default_factory=lambda: StageConfig(epochs=8))
    gumbel: GumbelConfig = field(default_factory=GumbelConfig)
    attack: AttackRunConfig = field(default_factory=AttackRunConfig)
    baseline: SubstitutionConfig = field(default_factory=SubstitutionConfig)
    eval: EvalRunConfig = field(default_factory=EvalRunConfig)

    REQUIRED_SPLITS = ("gen_train", "gen_dev", "task_train", "attr_heldout",
                       "test", "attack_pool", "lm_train")

    def validate(self) -> None:
        self.synthetic.validate()
        for name in self.REQUIRED_SPLITS:
            if name not in self.splits:
                raise ValueError(f"config missing split {name!r}")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not self.eval.seeds:
            raise ValueError("eval.seeds must be non-empty")
        self.gumbel.validate()
        self.task_classifier.validate()
        self.attribute_classifier.validate()
        self.baseline.validate()
        self.eval.lm.validate()

    # ------------------------------------------------------------------
    # serialization

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "synthetic": self.synthetic.to_dict(),
            "splits": {name: split.to_dict() for name, split in self.splits.items()},
            "vocab": asdict(self.vocab),
            "max_len": self.max_len,
            "task_classifier": asdict(self.task_classifier),
            "attribute_classifier": asdict(self.attribute_classifier),
            "genmodel": asdict(self.genmodel),
            "pretrain": asdict(self.pretrain),
            "attr_stage": asdict(self.attr_stage),
            "gumbel": asdict(self.gumbel),
            "attack": asdict(self.attack),
            "baseline": {
                "max_fraction": self.baseline.max_fraction,
                "neighbors": self.baseline.neighbors,
                "similarity_floor": self.baseline.similarity_floor,
                "stop_words": list(self.baseline.stop_words),
            },
            "eval": {
                "seeds": list(self.eval.seeds),
                "category_counts": list(self.eval.category_counts),
                "pool_size": self.eval.pool_size,
                "curve_sample_size": self.eval.curve_sample_size,
                "retrain": asdict(self.eval.retrain),
                "lm": asdict(self.eval.lm),
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        splits = {name: SplitSpec(counts=_parse_counts(raw["counts"]), seed_tag=raw["seed_tag"])
                  for name, raw in data["splits"].items()}
        return cls(
            seed=int(data["seed"]),
            out_dir=str(data["out_dir"]),
            synthetic=SyntheticSpec.from_dict(data["synthetic"]),
            splits=splits,
            vocab=VocabConfig(**data.get("vocab", {})),
            max_len=int(data.get("max_len", DEFAULT_MAX_LEN)),
            task_classifier=TrainConfig(**data.get("task_classifier", {})),
            attribute_classifier=TrainConfig(**data.get("attribute_classifier", {})),
            genmodel=GenModelConfig(**data.get("genmodel", {})),
            pretrain=StageConfig(**data.get("pretrain", {})),
            attr_stage=StageConfig(**data.get("attr_stage", {})),
            gumbel=GumbelConfig(**data.get("gumbel", {})),
            attack=AttackRunConfig(**data.get("attack", {})),
            baseline=SubstitutionConfig(
                max_fraction=data.get("baseline", {}).get("max_fraction", 0.25),
                neighbors=data.get("baseline", {}).get("neighbors", 8),
                similarity_floor=data.get("baseline", {}).get("similarity_floor", 0.2),
                stop_words=tuple(data.get("baseline", {}).get("stop_words", ())),
            ),
            eval=EvalRunConfig(
                seeds=tuple(data.get("eval", {}).get("seeds", (0, 1, 2))),
                category_counts=tuple(data.get("eval", {}).get("category_counts", (2, 4, 6, 8, 10))),
                pool_size=int(data.get("eval", {}).get("pool_size", 500)),
                curve_sample_size=int(data.get("eval", {}).get("curve_sample_size", 300)),
                retrain=TrainConfig(**data.get("eval", {}).get("retrain", {})),
                lm=LMConfig(**data.get("eval", {}).get("lm", {})),
            ),
        )

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls.from_dict(data)

    def config_hash(self) -> str:
        # out_dir is a workspace detail, not part of the experiment identity
        payload = self.to_dict()
        payload.pop("out_dir")
        return stable_hash(json.dumps(payload, sort_keys=True).encode("utf-8"))

    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.config_hash()[:12]


def _parse_counts(raw):
    if isinstance(raw, int):
        return raw
    return {str(k): int(v) for k, v in raw.items()}
