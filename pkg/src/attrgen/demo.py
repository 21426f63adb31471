"""Shipped synthetic-corpus recipe: 10 product categories x 2 sentiment labels.

The task-classifier training split is deliberately skewed (the first five
categories co-occur mostly with positive reviews, the last five with
negative ones) so the sentiment model picks up category words as a spurious
signal. Category rewrites then have something real to exploit, while
balanced splits keep label and attribute statistically independent
everywhere else.
"""

from __future__ import annotations

from .corpus import SyntheticSpec

ATTRIBUTE_LEXICONS: dict[str, tuple[str, ...]] = {
    "kitchen": ("knife", "blender", "spatula", "oven", "skillet", "whisk", "teapot", "cookware"),
    "phone": ("charger", "screen", "battery", "headset", "antenna", "touchscreen", "handset", "speakerphone"),
    "book": ("novel", "chapter", "paperback", "author", "plot", "prose", "memoir", "anthology"),
    "movie": ("film", "trailer", "sequel", "actor", "cinema", "subtitle", "soundtrack", "screenplay"),
    "clothing": ("jacket", "fabric", "sleeve", "denim", "sweater", "zipper", "collar", "hemline"),
    "garden": ("shovel", "seedling", "trellis", "mulch", "pruner", "sprinkler", "compost", "planter"),
    "toy": ("puzzle", "doll", "kite", "marbles", "playset", "figurine", "blocks", "yoyo"),
    "music": ("guitar", "speaker", "vinyl", "chord", "amplifier", "drumstick", "melody", "playlist"),
    "sport": ("racket", "treadmill", "dumbbell", "jersey", "cleats", "scoreboard", "helmet", "whistle"),
    "auto": ("engine", "tire", "dashboard", "brake", "sparkplug", "wiper", "gearbox", "muffler"),
}

# "okay" and "decent" appear in both lexicons: sentences drawing them carry no
# textual sentiment signal, so even a Bayes-optimal task classifier must lean
# on the category prior there. That keeps category rewrites a live attack
# surface after the classifier converges.
AMBIGUOUS_SENTIMENT: tuple[str, ...] = ("okay", "decent")

LABEL_LEXICONS: dict[str, tuple[str, ...]] = {
    "positive": ("great", "excellent", "amazing", "wonderful", "fantastic", "superb",
                 "delightful", "perfect", "lovely", "enjoyable", "impressive", "satisfying")
                + AMBIGUOUS_SENTIMENT,
    "negative": ("terrible", "awful", "horrible", "disappointing", "useless", "broken",
                 "annoying", "defective", "flimsy", "mediocre", "frustrating", "shoddy")
                + AMBIGUOUS_SENTIMENT,
}

FILLERS: tuple[str, ...] = (
    "item", "order", "price", "store", "shipping", "box", "deal", "week", "month",
    "time", "house", "room", "shelf", "table", "corner", "trip", "morning", "evening",
    "routine", "setup", "review", "manual", "sticker", "receipt", "warranty", "refund",
    "coupon", "pattern", "design", "size", "weight", "color", "style", "edge", "handle",
    "surface", "part", "piece", "unit", "model", "version", "batch", "bundle", "pair",
    "kit", "packaging", "holiday", "weekend",
)

TEMPLATES: tuple[str, ...] = (
    "the {attr} was {label} so i kept the {attr} near my {attr}",
    "my {attr} and {attr} looked {label} after the {filler}",
    "{label} {attr} for my {attr} and the {attr} arrived on {filler}",
    "i found the {attr} quite {label} and the {attr} worked with my {attr}",
    "this {attr} is {label} because the {attr} fits the {attr}",
    "honestly the {attr} felt {label} though my {attr} came without a {filler}",
    "the {attr} with the {attr} made a {label} {filler}",
    "after one {filler} my {attr} stayed {label} unlike the {attr}",
    "the {attr} , the {attr} and the {attr} were {label}",
    "such a {label} {attr} , it replaced my old {attr} last {filler}",
)

# Categories whose training reviews skew positive; the rest skew negative.
POSITIVE_SKEWED = ("kitchen", "phone", "book", "movie", "clothing")

# The substitution attacker never touches sentiment words (its stand-in for
# the synonym/semantic-similarity constraints of the real attacks it mimics);
# without this it mostly swaps the sentiment word itself, which changes the
# true label rather than attacking the model.
SUBSTITUTION_STOP_WORDS: tuple[str, ...] = tuple(
    sorted(set(LABEL_LEXICONS["positive"]) | set(LABEL_LEXICONS["negative"])))


def demo_spec(counts=10, seed: int = 0) -> SyntheticSpec:
    return SyntheticSpec(
        attributes=dict(ATTRIBUTE_LEXICONS),
        labels=dict(LABEL_LEXICONS),
        fillers=FILLERS,
        templates=TEMPLATES,
        counts=counts,
        seed=seed,
    )


def skewed_counts(per_attribute: int, majority_fraction: float = 0.85) -> dict[str, int]:
    """Per-cell counts with an attribute-conditional sentiment skew.

    Overall label balance is preserved (half the attributes skew each way).
    """
    major = round(per_attribute * majority_fraction)
    minor = per_attribute - major
    counts: dict[str, int] = {}
    for attr in ATTRIBUTE_LEXICONS:
        pos, neg = (major, minor) if attr in POSITIVE_SKEWED else (minor, major)
        counts[f"{attr}|positive"] = pos
        counts[f"{attr}|negative"] = neg
    return counts


def demo_config(out_dir: str = "runs/demo", seed: int = 0):
    """Full desk-scale experiment: ~5k-sentence corpus, 500-attack pools."""
    from .classifiers import TrainConfig
    from .config import (AttackRunConfig, EvalRunConfig, ExperimentConfig, GenModelConfig,
                         SplitSpec, VocabConfig)
    from .evaluation import LMConfig
    from .genmodel import GumbelConfig, StageConfig

    return ExperimentConfig(
        seed=seed,
        out_dir=out_dir,
        synthetic=demo_spec(counts=10, seed=0),
        splits={
            "gen_train": SplitSpec(counts=250, seed_tag="gen-train"),
            "gen_dev": SplitSpec(counts=25, seed_tag="gen-dev"),
            "task_train": SplitSpec(counts=skewed_counts(250, 0.95), seed_tag="task-train"),
            "attr_heldout": SplitSpec(counts=100, seed_tag="attr-heldout"),
            "test": SplitSpec(counts=50, seed_tag="test"),
            "attack_pool": SplitSpec(counts=250, seed_tag="attack-pool"),
            "lm_train": SplitSpec(counts=50, seed_tag="lm-train"),
        },
        vocab=VocabConfig(min_freq=1, max_size=None),
        task_classifier=TrainConfig(lr=0.1, epochs=6, batch_size=64, dropout=0.5),
        attribute_classifier=TrainConfig(lr=0.1, epochs=8, batch_size=64, dropout=0.5),
        genmodel=GenModelConfig(embed_dim=64, hidden_dim=256, code_dim=256, max_decode_len=30),
        pretrain=StageConfig(epochs=20, lr=2e-3, batch_size=64),
        attr_stage=StageConfig(epochs=6, lr=1e-3, batch_size=64, attr_weight=1.0),
        gumbel=GumbelConfig(tau0=1.0, tau_min=0.1, anneal_rate=4e-3, noise_seed=0),
        attack=AttackRunConfig(max_examples=None, tau=0.1),
        baseline=_baseline_config(),
        eval=EvalRunConfig(seeds=(0, 1, 2), category_counts=(2, 4, 6, 8, 10),
                           pool_size=500, curve_sample_size=300,
                           retrain=TrainConfig(lr=0.1, epochs=6, batch_size=64, dropout=0.5),
                           lm=LMConfig(order=3, discount=0.75)),
    )


def smoke_config(out_dir: str = "runs/smoke", seed: int = 0):
    """Small fast variant of the demo experiment; completes in a few minutes."""
    from .classifiers import TrainConfig
    from .config import (AttackRunConfig, EvalRunConfig, ExperimentConfig, GenModelConfig,
                         SplitSpec, VocabConfig)
    from .evaluation import LMConfig
    from .genmodel import GumbelConfig, StageConfig

    return ExperimentConfig(
        seed=seed,
        out_dir=out_dir,
        synthetic=demo_spec(counts=10, seed=0),
        splits={
            "gen_train": SplitSpec(counts=40, seed_tag="gen-train"),
            "gen_dev": SplitSpec(counts=10, seed_tag="gen-dev"),
            "task_train": SplitSpec(counts=skewed_counts(80, 0.95), seed_tag="task-train"),
            "attr_heldout": SplitSpec(counts=25, seed_tag="attr-heldout"),
            "test": SplitSpec(counts=15, seed_tag="test"),
            "attack_pool": SplitSpec(counts=20, seed_tag="attack-pool"),
            "lm_train": SplitSpec(counts=10, seed_tag="lm-train"),
        },
        vocab=VocabConfig(min_freq=1, max_size=None),
        task_classifier=TrainConfig(lr=0.1, epochs=4, batch_size=64, dropout=0.5),
        attribute_classifier=TrainConfig(lr=0.1, epochs=4, batch_size=64, dropout=0.5),
        genmodel=GenModelConfig(embed_dim=64, hidden_dim=128, code_dim=256, max_decode_len=30),
        pretrain=StageConfig(epochs=6, lr=2e-3, batch_size=64),
        attr_stage=StageConfig(epochs=3, lr=1e-3, batch_size=64, attr_weight=1.0),
        gumbel=GumbelConfig(tau0=1.0, tau_min=0.1, anneal_rate=2e-2, noise_seed=0),
        attack=AttackRunConfig(max_examples=None, tau=0.1),
        baseline=_baseline_config(),
        eval=EvalRunConfig(seeds=(0,), category_counts=(2, 6, 10),
                           pool_size=40, curve_sample_size=80,
                           retrain=TrainConfig(lr=0.1, epochs=3, batch_size=64, dropout=0.5),
                           lm=LMConfig(order=3, discount=0.75)),
    )


def _baseline_config():
    from .baseline import SubstitutionConfig

    return SubstitutionConfig(max_fraction=0.25, neighbors=8, similarity_floor=0.2,
                              stop_words=SUBSTITUTION_STOP_WORDS)
