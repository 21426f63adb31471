"""Pipeline commands behind the CLI: synth, classifier training, the two
generator stages, both attackers, and the evaluation experiments.

Each command validates its upstream artifacts before doing any work and
writes into a config-hash-stamped directory, so a pipeline rerun with the
same config and seed reproduces every artifact byte for byte.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

import numpy as np
import torch

from . import attack as attack_mod
from . import corpus, evaluation, genmodel
from .baseline import substitution_attack
from .classifiers import TrainConfig, load_classifier, save_classifier, train_classifier
from .config import ExperimentConfig
from .corpus import Dataset, Vocab, balance_by_label, generate_synthetic, load_jsonl, save_jsonl
from .evaluation import EvalReport, emit_report
from .genmodel import Generator, GeneratorConfig, load_generator, save_generator
from .utils import derive_seed

EMBED_DIM = 64
NUM_FILTERS = 32


class PipelineError(RuntimeError):
    """Raised when a command's inputs are missing or invalid."""


# ---------------------------------------------------------------------------
# paths and artifact helpers


def paths_for(cfg: ExperimentConfig) -> dict[str, Path]:
    run_dir = cfg.run_dir()
    return {
        "run": run_dir,
        "data": run_dir / "data",
        "checkpoints": run_dir / "checkpoints",
        "attacks": run_dir / "attacks",
        "reports": run_dir / "reports",
    }


def _meta(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed}


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise PipelineError(f"missing artifact {path.name}: run {hint} first")
    return path


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_split(cfg: ExperimentConfig, name: str) -> Dataset:
    p = paths_for(cfg)
    vocab_path = _require(p["data"] / "vocab.txt", "synth")
    split_path = _require(p["data"] / f"{name}.jsonl", "synth")
    vocab = Vocab.load(vocab_path)
    dataset, _ = load_jsonl(split_path, vocab, tuple(cfg.synthetic.labels),
                            tuple(cfg.synthetic.attributes), max_len=cfg.max_len, split=name)
    return dataset


def label_lexicons(cfg: ExperimentConfig) -> dict[int, set]:
    return {i: set(words) for i, (_, words) in enumerate(cfg.synthetic.labels.items())}


# ---------------------------------------------------------------------------
# commands


def run_synth(cfg: ExperimentConfig) -> dict:
    cfg.validate()
    p = paths_for(cfg)
    p["data"].mkdir(parents=True, exist_ok=True)
    cfg.to_json(p["run"] / "config.json")
    _write_json(p["run"] / "run_meta.json", _meta(cfg))

    spec = cfg.synthetic
    datasets: dict[str, Dataset] = {}
    gen_split = cfg.splits["gen_train"]
    base = corpus.SyntheticSpec(attributes=spec.attributes, labels=spec.labels,
                                fillers=spec.fillers, templates=spec.templates,
                                counts=gen_split.counts, seed=spec.seed)
    gen_train = generate_synthetic(base, seed=derive_seed(cfg.seed, "split", gen_split.seed_tag),
                                   split="gen_train")
    vocab = corpus.build_vocab(gen_train.texts(), min_freq=cfg.vocab.min_freq,
                               max_size=cfg.vocab.max_size)
    # re-encode under the final vocabulary
    datasets["gen_train"] = generate_synthetic(
        base, seed=derive_seed(cfg.seed, "split", gen_split.seed_tag), vocab=vocab,
        split="gen_train")
    for name, split in cfg.splits.items():
        if name == "gen_train":
            continue
        split_spec = corpus.SyntheticSpec(attributes=spec.attributes, labels=spec.labels,
                                          fillers=spec.fillers, templates=spec.templates,
                                          counts=split.counts, seed=spec.seed)
        datasets[name] = generate_synthetic(
            split_spec, seed=derive_seed(cfg.seed, "split", split.seed_tag), vocab=vocab,
            split=name)

    vocab.save(p["data"] / "vocab.txt")
    sizes = {}
    for name, dataset in datasets.items():
        save_jsonl(dataset, p["data"] / f"{name}.jsonl", meta=_meta(cfg))
        sizes[name] = len(dataset)
    _write_json(p["data"] / "meta.json", {**_meta(cfg), "vocab_size": len(vocab), "sizes": sizes})
    return {"vocab_size": len(vocab), "sizes": sizes}


def run_train_classifier(cfg: ExperimentConfig, role: str) -> dict:
    if role not in ("task", "attribute"):
        raise PipelineError(f"unknown classifier role {role!r}")
    p = paths_for(cfg)
    p["checkpoints"].mkdir(parents=True, exist_ok=True)
    dev = load_split(cfg, "gen_dev")
    if role == "task":
        train_set = load_split(cfg, "task_train")
        config = TrainConfig(**{**_as_dict(cfg.task_classifier),
                                "seed": derive_seed(cfg.seed, "task-clf")})
        model, metrics = train_classifier(train_set, config, architecture="conv",
                                          target="label", dev_dataset=dev,
                                          embed_dim=EMBED_DIM, num_filters=NUM_FILTERS)
        save_classifier(model, p["checkpoints"] / "task_classifier.pt", meta=_meta(cfg))
        _write_json(p["checkpoints"] / "task_classifier_metrics.json",
                    {**_meta(cfg), **_round_metrics(metrics)})
        return metrics
    # attribute role: the stage-2 guidance classifier plus an independently
    # seeded held-out classifier trained on its own split for honest scoring
    train_set = balance_by_label(load_split(cfg, "gen_train"),
                                 seed=derive_seed(cfg.seed, "balance"))
    config = TrainConfig(**{**_as_dict(cfg.attribute_classifier),
                            "seed": derive_seed(cfg.seed, "attr-clf")})
    model, metrics = train_classifier(train_set, config, architecture="conv",
                                      target="attribute", dev_dataset=dev,
                                      embed_dim=EMBED_DIM, num_filters=NUM_FILTERS)
    save_classifier(model, p["checkpoints"] / "attribute_classifier.pt", meta=_meta(cfg))
    heldout_set = balance_by_label(load_split(cfg, "attr_heldout"),
                                   seed=derive_seed(cfg.seed, "balance-heldout"))
    heldout_config = TrainConfig(**{**_as_dict(cfg.attribute_classifier),
                                    "seed": derive_seed(cfg.seed, "attr-clf-heldout")})
    heldout, heldout_metrics = train_classifier(heldout_set, heldout_config, architecture="conv",
                                                target="attribute", dev_dataset=dev,
                                                embed_dim=EMBED_DIM, num_filters=NUM_FILTERS)
    save_classifier(heldout, p["checkpoints"] / "attribute_heldout.pt", meta=_meta(cfg))
    _write_json(p["checkpoints"] / "attribute_classifier_metrics.json",
                {**_meta(cfg), "guidance": _round_metrics(metrics),
                 "heldout": _round_metrics(heldout_metrics)})
    return metrics


def _as_dict(config: TrainConfig) -> dict:
    return {"lr": config.lr, "momentum": config.momentum, "batch_size": config.batch_size,
            "epochs": config.epochs, "dropout": config.dropout, "seed": config.seed}


def _round_metrics(metrics: dict) -> dict:
    out = {}
    for key, value in metrics.items():
        if isinstance(value, list):
            out[key] = [round(v, 6) for v in value]
        elif isinstance(value, float):
            out[key] = round(value, 6)
        else:
            out[key] = value
    return out


def _generator_config(cfg: ExperimentConfig, vocab_size: int) -> GeneratorConfig:
    return GeneratorConfig(vocab_size=vocab_size,
                           num_attributes=len(cfg.synthetic.attributes),
                           embed_dim=cfg.genmodel.embed_dim,
                           hidden_dim=cfg.genmodel.hidden_dim,
                           code_dim=cfg.genmodel.code_dim,
                           max_decode_len=cfg.genmodel.max_decode_len)


def run_pretrain(cfg: ExperimentConfig) -> dict:
    p = paths_for(cfg)
    p["checkpoints"].mkdir(parents=True, exist_ok=True)
    train_set = load_split(cfg, "gen_train")
    dev = load_split(cfg, "gen_dev")
    torch.manual_seed(derive_seed(cfg.seed, "gen-init"))
    gen = Generator(_generator_config(cfg, len(train_set.vocab)))
    stage_cfg = _stage_with_seed(cfg.pretrain, derive_seed(cfg.seed, "pretrain"))
    metrics = genmodel.pretrain(gen, train_set, stage_cfg, dev_dataset=dev)
    save_generator(gen, p["checkpoints"] / "generator_stage1.pt", stage=1, meta=_meta(cfg))
    _write_json(p["checkpoints"] / "generator_stage1_metrics.json",
                {**_meta(cfg), **_round_metrics(metrics)})
    return metrics


def _stage_with_seed(stage: genmodel.StageConfig, seed: int) -> genmodel.StageConfig:
    return genmodel.StageConfig(epochs=stage.epochs, lr=stage.lr, batch_size=stage.batch_size,
                                seed=seed, clip_norm=stage.clip_norm,
                                attr_weight=stage.attr_weight,
                                task_attack_weight=stage.task_attack_weight)


def run_train_attr(cfg: ExperimentConfig) -> dict:
    p = paths_for(cfg)
    stage1_path = _require(p["checkpoints"] / "generator_stage1.pt", "pretrain")
    attr_path = _require(p["checkpoints"] / "attribute_classifier.pt",
                         "train-classifier --role attribute")
    train_set = load_split(cfg, "gen_train")
    dev = load_split(cfg, "gen_dev")
    gen, _ = load_generator(stage1_path, expected_stage=1,
                            expected_vocab_size=len(train_set.vocab))
    attr_clf = load_classifier(attr_path, expected_vocab_size=len(train_set.vocab),
                               expected_num_classes=train_set.num_attributes)
    task_clf = None
    if cfg.attr_stage.task_attack_weight > 0:
        task_clf = load_classifier(_require(p["checkpoints"] / "task_classifier.pt",
                                            "train-classifier --role task"))
    stage_cfg = _stage_with_seed(cfg.attr_stage, derive_seed(cfg.seed, "attr-stage"))
    metrics = genmodel.train_attribute_stage(gen, attr_clf, train_set, cfg.gumbel,
                                             stage_cfg, dev_dataset=dev,
                                             task_classifier=task_clf)
    save_generator(gen, p["checkpoints"] / "generator_stage2.pt", stage=2, meta=_meta(cfg))
    _write_json(p["checkpoints"] / "generator_stage2_metrics.json",
                {**_meta(cfg), **_round_metrics(metrics)})
    return metrics


def _load_attack_inputs(cfg: ExperimentConfig):
    p = paths_for(cfg)
    pool = load_split(cfg, "attack_pool")
    task_clf = load_classifier(_require(p["checkpoints"] / "task_classifier.pt",
                                        "train-classifier --role task"),
                               expected_vocab_size=len(pool.vocab),
                               expected_num_classes=pool.num_labels)
    limit = cfg.attack.max_examples
    examples = pool.examples if limit is None else pool.examples[:limit]
    return p, pool, task_clf, examples


def run_attack(cfg: ExperimentConfig) -> dict:
    p, pool, task_clf, examples = _load_attack_inputs(cfg)
    gen, _ = load_generator(_require(p["checkpoints"] / "generator_stage2.pt", "train-attr"),
                            expected_stage=2, expected_vocab_size=len(pool.vocab))
    heldout = load_classifier(_require(p["checkpoints"] / "attribute_heldout.pt",
                                       "train-classifier --role attribute"))
    lexicons = label_lexicons(cfg)
    subset = cfg.attack.candidates
    results = []
    for ex in examples:
        results.append(attack_mod.generate_attack(
            ex, gen, task_clf, pool.vocab,
            attribute_subset=None if subset is None else [a for a in subset if a != ex.attribute],
            tau=cfg.attack.tau, heldout_attr_classifier=heldout, label_lexicons=lexicons))
    attack_mod.write_attack_jsonl(results, p["attacks"] / "controlled.jsonl", meta=_meta(cfg))
    summary = {**_meta(cfg), **attack_mod.summarize(results)}
    _write_json(p["attacks"] / "controlled_summary.json", summary)
    return summary


def run_baseline_attack(cfg: ExperimentConfig) -> dict:
    p, pool, task_clf, examples = _load_attack_inputs(cfg)
    lexicons = label_lexicons(cfg)
    results = [substitution_attack(ex, task_clf, cfg.baseline, pool.vocab,
                                   label_lexicons=lexicons)
               for ex in examples]
    attack_mod.write_attack_jsonl(results, p["attacks"] / "substitution.jsonl", meta=_meta(cfg))
    summary = {**_meta(cfg), **attack_mod.summarize(results)}
    _write_json(p["attacks"] / "substitution_summary.json", summary)
    return summary


def run_generate(cfg: ExperimentConfig, input_split: str = "attack_pool",
                 target_attribute: int | None = None) -> dict:
    """Rewrite a dataset under a chosen (or cycled) target attribute."""
    p = paths_for(cfg)
    dataset = load_split(cfg, input_split)
    gen, stage = load_generator(_require(p["checkpoints"] / "generator_stage2.pt", "train-attr"),
                                expected_vocab_size=len(dataset.vocab))
    k = gen.config.num_attributes
    records = []
    with torch.no_grad():
        for ex in dataset:
            target = target_attribute if target_attribute is not None else (ex.attribute + 1) % k
            if target == ex.attribute:
                target = (target + 1) % k
            z = genmodel.encode(gen, ex.tokens)
            ids = attack_mod.generation_for(gen, z, target, cfg.attack.tau)
            records.append({
                "original": ex.raw_text,
                "attribute_from": dataset.attribute_names[ex.attribute],
                "attribute_to": dataset.attribute_names[target],
                "generated": dataset.vocab.decode_to_text(ids),
            })
    out_path = p["attacks"] / "generations.jsonl"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_meta": _meta(cfg)}, sort_keys=True) + "\n")
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return {"n_records": len(records), "stage": stage}


def _eligible_pool(results, rng: random.Random) -> list:
    """Successful attacks on correctly classified inputs whose generated text
    still carries the original sentiment lexicon (no label drift). Duplicate
    (input, output) pairs are dropped so pool splits are genuinely disjoint."""
    eligible = []
    seen = set()
    for r in results:
        if not (r.success and not r.originally_misclassified and not r.label_drift):
            continue
        key = (tuple(r.original_ids), tuple(r.generated_ids))
        if key in seen:
            continue
        seen.add(key)
        eligible.append(r)
    rng.shuffle(eligible)
    return eligible


def attack_pools(cfg: ExperimentConfig, results_by_method: dict[str, list]) -> dict:
    """Deterministic holdout/augmentation pools per attack method."""
    pools: dict[str, dict[str, list]] = {}
    for method, results in results_by_method.items():
        rng = random.Random(derive_seed(cfg.seed, "pool", method))
        eligible = _eligible_pool(results, rng)
        if len(eligible) < 2:
            raise PipelineError(f"not enough successful attacks for method {method!r} "
                                f"({len(eligible)} eligible)")
        holdout = eligible[:cfg.eval.pool_size]
        augment = eligible[cfg.eval.pool_size:2 * cfg.eval.pool_size]
        if not augment:
            holdout, augment = eligible[:len(eligible) // 2], eligible[len(eligible) // 2:]
        pools[method] = {"holdout": holdout, "augment": augment}
    return pools


def run_eval(cfg: ExperimentConfig) -> dict:
    p = paths_for(cfg)
    controlled, _ = attack_mod.read_attack_jsonl(
        _require(p["attacks"] / "controlled.jsonl", "attack"))
    substitution, _ = attack_mod.read_attack_jsonl(
        _require(p["attacks"] / "substitution.jsonl", "baseline-attack"))
    task_train = load_split(cfg, "task_train")
    test_set = load_split(cfg, "test")
    lm_train = load_split(cfg, "lm_train")
    pool_set = load_split(cfg, "attack_pool")
    task_clf = load_classifier(_require(p["checkpoints"] / "task_classifier.pt",
                                        "train-classifier --role task"))
    gen, _ = load_generator(_require(p["checkpoints"] / "generator_stage2.pt", "train-attr"),
                            expected_stage=2)

    by_method = {"controlled": controlled, "substitution": substitution}
    pools = attack_pools(cfg, by_method)

    # diversity: per eval seed, the same input subsample scores both methods
    n_common = min(len(controlled), len(substitution))
    diversity_rows = []
    diversity_records = []
    for seed in cfg.eval.seeds:
        rng = random.Random(derive_seed(seed, "diversity"))
        indices = list(range(n_common))
        if cfg.eval.pool_size < n_common:
            indices = sorted(rng.sample(indices, cfg.eval.pool_size))
        for method, results in sorted(by_method.items()):
            chosen = [results[i] for i in indices]
            scores = [evaluation.bleu4(r.generated_ids, r.original_ids) for r in chosen]
            diversity_rows.append({
                "seed": seed,
                "method": method,
                "n": len(chosen),
                "sentence_bleu4": float(np.mean(scores)),
                "corpus_bleu4": evaluation.corpus_bleu4(
                    (r.generated_ids, r.original_ids) for r in chosen),
            })
            diversity_records.extend(
                {"seed": seed, "method": method, "index": i, "bleu4": s}
                for i, s in zip(indices, scores))

    lm, lm_metrics = evaluation.train_lm(lm_train, cfg.eval.lm, heldout=None)
    fluency_rows = evaluation.fluency_table(by_method, lm)
    fluency_records = []
    for method, results in sorted(by_method.items()):
        fluency_records.extend(
            {"method": method, "index": i,
             "perplexity": evaluation.perplexity(lm, r.generated_ids)}
            for i, r in enumerate(results))

    # search-space curve over a fixed slice of the attack pool
    curve_subset = pool_set.subset(range(min(len(pool_set), cfg.eval.curve_sample_size * 2)))
    curve = evaluation.accuracy_vs_search_space(
        gen, task_clf, curve_subset, cfg.eval.category_counts, seeds=cfg.eval.seeds,
        tau=cfg.attack.tau, sample_size=cfg.eval.curve_sample_size)
    search_rows = [{"count": row["count"], "seed": seed, "accuracy": acc}
                   for row in curve
                   for seed, acc in zip(cfg.eval.seeds, row["accuracy_per_seed"])]

    transfer_rows = []
    augment_rows = []
    holdouts = {m: pools[m]["holdout"] for m in pools}
    augments = {m: pools[m]["augment"] for m in pools}
    for seed in cfg.eval.seeds:
        transfer = evaluation.transferability_experiment(
            holdouts, task_train, seed=derive_seed(cfg.seed, "transfer", seed),
            train_config=cfg.eval.retrain)
        for arch in sorted(transfer):
            for method in sorted(transfer[arch]):
                transfer_rows.append({"seed": seed, "architecture": arch,
                                      "method": method, "accuracy": transfer[arch][method]})
        matrix = evaluation.adversarial_training_experiment(
            task_train, test_set, augments, holdouts,
            seed=derive_seed(cfg.seed, "augment", seed), train_config=cfg.eval.retrain)
        for row_name in matrix:
            for column in sorted(matrix[row_name]):
                augment_rows.append({"seed": seed, "training_row": row_name,
                                     "eval_column": column,
                                     "accuracy": matrix[row_name][column]})

    report = EvalReport(
        tables={
            "diversity": diversity_rows,
            "fluency": fluency_rows,
            "transfer": transfer_rows,
            "augment": augment_rows,
            "search_space": search_rows,
        },
        metadata={**_meta(cfg), "dataset_hash": _dataset_hash(p["data"]),
                  "lm_sequences": lm_metrics["n_sequences"]},
    )
    written = emit_report(report, p["reports"])
    records_dir = p["reports"] / "records"
    records_dir.mkdir(parents=True, exist_ok=True)
    _write_records(records_dir / "diversity_records.jsonl", diversity_records, _meta(cfg))
    _write_records(records_dir / "fluency_records.jsonl", fluency_records, _meta(cfg))
    _write_json(p["reports"] / "report.json",
                {"metadata": report.metadata, "tables": report.tables,
                 "pools": {m: {k: len(v) for k, v in pools[m].items()} for m in pools}})
    return {"written": [str(w) for w in written],
            "pools": {m: {k: len(v) for k, v in pools[m].items()} for m in pools}}


def _write_records(path: Path, records, meta: dict) -> None:
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_meta": meta}, sort_keys=True) + "\n")
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _dataset_hash(data_dir: Path) -> str:
    import hashlib

    digest = hashlib.sha256()
    for path in sorted(data_dir.glob("*.jsonl")):
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()[:16]


def run_all(cfg: ExperimentConfig) -> dict:
    run_synth(cfg)
    run_train_classifier(cfg, "task")
    run_train_classifier(cfg, "attribute")
    run_pretrain(cfg)
    run_train_attr(cfg)
    run_attack(cfg)
    run_baseline_attack(cfg)
    return run_eval(cfg)
