"""Pipeline orchestration: every stage is a subcommand writing artifacts
plus a manifest (config hash, derived seed, input/output hashes) into the
run directory, so any artifact is reproducible from its manifest.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .align import DpoConfig, build_preference_pairs, preference_accuracy, train_dpo
from .dataio import (
    SynthConfig,
    build_sequences,
    generate_synthetic,
    k_core_filter,
    leave_one_out_split,
    load_sequences_tsv,
    parse_reviews,
    review_key,
    save_sequences_tsv,
)
from .decode import build_trie
from .embedding import (
    EmbeddingMatrix,
    load_embeddings,
    save_embeddings,
    synthetic_embed,
)
from .errors import ConfigError, RagrError, StageDependencyError
from .evaluation import evaluate, sid_frequency
from .genrec import GenRecModel, ModelConfig, SftConfig, load_genrec, save_genrec, train_sft
from .rqvae import (
    RqVaeConfig,
    RqVaeModel,
    TokenizerTrainConfig,
    assign_sids,
    collision_rate,
    disambiguate_collisions,
    load_rqvae,
    load_sid_map,
    save_rqvae,
    save_sid_map,
    train_tokenizer,
)
from .sequence import SequenceMode, TokenVocabulary, make_instances

STAGES = (
    "ingest",
    "synth",
    "tokenize",
    "train",
    "align",
    "eval",
    "sweep-sid",
    "sweep-dpo",
    "inspect",
)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageDependencyError(f"stage {stage!r} requires missing artifact {path}")
    return path


def _write_manifest(
    out: Path, stage: str, cfg: dict, seed: int, inputs: list[Path], outputs: list[Path]
) -> None:
    manifest = {
        "stage": stage,
        "config_hash": config_mod.config_hash(cfg),
        "seed": seed,
        "inputs": {p.name: _sha256(p) for p in inputs},
        "outputs": {p.name: _sha256(p) for p in outputs},
    }
    (out / f"{stage}.manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(str(v) for v in row) + "\n")


def _load_split(out: Path, stage: str):
    interactions = load_sequences_tsv(_require(out / "dataset.tsv", stage))
    return leave_one_out_split(build_sequences(interactions)), interactions


def _load_matrix(out: Path, name: str, stage: str) -> EmbeddingMatrix:
    return load_embeddings(
        _require(out / f"{name}.rgem", stage), _require(out / f"{name}.keys", stage)
    )


def _mode(cfg: dict) -> SequenceMode:
    raw = str(cfg["genrec"]["mode"])
    try:
        return SequenceMode(raw)
    except ValueError:
        raise ConfigError(f"genrec.mode must be one of item-only/input/task, got {raw!r}") from None


def _vocab_for(item_sids: dict, codebook_size: int) -> TokenVocabulary:
    levels = next(iter(item_sids.values())).levels
    num_disambig = max(sid.disambig or 0 for sid in item_sids.values()) + 1
    return TokenVocabulary(levels=levels, codebook_size=codebook_size, num_disambig=num_disambig)


def _save_checkpoint_sidecar(path: Path, mode: SequenceMode, vocab: TokenVocabulary) -> None:
    meta = {
        "mode": mode.value,
        "levels": vocab.levels,
        "codebook_size": vocab.codebook_size,
        "num_disambig": vocab.num_disambig,
    }
    path.write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def _load_checkpoint_sidecar(path: Path, stage: str) -> tuple[SequenceMode, TokenVocabulary]:
    meta = json.loads(_require(path, stage).read_text(encoding="utf-8"))
    vocab = TokenVocabulary(
        levels=int(meta["levels"]),
        codebook_size=int(meta["codebook_size"]),
        num_disambig=int(meta["num_disambig"]),
    )
    return SequenceMode(meta["mode"]), vocab


# ---------------------------------------------------------------- stages


def cmd_ingest(cfg: dict, out: Path) -> None:
    source = str(cfg["data"]["input"])
    if not source:
        raise ConfigError("ingest needs data.input pointing at a review file")
    src = _require(Path(source), "ingest")
    seed = config_mod.derive_seed(int(cfg["run"]["seed"]), "ingest")
    result = parse_reviews(src, str(cfg["data"]["format"]))
    kept = k_core_filter(result.interactions, int(cfg["data"]["k_core"]))
    sequences = build_sequences(kept)
    flat = [it for seq in sequences for it in seq.interactions]
    save_sequences_tsv(flat, out / "dataset.tsv")

    dim = int(cfg["data"]["embedding_dim"])
    inputs = [src]
    item_prefix = str(cfg["data"]["item_embeddings"])
    if item_prefix:
        matrix = load_embeddings(
            _require(Path(item_prefix + ".rgem"), "ingest"),
            _require(Path(item_prefix + ".keys"), "ingest"),
        )
        inputs += [Path(item_prefix + ".rgem"), Path(item_prefix + ".keys")]
    else:
        # deterministic hash-based fallback encoder over the item key text
        item_keys = sorted({it.item_key for it in flat})
        matrix = EmbeddingMatrix(
            item_keys,
            np.stack([synthetic_embed(k, dim, seed) for k in item_keys]),
        )
    save_embeddings(matrix, out / "items.rgem", out / "items.keys")

    review_prefix = str(cfg["data"]["review_embeddings"])
    if review_prefix:
        reviews = load_embeddings(
            _require(Path(review_prefix + ".rgem"), "ingest"),
            _require(Path(review_prefix + ".keys"), "ingest"),
        )
        inputs += [Path(review_prefix + ".rgem"), Path(review_prefix + ".keys")]
    else:
        keys, rows = [], []
        for seq in sequences:
            for t, it in enumerate(seq.interactions, start=1):
                if it.review_text:
                    keys.append(review_key(seq.user_key, t))
                    rows.append(synthetic_embed(it.review_text, dim, seed))
        data = np.stack(rows) if rows else np.zeros((0, dim), np.float32)
        reviews = EmbeddingMatrix(keys, data)
    save_embeddings(reviews, out / "reviews.rgem", out / "reviews.keys")

    outputs = [out / n for n in ("dataset.tsv", "items.rgem", "items.keys", "reviews.rgem", "reviews.keys")]
    _write_manifest(out, "ingest", cfg, seed, inputs, outputs)


def cmd_synth(cfg: dict, out: Path) -> None:
    seed = config_mod.derive_seed(int(cfg["run"]["seed"]), "synth")
    data = generate_synthetic(
        SynthConfig(
            num_users=int(cfg["data"]["num_users"]),
            num_items=int(cfg["data"]["num_items"]),
            seq_len_range=(int(cfg["data"]["seq_len_min"]), int(cfg["data"]["seq_len_max"])),
            signal_strength=float(cfg["data"]["signal_strength"]),
            seed=seed,
            num_clusters=int(cfg["data"]["clusters"]),
            dim=int(cfg["data"]["embedding_dim"]),
            noise_scale=float(cfg["data"]["noise_scale"]),
        )
    )
    save_sequences_tsv(data.interactions, out / "dataset.tsv")
    save_embeddings(data.item_embeddings, out / "items.rgem", out / "items.keys")
    save_embeddings(data.review_embeddings, out / "reviews.rgem", out / "reviews.keys")
    outputs = [out / n for n in ("dataset.tsv", "items.rgem", "items.keys", "reviews.rgem", "reviews.keys")]
    _write_manifest(out, "synth", cfg, seed, [], outputs)


def _tokenize_core(
    cfg: dict, items: EmbeddingMatrix, reviews: EmbeddingMatrix, levels: int, seed: int
) -> tuple[RqVaeModel, dict, dict, float]:
    tk = cfg["tokenizer"]
    model = RqVaeModel(
        RqVaeConfig(
            input_dim=items.dim,
            hidden_dims=config_mod.int_list(cfg, "tokenizer", "hidden_dims"),
            code_dim=int(tk["code_dim"]),
            num_levels=levels,
            codebook_size=int(tk["codebook_size"]),
            beta_commit=float(tk["beta_commit"]),
            rec_target=str(tk["rec_target"]),
        )
    )
    torch.manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.normal_(0.0, 0.05)
    train_tokenizer(
        model,
        items,
        TokenizerTrainConfig(
            lr=float(tk["lr"]),
            batch_size=int(tk["batch_size"]),
            epochs=int(tk["epochs"]),
            weight_decay=float(tk["weight_decay"]),
            seed=seed,
            kmeans_iters=int(tk["kmeans_iters"]),
        ),
    )
    base = assign_sids(model, items)
    rate = collision_rate(base)
    item_sids = disambiguate_collisions(base)
    review_sids = assign_sids(model, reviews) if len(reviews) else {}
    return model, item_sids, review_sids, rate


def cmd_tokenize(cfg: dict, out: Path) -> None:
    seed = config_mod.derive_seed(int(cfg["run"]["seed"]), "tokenize")
    items = _load_matrix(out, "items", "tokenize")
    reviews = _load_matrix(out, "reviews", "tokenize")
    model, item_sids, review_sids, rate = _tokenize_core(
        cfg, items, reviews, int(cfg["tokenizer"]["levels"]), seed
    )
    save_rqvae(model, out / "tokenizer.rgck")
    save_sid_map(item_sids, out / "item_sids.tsv")
    save_sid_map(review_sids, out / "review_sids.tsv")
    _write_tsv(
        out / "collision.tsv",
        ["levels", "collision_rate", "num_items"],
        [[model.config.num_levels, rate, len(item_sids)]],
    )
    inputs = [out / n for n in ("items.rgem", "items.keys", "reviews.rgem", "reviews.keys")]
    outputs = [out / n for n in ("tokenizer.rgck", "item_sids.tsv", "review_sids.tsv", "collision.tsv")]
    _write_manifest(out, "tokenize", cfg, seed, inputs, outputs)


def _train_core(
    cfg: dict,
    split,
    item_sids: dict,
    review_sids: dict,
    vocab: TokenVocabulary,
    mode: SequenceMode,
    seed: int,
) -> tuple[GenRecModel, list[dict[str, float]]]:
    g = cfg["genrec"]
    instances = make_instances(
        split, item_sids, review_sids, vocab, mode, max_items=int(g["max_items"])
    )
    model = GenRecModel(
        ModelConfig(
            vocab_size=vocab.vocab_size,
            d_model=int(g["d_model"]),
            n_heads=int(g["n_heads"]),
            n_layers_enc=int(g["n_layers_enc"]),
            n_layers_dec=int(g["n_layers_dec"]),
            d_ff=(int(g["d_ff"]) or None),
            max_positions=int(g["max_positions"]),
            dropout=float(g["dropout"]),
            seed=seed,
        )
    )
    history = train_sft(
        model,
        instances,
        SftConfig(
            lr=float(g["lr"]),
            batch_size=int(g["batch_size"]),
            epochs=int(g["epochs"]),
            warmup_ratio=float(g["warmup_ratio"]),
            weight_decay=float(g["weight_decay"]),
            label_smoothing=float(g["label_smoothing"]),
            seed=seed,
        ),
    )
    return model, history


def cmd_train(cfg: dict, out: Path) -> None:
    mode = _mode(cfg)
    seed = config_mod.derive_seed(int(cfg["run"]["seed"]), f"train:{mode.value}")
    split, _ = _load_split(out, "train")
    item_sids = load_sid_map(_require(out / "item_sids.tsv", "train"))
    review_sids = load_sid_map(_require(out / "review_sids.tsv", "train"))
    tokenizer = load_rqvae(_require(out / "tokenizer.rgck", "train"))
    vocab = _vocab_for(item_sids, tokenizer.config.codebook_size)
    model, history = _train_core(cfg, split, item_sids, review_sids, vocab, mode, seed)
    name = f"genrec-{mode.value}"
    save_genrec(model, out / f"{name}.rgck")
    _save_checkpoint_sidecar(out / f"{name}.json", mode, vocab)
    _write_tsv(
        out / f"{name}.history.tsv",
        ["epoch", "loss"],
        [[int(h["epoch"]), h["loss"]] for h in history],
    )
    inputs = [out / n for n in ("dataset.tsv", "item_sids.tsv", "review_sids.tsv", "tokenizer.rgck")]
    outputs = [out / f"{name}.rgck", out / f"{name}.json", out / f"{name}.history.tsv"]
    _write_manifest(out, "train", cfg, seed, inputs, outputs)


def cmd_align(cfg: dict, out: Path) -> None:
    seed = config_mod.derive_seed(int(cfg["run"]["seed"]), "align")
    ckpt = _require(out / "genrec-task.rgck", "align")
    mode, vocab = _load_checkpoint_sidecar(out / "genrec-task.json", "align")
    if mode is not SequenceMode.TASK_AUGMENTED:
        raise ConfigError("align requires a task-mode checkpoint")
    split, _ = _load_split(out, "align")
    item_sids = load_sid_map(_require(out / "item_sids.tsv", "align"))
    review_sids = load_sid_map(_require(out / "review_sids.tsv", "align"))
    policy = load_genrec(ckpt)
    pairs = build_preference_pairs(
        split, item_sids, review_sids, vocab, max_items=int(cfg["genrec"]["max_items"])
    )
    pre_acc = preference_accuracy(policy, pairs) if pairs else float("nan")
    a = cfg["align"]
    history = train_dpo(
        policy,
        pairs,
        DpoConfig(
            beta_dpo=float(a["beta_dpo"]),
            lr=float(a["lr"]),
            epochs=int(a["epochs"]),
            batch_size=int(a["batch_size"]),
            seed=seed,
        ),
    )
    post_acc = preference_accuracy(policy, pairs) if pairs else float("nan")
    save_genrec(policy, out / "genrec-aligned.rgck")
    _save_checkpoint_sidecar(out / "genrec-aligned.json", SequenceMode.TASK_AUGMENTED, vocab)
    _write_tsv(
        out / "align.history.tsv",
        ["epoch", "loss"],
        [[int(h["epoch"]), h["loss"]] for h in history],
    )
    _write_tsv(
        out / "align.report.tsv",
        ["num_pairs", "pre_accuracy", "post_accuracy"],
        [[len(pairs), pre_acc, post_acc]],
    )
    inputs = [
        out / n
        for n in ("genrec-task.rgck", "genrec-task.json", "dataset.tsv", "item_sids.tsv", "review_sids.tsv")
    ]
    outputs = [
        out / n
        for n in ("genrec-aligned.rgck", "genrec-aligned.json", "align.history.tsv", "align.report.tsv")
    ]
    _write_manifest(out, "align", cfg, seed, inputs, outputs)


def cmd_eval(cfg: dict, out: Path) -> None:
    seed = config_mod.derive_seed(int(cfg["run"]["seed"]), "eval")
    name = str(cfg["eval"]["checkpoint"]) or f"genrec-{_mode(cfg).value}"
    if name.endswith(".rgck"):
        name = name[: -len(".rgck")]
    ckpt = _require(out / f"{name}.rgck", "eval")
    mode, vocab = _load_checkpoint_sidecar(out / f"{name}.json", "eval")
    split, _ = _load_split(out, "eval")
    item_sids = load_sid_map(_require(out / "item_sids.tsv", "eval"))
    review_sids = load_sid_map(_require(out / "review_sids.tsv", "eval"))
    model = load_genrec(ckpt)
    trie = build_trie(item_sids, vocab)
    ks = tuple(config_mod.int_list(cfg, "eval", "ks"))
    table = evaluate(
        model,
        trie,
        split,
        item_sids,
        review_sids,
        vocab,
        mode,
        ks=ks,
        max_items=int(cfg["genrec"]["max_items"]),
        which=str(cfg["eval"]["split"]),
        chunk_size=int(cfg["eval"]["chunk_size"]),
    )
    rows = [["num_users", 0, table.num_users]]
    for k in ks:
        rows.append(["hit", k, table.hit[k]])
        rows.append(["ndcg", k, table.ndcg[k]])
    _write_tsv(out / "metrics.tsv", ["metric", "k", "value"], rows)
    inputs = [ckpt, out / f"{name}.json", out / "dataset.tsv", out / "item_sids.tsv", out / "review_sids.tsv"]
    _write_manifest(out, "eval", cfg, seed, inputs, [out / "metrics.tsv"])


def cmd_sweep_sid(cfg: dict, out: Path) -> None:
    seed = config_mod.derive_seed(int(cfg["run"]["seed"]), "sweep-sid")
    items = _load_matrix(out, "items", "sweep-sid")
    reviews = _load_matrix(out, "reviews", "sweep-sid")
    split, _ = _load_split(out, "sweep-sid")
    mode = _mode(cfg)
    rows = []
    for m in config_mod.int_list(cfg, "sweep", "sid_levels"):
        tokenizer, item_sids, review_sids, rate = _tokenize_core(cfg, items, reviews, m, seed + m)
        vocab = _vocab_for(item_sids, tokenizer.config.codebook_size)
        model, _ = _train_core(cfg, split, item_sids, review_sids, vocab, mode, seed + m)
        trie = build_trie(item_sids, vocab)
        table = evaluate(
            model, trie, split, item_sids, review_sids, vocab, mode,
            ks=(5,), max_items=int(cfg["genrec"]["max_items"]),
        )
        rows.append([m, rate, table.hit[5], table.ndcg[5]])
    _write_tsv(out / "sweep_sid.tsv", ["levels", "collision_rate", "hit@5", "ndcg@5"], rows)
    inputs = [out / n for n in ("items.rgem", "items.keys", "reviews.rgem", "reviews.keys", "dataset.tsv")]
    _write_manifest(out, "sweep-sid", cfg, seed, inputs, [out / "sweep_sid.tsv"])


def cmd_sweep_dpo(cfg: dict, out: Path) -> None:
    seed = config_mod.derive_seed(int(cfg["run"]["seed"]), "sweep-dpo")
    ckpt = _require(out / "genrec-task.rgck", "sweep-dpo")
    mode, vocab = _load_checkpoint_sidecar(out / "genrec-task.json", "sweep-dpo")
    if mode is not SequenceMode.TASK_AUGMENTED:
        raise ConfigError("sweep-dpo requires a task-mode checkpoint")
    split, _ = _load_split(out, "sweep-dpo")
    item_sids = load_sid_map(_require(out / "item_sids.tsv", "sweep-dpo"))
    review_sids = load_sid_map(_require(out / "review_sids.tsv", "sweep-dpo"))
    base = load_genrec(ckpt)
    pairs = build_preference_pairs(
        split, item_sids, review_sids, vocab, max_items=int(cfg["genrec"]["max_items"])
    )
    trie = build_trie(item_sids, vocab)
    rows = []
    for beta in config_mod.float_list(cfg, "sweep", "dpo_betas"):
        for epochs in config_mod.int_list(cfg, "sweep", "dpo_epochs"):
            policy = copy.deepcopy(base)
            pre_acc = preference_accuracy(policy, pairs)
            train_dpo(
                policy,
                pairs,
                DpoConfig(
                    beta_dpo=beta,
                    lr=float(cfg["align"]["lr"]),
                    epochs=epochs,
                    batch_size=int(cfg["align"]["batch_size"]),
                    seed=seed,
                ),
            )
            post_acc = preference_accuracy(policy, pairs)
            table = evaluate(
                policy, trie, split, item_sids, review_sids, vocab, mode,
                ks=(5,), max_items=int(cfg["genrec"]["max_items"]),
            )
            rows.append([beta, epochs, pre_acc, post_acc, table.hit[5]])
    _write_tsv(
        out / "sweep_dpo.tsv",
        ["beta_dpo", "epochs", "pre_accuracy", "post_accuracy", "hit@5"],
        rows,
    )
    inputs = [out / n for n in ("genrec-task.rgck", "genrec-task.json", "dataset.tsv", "item_sids.tsv", "review_sids.tsv")]
    _write_manifest(out, "sweep-dpo", cfg, seed, inputs, [out / "sweep_dpo.tsv"])


def cmd_inspect(cfg: dict, out: Path) -> None:
    seed = config_mod.derive_seed(int(cfg["run"]["seed"]), "inspect")
    item_sids = load_sid_map(_require(out / "item_sids.tsv", "inspect"))
    freq = sid_frequency(item_sids, top_n=int(cfg["tokenizer"]["codebook_size"]))
    rows = [
        [level, code, count]
        for level in sorted(freq)
        for code, count in freq[level]
    ]
    _write_tsv(out / "sid_frequency.tsv", ["level", "code", "count"], rows)
    _write_manifest(out, "inspect", cfg, seed, [out / "item_sids.tsv"], [out / "sid_frequency.tsv"])


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "align": cmd_align,
    "eval": cmd_eval,
    "sweep-sid": cmd_sweep_sid,
    "sweep-dpo": cmd_sweep_dpo,
    "inspect": cmd_inspect,
}

_EPOCH_OVERRIDE = {
    "tokenize": ("tokenizer", "epochs"),
    "train": ("genrec", "epochs"),
    "align": ("align", "epochs"),
    "sweep-sid": ("genrec", "epochs"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragr", description="semantic-ID generative recommendation pipeline"
    )
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--mode", choices=["item-only", "input", "task"], default=None)
    parser.add_argument("--sid-levels", type=int, default=None, help="tokenizer levels override")
    parser.add_argument("--beta-dpo", type=float, default=None)
    parser.add_argument("--epochs", type=int, default=None, help="epoch override for the stage")
    parser.add_argument("--out", default=None, help="run directory override")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, int(os.environ.get("RAGR_THREADS", "1"))))
    cfg = config_mod.load_config(args.config)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.out is not None:
        cfg["run"]["out"] = args.out
    if args.mode is not None:
        cfg["genrec"]["mode"] = args.mode
    if args.sid_levels is not None:
        cfg["tokenizer"]["levels"] = args.sid_levels
    if args.beta_dpo is not None:
        cfg["align"]["beta_dpo"] = args.beta_dpo
    if args.epochs is not None:
        if args.stage not in _EPOCH_OVERRIDE:
            raise ConfigError(f"--epochs does not apply to stage {args.stage!r}")
        section, key = _EPOCH_OVERRIDE[args.stage]
        cfg[section][key] = args.epochs
    out = Path(str(cfg["run"]["out"]))
    out.mkdir(parents=True, exist_ok=True)
    COMMANDS[args.stage](cfg, out)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except StageDependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except RagrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
