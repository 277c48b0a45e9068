"""Command-line entry point: ``negcut train|eval|visualize|ablate``.

Exit codes: 0 success, 2 configuration / usage error, 3 runtime or NaN abort,
4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from negcut.config import ExperimentConfig, resolve_config
from negcut.data import load_dataset, load_image_folder, synth_dataset_in_memory, to_uint8
from negcut.errors import ConfigError, InvalidInputError, InvariantError, NumericalFailureError, TrainingAborted
from negcut.evaluation import evaluate_translation, similarity_map, translate
from negcut.networks import embed_patches
from negcut.training import NegCut, collect_hardness, probe_hardness, train_loop

log = logging.getLogger("negcut")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# helpers


def load_data(cfg: ExperimentConfig):
    if cfg.data.kind == "synth":
        return synth_dataset_in_memory(cfg.data.synth)
    return load_dataset(cfg.data.domain_a, cfg.data.domain_b, cfg.train.image_size)


def write_json(path, record):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def evaluate_state(state: NegCut, dataset, cfg: ExperimentConfig):
    fake = translate(state.nets.G, dataset.domain_a)
    return evaluate_translation(fake, dataset.domain_b, _masks(dataset), cfg.embedder)


def _masks(dataset):
    return None if dataset.masks_a is None else dataset.masks_a.numpy()


def _experiment_for_checkpoint(args):
    """Config from ``--config`` if given, else the snapshot saved with the run."""
    if args.config is None:
        snap = Path(args.checkpoint).resolve().parent.parent / "config.yaml"
        if snap.exists():
            args.config = snap
    return resolve_config(args.config, args.set, args.out, args.seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    cfg = resolve_config(args.config, args.set, args.out, args.seed)
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.dump(run_dir / "config.yaml")
    dataset = load_data(cfg)
    result = train_loop(dataset, cfg.train, out_dir=run_dir, max_steps=args.max_steps)
    log.info("finished %d steps; checkpoints in %s", result.state.step, run_dir / "checkpoints")
    print(run_dir)
    return EXIT_OK


def cmd_eval(args):
    cfg = _experiment_for_checkpoint(args) if args.checkpoint else resolve_config(args.config, args.set, args.out, args.seed)
    dataset = load_data(cfg)
    if args.translated:
        fake = load_image_folder(args.translated, cfg.train.image_size)
        masks = _masks(dataset) if len(fake) == len(dataset.domain_a) and args.aligned else None
        record = evaluate_translation(fake, dataset.domain_b, masks, cfg.embedder)
        record["source"] = str(args.translated)
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint", "eval needs --checkpoint or --translated")
        state = NegCut.load(args.checkpoint)
        record = evaluate_state(state, dataset, cfg)
        record.update(source=str(args.checkpoint), step=state.step, epoch=state.epoch)
    record["embedder"] = dataclasses.asdict(cfg.embedder)
    out = Path(args.record) if args.record else cfg.run_dir / "eval" / f"{Path(record['source']).stem}.json"
    write_json(out, record)
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def _parse_query(text):
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError("--query", f"expected ROW,COL, got {text!r}") from None
    return r, c


def cmd_visualize(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cfg = _experiment_for_checkpoint(args)
    state = NegCut.load(args.checkpoint)
    tcfg = state.config
    if args.image:
        image = load_image_folder_or_file(args.image, tcfg.image_size)
    else:
        image = load_data(cfg).domain_a[args.index]
    layer = args.layer
    if not 0 <= layer < len(tcfg.tap_layers):
        raise InvalidInputError(f"layer {layer} outside [0, {len(tcfg.tap_layers)})")
    tau = args.tau if args.tau is not None else tcfg.tau
    out_dir = Path(args.out_dir) if args.out_dir else cfg.run_dir / "visualize"
    out_dir.mkdir(parents=True, exist_ok=True)

    nets = state.nets
    x = image.unsqueeze(0).to(tcfg.torch_dtype)
    with torch.no_grad():
        y, taps_x = nets.G(x)
        taps_y, _ = nets.G.encode(y)
        emb_x = embed_patches(taps_x[layer], nets.H[layer])[0]
        emb_y = embed_patches(taps_y[layer], nets.H[layer])[0]
    keys = emb_y if args.keys == "translated" else emb_x
    queries = [_parse_query(q) for q in args.query] or [(emb_x.shape[-2] // 2, emb_x.shape[-1] // 2)]
    src = to_uint8(image)
    written = []
    for r, c in queries:
        m = similarity_map((r, c), emb_y, keys, tau).double().numpy()
        stem = out_dir / f"simmap_l{layer}_r{r}_c{c}"
        np.savetxt(stem.with_suffix(".csv"), m, delimiter=",", fmt="%.9e")
        fig, ax = plt.subplots(figsize=(3, 3), dpi=100)
        ax.imshow(src)
        ax.imshow(np.log(m), cmap="jet", alpha=0.5, extent=(0, src.shape[1], src.shape[0], 0), interpolation="nearest")
        stride = src.shape[0] / m.shape[0]
        ax.plot((c + 0.5) * stride, (r + 0.5) * stride, "w+", markersize=10)
        ax.set_axis_off()
        fig.savefig(stem.with_suffix(".png"), bbox_inches="tight")
        plt.close(fig)
        written.append(stem.with_suffix(".png"))

    gen, rand = collect_hardness(state, image, seed=args.hist_seed)[layer]
    stem = out_dir / f"hardness_l{layer}"
    fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
    bins = np.linspace(-1, 1, 41)
    ax.hist(rand.values, bins=bins, alpha=0.6, density=True, label="in-image negatives")
    if gen is not None:
        gen.save(out_dir / f"hardness_l{layer}_generated")
        ax.hist(gen.values, bins=bins, alpha=0.6, density=True, label="generated negatives")
    rand.save(out_dir / f"hardness_l{layer}_in_image")
    ax.set_xlabel("cosine similarity (query, negative)")
    ax.legend(fontsize=7)
    fig.savefig(stem.with_suffix(".png"), bbox_inches="tight")
    plt.close(fig)
    written.append(stem.with_suffix(".png"))
    for p in written:
        print(p)
    return EXIT_OK


def load_image_folder_or_file(path, size):
    path = Path(path)
    if path.is_dir():
        return load_image_folder(path, size)[0]
    from PIL import Image

    from negcut.data import to_tensor

    with Image.open(path) as im:
        im = im.convert("RGB").resize((size, size), Image.BILINEAR)
        return to_tensor(np.asarray(im)[None])[0]


ABLATION_COLUMNS = [
    "cell", "use_neg_generator", "use_diversity_loss", "num_negatives",
    "frechet", "correspondence", "hardness_mean", "neg_pairwise_l1",
]


def cmd_ablate(args):
    cfg = resolve_config(args.config, args.set, args.out, args.seed)
    dataset = load_data(cfg)
    root = cfg.run_dir / "ablate"
    root.mkdir(parents=True, exist_ok=True)
    cfg.dump(root / "config.yaml")
    rows = []
    for cell in cfg.ablate.cells():
        name = "gen{}_div{}_n{}".format(
            int(cell["use_neg_generator"]), int(cell.get("use_diversity_loss", False)), cell.get("num_negatives", 0)
        ) if cell["use_neg_generator"] else "in_image"
        tcfg = dataclasses.replace(cfg.train, **cell)
        log.info("ablation cell %s", name)
        result = train_loop(dataset, tcfg, out_dir=root / name, max_steps=args.max_steps)
        metrics = evaluate_state(result.state, dataset, cfg)
        probe = probe_hardness(result.state, dataset.domain_a[: cfg.ablate.probe_images], seed=tcfg.seed)
        key = "gen_mean" if cell["use_neg_generator"] else "rand_mean"
        rows.append({
            "cell": name,
            "use_neg_generator": tcfg.use_neg_generator,
            "use_diversity_loss": tcfg.use_diversity_loss if tcfg.use_neg_generator else None,
            "num_negatives": tcfg.num_negatives if tcfg.use_neg_generator else None,
            "frechet": metrics["frechet"],
            "correspondence": metrics["correspondence"],
            "hardness_mean": float(np.mean([p[key] for p in probe])),
            "neg_pairwise_l1": float(np.mean([p["neg_l1"] for p in probe])) if cell["use_neg_generator"] else None,
        })
    write_table(rows, root / "table")
    print(root / "table.csv")
    return EXIT_OK


def write_table(rows, stem):
    stem = Path(stem)
    with open(stem.with_suffix(".csv"), "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r[k] is None else r[k] for k in ABLATION_COLUMNS})

    def fmt(v):
        if v is None:
            return "n/a"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    lines = ["| " + " | ".join(ABLATION_COLUMNS) + " |", "|" + "---|" * len(ABLATION_COLUMNS)]
    lines += ["| " + " | ".join(fmt(r[k]) for k in ABLATION_COLUMNS) + " |" for r in rows]
    stem.with_suffix(".md").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. train.lr_g=1e-4 (repeatable)")
    common.add_argument("--out", help="output root (default: $NEGCUT_OUT or ./runs)")
    common.add_argument("--seed", type=int, help="sets train.seed and data.synth.seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="negcut", description="Contrastive unpaired translation with generated hard negatives.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="Fréchet distance and correspondence of a checkpoint")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--translated", type=Path, help="evaluate a folder of already translated images instead")
    e.add_argument("--aligned", action="store_true", help="--translated images follow domain A order (enables correspondence)")
    e.add_argument("--record", type=Path, help="where to write the JSON record")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", parents=[common], help="similarity maps and hardness histogram")
    v.add_argument("--checkpoint", type=Path, required=True)
    v.add_argument("--image", type=Path, help="image file (default: a domain-A image from the config)")
    v.add_argument("--index", type=int, default=0, help="domain-A index when --image is not given")
    v.add_argument("--query", action="append", default=[], metavar="ROW,COL", help="query position on the layer's map")
    v.add_argument("--layer", type=int, default=0, help="tap index")
    v.add_argument("--tau", type=float)
    v.add_argument("--keys", choices=("source", "translated"), default="source")
    v.add_argument("--hist-seed", type=int, default=0)
    v.add_argument("--out-dir", type=Path)
    v.set_defaults(func=cmd_visualize)

    a = sub.add_parser("ablate", parents=[common], help="run the ablation grid")
    a.add_argument("--max-steps", type=int, help="cap steps per cell")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as e:
        extra = f" (history in {e.dump_path})" if e.dump_path else ""
        print(f"aborted: {e}{extra}", file=sys.stderr)
        return EXIT_RUNTIME
    except (NumericalFailureError, InvariantError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
