"""Command-line interface: train, eval, sweep, visualize, gen-data.

Settings come from a JSON config file; command-line flags override file keys,
which override defaults. --threads must take effect before numpy loads its
BLAS, so heavy imports happen inside the command handlers.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _set_threads(n: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _load_config(path):
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="elastipatch",
        description="Elastic patch sampling experiments: training, evaluation, sweeps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train a model and write a checkpoint"),
        ("eval", "evaluate a checkpoint under a sampler/perturbation"),
        ("sweep", "run a registered experiment sweep"),
        ("visualize", "render a patch layout over an image"),
        ("gen-data", "generate a synthetic dataset cache"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the config output path")
        p.add_argument("--threads", type=int, help="BLAS/OpenMP thread count")
        p.add_argument(
            "--deterministic",
            action="store_true",
            help="single-threaded float64 mode (bit-reproducible)",
        )
        if name == "train":
            p.add_argument("--resume", help="checkpoint to resume from")
        if name == "sweep":
            p.add_argument("--experiment", help="override the experiment name")
        if name == "visualize":
            p.add_argument("--image", help="input image (PPM/PGM/PNG)")
            p.add_argument("--sampler", help="grid | density | central | edge")
    return parser


def cmd_train(args, config):
    from .bench import train_cmd

    if args.seed is not None:
        config.setdefault("regime", {})["seed"] = args.seed
    if args.out is not None:
        config["out"] = args.out
    if args.deterministic:
        config.setdefault("regime", {})["precision"] = "f64"
    out, history = train_cmd(config, resume=getattr(args, "resume", None))
    last = history[-1] if history else None
    print(f"checkpoint written to {out}")
    if last:
        print(f"epoch {last[0]}: loss {last[1]:.4f} train_acc {last[2]:.4f} val_acc {last[3]:.4f}")
    return 0


def cmd_eval(args, config):
    import numpy as np

    from .data import DatasetSpec, synth_shapes
    from .model import evaluate, params_from_checkpoint
    from .perturb import PerturbConfig

    for key in ("checkpoint", "dataset"):
        if key not in config:
            from .errors import ConfigError

            raise ConfigError(f"eval config is missing required key {key!r}")
    params = params_from_checkpoint(config["checkpoint"])
    dataset = synth_shapes(DatasetSpec.from_dict(config["dataset"]))
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    perturb = PerturbConfig.from_dict(config["perturb"]) if "perturb" in config else None
    limit = config.get("eval_limit")
    indices = np.arange(len(dataset))[:limit] if limit else None
    acc = evaluate(
        params,
        dataset,
        indices=indices,
        perturb=perturb,
        sampler=config.get("sampler", "grid"),
        sampler_params=config.get("sampler_params"),
        seed_entropy=(seed,),
    )
    print(f"accuracy {acc:.4f}")
    if args.out or config.get("out"):
        out = args.out or config["out"]
        with open(out, "w") as f:
            json.dump({"accuracy": acc, "config": config, "seed": seed}, f, indent=2)
            f.write("\n")
    return 0


def cmd_sweep(args, config):
    from .bench import ExperimentConfig, run_experiment
    from .data import DatasetSpec
    from .errors import ConfigError

    if args.experiment:
        config["experiment"] = args.experiment
    if args.out:
        config["out"] = args.out
    if args.seed is not None:
        config["seeds"] = [args.seed]
    for key in ("experiment", "checkpoint", "dataset"):
        if key not in config:
            raise ConfigError(f"sweep config is missing required key {key!r}")
    cfg = ExperimentConfig(
        experiment=config["experiment"],
        checkpoint=config["checkpoint"],
        dataset=DatasetSpec.from_dict(config["dataset"]),
        out=config.get("out", "sweep"),
        seeds=tuple(config.get("seeds", [0])),
        values=tuple(config["values"]) if config.get("values") else None,
        eval_limit=config.get("eval_limit"),
    )
    result = run_experiment(cfg)
    print(f"{len(result.rows)} rows -> {cfg.out}.csv / {cfg.out}.json")
    return 0


def cmd_visualize(args, config):
    from .bench import visualize_patches
    from .errors import ConfigError
    from .perturb import PerturbConfig

    image = args.image or config.get("image")
    out = args.out or config.get("out")
    if not image or not out:
        raise ConfigError("visualize needs 'image' and 'out' (flag or config key)")
    perturb = PerturbConfig.from_dict(config["perturb"]) if "perturb" in config else None
    visualize_patches(
        image,
        out,
        sampler=args.sampler or config.get("sampler", "grid"),
        sampler_params=config.get("sampler_params"),
        perturb=perturb,
        r=config.get("r", 16),
        seed=args.seed if args.seed is not None else config.get("seed", 0),
    )
    print(f"visualization written to {out}")
    return 0


def cmd_gen_data(args, config):
    from .data import DatasetSpec, save_dataset_cache, synth_shapes
    from .errors import ConfigError
    from .extract import save_image

    if "dataset" not in config:
        raise ConfigError("gen-data config is missing required key 'dataset'")
    spec_dict = dict(config["dataset"])
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    dataset = synth_shapes(DatasetSpec.from_dict(spec_dict))
    out = args.out or config.get("out", "dataset.bin")
    save_dataset_cache(out, dataset)
    print(f"{len(dataset)} samples -> {out}")
    for i in range(min(int(config.get("preview", 0)), len(dataset))):
        path = f"{os.path.splitext(out)[0]}_sample{i}.png"
        save_image(dataset.native(i), path)
        print(f"preview -> {path}")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "visualize": cmd_visualize,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.deterministic:
        _set_threads(1)
    elif args.threads:
        _set_threads(args.threads)
    from .errors import ConfigError, ParseError

    config = _load_config(args.config)
    try:
        return _COMMANDS[args.command](args, config)
    except (ConfigError, ParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
