"""Elastic patch sampling for vision transformers.

A numpy library for studying how transformers cope with non-grid input:
patch geometry and perturbation operators, continuous four-corner positional
encodings, bilinear token extraction, adaptive CENTRAL/EDGE samplers,
coverage-aware augmentations, a small trainable ViT with manual gradients,
and an experiment harness.

Submodules import lazily so the CLI can configure threading first.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "geometry",
    "perturb",
    "encoding",
    "extract",
    "sampling",
    "augment",
    "model",
    "data",
    "bench",
    "errors",
    "cli",
)

_EXPORTS = {
    # geometry
    "ImageSpec": "geometry",
    "Patch": "geometry",
    "PatchSet": "geometry",
    "CoverageMap": "geometry",
    "make_grid": "geometry",
    "make_density_grid": "geometry",
    "rasterize_coverage": "geometry",
    "coverage_fraction": "geometry",
    "block_rescale": "geometry",
    "block_drop": "geometry",
    "add_redundant_patches": "geometry",
    # perturb
    "PerturbConfig": "perturb",
    "e_scale": "perturb",
    "e_pos": "perturb",
    "e_miss": "perturb",
    "apply_pipeline": "perturb",
    # encoding
    "EncodingConfig": "encoding",
    "sincos_1d": "encoding",
    "encode_patch": "encoding",
    "encode_patchset": "encoding",
    # extract
    "Image": "extract",
    "Token": "extract",
    "TokenBatch": "extract",
    "bilinear_sample": "extract",
    "extract_tokens": "extract",
    "extract_batch": "extract",
    "load_image": "extract",
    "save_image": "extract",
    "image_from_array": "extract",
    # sampling
    "EdgeMap": "sampling",
    "canny": "sampling",
    "central_sampling": "sampling",
    "edge_sampling": "sampling",
    # augment
    "SoftLabel": "augment",
    "patchmix": "augment",
    "mixup_elastic": "augment",
    "training_sampler": "augment",
    "TrainAugmentConfig": "augment",
    # model
    "ModelConfig": "model",
    "ModelParams": "model",
    "TrainConfig": "model",
    "init_params": "model",
    "forward": "model",
    "backward": "model",
    "loss_softmax_ce": "model",
    "optimizer_step": "model",
    "train": "model",
    "evaluate": "model",
    "save_checkpoint": "model",
    "load_checkpoint": "model",
    "params_from_checkpoint": "model",
    # data
    "DatasetSpec": "data",
    "synth_shapes": "data",
    "load_raw_idx": "data",
    "split_indices": "data",
    # bench
    "ExperimentConfig": "bench",
    "run_experiment": "bench",
    "train_cmd": "bench",
    "visualize_patches": "bench",
}

__all__ = sorted(set(_SUBMODULES) | set(_EXPORTS))


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    if name in _EXPORTS:
        module = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(module, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
