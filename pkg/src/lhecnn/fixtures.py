"""Bundled demonstration models.

The worked-example fixture is a 2-conv / 2-dense integer model over two 8x8
inputs whose intermediate ciphertexts come out to small exact integers; the
demo model is a randomly seeded single-conv MNIST-shaped network (seed
recorded below).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import ConvLayer, FcLayer, ModelConfig
from .oracle import PlainModel
from .tensorio import model_to_tensors, save_config, save_tensors

DEMO_SEED = 20250809


def fig2_config() -> ModelConfig:
    return ModelConfig(
        input_side=8, n=2, slot_count=8,
        conv=[ConvLayer(channels=1, filters=2, kernel=2, stride=2),
              ConvLayer(channels=2, filters=1, kernel=2, stride=2)],
        fc=[FcLayer(in_neurons=4, out_neurons=2),
            FcLayer(in_neurons=2, out_neurons=2)],
    )


def fig2_model() -> PlainModel:
    conv1 = np.zeros((2, 1, 2, 2))
    conv1[0, 0] = [[1, 0], [0, 0]]
    conv1[1, 0] = [[0, 0], [0, 1]]
    conv2 = np.zeros((1, 2, 2, 2))
    conv2[0, 0] = [[1, 0], [0, 1]]
    conv2[0, 1] = [[0, 1], [1, 0]]
    fc1 = np.array([[1.0, 0.0, 0.0, 1.0],
                    [2.0, -2.0, 0.0, 1.0]])
    fc2 = np.array([[1.0, -1.0],
                    [0.0, 1.0]])
    return PlainModel(conv=[conv1, conv2], fc=[fc1, fc2])


def fig2_batch() -> np.ndarray:
    """Two 8x8 images; the second is the first doubled."""
    first = np.zeros((8, 8))
    # Each 4x4 quadrant contributes four cells to one combined output.
    for (qa, qb), value in {(0, 0): 5.0, (0, 1): 7.0,
                            (1, 0): 21.0, (1, 1): 23.0}.items():
        for dx, dy in ((0, 0), (2, 2), (1, 3), (3, 1)):
            first[4 * qa + dx, 4 * qb + dy] = value
    batch = np.zeros((2, 1, 8, 8))
    batch[0, 0] = first
    batch[1, 0] = 2.0 * first
    return batch


def fig2_labels() -> np.ndarray:
    return np.array([[36.0, 76.0], [72.0, 152.0]])


def cnn12_config() -> ModelConfig:
    return ModelConfig(
        input_side=28, n=64, slot_count=4096,
        conv=[ConvLayer(channels=1, filters=4, kernel=7, stride=3)],
        fc=[FcLayer(in_neurons=256, out_neurons=64),
            FcLayer(in_neurons=64, out_neurons=10)],
    )


def cnn12_model(seed: int = DEMO_SEED) -> PlainModel:
    rng = np.random.default_rng(seed)
    return PlainModel(
        conv=[rng.uniform(-0.5, 0.5, (4, 1, 7, 7))],
        fc=[rng.uniform(-0.25, 0.25, (64, 256)),
            rng.uniform(-0.25, 0.25, (10, 64))],
    )


def cnn12_batch(seed: int = DEMO_SEED) -> np.ndarray:
    rng = np.random.default_rng(seed + 1)
    return rng.uniform(0.0, 1.0, (64, 1, 28, 28))


BUNDLES = {
    "fig2": (fig2_config, fig2_model, fig2_batch, fig2_labels),
    "cnn12": (cnn12_config, cnn12_model, cnn12_batch, None),
}


def write_bundle(dest, name: str, fmt: str = "binary") -> dict:
    """Materialize a bundled fixture as config/weights/inputs(/labels) files."""
    if name not in BUNDLES:
        raise KeyError(f"unknown bundle {name!r}; choose from {sorted(BUNDLES)}")
    cfg_fn, model_fn, batch_fn, labels_fn = BUNDLES[name]
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    ext = "ht" if fmt == "binary" else "txt"
    paths = {
        "config": dest / f"{name}.json",
        "weights": dest / f"{name}-weights.{ext}",
        "inputs": dest / f"{name}-inputs.{ext}",
    }
    save_config(paths["config"], cfg_fn())
    save_tensors(paths["weights"], model_to_tensors(model_fn()), fmt)
    save_tensors(paths["inputs"], {"inputs": batch_fn()}, fmt)
    if labels_fn is not None:
        paths["labels"] = dest / f"{name}-labels.{ext}"
        save_tensors(paths["labels"], {"labels": labels_fn()}, fmt)
    return paths
