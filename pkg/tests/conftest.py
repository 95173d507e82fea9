"""Shared fixtures: a full toy system (trained backbone, auxiliary, and
attention mechanism) built once per session for the acceptance checks, a
miniature system for fast pipeline tests, and a synthetic region classifier
whose metric values are enumerable by hand."""

import numpy as np
import pytest
import torch
import torch.nn as nn

import ptame
from ptame import attention, models, training
from ptame.data import LabeledImageSet, Normalization

TOY_TRAIN_N = 8000
TOY_VAL_N = 1000
TOY_TEST_N = 200
BACKBONE_EPOCHS = 4
DEFAULT_WEIGHTS = training.LossWeights(0.75, 0.2, 0.05, lambda_area=1.0)
DEFAULT_TRAIN = training.TrainConfig(batch_size=32, max_lr=1e-3, seed=0)


def build_attention(aux, class_count, seed):
    shapes = [tuple(f.shape[1:]) for f in aux.features(torch.zeros((1, *aux.input_shape)))]
    return attention.AttentionMechanism.from_feature_shapes(
        shapes, class_count, layer_names=aux.module.feature_layers, seed=seed)


@pytest.fixture(scope="session")
def toy_data():
    full = ptame.synthesize_glyph_dataset(TOY_TRAIN_N + TOY_VAL_N, seed=0)
    train_set, val_set = full.split(TOY_TRAIN_N)
    test_set = ptame.synthesize_glyph_dataset(TOY_TEST_N, seed=123)
    return {"train": train_set, "val": val_set, "test": test_set}


@pytest.fixture(scope="session")
def toy_backbone(toy_data):
    torch.manual_seed(0)
    config = models.ToyTrainConfig(epochs=BACKBONE_EPOCHS, seed=0)
    return models.train_toy_classifier(toy_data["train"], toy_data["val"], "cnn_small", config)


@pytest.fixture(scope="session")
def toy_aux(toy_data):
    torch.manual_seed(0)
    config = models.ToyTrainConfig(epochs=BACKBONE_EPOCHS, seed=0)
    return models.train_toy_classifier(toy_data["train"], toy_data["val"], "resnet_aux", config)


@pytest.fixture(scope="session")
def toy_attention(toy_backbone, toy_aux, toy_data):
    """Seed-0 trained attention mechanism plus its loss trace."""
    torch.manual_seed(0)
    mechanism = build_attention(toy_aux, toy_backbone.class_count, seed=0)
    mechanism, trace = training.train_epoch(toy_backbone, toy_aux, mechanism,
                                            toy_data["train"], DEFAULT_WEIGHTS, DEFAULT_TRAIN)
    return mechanism, trace


# ---------------------------------------------------------------------------
# Region classifier: logits are scaled quadrant means of a single-channel
# image, so every metric value can be enumerated by hand. Images carry one
# bright quadrant (the label) on a per-image tilted background whose slope
# signs are independent of the label; once the bright quadrant is deleted,
# the prediction follows the slope signs and lands on each quadrant with
# probability 1/4.
# ---------------------------------------------------------------------------

REGION_HW = 32
REGION_SCALE = 10.0


class QuadrantMeanModule(nn.Module):
    input_shape = (1, REGION_HW, REGION_HW)

    def forward(self, x):
        half = x.shape[-1] // 2
        quads = [x[:, 0, :half, :half], x[:, 0, :half, half:],
                 x[:, 0, half:, :half], x[:, 0, half:, half:]]
        return REGION_SCALE * torch.stack([q.mean(dim=(1, 2)) for q in quads], dim=1)


def region_classifier() -> models.ClassifierHandle:
    return models.ClassifierHandle("quadrant_mean", QuadrantMeanModule(), class_count=4)


def synthesize_region_dataset(count: int, seed: int) -> LabeledImageSet:
    """Bright-quadrant images over a tilted background (all values uint8)."""
    rng = np.random.default_rng(seed)
    rows = np.arange(REGION_HW, dtype=np.float64) - (REGION_HW - 1) / 2.0
    images = np.zeros((count, 1, REGION_HW, REGION_HW), dtype=np.uint8)
    labels = rng.integers(0, 4, size=count)
    half = REGION_HW // 2
    for i in range(count):
        slope_r = rng.choice([-1.0, 1.0]) * rng.uniform(0.15, 0.25)
        slope_c = rng.choice([-1.0, 1.0]) * rng.uniform(0.15, 0.25)
        field = 77.0 + slope_r * rows[:, None] + slope_c * rows[None, :]
        quad = int(labels[i])
        r0, c0 = (quad // 2) * half, (quad % 2) * half
        field[r0:r0 + half, c0:c0 + half] += 127.0
        images[i, 0] = np.rint(field).astype(np.uint8)
    return LabeledImageSet(images, labels, class_count=4,
                           normalization=Normalization((0.0,), (1.0,)))


class RegionOracleExplainer:
    """Per-class map: 1.0 on the class's quadrant, tiny distinct pseudorandom
    values elsewhere (spreads the deletion order across the background)."""

    explainer_id = "region_oracle"

    def __init__(self, seed: int = 0):
        half = REGION_HW // 2
        rng = np.random.default_rng(seed)
        maps = rng.uniform(1e-4, 1e-2, size=(4, REGION_HW, REGION_HW))
        for quad in range(4):
            r0, c0 = (quad // 2) * half, (quad % 2) * half
            maps[quad, r0:r0 + half, c0:c0 + half] = 1.0
        self.maps = maps.astype(np.float32)

    def explain(self, image):
        return attention.ExplanationMaps(self.maps.copy())

    def explain_batch(self, batch):
        return np.repeat(self.maps[None], batch.shape[0], axis=0)


@pytest.fixture(scope="session")
def region_setup():
    return region_classifier(), synthesize_region_dataset(200, seed=11), RegionOracleExplainer()


@pytest.fixture(scope="session")
def mini_data():
    full = ptame.synthesize_glyph_dataset(240, seed=7)
    train_set, val_set = full.split(200)
    return {"train": train_set, "val": val_set}


@pytest.fixture(scope="session")
def mini_models(mini_data):
    torch.manual_seed(0)
    config = models.ToyTrainConfig(epochs=1, seed=0)
    backbone = models.train_toy_classifier(mini_data["train"], mini_data["val"],
                                           "cnn_small", config)
    aux = models.train_toy_classifier(mini_data["train"], mini_data["val"],
                                      "resnet_aux", config)
    return backbone, aux
