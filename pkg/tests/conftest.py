"""Shared fixtures: tiny hand-built networks and the committed CNN bundle."""

import os

import numpy as np
import pytest

from phasesnn.model import AnnModel, Layer

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


def make_linear(weights, bias=None):
    return Layer(kind="Linear", weights=np.asarray(weights, dtype=np.float64),
                 bias=None if bias is None else np.asarray(bias, dtype=np.float64))


def make_conv(weights, bias=None, stride=1, padding=0):
    return Layer(kind="Conv2d", weights=np.asarray(weights, dtype=np.float64),
                 bias=None if bias is None else np.asarray(bias, dtype=np.float64),
                 stride=stride, padding=padding)


def make_bn(gamma, beta, mean, var):
    return Layer(kind="BatchNorm",
                 gamma=np.asarray(gamma, dtype=np.float64),
                 beta=np.asarray(beta, dtype=np.float64),
                 running_mean=np.asarray(mean, dtype=np.float64),
                 running_var=np.asarray(var, dtype=np.float64))


def random_cnn(rng, in_shape=(2, 8, 8), classes=4, with_bn=True, with_pool=True):
    """Small conv net with positive-leaning weights for calibration tests."""
    c, _, _ = in_shape
    layers = [make_conv(rng.normal(0, 0.5, (6, c, 3, 3)), rng.normal(0, 0.1, 6), padding=1)]
    if with_bn:
        layers.append(make_bn(rng.uniform(0.5, 1.5, 6), rng.normal(0, 0.2, 6),
                              rng.normal(0, 0.2, 6), rng.uniform(0.5, 2.0, 6)))
    layers.append(Layer(kind="ReLU"))
    if with_pool:
        layers.append(Layer(kind="MaxPool", kernel=2, stride=2))
    layers += [
        make_conv(rng.normal(0, 0.4, (4, 6, 3, 3)), rng.normal(0, 0.1, 4), padding=1),
        Layer(kind="ReLU"),
        Layer(kind="Flatten"),
    ]
    spatial = (in_shape[1] // (2 if with_pool else 1)) ** 2
    layers += [
        make_linear(rng.normal(0, 0.3, (8, 4 * spatial)), rng.normal(0, 0.1, 8)),
        Layer(kind="ReLU"),
        make_linear(rng.normal(0, 0.4, (classes, 8)), rng.normal(0, 0.1, classes)),
    ]
    return AnnModel(name="rand-cnn", input_shape=in_shape, num_classes=classes,
                    layers=layers)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def bundle_dir():
    path = os.path.join(DATA_DIR, "smallcnn")
    if not os.path.isdir(path):
        pytest.skip("committed smallcnn bundle not present")
    return path


@pytest.fixture(scope="session")
def mlp_bundle_dir():
    path = os.path.join(DATA_DIR, "mlp")
    if not os.path.isdir(path):
        pytest.skip("committed mlp bundle not present")
    return path
