"""Fixed differentiable feature extractor used as the message decoder backbone."""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class FeatureExtractor:
    """Two affine layers with tanh between them: W2 tanh(W1 x + b1) + b2.

    Attributes:
        input_shape: Latent grid shape the extractor accepts
        w1: First layer weights, shape (hidden, n)
        b1: First layer bias, shape (hidden,)
        w2: Second layer weights, shape (D, hidden)
        b2: Second layer bias, shape (D,)
        seed: Construction seed
    """
    input_shape: tuple[int, ...]
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    seed: int

    @property
    def feature_dim(self) -> int:
        return int(self.w2.shape[0])

    @property
    def hidden_dim(self) -> int:
        return int(self.w1.shape[0])


def build_extractor(
    input_shape: Sequence[int],
    hidden_dim: int = 256,
    feature_dim: int = 256,
    seed: int = 11,
) -> FeatureExtractor:
    """Draws a fixed extractor; weights and biases are N(0, 1) / sqrt(fan_in).

    Raises:
        ParameterError: If a layer width is < 1
    """
    if feature_dim < 1 or hidden_dim < 1:
        raise ParameterError(f"layer widths must be >= 1, got hidden={hidden_dim}, D={feature_dim}")
    input_shape = tuple(int(s) for s in input_shape)
    n = int(np.prod(input_shape))
    rng = np.random.default_rng(seed)
    return FeatureExtractor(
        input_shape=input_shape,
        w1=rng.standard_normal((hidden_dim, n)) / np.sqrt(n),
        b1=rng.standard_normal(hidden_dim) / np.sqrt(n),
        w2=rng.standard_normal((feature_dim, hidden_dim)) / np.sqrt(hidden_dim),
        b2=rng.standard_normal(feature_dim) / np.sqrt(hidden_dim),
        seed=seed,
    )


def _check_input(image: np.ndarray, extractor: FeatureExtractor) -> None:
    if tuple(image.shape) != extractor.input_shape:
        raise ShapeError(f"image shape {image.shape} does not match extractor input {extractor.input_shape}")


def extract(image: np.ndarray, extractor: FeatureExtractor) -> np.ndarray:
    """Returns the D-dimensional feature vector of one latent grid.

    Raises:
        ShapeError: If the image shape differs from the extractor's input shape
    """
    _check_input(image, extractor)
    hidden = np.tanh(extractor.w1 @ image.reshape(-1) + extractor.b1)
    return extractor.w2 @ hidden + extractor.b2


def extract_batch(images: np.ndarray, extractor: FeatureExtractor) -> np.ndarray:
    """Features for a stack of grids, shape (M, C, H, W) -> (M, D)."""
    if tuple(images.shape[1:]) != extractor.input_shape:
        raise ShapeError(f"batch item shape {images.shape[1:]} does not match {extractor.input_shape}")
    flat = images.reshape(len(images), -1)
    hidden = np.tanh(flat @ extractor.w1.T + extractor.b1)
    return hidden @ extractor.w2.T + extractor.b2


def extract_vjp(image: np.ndarray, extractor: FeatureExtractor, cotangent: np.ndarray) -> np.ndarray:
    """Returns cotangent^T d extract / d image, shaped like the image."""
    _check_input(image, extractor)
    hidden = np.tanh(extractor.w1 @ image.reshape(-1) + extractor.b1)
    grad_hidden = (extractor.w2.T @ cotangent) * (1.0 - hidden ** 2)
    return (extractor.w1.T @ grad_hidden).reshape(image.shape)
