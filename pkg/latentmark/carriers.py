"""Whitened carrier vectors, sign decoding and the hinge message loss.

Carriers live in whitened feature space: an image's embedding E_w is the
whitened extractor output W (f - mean), and bit i is sign(E_w . a_i).
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import DegenerateInputError, ParameterError, ShapeError
from .extractor import FeatureExtractor, extract, extract_batch, extract_vjp

RIDGE_FRACTION = 1e-4
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class Message:
    """A k-bit message with values in {-1, +1}."""
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or bits.size == 0:
            raise ShapeError(f"a message is a non-empty 1-D array, got shape {bits.shape}")
        if not np.all(np.isin(bits, (-1, 1))):
            raise ParameterError("message bits must be exactly -1 or +1")
        object.__setattr__(self, "bits", bits.astype(np.int8))

    @property
    def k(self) -> int:
        return int(self.bits.size)

    def to_list(self) -> list[int]:
        return [int(b) for b in self.bits]

    def to_string(self) -> str:
        """Compact form, '1' for +1 and '0' for -1."""
        return "".join("1" if b > 0 else "0" for b in self.bits)

    @classmethod
    def from_string(cls, text: str) -> "Message":
        if not text or set(text) - {"0", "1"}:
            raise ParameterError(f"message string must be a non-empty run of 0/1, got {text!r}")
        return message_from_bits([int(c) for c in text])


def random_message(k: int, seed: int) -> Message:
    """Draws k i.i.d. uniform bits."""
    if k < 1:
        raise ParameterError(f"message length must be >= 1, got {k}")
    rng = np.random.default_rng(seed)
    return Message(rng.choice(np.array([-1, 1]), size=k))


@dataclass(frozen=True)
class CarrierSet:
    """Carriers plus the whitening transform fitted on an unwatermarked corpus.

    Attributes:
        mean: Corpus feature mean, shape (D,)
        whitening: Symmetric whitening matrix Sigma^{-1/2}, shape (D, D)
        carriers: Orthonormal rows a_1..a_k in whitened space, shape (k, D)
        seed: Seed of the Gaussian matrix the carriers came from
    """
    mean: np.ndarray
    whitening: np.ndarray
    carriers: np.ndarray
    seed: int

    def __post_init__(self):
        d = self.mean.shape[0]
        if self.whitening.shape != (d, d) or self.carriers.ndim != 2 or self.carriers.shape[1] != d:
            raise ShapeError(
                f"inconsistent carrier set: mean {self.mean.shape}, whitening {self.whitening.shape}, "
                f"carriers {self.carriers.shape}"
            )

    @property
    def k(self) -> int:
        return int(self.carriers.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.carriers.shape[1])

    def whiten(self, features: np.ndarray) -> np.ndarray:
        """Maps raw features (D,) or (M, D) into whitened space."""
        if features.shape[-1] != self.feature_dim:
            raise ShapeError(f"feature dimension {features.shape[-1]} != carrier dimension {self.feature_dim}")
        return (features - self.mean) @ self.whitening.T

    def project(self, embedding: np.ndarray) -> np.ndarray:
        """Carrier projections E_w . a_i, shape (..., k)."""
        if embedding.shape[-1] != self.feature_dim:
            raise ShapeError(f"embedding dimension {embedding.shape[-1]} != carrier dimension {self.feature_dim}")
        return embedding @ self.carriers.T


def whiten_carriers(corpus_embeddings: np.ndarray, k: int, seed: int) -> CarrierSet:
    """Fits the whitening transform on a corpus and draws k orthonormal carriers.

    The ridge added to the covariance is 1e-4 * trace(cov) / D.

    Args:
        corpus_embeddings: Raw features of unwatermarked samples, shape (M, D)
        k: Number of carriers (message bits)
        seed: Seed of the Gaussian matrix that is orthonormalized

    Returns:
        CarrierSet: Fitted whitening and carriers

    Raises:
        ParameterError: If k is outside [1, D] or the corpus has fewer than two rows
        DegenerateInputError: If the ridged covariance is still ill-conditioned
    """
    if corpus_embeddings.ndim != 2:
        raise ShapeError(f"corpus must be (M, D), got shape {corpus_embeddings.shape}")
    m, d = corpus_embeddings.shape
    if not 1 <= k <= d:
        raise ParameterError(f"need 1 <= k <= D, got k={k}, D={d}")
    if m < 2:
        raise ParameterError(f"whitening needs at least two corpus samples, got {m}")

    mean = corpus_embeddings.mean(axis=0)
    centered = corpus_embeddings - mean
    cov = centered.T @ centered / m
    trace = float(np.trace(cov))
    if trace <= 0:
        raise DegenerateInputError("corpus embeddings have zero variance")
    cov += RIDGE_FRACTION * trace / d * np.eye(d)

    eigvals, eigvecs = linalg.eigh(cov)
    if eigvals[0] <= 0 or eigvals[-1] / eigvals[0] > MAX_CONDITION:
        raise DegenerateInputError(
            f"corpus covariance is singular beyond the ridge (eigenvalues {eigvals[0]:.3e}..{eigvals[-1]:.3e})"
        )
    whitening = (eigvecs / np.sqrt(eigvals)) @ eigvecs.T

    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    # Fix QR's sign ambiguity so the carriers depend on the seed only
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return CarrierSet(mean=mean, whitening=whitening, carriers=np.ascontiguousarray(q.T), seed=seed)


def calibrate_carriers(
    corpus: np.ndarray,
    extractor: FeatureExtractor,
    k: int,
    seed: int,
) -> CarrierSet:
    """Builds carriers from a stack of unwatermarked latent grids."""
    return whiten_carriers(extract_batch(corpus, extractor), k, seed)


def embed_image(image: np.ndarray, extractor: FeatureExtractor, carriers: CarrierSet) -> np.ndarray:
    """Whitened embedding E_w of one grid."""
    return carriers.whiten(extract(image, extractor))


def embed_image_vjp(
    image: np.ndarray,
    extractor: FeatureExtractor,
    carriers: CarrierSet,
    cotangent: np.ndarray,
) -> np.ndarray:
    """Pulls dL/dE_w back to dL/d(image)."""
    return extract_vjp(image, extractor, carriers.whitening.T @ cotangent)


def _check_message(carriers: CarrierSet, message: Message) -> None:
    if message.k != carriers.k:
        raise ShapeError(f"message has {message.k} bits but there are {carriers.k} carriers")


def decode(embedding: np.ndarray, carriers: CarrierSet) -> Message:
    """bit_i = sign(E_w . a_i), with sign(0) = +1."""
    return Message(decode_batch(embedding, carriers))


def decode_batch(embeddings: np.ndarray, carriers: CarrierSet) -> np.ndarray:
    """Decoded bits for one embedding or a stack of them, shape (k,) or (M, k)."""
    return np.where(carriers.project(embeddings) >= 0, 1, -1).astype(np.int8)


def msg_loss(embedding: np.ndarray, carriers: CarrierSet, message: Message, margin: float = 1.0) -> float:
    """Hinge loss (1/k) * sum_i max(0, margin - (E_w . a_i) m_i).

    Raises:
        ParameterError: If margin < 0
    """
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    signed = projection_margins(embedding, carriers, message)
    return float(np.mean(np.maximum(0.0, margin - signed)))


def msg_loss_grad(
    embedding: np.ndarray,
    carriers: CarrierSet,
    message: Message,
    margin: float = 1.0,
) -> np.ndarray:
    """Gradient of msg_loss w.r.t. E_w: -(1/k) * sum over active bits of m_i a_i."""
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    signed = projection_margins(embedding, carriers, message)
    active = (margin - signed > 0).astype(np.float64)
    return -((active * message.bits) @ carriers.carriers) / carriers.k


def projection_margins(embedding: np.ndarray, carriers: CarrierSet, message: Message) -> np.ndarray:
    """Signed projections (E_w . a_i) m_i."""
    _check_message(carriers, message)
    return carriers.project(embedding) * message.bits


def message_from_bits(bits: Sequence[int]) -> Message:
    """Builds a Message from a list of +-1 values or 0/1 bits."""
    values = np.asarray(list(bits))
    if np.all(np.isin(values, (0, 1))) and np.any(values == 0):
        values = np.where(values == 1, 1, -1)
    return Message(values)
