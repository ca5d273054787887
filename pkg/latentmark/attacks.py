"""Attack suite applied to watermarked latent grids before decoding.

Pixel-scale parameters are expressed relative to the grid: a blur radius r
becomes a Gaussian sigma of r / 512 of the grid width, crop and resize act on
fractions of each side.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from scipy import ndimage

from .errors import ParameterError, ShapeError
from .prior import MixturePrior
from .sampler import SamplerConfig, sample
from .schedule import NoiseSchedule, forward_noise

REFERENCE_WIDTH = 512


class AttackKind(Enum):
    """Attack kind enumeration."""
    NONE = "none"
    HFLIP = "hflip"
    ROTATE = "rotate"
    RESIZE = "resize"
    CENTER_CROP = "center_crop"
    GAUSSIAN_BLUR = "gaussian_blur"
    BRIGHTNESS = "brightness"
    CONTRAST = "contrast"
    SATURATION = "saturation"
    QUANTIZE = "quantize"
    RANDOM_ERASE = "random_erase"
    ADDITIVE_NOISE = "additive_noise"
    REGENERATE = "regenerate"


class AttackCategory(Enum):
    """Attack taxonomy used to group report rows."""
    NONE = "none"
    GEOMETRIC = "geometric"
    VALUEMETRIC = "valuemetric"
    EDITING = "editing"
    REGENERATION = "regeneration"


ATTACK_CATEGORIES = {
    AttackKind.NONE: AttackCategory.NONE,
    AttackKind.HFLIP: AttackCategory.GEOMETRIC,
    AttackKind.ROTATE: AttackCategory.GEOMETRIC,
    AttackKind.RESIZE: AttackCategory.GEOMETRIC,
    AttackKind.CENTER_CROP: AttackCategory.GEOMETRIC,
    AttackKind.GAUSSIAN_BLUR: AttackCategory.VALUEMETRIC,
    AttackKind.BRIGHTNESS: AttackCategory.VALUEMETRIC,
    AttackKind.CONTRAST: AttackCategory.VALUEMETRIC,
    AttackKind.SATURATION: AttackCategory.VALUEMETRIC,
    AttackKind.QUANTIZE: AttackCategory.VALUEMETRIC,
    AttackKind.ADDITIVE_NOISE: AttackCategory.VALUEMETRIC,
    AttackKind.RANDOM_ERASE: AttackCategory.EDITING,
    AttackKind.REGENERATE: AttackCategory.REGENERATION,
}

DEFAULT_PARAMS: dict[AttackKind, dict[str, float]] = {
    AttackKind.NONE: {},
    AttackKind.HFLIP: {},
    AttackKind.ROTATE: {"angle": 40.0},
    AttackKind.RESIZE: {"scale": 0.6},
    AttackKind.CENTER_CROP: {"ratio": 0.6},
    AttackKind.GAUSSIAN_BLUR: {"radius": 11.0},
    AttackKind.BRIGHTNESS: {"factor": 0.5},
    AttackKind.CONTRAST: {"factor": 0.5},
    AttackKind.SATURATION: {"factor": 1.5},
    AttackKind.QUANTIZE: {"bits": 6},
    AttackKind.RANDOM_ERASE: {"ratio": 0.1},
    AttackKind.ADDITIVE_NOISE: {"std": 0.1},
    AttackKind.REGENERATE: {"strength": 451},
}


@dataclass(frozen=True)
class AttackSpec:
    """One attack with its parameters.

    Attributes:
        kind: Attack kind
        params: Kind-specific parameters; missing keys take the defaults
        seed: Seed for stochastic kinds
    """
    kind: AttackKind
    params: dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        kind = AttackKind(self.kind)
        object.__setattr__(self, "kind", kind)
        unknown = set(self.params) - set(DEFAULT_PARAMS[kind])
        if unknown:
            raise ParameterError(f"unknown parameter(s) for {kind.value}: {sorted(unknown)}")
        merged = {**DEFAULT_PARAMS[kind], **self.params}
        object.__setattr__(self, "params", merged)
        _validate(kind, merged)

    @property
    def category(self) -> AttackCategory:
        return ATTACK_CATEGORIES[self.kind]

    @property
    def name(self) -> str:
        """Report name, e.g. ``rotate(angle=40)``."""
        if not self.params:
            return self.kind.value
        args = ",".join(f"{k}={_format_value(v)}" for k, v in sorted(self.params.items()))
        return f"{self.kind.value}({args})"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind.value, "params": dict(self.params), "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AttackSpec":
        """Parses ``{kind, params, seed}``.

        Raises:
            ParameterError: If the kind or a parameter is invalid
        """
        try:
            kind = AttackKind(data["kind"])
        except (KeyError, ValueError):
            raise ParameterError(f"unknown attack kind: {data.get('kind')!r}") from None
        return cls(kind=kind, params=dict(data.get("params") or {}), seed=int(data.get("seed", 0)))


def _format_value(value: Any) -> str:
    if isinstance(value, float) and value.is_integer():
        return str(int(value))
    return str(value)


def _validate(kind: AttackKind, params: dict[str, Any]) -> None:
    def require(condition: bool, message: str) -> None:
        if not condition:
            raise ParameterError(f"{kind.value}: {message}")

    if kind is AttackKind.RESIZE:
        require(0.0 < params["scale"] <= 1.0, f"scale must be in (0, 1], got {params['scale']}")
    elif kind is AttackKind.CENTER_CROP:
        require(0.0 < params["ratio"] <= 1.0, f"ratio must be in (0, 1], got {params['ratio']}")
    elif kind is AttackKind.GAUSSIAN_BLUR:
        require(params["radius"] >= 0, f"radius must be >= 0, got {params['radius']}")
    elif kind in (AttackKind.BRIGHTNESS, AttackKind.CONTRAST, AttackKind.SATURATION):
        require(params["factor"] >= 0, f"factor must be >= 0, got {params['factor']}")
    elif kind is AttackKind.QUANTIZE:
        require(1 <= int(params["bits"]) <= 16, f"bits must be in [1, 16], got {params['bits']}")
    elif kind is AttackKind.RANDOM_ERASE:
        require(0.0 < params["ratio"] < 1.0, f"ratio must be in (0, 1), got {params['ratio']}")
    elif kind is AttackKind.ADDITIVE_NOISE:
        require(params["std"] >= 0, f"std must be >= 0, got {params['std']}")
    elif kind is AttackKind.REGENERATE:
        require(int(params["strength"]) >= 0, f"strength must be >= 0, got {params['strength']}")


@dataclass(frozen=True)
class RegenerationContext:
    """What the regeneration attack needs to re-run the sampler."""
    prior: MixturePrior
    schedule: NoiseSchedule
    config: SamplerConfig


def is_applicable(spec: AttackSpec, shape: tuple[int, ...]) -> bool:
    """Saturation needs three channels; everything else applies to any grid."""
    return spec.kind is not AttackKind.SATURATION or shape[0] == 3


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def rotate(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotates the spatial axes; out-of-frame cells are filled with zero."""
    if angle % 90 == 0:
        return np.rot90(image, k=int(angle // 90) % 4, axes=(1, 2)).copy()
    return ndimage.rotate(image, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)


def resize(image: np.ndarray, scale: float) -> np.ndarray:
    """Downscales by `scale` and interpolates back to the original size."""
    if scale == 1.0:
        return image.copy()
    _, height, width = image.shape
    small_h, small_w = max(1, round(height * scale)), max(1, round(width * scale))
    small = ndimage.zoom(image, (1, small_h / height, small_w / width), order=1, mode="nearest")
    restored = ndimage.zoom(small, (1, height / small.shape[1], width / small.shape[2]), order=1, mode="nearest")
    return restored[:, :height, :width]


def center_crop(image: np.ndarray, ratio: float) -> np.ndarray:
    """Keeps the central `ratio` of each side and zero-pads the rest."""
    if ratio == 1.0:
        return image.copy()
    _, height, width = image.shape
    keep_h, keep_w = max(1, round(height * ratio)), max(1, round(width * ratio))
    top, left = (height - keep_h) // 2, (width - keep_w) // 2
    out = np.zeros_like(image)
    out[:, top:top + keep_h, left:left + keep_w] = image[:, top:top + keep_h, left:left + keep_w]
    return out


def gaussian_blur(image: np.ndarray, radius: float) -> np.ndarray:
    if radius == 0:
        return image.copy()
    sigma = radius / REFERENCE_WIDTH * image.shape[-1]
    return ndimage.gaussian_filter(image, sigma=(0, sigma, sigma), mode="nearest")


def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    if factor == 1.0:
        return image.copy()
    mean = image.mean()
    return mean + factor * (image - mean)


def adjust_saturation(image: np.ndarray, factor: float) -> np.ndarray:
    """Scales each pixel's distance from its channel mean (three-channel grids only)."""
    if image.shape[0] != 3:
        raise ShapeError(f"saturation needs 3 channels, got {image.shape[0]}")
    gray = image.mean(axis=0, keepdims=True)
    return gray + factor * (image - gray)


def quantize(image: np.ndarray, bits: int) -> np.ndarray:
    """Uniform quantization to 2**bits levels over the grid's dynamic range."""
    low, high = float(image.min()), float(image.max())
    if high == low:
        return image.copy()
    levels = 2 ** int(bits) - 1
    unit = (image - low) / (high - low)
    return np.round(unit * levels) / levels * (high - low) + low


def random_erase(image: np.ndarray, ratio: float, seed: int) -> np.ndarray:
    """Zeroes a seeded square covering about `ratio` of the spatial area."""
    _, height, width = image.shape
    side = max(1, round(np.sqrt(ratio * height * width)))
    side_h, side_w = min(side, height), min(side, width)
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, height - side_h + 1))
    left = int(rng.integers(0, width - side_w + 1))
    out = image.copy()
    out[:, top:top + side_h, left:left + side_w] = 0.0
    return out


def regenerate(
    image: np.ndarray,
    strength: int,
    prior: MixturePrior,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    seed: int = 0,
) -> np.ndarray:
    """Noises the grid to timestep `strength` and re-samples it unconditionally.

    The re-sampling grid is `strength` followed by every sampler timestep below it.

    Raises:
        ParameterError: If strength is negative or above the first sampler timestep
    """
    strength = int(strength)
    if not 0 <= strength <= config.timesteps[0]:
        raise ParameterError(f"regeneration strength must be in [0, {config.timesteps[0]}], got {strength}")
    if strength == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    noised = forward_noise(image, strength, rng.standard_normal(image.shape), schedule)
    steps = (strength, *(t for t in config.timesteps if t < strength))
    output, _ = sample(noised, SamplerConfig(steps), prior, schedule)
    return output


def apply_attack(
    image: np.ndarray,
    spec: AttackSpec,
    regeneration: RegenerationContext | None = None,
) -> np.ndarray:
    """Applies one attack; the output always has the input's shape.

    Raises:
        ParameterError: If regeneration is requested without a context
        ShapeError: If saturation is applied to a grid without three channels
    """
    if image.ndim != 3:
        raise ShapeError(f"attacks act on (C, H, W) grids, got shape {image.shape}")
    p = spec.params
    match spec.kind:
        case AttackKind.NONE:
            return image.copy()
        case AttackKind.HFLIP:
            return hflip(image)
        case AttackKind.ROTATE:
            return rotate(image, float(p["angle"]))
        case AttackKind.RESIZE:
            return resize(image, float(p["scale"]))
        case AttackKind.CENTER_CROP:
            return center_crop(image, float(p["ratio"]))
        case AttackKind.GAUSSIAN_BLUR:
            return gaussian_blur(image, float(p["radius"]))
        case AttackKind.BRIGHTNESS:
            return image * float(p["factor"])
        case AttackKind.CONTRAST:
            return adjust_contrast(image, float(p["factor"]))
        case AttackKind.SATURATION:
            return adjust_saturation(image, float(p["factor"]))
        case AttackKind.QUANTIZE:
            return quantize(image, int(p["bits"]))
        case AttackKind.RANDOM_ERASE:
            return random_erase(image, float(p["ratio"]), spec.seed)
        case AttackKind.ADDITIVE_NOISE:
            rng = np.random.default_rng(spec.seed)
            return image + float(p["std"]) * rng.standard_normal(image.shape)
        case AttackKind.REGENERATE:
            if regeneration is None:
                raise ParameterError("regeneration attack needs a prior, schedule and sampler config")
            return regenerate(
                image, int(p["strength"]), regeneration.prior, regeneration.schedule,
                regeneration.config, spec.seed,
            )
    raise ParameterError(f"unsupported attack kind: {spec.kind}")


def default_attacks() -> list[AttackSpec]:
    """The standard evaluation suite."""
    return [
        AttackSpec(AttackKind.NONE),
        AttackSpec(AttackKind.HFLIP),
        AttackSpec(AttackKind.ROTATE),
        AttackSpec(AttackKind.RESIZE),
        AttackSpec(AttackKind.CENTER_CROP),
        AttackSpec(AttackKind.GAUSSIAN_BLUR),
        AttackSpec(AttackKind.BRIGHTNESS),
        AttackSpec(AttackKind.CONTRAST),
        AttackSpec(AttackKind.SATURATION),
        AttackSpec(AttackKind.QUANTIZE),
        AttackSpec(AttackKind.RANDOM_ERASE, seed=1),
        AttackSpec(AttackKind.ADDITIVE_NOISE, seed=2),
        AttackSpec(AttackKind.REGENERATE, seed=3),
    ]
