"""Builders shared by the property tests: 4x4 grids with five sampling steps, plus the desk setup."""

from pathlib import Path

import numpy as np

from latentmark.config import ExperimentConfig, config_from_dict
from latentmark.prior import MixturePrior, make_prior
from latentmark.sampler import SamplerConfig
from latentmark.schedule import build_schedule

SHAPE = (1, 4, 4)
TOTAL_STEPS = 100
STEPS = 5  # grid 81, 61, 41, 21, 1
DETAIL_STEP = 41


def tiny_schedule():
    return build_schedule(TOTAL_STEPS)


def tiny_prior(shape=SHAPE, seed: int = 7) -> MixturePrior:
    return make_prior(shape, components=4, seed=seed)


def tiny_sampler(steps: int = STEPS, guidance: float = 2.0, condition: str | None = "a") -> SamplerConfig:
    return SamplerConfig.from_steps(TOTAL_STEPS, steps, guidance, condition)


def single_component_prior(shape=SHAPE, mean: float = 0.0, variance: float = 1.0) -> MixturePrior:
    return MixturePrior(
        weights=np.array([1.0]),
        means=np.full((1, *shape), mean),
        variances=np.array([variance]),
        labels=("a",),
    )


def tiny_config_dict(output_dir: Path | str = "runs/test") -> dict:
    return {
        "grid": {"channels": 1, "height": 4, "width": 4},
        "schedule": {"total_steps": TOTAL_STEPS},
        "prior": {"components": 4, "labels": ["a", "b", "a", "b"]},
        "sampler": {"inference_steps": STEPS, "detail_step": DETAIL_STEP, "guidance_scale": 2.0, "condition": "a"},
        "codec": {"bits": 4, "feature_dim": 8, "hidden_dim": 16, "corpus_size": 64},
        "optimizer": {"iterations": 3, "log_every": 0},
        "attacks": [
            {"kind": "none"},
            {"kind": "hflip"},
            {"kind": "rotate", "params": {"angle": 40}},
            {"kind": "regenerate", "params": {"strength": 41}, "seed": 3},
        ],
        "images": 2,
        "output_dir": str(output_dir),
        "seed": 0,
    }


def tiny_config(output_dir: Path | str = "runs/test") -> ExperimentConfig:
    return config_from_dict(tiny_config_dict(output_dir))


def desk_config(images: int = 20) -> ExperimentConfig:
    """Default configuration (8x8 grid, N=20, k=16, D=256) with per-iteration logging off."""
    config = ExperimentConfig()
    config.images = images
    config.optimizer.log_every = 0
    return config
