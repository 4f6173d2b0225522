"""Flat typed key=value configuration with strict unknown-key handling."""

from __future__ import annotations

from pathlib import Path

from .diffusion import TrainConfig
from .repaint import GenerationConfig
from .segmentation import SegTrainConfig
from .styling import StyleWeights

# key -> (type, default); bools parse from {true,false,1,0}
SCHEMA: dict[str, tuple[type, object]] = {
    "image_size": (int, 32),
    "schedule_kind": (str, "cosine"),
    "timesteps": (int, 100),
    "beta_min": (float, 1e-4),
    "beta_max": (float, 2e-2),
    "respaced_len": (int, 50),
    "skip": (int, 20),
    "train_batch": (int, 16),
    "train_iters": (int, 3000),
    "train_lr": (float, 2e-4),
    "train_weight_decay": (float, 0.0),
    "net_base": (int, 16),
    "cluster_k": (int, 2),
    "cluster_max_iter": (int, 100),
    "cluster_normalize": (bool, False),
    "extractor_mode": (str, "seeded"),
    "extractor_seed": (int, 7),
    "gen_samples": (int, 3),
    "gen_dilation": (int, -1),  # -1: scale 20px@256 to the working size
    "gen_jump": (int, 5),
    "gen_resamples": (int, 2),
    "variance_mode": (str, "fixed-small"),
    "mask_threshold": (float, 0.5),
    "style_contrastive": (float, 500.0),
    "style_feature_mse": (float, 100.0),
    "style_extra_pixel_mse": (float, 5000.0),
    "style_global_token": (float, 10000.0),
    "style_pixel_mse": (float, 10000.0),
    "style_semantic": (float, 40000.0),
    "style_out_of_range": (float, 200.0),
    "style_fold_extra_mse": (bool, False),
    "style_step_scale": (float, 1.0),
    "style_grad_clip": (float, 10.0),
    "style_temperature": (float, 0.07),
    "style_locations": (int, 16),
    "style_model": (str, "full"),
    "eval_repeats": (int, 3),
    "eval_msssim_pairs": (int, 64),
    "seg_epochs": (int, 30),
    "seg_batch": (int, 16),
    "seg_lr": (float, 3e-3),
    "seg_lr_drop_epoch": (int, 10),
    "seg_lr_drop_factor": (float, 10.0),
    "seg_val_frac": (float, 0.2),
    "seg_augment": (bool, True),
    "seg_base": (int, 16),
    "seg_threshold": (float, 0.5),
    "aug_alpha": (float, 0.5),
    "aug_r": (int, 3),
    "aug_m": (int, 3),
    "aug_mode": (str, "replace"),
    "toy_count": (int, 348),
    "toy_shifted": (bool, False),
}


class ConfigError(ValueError):
    """Bad key, bad value, or unreadable config file."""


class Config:
    """Immutable view over SCHEMA defaults plus file/CLI overrides."""

    def __init__(self, overrides: dict[str, object] | None = None):
        self._values = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in (overrides or {}).items():
            self._set(key, value)

    def _set(self, key: str, value: object) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        typ, _ = SCHEMA[key]
        if typ is bool and isinstance(value, str):
            low = value.strip().lower()
            if low in ("true", "1"):
                value = True
            elif low in ("false", "0"):
                value = False
            else:
                raise ConfigError(f"config key {key!r}: expected true/false, got {value!r}")
        try:
            self._values[key] = typ(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {typ.__name__}") from exc

    def __getattr__(self, key: str):
        try:
            return self._values[key]
        except KeyError:
            raise AttributeError(key)

    def items(self):
        return sorted(self._values.items())

    @classmethod
    def from_file(cls, path: str | Path | None, overrides: dict[str, object] | None = None) -> "Config":
        merged: dict[str, object] = {}
        if path is not None:
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config file {path}: {exc}") from exc
            for lineno, raw in enumerate(text.splitlines(), 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
                key, value = (part.strip() for part in line.split("=", 1))
                merged[key] = value
        merged.update(overrides or {})
        return cls(merged)

    def to_text(self) -> str:
        lines = []
        for key, value in self.items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    # typed views consumed by the pipeline stages

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(
            batch_size=self.train_batch,
            iterations=self.train_iters,
            lr=self.train_lr,
            weight_decay=self.train_weight_decay,
            schedule_kind=self.schedule_kind,
            timesteps=self.timesteps,
            beta_min=self.beta_min,
            beta_max=self.beta_max,
            respaced_len=self.respaced_len,
            skip=self.skip,
            seed=seed,
            base_width=self.net_base,
        )

    def generation_config(self) -> GenerationConfig:
        return GenerationConfig(
            samples=self.gen_samples,
            dilation_radius=None if self.gen_dilation < 0 else self.gen_dilation,
            jump_len=self.gen_jump,
            resamples=self.gen_resamples,
            variance_mode=self.variance_mode,
            mask_threshold=self.mask_threshold,
        )

    def style_weights(self) -> StyleWeights:
        return StyleWeights(
            contrastive=self.style_contrastive,
            feature_mse=self.style_feature_mse,
            extra_pixel_mse=self.style_extra_pixel_mse,
            global_token=self.style_global_token,
            pixel_mse=self.style_pixel_mse,
            semantic_step=self.style_semantic,
            out_of_range=self.style_out_of_range,
            fold_extra_mse=self.style_fold_extra_mse,
            step_scale=self.style_step_scale,
            grad_clip=self.style_grad_clip,
            temperature=self.style_temperature,
            locations=self.style_locations,
        )

    def seg_config(self, seed: int = 0) -> SegTrainConfig:
        return SegTrainConfig(
            epochs=self.seg_epochs,
            batch_size=self.seg_batch,
            lr=self.seg_lr,
            lr_drop_epoch=self.seg_lr_drop_epoch,
            lr_drop_factor=self.seg_lr_drop_factor,
            val_frac=self.seg_val_frac,
            augment=self.seg_augment,
            base_width=self.seg_base,
            seed=seed,
        )
