"""Training loop, datasets on disk and resumable checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import assignloss as al
from . import evalkit
from . import numcore as nc
from . import synthvid as sv
from .config import ConfigError, RunConfig, parse_config
from .tracker import Model, run_video

Clip = tuple[list[np.ndarray], sv.ClipGroundTruth]


def clip_config(cfg: RunConfig) -> sv.ClipConfig:
    return sv.ClipConfig(
        image_size=cfg.image_size,
        patch=cfg.patch,
        num_frames=cfg.clip_length,
        num_instances=cfg.num_instances,
        max_instances=cfg.num_queries,
    )


def clip_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def make_clips(cfg: RunConfig, seed: int | None = None, count: int | None = None) -> list[Clip]:
    """``count`` clips cycling through the configured scenarios; ``random`` means free drifting shapes."""
    seed = cfg.seed if seed is None else seed
    count = cfg.num_clips if count is None else count
    cc = clip_config(cfg)
    names = cfg.scenario_list
    clips = []
    for i in range(count):
        name = names[i % len(names)]
        s = clip_seed(seed, i)
        clips.append(sv.generate_clip(cc, s) if name == "random" else sv.scenario(name, s, cc))
    return clips


def write_dataset(out_dir: str | Path, clips: Sequence[Clip], cfg: RunConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (frames, gt) in enumerate(clips):
        sv.write_clip(out / f"clip_{i:04d}", frames, gt)
    manifest = {"clips": len(clips), "config": cfg.to_text()}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def read_dataset(data_dir: str | Path) -> list[Clip]:
    root = Path(data_dir)
    dirs = sorted(p for p in root.glob("clip_*") if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"{root}: no clip_* directories")
    return [sv.read_clip(d) for d in dirs]


# ------------------------------------------------------------------ trainer


@dataclass
class Trainer:
    model: Model
    optimizer: al.AdamW
    rng: np.random.Generator
    step: int = 0

    @classmethod
    def create(cls, cfg: RunConfig) -> Trainer:
        return cls(Model.create(cfg), al.AdamW.from_config(cfg), np.random.default_rng([cfg.seed, 7]), 0)

    @property
    def cfg(self) -> RunConfig:
        return self.model.cfg

    def train_one(self, clips: Sequence[Clip]) -> al.StepResult:
        frames, gt = clips[int(self.rng.integers(len(clips)))]
        result = al.train_step(self.model, frames, gt, self.optimizer, self.rng)
        self.step += 1
        return result

    def run(self, clips: Sequence[Clip], until: int, on_step: Callable[[int, al.StepResult], None] | None = None):
        while self.step < until:
            result = self.train_one(clips)
            if on_step is not None:
                on_step(self.step, result)

    # checkpoints: parameters, optimiser moments, step, RNG and config text

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = self.model.state_arrays()
        arrays.update(self.optimizer.state_arrays())
        arrays["meta.step"] = np.array([float(self.step)])
        arrays["meta.config"] = _text_array(self.cfg.to_text())
        arrays["meta.rng"] = _text_array(json.dumps(self.rng.bit_generator.state, sort_keys=True))
        return arrays

    def save(self, path: str | Path) -> None:
        nc.save_checkpoint(path, self.state_arrays())

    @classmethod
    def load(cls, path: str | Path) -> Trainer:
        arrays = nc.load_checkpoint(path)
        cfg = checkpoint_config(arrays, str(path))
        trainer = cls.create(cfg)
        params = {k: v for k, v in arrays.items() if not k.startswith(("optim.", "meta."))}
        trainer.model.load_arrays(params)
        trainer.optimizer.load_arrays(arrays, list(trainer.model.named_parameters()))
        trainer.step = int(arrays["meta.step"][0])
        trainer.rng.bit_generator.state = json.loads(_array_text(arrays["meta.rng"]))
        return trainer


def _text_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _array_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")


def checkpoint_config(arrays: dict[str, np.ndarray], source: str = "<checkpoint>") -> RunConfig:
    if "meta.config" not in arrays:
        raise ConfigError(f"{source}: checkpoint carries no configuration")
    return parse_config(_array_text(arrays["meta.config"]), f"{source}[config]")


def load_model(path: str | Path) -> Model:
    return Trainer.load(path).model


# --------------------------------------------------------------- evaluation


def predict_clip(model: Model, frames) -> tuple[list[np.ndarray], list[np.ndarray], np.ndarray]:
    preds, state = run_video(frames, model)
    return [p.masks for p in preds], [p.class_probs for p in preds], state.track_ids


def evaluate(model: Model, clips: Sequence[Clip]) -> tuple[dict, list[evalkit.TrackEvalReport]]:
    reports = []
    for frames, gt in clips:
        masks, probs, _ = predict_clip(model, frames)
        reports.append(evalkit.evaluate_clip(masks, probs, gt))
    return evalkit.summarize(reports), reports
