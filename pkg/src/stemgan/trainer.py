"""Adversarial training loop.

Each batch takes ``d_steps_per_g`` critic updates (generator frozen,
prediction detached) followed by one generator update (critic weights
held), so the step ratio is exact everywhere and the epoch remainder can
only miss by one group. Training stops at ``max_epochs`` or once the mean
critic score on fakes settles into ``d_score_target +- d_score_tol``
(moving average over the last ``d_score_window`` steps) while the epoch
prediction MSE is below ``mse_stop``.
"""

import csv
import hashlib
import json
import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .data_io import DatasetManifest
from .errors import CheckpointError, TrainingDiverged
from .losses import LossWeights, discriminator_objective, generator_objective, intensity_loss
from .model import GeneratorConfig, Generator, PatchDiscriminator, windows_to_tensors
from .pipeline import load_clip_frames, make_windows

log = logging.getLogger(__name__)

DEFAULT_LEARNING_RATE = 2e-4

METRICS_LOG_HEADER = ["epoch", "g_loss", "d_loss", "d_score_fake", "train_mse"]


@dataclass
class TrainConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.5
    beta2: float = 0.999
    d_steps_per_g: int = 5
    max_epochs: int = 60
    mse_stop: float = 0.001
    d_score_target: float = 0.5
    d_score_tol: float = 0.05
    d_score_window: int = 100
    batch_size: int = 8
    seed: int = 0
    verify_freeze: bool = True

    def validate(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.beta1 < self.beta2 < 1:
            raise ValueError("betas must satisfy 0 <= beta1 < beta2 < 1")
        if self.d_steps_per_g < 1:
            raise ValueError("d_steps_per_g must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        return self


def weight_hash(module: torch.nn.Module) -> bytes:
    """Digest of all learnable parameters (freezing contract checks)."""
    digest = hashlib.sha256()
    for name, param in sorted(module.named_parameters()):
        digest.update(name.encode())
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.digest()


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) if not isinstance(c, dict) else c for c in configs],
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EpochMetrics:
    epoch: int
    g_loss: float
    d_loss: float
    d_score_fake: float
    train_mse: float


@dataclass
class Checkpoint:
    generator_state: dict
    discriminator_state: dict
    g_optimizer_state: dict
    d_optimizer_state: dict
    epoch: int
    metrics: dict
    config_hash: str
    model_config: dict

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(
            {"model": self.generator_state, "optimizer": self.g_optimizer_state},
            directory / "generator.bin",
        )
        torch.save(
            {"model": self.discriminator_state, "optimizer": self.d_optimizer_state},
            directory / "discriminator.bin",
        )
        lines = [f"epoch = {self.epoch}", f"config_hash = {self.config_hash}"]
        for key in sorted(self.model_config):
            lines.append(f"model.{key} = {self.model_config[key]}")
        for key in sorted(self.metrics):
            lines.append(f"metrics.{key} = {self.metrics[key]:.8g}")
        (directory / "meta.txt").write_text("\n".join(lines) + "\n")
        return directory

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        gen_path = directory / "generator.bin"
        disc_path = directory / "discriminator.bin"
        meta_path = directory / "meta.txt"
        for p in (gen_path, disc_path, meta_path):
            if not p.is_file():
                raise CheckpointError(f"checkpoint file {p} is missing")
        gen_blob = torch.load(gen_path, map_location="cpu", weights_only=True)
        disc_blob = torch.load(disc_path, map_location="cpu", weights_only=True)
        epoch, chash = 0, ""
        metrics, model_config = {}, {}
        for line in meta_path.read_text().splitlines():
            if " = " not in line:
                continue
            key, value = line.split(" = ", 1)
            if key == "epoch":
                epoch = int(value)
            elif key == "config_hash":
                chash = value
            elif key.startswith("metrics."):
                metrics[key[len("metrics."):]] = float(value)
            elif key.startswith("model."):
                model_config[key[len("model."):]] = value
        return cls(
            generator_state=gen_blob["model"],
            discriminator_state=disc_blob["model"],
            g_optimizer_state=gen_blob["optimizer"],
            d_optimizer_state=disc_blob["optimizer"],
            epoch=epoch,
            metrics=metrics,
            config_hash=chash,
            model_config=model_config,
        )


class Trainer:
    def __init__(
        self,
        generator: Generator,
        discriminator: PatchDiscriminator,
        config: TrainConfig,
        weights: Optional[LossWeights] = None,
        device: Optional[torch.device] = None,
    ):
        self.config = config.validate()
        self.weights = (weights or LossWeights()).validate()
        self.device = torch.device(device) if device is not None else torch.device("cpu")
        self.generator = generator.to(self.device)
        self.discriminator = discriminator.to(self.device)
        self.g_optimizer = torch.optim.Adam(
            self.generator.parameters(),
            lr=config.learning_rate,
            betas=(config.beta1, config.beta2),
        )
        self.d_optimizer = torch.optim.Adam(
            self.discriminator.parameters(),
            lr=config.learning_rate,
            betas=(config.beta1, config.beta2),
        )
        self.d_steps_taken = 0
        self.g_steps_taken = 0
        self._fake_score_window = deque(maxlen=config.d_score_window)

    # -- single steps ------------------------------------------------------

    def step_discriminator(self, batch) -> float:
        """One critic update on a batch of FrameWindows; generator untouched."""
        inputs, targets = self._to_tensors(batch)
        with torch.no_grad():
            fake = self.generator(inputs)
        return self._d_step(fake, targets)

    def step_generator(self, batch) -> float:
        """One generator update on a batch of FrameWindows; critic untouched."""
        inputs, targets = self._to_tensors(batch)
        loss, _ = self._g_step(inputs, targets)
        return loss

    def _to_tensors(self, batch):
        if isinstance(batch, tuple) and len(batch) == 2:
            return batch
        return windows_to_tensors(batch, device=self.device)

    def _d_step(self, fake: torch.Tensor, targets: torch.Tensor) -> float:
        g_hash = weight_hash(self.generator) if self.config.verify_freeze else None
        self.discriminator.train()
        grid_real = self.discriminator(targets)
        grid_fake = self.discriminator(fake.detach())
        loss = discriminator_objective(grid_real, grid_fake)
        self.d_optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self._check_finite(self.discriminator, loss, "discriminator")
        self.d_optimizer.step()
        self.d_steps_taken += 1
        self._fake_score_window.append(float(grid_fake.detach().mean()))
        if g_hash is not None and weight_hash(self.generator) != g_hash:
            raise AssertionError("generator weights changed during a discriminator step")
        return float(loss.detach())

    def _g_step(self, inputs: torch.Tensor, targets: torch.Tensor, fake=None):
        d_hash = weight_hash(self.discriminator) if self.config.verify_freeze else None
        self.generator.train()
        if fake is None:
            fake = self.generator(inputs)
        for p in self.discriminator.parameters():
            p.requires_grad_(False)
        try:
            grid_fake = self.discriminator(fake) if self.weights.lambda_adv else None
            loss = generator_objective(fake, targets, grid_fake, self.weights)
            self.g_optimizer.zero_grad(set_to_none=True)
            loss.backward()
            self._check_finite(self.generator, loss, "generator")
            self.g_optimizer.step()
            self.g_steps_taken += 1
        finally:
            for p in self.discriminator.parameters():
                p.requires_grad_(True)
        if d_hash is not None and weight_hash(self.discriminator) != d_hash:
            raise AssertionError("discriminator weights changed during a generator step")
        mse = float(intensity_loss(fake.detach(), targets).detach())
        return float(loss.detach()), mse

    @staticmethod
    def _check_finite(module: torch.nn.Module, loss: torch.Tensor, name: str):
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"{name} loss is non-finite: {float(loss)}")
        for pname, param in module.named_parameters():
            if param.grad is not None and not torch.isfinite(param.grad).all():
                raise TrainingDiverged(f"non-finite gradient in {name} parameter {pname}")

    # -- full loop ---------------------------------------------------------

    def fit(
        self,
        manifest: DatasetManifest,
        out_dir=None,
        window_total: int = 5,
        stride: int = 1,
        frame_size: int = 160,
    ) -> Checkpoint:
        """Train on the manifest's train split; returns the best checkpoint.

        Writes a per-epoch metrics CSV and the best checkpoint (lowest
        train MSE) under ``out_dir`` when given. On divergence the last
        completed epoch's weights are restored and returned.
        """
        cfg = self.config
        train_clips = manifest.split_clips("train")
        if not train_clips:
            raise ValueError("manifest has no train clips")
        torch.manual_seed(cfg.seed)
        clip_frames = [load_clip_frames(c, size=frame_size) for c in train_clips]
        windows = []
        for clip, frames in zip(train_clips, clip_frames):
            windows.extend(
                make_windows(frames, clip_id=clip.clip_id, window_total=window_total, stride=stride)
            )
        if not windows:
            raise ValueError("train split yields no windows")

        out_dir = Path(out_dir) if out_dir is not None else None
        log_rows: List[EpochMetrics] = []
        chash = config_hash(asdict(cfg), asdict(self.generator.cfg), asdict(self.weights))
        best = self._snapshot(epoch=0, metrics={}, chash=chash)
        best_mse = float("inf")
        last_good = best

        rng = np.random.default_rng(cfg.seed)
        stop_reason = "max_epochs"
        for epoch in range(1, cfg.max_epochs + 1):
            order = rng.permutation(len(windows))
            g_losses, d_losses, mses = [], [], []
            try:
                for lo in range(0, len(order), cfg.batch_size):
                    batch = [windows[i] for i in order[lo : lo + cfg.batch_size]]
                    inputs, targets = windows_to_tensors(batch, device=self.device)
                    with torch.no_grad():
                        fake = self.generator(inputs)
                    for _ in range(cfg.d_steps_per_g):
                        d_losses.append(self._d_step(fake, targets))
                    g_loss, mse = self._g_step(inputs, targets)
                    g_losses.append(g_loss)
                    mses.append(mse)
            except TrainingDiverged as exc:
                log.error("training diverged at epoch %d: %s", epoch, exc)
                self._restore(last_good)
                if out_dir is not None:
                    self._write_log(log_rows, out_dir)
                    last_good.save(out_dir / "checkpoint")
                return last_good

            metrics = EpochMetrics(
                epoch=epoch,
                g_loss=float(np.mean(g_losses)),
                d_loss=float(np.mean(d_losses)),
                d_score_fake=float(np.mean(self._fake_score_window)),
                train_mse=float(np.mean(mses)),
            )
            log_rows.append(metrics)
            log.info(
                "epoch %d: g_loss=%.5f d_loss=%.5f d_score_fake=%.4f mse=%.6f",
                metrics.epoch, metrics.g_loss, metrics.d_loss,
                metrics.d_score_fake, metrics.train_mse,
            )
            snap_metrics = {
                "g_loss": metrics.g_loss,
                "d_loss": metrics.d_loss,
                "d_score_fake": metrics.d_score_fake,
                "train_mse": metrics.train_mse,
            }
            last_good = self._snapshot(epoch, snap_metrics, chash)
            if metrics.train_mse < best_mse:
                best_mse = metrics.train_mse
                best = last_good
            if (
                abs(metrics.d_score_fake - cfg.d_score_target) <= cfg.d_score_tol
                and metrics.train_mse < cfg.mse_stop
            ):
                stop_reason = "converged"
                break

        log.info("training finished (%s) after %d epochs", stop_reason, len(log_rows))
        if out_dir is not None:
            self._write_log(log_rows, out_dir)
            best.save(out_dir / "checkpoint")
        return best

    def _snapshot(self, epoch: int, metrics: dict, chash: str) -> Checkpoint:
        def copy_state(state):
            return {
                k: v.detach().cpu().clone() if isinstance(v, torch.Tensor) else v
                for k, v in state.items()
            }

        return Checkpoint(
            generator_state=copy_state(self.generator.state_dict()),
            discriminator_state=copy_state(self.discriminator.state_dict()),
            g_optimizer_state=_copy_optimizer_state(self.g_optimizer.state_dict()),
            d_optimizer_state=_copy_optimizer_state(self.d_optimizer.state_dict()),
            epoch=epoch,
            metrics=metrics,
            config_hash=chash,
            model_config={k: str(v) for k, v in asdict(self.generator.cfg).items()},
        )

    def _restore(self, checkpoint: Checkpoint):
        self.generator.load_state_dict(checkpoint.generator_state)
        self.discriminator.load_state_dict(checkpoint.discriminator_state)
        self.g_optimizer.load_state_dict(checkpoint.g_optimizer_state)
        self.d_optimizer.load_state_dict(checkpoint.d_optimizer_state)

    @staticmethod
    def _write_log(rows: Sequence[EpochMetrics], out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_LOG_HEADER)
            for row in rows:
                writer.writerow(
                    [row.epoch, f"{row.g_loss:.8f}", f"{row.d_loss:.8f}",
                     f"{row.d_score_fake:.8f}", f"{row.train_mse:.8f}"]
                )


def _copy_optimizer_state(state: dict) -> dict:
    def copy_value(value):
        if isinstance(value, torch.Tensor):
            return value.detach().cpu().clone()
        if isinstance(value, dict):
            return {k: copy_value(v) for k, v in value.items()}
        if isinstance(value, list):
            return [copy_value(v) for v in value]
        return value

    return copy_value(state)


def transfer_init(
    base: Checkpoint,
    generator: Generator,
    discriminator: PatchDiscriminator,
    config: TrainConfig,
    weights: Optional[LossWeights] = None,
    device: Optional[torch.device] = None,
) -> Trainer:
    """Warm-start a new run from a previous checkpoint.

    Copies both networks' weights, resets the optimizers, and halves the
    stock learning rate unless the new config explicitly overrides it.
    Raises CheckpointError when the checkpoint's architecture does not
    match the new models.
    """
    for module, state, name in (
        (generator, base.generator_state, "generator"),
        (discriminator, base.discriminator_state, "discriminator"),
    ):
        current = module.state_dict()
        if set(current) != set(state) or any(
            current[k].shape != state[k].shape for k in current
        ):
            raise CheckpointError(f"checkpoint {name} architecture does not match the new model")
        module.load_state_dict(state)
    if config.learning_rate == DEFAULT_LEARNING_RATE:
        config = TrainConfig(**{**asdict(config), "learning_rate": DEFAULT_LEARNING_RATE / 2})
    return Trainer(generator, discriminator, config, weights, device)
