"""Training objectives, the deterministic DDIM sampler, the joint
optimization loop, and checkpoint persistence.

The diffusion objective draws one timestep per sample, noises the batch
through the closed-form marginal, and regresses the velocity target under
the truncated-SNR weight; gradients flow into both the U-Net and the
encoder that produced the conditioning. The VAE baseline trains on the
ELBO (reconstruction + weighted KL). Both use AdamW with a one-cycle
learning-rate policy.

Checkpoints are directories: manifest.json (architecture, schedule,
normalization stats, tensor shape index, format version) plus weights.f32
holding every tensor as raw little-endian float32 at the declared offset.
"""

from __future__ import annotations

import json
import math
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import Dataset
from .nets import (
    ARCHS,
    Encoder,
    LatentField,
    ModelSpec,
    UNet,
    VAE,
    build_encoder,
    build_unet,
    build_vae,
)
from .schedule import DenoiserPrediction, NoiseSchedule, convert_prediction, make_schedule

CHECKPOINT_FORMAT_VERSION = "diffcoder-ckpt-v1"
TRAIN_LOG_NAME = "train_log.csv"

DIVERGENCE_MEDIAN_FACTOR = 1e3
DIVERGENCE_WINDOW = 101


class EngineError(ValueError):
    """Invalid training/sampling configuration or inputs."""


class DivergenceError(EngineError):
    """Training loss became non-finite or exploded."""


class CheckpointError(EngineError):
    """Unreadable or inconsistent checkpoint."""


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; the defaults are the reported setup.

    The training log-SNR range ends at lambda_max = 5 rather than the
    schedule-table default of 15: with the truncated-SNR weight
    max(SNR, 1), weights would otherwise reach e^15 ~ 3e6 on timesteps
    whose velocity target is mostly unpredictable noise, drowning the
    objective. SNR caps at e^5 ~ 148 instead. Configurable.
    """

    epochs: int = 10
    batch_size: int = 16
    max_lr: float = 5e-4
    lr_policy: str = "one_cycle"
    T: int = 1000
    schedule_kind: str = "sigmoid"
    lambda_min: float = -15.0
    lambda_max: float = 5.0
    ddim_steps: int = 20
    seed: int = 0
    kl_weight: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1:
            raise EngineError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise EngineError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_lr <= 0:
            raise EngineError(f"max_lr must be positive, got {self.max_lr}")
        if self.lr_policy != "one_cycle":
            raise EngineError(f"unknown lr policy {self.lr_policy!r}")
        if not 1 <= self.ddim_steps <= self.T:
            raise EngineError(f"ddim_steps must lie in [1, T={self.T}], got {self.ddim_steps}")

    def make_schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule_kind, self.T, self.lambda_min, self.lambda_max)

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "max_lr": self.max_lr,
            "lr_policy": self.lr_policy,
            "T": self.T,
            "schedule_kind": self.schedule_kind,
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "ddim_steps": self.ddim_steps,
            "seed": self.seed,
            "kl_weight": self.kl_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainedModel:
    arch: str
    spec: ModelSpec
    config: TrainConfig
    schedule: NoiseSchedule
    norm_stats: tuple[float, float] | None
    encoder: Encoder | None = None
    unet: UNet | None = None
    vae: VAE | None = None
    provenance: dict = field(default_factory=dict)

    def modules(self) -> dict[str, torch.nn.Module]:
        if self.arch == "vae":
            return {"vae": self.vae}
        return {"encoder": self.encoder, "unet": self.unet}

    def eval(self) -> "TrainedModel":
        for m in self.modules().values():
            m.eval()
        return self

    def train(self) -> "TrainedModel":
        for m in self.modules().values():
            m.train()
        return self


def _gather_coeffs(sched: NoiseSchedule, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    table = torch.tensor(sched.alpha_bar, dtype=like.dtype, device=like.device)
    if torch.any(t < 1) or torch.any(t > sched.T):
        raise EngineError(f"timesteps out of range [1, {sched.T}]")
    return table[t].view(-1, 1, 1, 1)


def one_cycle_lr(step: int, total_steps: int, max_lr: float,
                 div_factor: float = 25.0, final_div_factor: float = 1e4) -> float:
    """Learning rate at a 0-based step: cosine warmup from max_lr/div_factor
    to exactly max_lr at the peak step (~30% in), then cosine annealing to
    max_lr/final_div_factor. max_lr is attained exactly once."""
    if total_steps <= 1:
        return max_lr
    peak = min(max(round(0.3 * total_steps), 1), total_steps - 1)
    init_lr = max_lr / div_factor
    if step <= peak:
        pct = step / peak
        return init_lr + (max_lr - init_lr) * 0.5 * (1.0 - math.cos(math.pi * pct))
    final_lr = max_lr / final_div_factor
    pct = (step - peak) / (total_steps - 1 - peak)
    return final_lr + (max_lr - final_lr) * 0.5 * (1.0 + math.cos(math.pi * pct))


def diffusion_loss_terms(
    x0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    encoder: Encoder,
    unet: UNet,
    sched: NoiseSchedule,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Velocity regression terms for fixed noise draws.

    Returns (loss, v_mse): the batch mean of
    max(SNR, 1) * mean_pixels((v_hat - v_target)^2), and the unweighted
    v mean squared error. The weighted loss varies over orders of
    magnitude with the drawn timesteps; the unweighted term is the stable
    health signal.
    """
    ab = _gather_coeffs(sched, t, x0)
    sqrt_ab = ab.sqrt()
    sqrt_1mab = (1.0 - ab).sqrt()
    x_t = sqrt_ab * x0 + sqrt_1mab * eps
    v_t = sqrt_ab * eps - sqrt_1mab * x0
    z = encoder(x0)
    v_hat = unet(x_t, t, z)
    weight = torch.clamp(ab / (1.0 - ab), min=1.0).view(-1)
    per_sample = (v_hat - v_t).pow(2).mean(dim=(1, 2, 3))
    return (weight * per_sample).mean(), per_sample.mean()


def diffusion_loss(
    x0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    encoder: Encoder,
    unet: UNet,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Weighted velocity regression for fixed noise draws: the batch mean
    of max(SNR, 1) * mean_pixels((v_hat - v_target)^2)."""
    return diffusion_loss_terms(x0, t, eps, encoder, unet, sched)[0]


def diffusion_training_step(
    batch: torch.Tensor,
    encoder: Encoder,
    unet: UNet,
    sched: NoiseSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Draw per-sample timesteps and noise, return the loss (with graph)."""
    B = batch.shape[0]
    t = torch.randint(1, sched.T + 1, (B,), generator=generator, device=batch.device)
    eps = torch.randn(batch.shape, generator=generator, dtype=batch.dtype, device=batch.device)
    loss = diffusion_loss(batch, t, eps, encoder, unet, sched)
    if not torch.isfinite(loss):
        raise DivergenceError(f"diffusion loss is non-finite: {loss.item()}")
    return loss


def vae_loss(
    x0: torch.Tensor,
    xi: torch.Tensor,
    vae: VAE,
    kl_weight: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """ELBO terms for a fixed latent noise draw xi.

    recon is the mean squared reconstruction error; kl is the batch mean
    of 0.5 * sum(mu^2 + exp(logvar) - logvar - 1) over latent entries.
    """
    mu, logvar = vae.encode(x0)
    z = mu + torch.exp(0.5 * logvar) * xi
    x_hat = vae.decode(z)
    recon = (x_hat - x0).pow(2).mean()
    kl = 0.5 * (mu.pow(2) + logvar.exp() - logvar - 1.0).sum(dim=(1, 2, 3)).mean()
    return recon + kl_weight * kl, recon, kl


def vae_training_step(
    batch: torch.Tensor,
    vae: VAE,
    kl_weight: float,
    generator: torch.Generator | None = None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    mu_shape = (batch.shape[0], vae.spec.latent_channels,
                batch.shape[2] // 2 ** vae.spec.depth, batch.shape[3] // 2 ** vae.spec.depth)
    xi = torch.randn(mu_shape, generator=generator, dtype=batch.dtype, device=batch.device)
    loss, recon, kl = vae_loss(batch, xi, vae, kl_weight)
    if not torch.isfinite(loss):
        raise DivergenceError(f"VAE loss is non-finite: {loss.item()}")
    return loss, recon, kl


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Uniformly strided subsequence of {T, ..., 1}, starting at T."""
    if not 1 <= steps <= T:
        raise EngineError(f"steps must lie in [1, T={T}], got {steps}")
    ts = np.rint(np.linspace(T, 1, steps)).astype(int)
    return list(dict.fromkeys(ts.tolist()))


def ddim_sample(
    z: LatentField,
    unet,
    sched: NoiseSchedule,
    steps: int,
    generator: torch.Generator | None = None,
    x_T: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic reverse-process reconstruction conditioned on z.

    Starting from Gaussian noise, each visited timestep predicts v,
    converts it to (x0_hat, eps_hat), and moves to the next visited
    timestep via x_prev = sqrt(ab_prev) x0_hat + sqrt(1-ab_prev) eps_hat;
    the final update takes ab_prev = 1, an exact x0 extraction.
    """
    ts = ddim_timesteps(sched.T, steps)
    B = z.values.shape[0]
    H, W = z.source_grid
    if x_T is None:
        dtype = z.values.dtype if torch.is_floating_point(z.values) else torch.float32
        x = torch.randn((B, 1, H, W), generator=generator, dtype=dtype,
                        device=z.values.device)
    else:
        x = x_T
    with torch.no_grad():
        for i, t in enumerate(ts):
            v = _call_denoiser(unet, x, t, z)
            x0_hat, eps_hat = convert_prediction(DenoiserPrediction(v, "v"), x, t, sched)
            ab_prev = float(sched.alpha_bar[ts[i + 1]]) if i + 1 < len(ts) else 1.0
            x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat
    return x


def _call_denoiser(unet, x_t, t: int, z: LatentField) -> torch.Tensor:
    if isinstance(unet, torch.nn.Module):
        return unet(x_t, t, z.values)
    out = unet(x_t, t, z)
    return out.values if isinstance(out, DenoiserPrediction) else out


def reconstruct(
    model: TrainedModel,
    fields: np.ndarray,
    seed: int = 0,
    batch_size: int = 16,
) -> np.ndarray:
    """Compress and reconstruct normalized fields (n, H, W) -> (n, H, W).

    DiffCoder runs DDIM with the configured step count from noise seeded
    by `seed`; the VAE decodes the posterior mean. Deterministic.
    """
    model.eval()
    fields = np.asarray(fields, dtype=np.float32)
    out = np.empty_like(fields)
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for start in range(0, fields.shape[0], batch_size):
            batch = torch.from_numpy(fields[start:start + batch_size])[:, None]
            if model.arch == "vae":
                x_hat, _, _ = model.vae(batch)
            else:
                z = LatentField(values=model.encoder(batch),
                                source_grid=(batch.shape[2], batch.shape[3]))
                x_hat = ddim_sample(z, model.unet, model.schedule,
                                    model.config.ddim_steps, generator=generator)
            out[start:start + batch_size] = x_hat[:, 0].numpy()
    return out


def fit(
    config: TrainConfig,
    spec: ModelSpec,
    data: Dataset,
    out_dir,
    arch: str = "diffcoder",
    provenance: dict | None = None,
) -> TrainedModel:
    """Train on the train split, logging per-step losses and writing a
    checkpoint per epoch plus `best` selected by validation loss.

    Bit-reproducible under a fixed seed: model init, batch order, and all
    noise draws derive from config.seed. Aborts on divergence with the
    last epoch checkpoint retained.
    """
    if arch not in ARCHS:
        raise EngineError(f"unknown arch {arch!r}; expected one of {ARCHS}")
    if data.norm_stats is None:
        raise EngineError("training data must be normalized (missing norm stats)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    sched = config.make_schedule()
    torch.manual_seed(config.seed)
    if arch == "vae":
        vae = build_vae(spec)
        model = TrainedModel(arch, spec, config, sched, data.norm_stats, vae=vae,
                             provenance=provenance or {})
    else:
        encoder = build_encoder(spec)
        unet = build_unet(spec)
        model = TrainedModel(arch, spec, config, sched, data.norm_stats,
                             encoder=encoder, unet=unet, provenance=provenance or {})

    n_traj = len(data.trajectories)
    n_val = max(1, n_traj // 10) if n_traj >= 2 else 0
    train_frames = np.concatenate(
        [t.frames for t in data.trajectories[:n_traj - n_val]], axis=0
    ).astype(np.float32)
    val_frames = (
        np.concatenate([t.frames for t in data.trajectories[n_traj - n_val:]], axis=0)
        .astype(np.float32) if n_val else None
    )

    params = [p for m in model.modules().values() for p in m.parameters()]
    optimizer = torch.optim.AdamW(params, lr=config.max_lr)
    steps_per_epoch = math.ceil(train_frames.shape[0] / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    shuffle_rng = np.random.default_rng(config.seed)
    noise_gen = torch.Generator().manual_seed(config.seed)
    log_path = out / TRAIN_LOG_NAME
    log_path.write_text("")
    recent: list[float] = []
    best_val = math.inf
    step = 0

    model.train()
    with log_path.open("a") as log:
        for epoch in range(1, config.epochs + 1):
            order = shuffle_rng.permutation(train_frames.shape[0])
            for start in range(0, len(order), config.batch_size):
                batch = torch.from_numpy(train_frames[order[start:start + config.batch_size]])
                batch = batch[:, None]
                lr = one_cycle_lr(step, total_steps, config.max_lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad()
                if arch == "vae":
                    loss, recon, kl = vae_training_step(batch, vae, config.kl_weight, noise_gen)
                    health = float(loss.item())
                else:
                    B = batch.shape[0]
                    t = torch.randint(1, sched.T + 1, (B,), generator=noise_gen)
                    eps = torch.randn(batch.shape, generator=noise_gen, dtype=batch.dtype)
                    loss, v_mse = diffusion_loss_terms(batch, t, eps, encoder, unet, sched)
                    # the weighted loss legitimately spans orders of
                    # magnitude with the timestep draw; watch the
                    # unweighted v error instead
                    health = float(v_mse.item())
                value = float(loss.item())
                _check_divergence(health if math.isfinite(value) else value, recent, model, out)
                loss.backward()
                optimizer.step()
                step += 1
                if arch == "vae":
                    log.write(f"{step},{epoch},{lr:.10e},{value:.10e},"
                              f"{float(recon.item()):.10e},{float(kl.item()):.10e}\n")
                else:
                    log.write(f"{step},{epoch},{lr:.10e},{value:.10e}\n")
                recent.append(health)
                if len(recent) > DIVERGENCE_WINDOW:
                    recent.pop(0)

            save_checkpoint(model, out / f"epoch_{epoch:03d}")
            val = validation_loss(model, val_frames if val_frames is not None else train_frames)
            if val < best_val:
                best_val = val
                save_checkpoint(model, out / "best")
            model.train()
    model.eval()
    return model


def _check_divergence(value: float, recent: list[float], model: TrainedModel, out: Path):
    if math.isfinite(value):
        if not recent:
            return
        med = statistics.median(recent)
        if med > 0 and value <= DIVERGENCE_MEDIAN_FACTOR * med:
            return
        if med <= 0 and math.isfinite(value):
            return
    raise DivergenceError(
        f"training diverged (loss {value}); last epoch checkpoint retained in {out}"
    )


def validation_loss(model: TrainedModel, frames: np.ndarray, batch_size: int = 16) -> float:
    """Deterministic held-out loss: fixed noise draws per call, so values
    are comparable across epochs."""
    model.eval()
    gen = torch.Generator().manual_seed(0x5EED)
    total = 0.0
    count = 0
    with torch.no_grad():
        for start in range(0, frames.shape[0], batch_size):
            batch = torch.from_numpy(frames[start:start + batch_size])[:, None]
            if model.arch == "vae":
                B = batch.shape[0]
                h = batch.shape[2] // 2 ** model.spec.depth
                xi = torch.zeros((B, model.spec.latent_channels, h, batch.shape[3] // 2 ** model.spec.depth))
                loss, _, _ = vae_loss(batch, xi, model.vae, model.config.kl_weight)
            else:
                B = batch.shape[0]
                t = torch.randint(1, model.schedule.T + 1, (B,), generator=gen)
                eps = torch.randn(batch.shape, generator=gen, dtype=batch.dtype)
                loss = diffusion_loss(batch, t, eps, model.encoder, model.unet, model.schedule)
            total += float(loss.item()) * batch.shape[0]
            count += batch.shape[0]
    return total / max(count, 1)


def save_checkpoint(model: TrainedModel, path) -> None:
    """Write manifest.json plus all weights as raw little-endian float32."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for mod_name, module in model.modules().items():
        for name, tensor in module.state_dict().items():
            arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
            index.append({
                "name": f"{mod_name}.{name}",
                "shape": list(tensor.shape),
                "offset": offset,
            })
            offset += arr.size
            blobs.append(arr.astype("<f4").tobytes())
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": model.arch,
        "model_spec": model.spec.to_dict(),
        "train_config": model.config.to_dict(),
        "norm_stats": None if model.norm_stats is None else list(model.norm_stats),
        "provenance": model.provenance,
        "tensors": index,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (root / "weights.f32").write_bytes(b"".join(blobs))


def load_checkpoint(path) -> TrainedModel:
    """Rebuild the model from a checkpoint directory, validating the
    format version and every declared tensor shape."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise CheckpointError(f"missing checkpoint manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    version = manifest.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unknown checkpoint version {version!r}, expected {CHECKPOINT_FORMAT_VERSION!r}"
        )
    arch = manifest["arch"]
    spec = ModelSpec.from_dict(manifest["model_spec"])
    config = TrainConfig.from_dict(manifest["train_config"])
    stats = manifest["norm_stats"]
    sched = config.make_schedule()

    torch.manual_seed(0)
    if arch == "vae":
        model = TrainedModel(arch, spec, config, sched,
                             None if stats is None else (stats[0], stats[1]),
                             vae=build_vae(spec), provenance=manifest.get("provenance", {}))
    elif arch == "diffcoder":
        model = TrainedModel(arch, spec, config, sched,
                             None if stats is None else (stats[0], stats[1]),
                             encoder=build_encoder(spec), unet=build_unet(spec),
                             provenance=manifest.get("provenance", {}))
    else:
        raise CheckpointError(f"unknown arch {arch!r} in checkpoint")

    raw = np.fromfile(root / "weights.f32", dtype="<f4")
    expected: dict[str, dict] = {}
    for mod_name, module in model.modules().items():
        for name, tensor in module.state_dict().items():
            expected[f"{mod_name}.{name}"] = tensor

    total = 0
    states: dict[str, dict[str, torch.Tensor]] = {m: {} for m in model.modules()}
    for entry in manifest["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} in shape index")
        if tuple(expected[name].shape) != shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: index says {shape}, model wants "
                f"{tuple(expected[name].shape)}"
            )
        size = int(np.prod(shape)) if shape else 1
        if offset + size > raw.size:
            raise CheckpointError(f"weights.f32 too small for tensor {name!r}")
        mod_name, _, param_name = name.partition(".")
        states[mod_name][param_name] = torch.from_numpy(
            raw[offset:offset + size].reshape(shape).copy()
        )
        total += size
    if total != raw.size:
        raise CheckpointError(
            f"weights.f32 holds {raw.size} floats but the index declares {total}"
        )
    missing = set(expected) - {e["name"] for e in manifest["tensors"]}
    if missing:
        raise CheckpointError(f"shape index missing tensors: {sorted(missing)[:3]}...")
    for mod_name, module in model.modules().items():
        module.load_state_dict(states[mod_name])
    model.eval()
    return model
