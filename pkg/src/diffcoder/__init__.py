"""Flow-field compression with a deterministic convolutional encoder and
a conditional diffusion decoder, a matched VAE baseline, and the spectral
evaluation suite."""

from .data import (
    Dataset,
    FlowField,
    Trajectory,
    denormalize,
    normalize,
    read_dataset,
    split_dataset,
    synth_generate,
    write_dataset,
)
from .engine import (
    TrainConfig,
    TrainedModel,
    ddim_sample,
    diffusion_training_step,
    fit,
    load_checkpoint,
    reconstruct,
    save_checkpoint,
    vae_training_step,
)
from .metrics import (
    EnergySpectrum,
    energy_spectrum,
    highfreq_spectral_error,
    interp_baseline,
    rel_l2,
    spectral_error,
)
from .nets import (
    LatentField,
    ModelSpec,
    build_encoder,
    build_unet,
    build_vae,
    encode,
    make_model_spec,
    solve_width_for_budget,
    unet_forward,
    vae_forward,
)
from .report import EvalReport
from .schedule import (
    DenoiserPrediction,
    NoiseSchedule,
    convert_prediction,
    forward_sample,
    loss_weight,
    make_schedule,
    v_target,
)

__version__ = "0.1.0"
