"""Image immunization toolkit against diffusion-based editing.

Trains and runs a feed-forward noise generator that confines an
imperceptible perturbation to a protected region so downstream
diffusion-based edits of the image fail, plus the optimization-based
baselines, counter-attack simulations, and the evaluation harness needed
to compare them.
"""

from .attacks import (
    CounterAttackSpec,
    PerturbationBudget,
    PgdConfig,
    counter_attack,
    pgd_immunize,
    random_noise_immunize,
    robustness_protocol,
)
from .backends import (
    EditBackend,
    EditRequest,
    EditResult,
    available_backends,
    create_backend,
    edit,
    edit_with_gradient,
    register_backend,
)
from .data import (
    DatasetManifest,
    SampleTuple,
    load_image,
    load_mask,
    read_manifest,
    save_image,
    split_manifest,
    write_manifest,
)
from .evaluation import MetricReport, evaluate_method, video_evaluate
from .immunizer import (
    ImmunizerConfig,
    ImmunizerModel,
    apply_immunization,
    generate_noise,
    immunize,
    load_checkpoint,
    save_checkpoint,
)
from .metrics import clip_t, fsim, get_text_scorer, psnr, ssim
from .training import (
    LossWeights,
    TrainConfig,
    Trainer,
    ablation_run,
    edit_loss,
    noise_loss,
    total_loss,
    train,
    train_step,
)

__version__ = "0.1.0"
