"""Reference-guided image completion at desk scale.

A dual-branch latent denoiser: the Reference branch encodes part-level
reference images at timestep zero; the Complete branch fuses the cached
reference tokens through region-focused attention and decoupled
cross-attention while predicting noise for the masked input. Ships with the
full training recipe, a procedural figure dataset, a benchmark format with a
masked-region evaluation harness, ablation switches, an HTTP service and a
CLI.
"""

from .masks import (
    Mask,
    MaskSpec,
    apply_mask,
    body_shape_mask,
    downsample_mask,
    random_grid_mask,
    sample_training_mask,
)
from .model import (
    FeatureCache,
    Model,
    ModelConfig,
    decode_latent_to_image,
    encode_image_to_latent,
    load_checkpoint,
    save_checkpoint,
    semantic_encode,
)
from .attention import (
    AttentionWeights,
    DecoupledWeights,
    SemanticTokens,
    decoupled_cross_attention,
    mask_reference_features,
    rfa_attention,
)
from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    cfg_combine,
    ddim_step,
    make_schedule,
    q_sample,
    sample_completion,
    training_loss,
)
from .training import Adam, TrainConfig, drop_references, train_loop, train_step
from .metrics import (
    MetricReport,
    aggregate_report,
    embedding_similarity,
    masked_psnr,
    masked_ssim,
    perceptual_distance,
)
from .benchmark import (
    BenchmarkGroup,
    load_benchmark,
    run_eval,
    run_mask_ratio_ablation,
    save_benchmark,
)
from .synth import (
    PART_LABELS,
    FigureSpec,
    Pose,
    ReferencePart,
    TrainingSample,
    build_benchmark_group,
    build_training_pair,
    generate_dataset,
    generate_figure,
)

__version__ = "0.1.0"
