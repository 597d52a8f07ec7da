"""Text-to-motion diffusion for any number of people.

A generation network learns single-person motion from text; a zero-initialized
condition-injection network adds other people's motions (and optional spatial
targets) so that N-person scenes are sampled recursively, one conditional
person at a time.
"""

from .diffusion import (
    NoiseSchedule,
    SamplerConfig,
    cfg_combine,
    ddim_step,
    make_schedule,
    q_sample,
    sample_loop,
)
from .errors import (
    DatasetError,
    DegenerateRotationError,
    NumericalError,
    ValidationError,
)
from .generation import GenerationNet, ModelDims, TextEmbedder, init_gen_params
from .interaction import InteractionNet, init_from_generation, init_inter_params
from .motion import (
    MotionSeq,
    SkeletonDef,
    SpatialSignal,
    assemble_motion,
    compute_velocities,
    detect_foot_contacts,
    pose_dim,
    rot6d_to_matrix,
    validate_motion,
)
from .sampling import (
    GenerationRequest,
    Pipeline,
    explicit_guidance_hook,
    sample_multi,
    sample_single,
)
from .synthdata import (
    GeneratorConfig,
    SampleRecord,
    generate_dataset,
    generate_interaction,
    generate_primitive,
    load_dataset,
    skeleton_preset,
)
from .training import (
    LossWeights,
    TrainConfig,
    dm_loss,
    loss_stage1,
    train_spatial,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"
