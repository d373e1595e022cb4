"""Training-free refinement of coarse segmentation masks.

The pipeline injects a coarse mask into attention as a binary logit
bias, reconstructs the image in a single denoising step, matches every
generated pixel to its closest original pixel in feature space, and
mixes foreground probabilities along those matches.
"""

from .correspondence import (
    CorrespondenceMap,
    FeatureExtractor,
    FeatureMap,
    MixConfig,
    ToyFeatureExtractor,
    directed_sum_distance,
    find_correspondence,
    find_correspondence_bruteforce,
    hausdorff_distance,
    mix_probabilities,
    normalize_features,
    refine_all_classes,
    refine_mask,
    refine_mask_from_features,
)
from .diffusion import (
    ConditionSpec,
    DenoiserBackend,
    RecordedBackend,
    ToyDenoiser,
    add_noise,
    ddim_step,
    one_step_reconstruct,
    predict_x0,
)
from .evaluation import (
    IoUReport,
    StratifiedGainReport,
    assemble_class_mask,
    iou,
    mean_iou,
    sample_foreground_iou,
    stratified_gain,
)
from .injection import (
    AttentionLogits,
    InjectionMask,
    InjectionPair,
    build_cross_injection,
    build_self_injection,
    inject_attention,
    prepare_injection_set,
)
from .pipeline import (
    DatasetLayout,
    RecordedFeatureStore,
    RunConfig,
    dump_diagnostics,
    run_refinement,
    timestep_sweep,
)
from .tensorfile import TensorFileError, load_tensor, read_tensor, save_tensor, \
    write_tensor
from .types import (
    BinaryMask,
    ClassIndexMask,
    ImageTensor,
    NoiseSchedule,
    SoftMask,
    TokenIndexSet,
    ValidationError,
    class_token_indices,
    resample_mask,
    validate_image,
)

__version__ = "0.1.0"
