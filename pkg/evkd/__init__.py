from .events import (
    SensorGeometry,
    EventPoint,
    EventStream,
    EventFrame,
    VoxelGrid,
    parse_event_stream,
    write_event_stream,
    read_event_file,
    write_event_file,
    random_stream,
    frame_assignment,
    stack_to_frames,
    stack_by_duration,
    build_voxel_grid,
    render_event_image,
)
from .geometry import (
    Box,
    CropSpec,
    TEMPLATE_CROP,
    SEARCH_CROP,
    crop_region,
    box_to_crop_coords,
    iou,
    center_error,
    normalized_center_error,
    patch_token_layout,
)
from .losses import (
    DEFAULT_LOSS_WEIGHTS,
    LossReport,
    repeat_align,
    repeat_fold,
    head_average,
    sim_kd_loss,
    feat_kd_loss,
    gaussian_radius,
    size_adaptive_sigma,
    gaussian_heatmap,
    gwf_loss,
    response_kd_loss,
    total_loss,
)
from .fourier import SpectralMap, softmax2d, dft2d, dft2d_naive, temporal_signature, tft_kd_loss
from .toy import ToyParams, init_toy_params, toy_forward, toy_grad, toy_response, make_toy_video
from .inference import (
    DEFAULT_ASR_PARAMS,
    DEFAULT_TTT_PARAMS,
    AsrState,
    LoraAdapter,
    asr_step,
    asr_trace,
    init_lora,
    lora_apply,
    lora_grad,
    merge_lora,
    template_augment,
    consistency_loss,
    track_video,
    ttt_schedule,
)
from .metrics import (
    TrackRun,
    MetricReport,
    success_curve,
    precision_curve,
    normalized_precision,
    aggregate,
    attribute_breakdown,
)
from .dataset import (
    DatasetManifest,
    VideoRecord,
    load_manifest,
    load_annotations,
    validate_dataset,
    write_manifest,
    convert_released_layout,
)
from .core import get_threads, read_config
