"""Model-division video semantic communication.

A learned joint source-channel video codec: GOP frames are transformed to a
latent space, JSCC-encoded, decomposed into one common feature map plus
per-frame individual maps, priced by a hyperprior entropy model, masked to
an exact symbol budget, and sent through a simulated AWGN channel.
"""

from .channel import ChannelConfig, awgn, de_normalize, measure_snr_db, power_normalize
from .data import (
    MovingShape,
    Overlay,
    SceneSpec,
    ToyVideoDataset,
    eval_video,
    generate_clip,
    make_jump_gop,
    read_frames,
    write_frames,
)
from .entropy_model import (
    EntropyMap,
    HyperLatent,
    ScaleField,
    entropy_map,
    hyper_decode,
    hyper_encode,
    likelihood,
    quantize,
)
from .metrics import QualityReport, gop_quality, ms_ssim, ms_ssim_db, mse, psnr
from .model_division import FeatureSet, combine, extract_common, split
from .pipeline import EvaluationReport, TransmitResult, evaluate, receive, transmit
from .training import (
    ModelState,
    TrainConfig,
    calibrate_lambda,
    load_checkpoint,
    loss,
    save_checkpoint,
    toy_codec_config,
    toy_train_config,
    train,
    train_step,
)
from .transform_codec import (
    CodecConfig,
    FeatureMap,
    LatentMap,
    jscc_decode,
    jscc_encode,
    latent_forward,
    latent_inverse,
)
from .video_model import (
    CbrReport,
    Frame,
    Gop,
    SymbolStream,
    cbr_of,
    source_dimension,
    split_into_gops,
)
from .vlc import (
    Budget,
    MaskPlan,
    Payload,
    apply_mask,
    build_mask,
    deserialize,
    serialize,
    trade_budget,
    zero_fill,
)

__version__ = "0.1.0"
