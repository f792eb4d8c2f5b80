"""Edge inference toolkit for dual-branch depth/intensity super-resolution of
32x48 SPAD sensor frames."""

__version__ = "0.1.0"

from .calibration import (
    CalibrationBundle,
    HotPixelMask,
    NonUniformityMap,
    apply_nonuniformity,
    compensate_hot_pixels,
    detect_hot_pixels,
)
from .datagen import DatasetStats, PairSample, make_pair
from .metrics import MetricReport, evaluate, gmsd, ms_ssim, ngmsd, psnr, ssim
from .model import Model, ModelConfig, ModelWeights, build_model, count_params, init_weights
from .protocol import FramePair, PingPongBuffer, StreamConfig, decode_packet, encode_packet, simulate_stream
from .quantizer import QuantizedModel, calibrate, quantize_model
from .tensor import QTensor, bicubic_upsample, conv2d, pixel_shuffle, sobel_gradients
from .weightfile import load_model, save_model
