"""Forward-model estimation and deblurring for defocused text photographs.

A blurry observation is modelled as a convolution with an unknown kernel
followed by radial lens distortion; both are fitted from paired sharp/blurry
images and then inverted by a per-level deblurring pipeline.
"""

from .convolution import bccb_spectrum, convolve, convolve_direct, convolve_fft, gaussian_kernel
from .distortion import CoordMap, DistortionParams, render_chessboard, warp_image
from .estimation import EstimationConfig, PairedDataset, estimate
from .forward import ForwardModel, NoiseSpec, add_noise, apply, load_model, residual, save_model
from .image import Boundary, load_image, save_image
from .reconstruction import TV, External, PipelineRegistry, Tikhonov, deblur
from .scoring import evaluate_level, levenshtein, ocr_score

__version__ = "0.1.0"
