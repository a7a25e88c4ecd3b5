"""Zero-shot blind super-resolution with a single-image diffusion prior.

Recovers both the HR image and the unknown blur kernel from one LR input by
fusing the reverse diffusion of an image-specific patch denoiser with joint
optimization of an implicit kernel field and an image refiner, anchored by an
LR consistency loss built on the exact degradation operator.
"""

__version__ = "0.1.0"

from .images import ImagePlane, bicubic_upscale, read_png, write_png  # noqa: F401
from .degradation import Kernel, convolve_downsample, synthesize_dataset  # noqa: F401
from .schedule import NoiseSchedule  # noqa: F401
