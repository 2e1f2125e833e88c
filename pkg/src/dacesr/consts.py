from . import __version__

#: Producer string stored in checkpoint manifests and reports
CLIENT = f"dacesr {__version__}"

#: Similarity above which a degradation counts as mild
TAU1 = 0.710

#: Similarity below which a degradation counts as severe
TAU2 = 0.297

#: Number of degradation types sampled for severity profiling
N_DEGRADATIONS = 1000

#: Number of clean images used for severity profiling
N_PROFILE_IMAGES = 30

#: Overall downscaling factor of a sampled degradation chain
CHAIN_SCALE = 0.25

#: Sampling intervals for a sampled degradation round
BLUR_SIGMA_RANGE = (0.2, 3.0)
RESIZE_SCALE_RANGE = (0.25, 1.0)
NOISE_SIGMA_RANGE = (1.0, 30.0)
JPEG_QUALITY_RANGE = (30, 95)

#: Bicubic kernel coefficient
BICUBIC_A = -0.5

#: Below this magnitude of Δ·a the ZOH input matrix uses its series limit
ZOH_SERIES_CUTOFF = 1e-6

#: Width of the depthwise causal convolution in a ViMM block
CONV1D_WIDTH = 4

#: Range for the initial softplus(Δ) values
DELTA_INIT_RANGE = (1e-3, 1e-1)

#: LoRA rank
LORA_RANK = 8

#: Image sides fed to the embedding encoder must be multiples of this
ENCODER_STRIDE = 16

#: Adam coefficients
ADAM_BETAS = (0.9, 0.99)

#: Weights of the perceptual and adversarial loss terms
LAMBDA_PERCEPTUAL = 1.0
LAMBDA_ADVERSARIAL = 0.1

#: Pixels cropped from each border before computing PSNR
CROP_BORDER = 4

#: Version of the evaluation report schema
EVAL_SCHEMA_VERSION = 1

#: Format tag written into checkpoint manifests
CHECKPOINT_FORMAT = "dacesr-tensors"

#: Version of the checkpoint manifest layout
CHECKPOINT_VERSION = 1

#: Minimum side length accepted by the surrogate tagger
TAGGER_MIN_SIDE = 32
