from typing import Final

# Container magic bytes
SHAPE_MAGIC: Final[bytes] = b"FMSM"
GENERATOR_MAGIC: Final[bytes] = b"FMGN"
CHECKPOINT_MAGIC: Final[bytes] = b"FMFS"
CONTAINER_VERSION: Final[int] = 1

# Numerics
EPSILON: Final[float] = 1e-12
NORMAL_MIN_Z: Final[float] = 0.05
CLAMP_BAND: Final[float] = 0.01
CHROMA_EPSILON: Final[float] = 1e-6
NEAR_PLANE: Final[float] = 1e-3

# Adam
ADAM_BETA_1: Final[float] = 0.9
ADAM_BETA_2: Final[float] = 0.999
ADAM_EPSILON: Final[float] = 1e-8

# Shape model
LANDMARK_COUNT: Final[int] = 68
POSE_LANDMARKS: Final[tuple[int, ...]] = (36, 45, 30, 48, 54)  # eye corners, nose tip, mouth corners
DIFFUSE_SMOOTHING: Final[int] = 2

# Reflectance generator
CHANNELS: Final[int] = 7  # diffuse RGB, specular, encoded normal XYZ
LATENT_LEVELS: Final[int] = 8
LATENT_DIM: Final[int] = 64
TEXTURE_RESOLUTION: Final[int] = 128
ALBEDO_MEAN: Final[float] = 0.24
ALBEDO_STD: Final[float] = 0.12
NORMAL_MEAN: Final[float] = 0.61
LATENT_PCA_SAMPLES: Final[int] = 10000
W_INIT_SAMPLES: Final[int] = 1000

# Skin tone augmentation
HISTOGRAM_BINS: Final[int] = 256
MASK_DISTANCE_LOW: Final[float] = 0.15
MASK_DISTANCE_HIGH: Final[float] = 0.40
FOREHEAD_RECT: Final[tuple[float, float, float, float]] = (0.42, 0.18, 0.58, 0.28)  # u0, v0, u1, v1
MONK_SKIN_TONES: Final[tuple[str, ...]] = (
    "#F6EDE4",
    "#F3E7DB",
    "#F7EAD0",
    "#EADABA",
    "#D7BD96",
    "#A07E56",
    "#825C43",
    "#604134",
    "#3A312A",
    "#292420",
)

# Rendering
SHININESS: Final[float] = 20.0
FOCAL_RATIO: Final[float] = 1.5
BACKGROUND: Final[tuple[float, float, float]] = (0.0, 0.0, 0.0)

# Feature bank
BANK_LEVELS: Final[int] = 4
BANK_FILTERS: Final[int] = 16
BANK_KERNEL: Final[int] = 5
