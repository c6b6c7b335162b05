"""Patch memory banks, contextual loss, and pixel-space realification."""

from .ann import AnnIndex, NeighborSet, exact_search, search, train_index
from .bank import (
    MemoryBank,
    PcaModel,
    QuantParams,
    build_banks,
    load_bank,
    load_bank_dir,
    load_bank_with_index,
    save_bank,
    save_bank_dir,
)
from .cxloss import (
    AffinityRows,
    CxConfig,
    CxLossReport,
    affinities,
    build_indexes,
    class_cx_loss,
    cosine_distance,
    cx_loss_gradient,
    image_cx_loss,
    multiscale_cx_loss,
    normalize_distances,
)
from .errors import FormatError
from .imaging import (
    BACKGROUND_CLASS,
    DEFAULT_SCALES,
    Image,
    LabelMaskSet,
    PatchSet,
    ScaleSpec,
    extract_patches,
    grid_count,
    load_image,
    load_masks,
    save_png,
)
from .metrics import (
    FeatureSet,
    GaussianStats,
    fid,
    gaussian_fit,
    load_features,
    matrix_sqrt_psd,
    mean_entropy,
    save_features,
)
from .objectives import (
    DiscriminatorOutputs,
    LossWeights,
    cca_loss,
    cycle_loss,
    full_loss,
    gan_loss,
    mask_refresh_due,
)
from .realify import OptimizeConfig, OptimizeTrace, nn_drift, realify

__all__ = [name for name in dir() if not name.startswith("_")]
