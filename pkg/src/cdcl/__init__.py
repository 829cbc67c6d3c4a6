"""Cross-domain contrastive learning for unsupervised domain adaptation.

Small-scale numpy implementation: an MLP encoder with exact gradients,
cross-domain contrastive losses, prototype-seeded spherical k-means
pseudo-labels, and the standard and source-free adaptation loops.
"""
from .data import (
    BatchSampler,
    Dataset,
    DomainPair,
    ShiftConfig,
    generate_shifted_pair,
    load_dataset,
    save_dataset,
    split_train_val,
)
from .kernels import BACKEND
from .losses import (
    PairMode,
    cdc_anchor_loss,
    cdc_bidirectional,
    cross_entropy,
    info_nce,
    sdf_cdc_loss,
    uda_objective,
)
from .model import (
    Domain,
    EncoderConfig,
    Mode,
    Model,
    backward,
    classify,
    encode,
    init_model,
    load_checkpoint,
    prepare_source_free,
    save_checkpoint,
)
from .pseudolabel import (
    classifier_prototypes,
    filter_by_confidence,
    generate_pseudo_labels,
    source_prototypes,
    spherical_kmeans,
)
from .trainer import (
    HyperParams,
    TrainReport,
    evaluate,
    lr_schedule,
    pretrain_source,
    sgd_step,
    train_sdf,
    train_source_only,
    train_uda,
)

__version__ = "0.1.0"
