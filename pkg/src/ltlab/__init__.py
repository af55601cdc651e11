"""Desk-scale lab for lightweight fine-tuning on long-tail classification."""

from .autograd import GradCheckReport, Tensor, grad_check, layer_norm, log_softmax, no_grad, softmax
from .data import (
    AugSchedule,
    LongTailDataset,
    generate_longtail,
    group_split,
    load_dataset,
    mda_crop,
    mda_schedule_delta,
    rrc_crop,
    save_dataset,
)
from .harness import (
    Checkpoint,
    ConfigError,
    IntegrityError,
    Model,
    RunConfig,
    SGD,
    build_model,
    config_from_file,
    load_checkpoint,
    model_from_checkpoint,
    pretrain_backbone,
    save_checkpoint,
    train,
)
from .heads import (
    ClassifierState,
    PrototypeSet,
    classify,
    init_class_mean,
    init_linear_probe,
    init_semantic,
    load_prototypes,
    make_head,
    save_prototypes,
    weight_norms,
)
from .inference import (
    EvalReport,
    RepresentationDiagnostics,
    evaluate,
    five_crops,
    interclass_similarity,
    intraclass_shift,
    tte_predict,
)
from .losses import (
    BiasReport,
    ClassPrior,
    cross_entropy,
    estimate_prior,
    generalized_la_loss,
    la_loss,
    prop1_simulate,
    uniform_prior,
)
from .peft import (
    FineTunePolicy,
    TrainablePartition,
    adaptformer_forward,
    attach_policy,
    build_mask,
    count_policy_params,
    default_bottleneck_dim,
)
from .vit import (
    BackboneSpec,
    count_params,
    count_params_dims,
    embed_patches,
    extract_feature,
    forward_block,
    forward_features,
    init_backbone_params,
)

__version__ = "0.1.0"
