"""Cross-modal retrieval over precomputed feature streams.

Train fusion encoders with a relaxed contrastive objective, mine unlabeled
positives with a judged shortlist, and evaluate recall@K per environment.
"""

from ._version import __version__
from .autograd import Tensor, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .datastore import (
    Dataset,
    DatasetManifest,
    EnvironmentEntry,
    FeatureRecord,
    Query,
    UnlabeledPositiveSet,
    load_dataset,
    load_unlabeled_set,
    save_dataset,
    save_unlabeled_set,
    validate_unlabeled_set,
)
from .encoders import (
    ImageEncoderConfig,
    TextEncoderConfig,
    encode_image,
    encode_image_batch,
    encode_text,
    encode_text_batch,
    init_params,
)
from .labeler import (
    FileJudge,
    FrozenStreamScorer,
    MllmHttpJudge,
    OracleJudge,
    ScoreFileScorer,
    label_dataset,
    oracle_judge_from_file,
    shortlist,
)
from .losses import (
    LOSS_KINDS,
    VARIANTS,
    BatchPairing,
    DrcConfig,
    LossValue,
    compute_loss,
    drc_loss,
    infonce_loss,
    variant_loss,
)
from .optim import ParamSet, adamw_step, clip_grads, collect_grads
from .retrieval import MetricsReport, RankedList, aggregate_recall, evaluate, rank_images, recall_at_k
from .synth import BenchConfig, SynthConfig, generate, render_table, run_benchmark
from .trainer import RunRecord, TrainConfig, make_batches, train

__all__ = [name for name in dir() if not name.startswith("_")]
