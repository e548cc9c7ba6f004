"""Frame-level pseudo-label transfer learning for speech emotion recognition.

Three training stages over a small transformer encoder: multi-task
(emotion + gender) pre-fine-tuning, masked frame-level prediction of
multi-scale k-means pseudo-labels, and utterance-level additive-margin
softmax fine-tuning, evaluated with speaker-independent 5-fold
cross-validation (WAR/UAR).
"""

from .corpus import (
    EmotionLabel,
    FrameFeatureMatrix,
    GenderLabel,
    SyntheticCorpusSpec,
    UtteranceRecord,
    compute_frontend,
    generate_synthetic_corpus,
    load_manifest,
    map_emotion_label,
)
from .encoder import (
    Checkpoint,
    EncoderConfig,
    MaskSpec,
    SpeechEncoder,
    forward_with_tap,
    load_checkpoint,
    sample_mask_spans,
    save_checkpoint,
)
from .evaluation import (
    ConfusionMatrix,
    EvalReport,
    FoldSplit,
    compute_metrics,
    make_folds,
    run_crossval,
)
from .frame_finetune import FramePredictionHeads, masked_frame_ce, train_stage2
from .margin_finetune import AMSConfig, CosineHead, ams_loss, cosine_logits, train_stage3
from .multitask import JointLossConfig, PoolingHead, joint_loss, pooled_embedding, train_stage1
from .pipeline import AblationGrid, PipelineConfig, crossvalidate, run_ablation, run_pipeline
from .pseudolabels import (
    ClusterConfig,
    CodebookSet,
    PseudoLabelSet,
    cluster_quality,
    extract_pseudo_labels,
    fit_kmeans,
)
from .training import TrainHyperparams

__version__ = "0.1.0"
