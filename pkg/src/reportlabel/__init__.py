"""Label radiology reports with a local LLM and train embedding classifiers on the labels."""

from .conditions import ConditionSpec, Granularity, BUILTIN_CONDITIONS
from .corpus import Report, SectionKind, SectionSpan, load_corpus, segment_sections
from .evaluation import (
    ScoredSet,
    apply_threshold,
    auroc,
    balanced_accuracy,
    evaluate,
    f1,
    roc_and_eer,
    stratified_split,
)
from .gateway import ClientConfig, LabelRecord, TokenScore, label_corpus
from .mil import bag_embed, decision_scores, train_linear_svm
from .prompting import PromptBundle, Strategy

__version__ = "0.1.0"
