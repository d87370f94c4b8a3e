"""Synthetic multimodal data plus the three evaluation metrics.

dataset: procedural glyph bitmaps sharing a class label across
modalities, binary container files, and an idx-format reader for
externally supplied digit data.

metrics: latent linear probes, generation coherence against supervised
judge classifiers, and importance-weighted log-likelihoods.
"""

from .dataset import (
    ConfigInvalid,
    MultimodalSample,
    SyntheticDataset,
    SyntheticSetConfig,
    generate_dataset,
    load_dataset,
    read_idx,
    save_dataset,
    write_idx,
)
from .metrics import (
    ClassifierTooWeak,
    CoherenceJudge,
    EvalReport,
    TooFewSamples,
    coherence,
    evaluate_model,
    fit_logistic_probe,
    importance_log_likelihood,
    iwae_log_likelihood,
    linear_probe,
    load_judges,
    save_judges,
    subset_posterior_for,
    train_coherence_classifiers,
)

__all__ = [
    "ConfigInvalid",
    "MultimodalSample",
    "SyntheticDataset",
    "SyntheticSetConfig",
    "generate_dataset",
    "load_dataset",
    "read_idx",
    "save_dataset",
    "write_idx",
    "ClassifierTooWeak",
    "CoherenceJudge",
    "EvalReport",
    "TooFewSamples",
    "coherence",
    "evaluate_model",
    "fit_logistic_probe",
    "importance_log_likelihood",
    "iwae_log_likelihood",
    "linear_probe",
    "load_judges",
    "save_judges",
    "subset_posterior_for",
    "train_coherence_classifiers",
]
