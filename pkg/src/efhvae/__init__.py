"""Extended factorized hierarchical VAE for disentangling sequence-level
(subject) and segment-level (content) factors of multichannel time series."""
from .corpus import CorpusConfig, build_dataset, generate_corpus, segment_and_label, split_recording
from .estimator import FHVAE
from .objective import HyperConfig
from .probes import LinearSVM, SoftmaxProbe, wilcoxon_signed_rank
from .trainer import StageConfig

__all__ = [
    "CorpusConfig", "FHVAE", "HyperConfig", "LinearSVM", "SoftmaxProbe", "StageConfig",
    "build_dataset", "generate_corpus", "segment_and_label", "split_recording", "wilcoxon_signed_rank",
]
__version__ = "0.1.0"
