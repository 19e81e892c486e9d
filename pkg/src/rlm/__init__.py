"""Word-level RNN language models with activation (AR) and temporal
activation (TAR) regularization, on a small numpy autodiff engine."""

from .autodiff import Tape, Tensor, backward, grad_check, no_grad, tensor_from
from .corpus import BatchedCorpus, Corpus, Vocabulary, batchify, bptt_slice, build_vocabulary, encode
from .generator import SamplerConfig, generate, moses_detokenize, sample_next
from .layers import LanguageModel, ModelConfig, RnnState
from .regularizers import Reduction, RegularizationConfig, ar_loss, combined_objective, tar_loss
from .trainer import TrainConfig, TrainState, evaluate_perplexity, run_epoch, train

__version__ = "0.1.0"

__all__ = [
    "Tape", "Tensor", "backward", "grad_check", "no_grad", "tensor_from",
    "BatchedCorpus", "Corpus", "Vocabulary", "batchify", "bptt_slice", "build_vocabulary", "encode",
    "SamplerConfig", "generate", "moses_detokenize", "sample_next",
    "LanguageModel", "ModelConfig", "RnnState",
    "Reduction", "RegularizationConfig", "ar_loss", "combined_objective", "tar_loss",
    "TrainConfig", "TrainState", "evaluate_perplexity", "run_epoch", "train",
    "tiny_corpus_path",
]


def tiny_corpus_path() -> str:
    """Path of the bundled ~1k-token corpus used by the demos and sanity checks."""
    from importlib.resources import files

    return str(files(__name__) / "data" / "tiny.txt")
