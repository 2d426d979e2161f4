"""Self-supervised post-training for a toy conversational dense retriever.

The package covers the full desk-scale workflow: synthetic corpus
generation, construction of the three self-supervised training signals
(topic-graft labels, coreference labels, bag-of-words targets), a
from-scratch numpy transformer encoder with hand-verified gradients,
distillation-based post-training and fine-tuning, exact dense retrieval
with MRR / NDCG@3, and the off-topic robustness protocol.
"""

__version__ = "0.1.0"

from .data import (  # noqa: F401
    Conversation,
    Document,
    ModelInput,
    Vocabulary,
    build_model_input,
    build_vocabulary,
    to_word_set,
    tokenize,
)
from .encoder import EncoderConfig, EncoderOutput, encode  # noqa: F401
from .objectives import LossReport, LossWeights  # noqa: F401
from .synthetic import SyntheticSpec, generate  # noqa: F401
from .tasks import (  # noqa: F401
    BowTarget,
    CoreferenceLabel,
    PerturbedConversation,
    TrainingInstance,
    build_bow_target,
    build_perturbed_conversation,
    build_training_instance,
    derive_reformulation_terms,
    locate_referred_query,
    sample_noise_length,
)
from .training import TrainConfig, fine_tune, post_train  # noqa: F401
