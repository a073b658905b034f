"""Leap multi-token prediction at desk scale.

A numpy implementation of training and inference for causal language models
with leap-offset prediction heads: heads supervise offsets 1, k+1, ...,
k(n-1)+1, decoding fills the gaps from hidden rows cached on earlier steps,
and a token tree verifies several candidate continuations per pass. The
theory module carries the matching acceptance-length model.
"""

from .corpus import BOS_ID, SEP_ID, ByteTokenizer, Corpus, load_corpus, save_corpus
from .checkpoint import load_checkpoint, save_checkpoint
from .decode import (
    DecodeState,
    DecodeStats,
    DraftCandidates,
    ar_decode,
    decode_loop,
    draft_fmtp,
    draft_lmtp,
    draft_mtp,
    prefill,
    verify_accept,
)
from .model import (
    KvCache,
    ModelConfig,
    PredictionHead,
    TransformerLM,
    causal_mask,
    head_logits,
    init_heads,
)
from .runconfig import RunConfig, parse_config
from .spectree import (
    HeadAccuracyProfile,
    TokenTree,
    build_tree,
    estimate_profile,
    populate_tree,
    tree_mask,
    verify_tree,
)
from .theory import (
    AttenuationParams,
    LengthReport,
    attenuation,
    crossover_gamma,
    delta_decomposition,
    expected_length_leap,
    expected_length_vanilla,
    monte_carlo_length,
)
from .training import (
    LeapSchedule,
    TrainingConfig,
    align_leap_targets,
    full_loss,
    ntp_loss,
    self_distill,
    train,
    warmup_loss,
)

__version__ = "0.1.0"
