//! The base encoder–decoder Transformer.

mod beam;
mod forward;
mod model;
mod train;
mod vocab;

pub use beam::{beam_search, translate, BeamConfig, Decoder, StepOutput};
pub use forward::{
    decode_batch, encode, encode_batch, forward_teacher_forced, forward_with_plugin, nll_loss, nll_on_tape,
    positional_encoding, project, CapturedReps, DecoderOut, EncoderOut, ForwardOutput, LayerReps, LayerVars, Noise,
};
pub use model::{
    Attention, AttnVars, DecoderLayer, DecoderLayerVars, EncoderLayer, EncoderLayerVars, FeedForward, FfnVars,
    LayerNorm, ModelVars, NormVars, TransformerConfig, TransformerParams,
};
pub(crate) use train::BatchStream;
pub use train::{make_batches, train_base, BaseTrainConfig, Batch};
pub use vocab::{format_corpus, parse_corpus, read_corpus, Pair, Vocab, BOS, EOS, PAD, RESERVED, UNK};
