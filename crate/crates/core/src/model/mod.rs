//! Golden model: config, STFT front end, weights, the network and its
//! complexity ledger.

mod arith;
mod calibrate;
mod config;
mod ledger;
mod metrics;
mod net;
mod stft;
mod stream;
mod weights;

pub use arith::{rsqrt_code, Arith, F64Arith, QuantArith, Tensor, LN_EPS};
pub use calibrate::{calibrate_bn, noise_frames, CAL_AMPLITUDE, CAL_FRAMES};
pub use config::{AttentionOrder, LossKind, ModelConfig, NormMode};
pub use net::{
    activation, affine, attention, bn_affine, conv, dilated_residual_block, ew_add, ew_mul, fold_bn, forward,
    gru_layer, layer_norm, mask_module, norm, transformer_block, Affine, Block, Conv, ConvGeom, Gru, LayerMacs,
    MacCounter, Net, NetState, Norm, Probe,
};
pub use ledger::{
    count_ledger, layer_macs, AttentionRow, LayerRow, Ledger, TARGET_GMACS_PER_SECOND, TARGET_MMACS_PER_FRAME, TARGET_PARAMS,
};
pub use metrics::{cross_domain_loss, snr, stft_magnitudes, SNR_CAP_DB};
pub use stream::{Enhancer, GoldenF64, GoldenQuant, MagnitudeEngine, StreamState};
pub use stft::{hann, istft_synthesize, stft_analyze, Framer, OlaState, SpectralFrame, Stft};
pub use weights::{param_specs, Param, ParamKind, ParamSpec, Weights};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("channel count {0} is not even")]
    OddChannels(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("non-positive BN variance in {0}")]
    NonPositiveVariance(String),
    #[error("bad weight file: {0}")]
    BadFile(String),
    #[error("reference signal is identically zero")]
    ZeroSignal,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
