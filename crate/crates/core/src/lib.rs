//! Spoken language identification toolkit for low-resource conditions.
//!
//! The crate is organized as a pipeline of independent stages:
//!
//! - [`corpus`]: manifest ingestion, WAV/SPHERE decoding, session-disjoint
//!   train/validation splitting, pooled-augmented set sampling.
//! - [`features`]: energy VAD, MFCC, RASTA-PLP, shifted delta cepstra,
//!   cepstral mean subtraction, fixed-length chunking, feature archives.
//! - [`augment`]: additive noise / RIR, signal perturbation (volume, pitch,
//!   speed) and spectral-domain speech enhancement augmentations.
//! - [`gmm`]: diagonal-covariance UBM training (EM with binary mixture
//!   splitting), MAP mean adaptation, log-likelihood-ratio scoring.
//! - [`nnet`]: x-vector, ResNet-TDNN and ECAPA-style classifiers with
//!   additive-angular-margin softmax training.
//! - [`fusion`]: multiclass logistic-regression score fusion.
//! - [`metrics`]: LRE-style scoring (EER, actual/minimum primary cost,
//!   per-language reports, confusion matrix).
//!
//! Every stage is deterministic for a fixed seed: all randomness flows
//! through explicitly seeded generators and all parallel reductions happen
//! in a fixed order.

pub mod augment;
pub mod corpus;
pub mod dsp;
pub mod features;
pub mod fusion;
pub mod gmm;
pub mod mat;
pub mod metrics;
pub mod nnet;

pub use corpus::{AudioBuffer, LabelSet, Manifest, SplitSpec, UtteranceRecord};
pub use features::{FeatureKind, FeatureMatrix, FrameConfig};
pub use fusion::{FusionWeights, ScoreMatrix};
pub use mat::Mat;
