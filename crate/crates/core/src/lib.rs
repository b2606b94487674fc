//! Whole-slide image to pathology report pipeline.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`pyramid`]: multi-resolution slide access and the synthetic slide generator
//! - [`segmentation`]: HSV tissue masks and morphological refinement
//! - [`patching`]: grid candidates, quality filters and stratified budget sampling
//! - [`features`]: patch encoders, the feature matrix and its binary store
//! - [`decoder`]: transformer decoder, training and greedy generation
//! - [`evaluation`]: ROUGE-L, BLEU-4, keyword Jaccard, embedding cosine and the composite score
//! - [`verification`]: retrieval-based replacement of generated reports

pub mod codec;
pub mod decoder;
pub mod evaluation;
pub mod features;
pub mod hash;
pub mod patching;
pub mod pyramid;
pub mod segmentation;
pub mod text;
pub mod verification;

pub use decoder::{DecoderConfig, DecoderModel, TrainConfig, Vocab};
pub use evaluation::{KeywordLexicon, ScoreBreakdown};
pub use features::{FeatureMatrix, PatchEncoder, StubEncoder};
pub use patching::{PatchRecord, QualityParams, Verdict};
pub use pyramid::{PyramidSource, RgbImage};
pub use segmentation::{BinaryMask, SegmentationParams};
pub use verification::{EmbeddingProvider, ReferenceCorpus, VerificationResult};
