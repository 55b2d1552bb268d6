//! The conditional occupancy decoder, its encoders and hand-written
//! reverse-mode derivatives.
//!
//! The decoder maps a point and a condition vector to a logit through an
//! input projection, a stack of residual blocks with conditional batch
//! normalization, and a linear head. Gradients are available with respect
//! to the parameters, the points and the condition; in eval mode the
//! Hessian of the logit along a direction is available as well.

mod decoder;
mod encoder;
mod field;
mod tensor;

pub use decoder::{
    sigmoid, Activation, Block, Cbn, DecoderBatch, DecoderConfig, DecoderParams, InputGradients, Linear, Mode,
    Tape, BN_MOMENTUM,
};
pub use encoder::{EncoderInput, EncoderParams, EncoderTape, Encoding};
pub use field::DecoderField;
pub use tensor::Tensor2;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const WEIGHTS_FORMAT: &str = "isoform-weights";
pub const WEIGHTS_VERSION: u32 = 1;

/// Wraps a decoder and a condition as an occupancy field over `bbox`.
pub fn decoder_as_field(params: Arc<DecoderParams>, condition: Vec<f64>, bbox: BoundingBox) -> Result<DecoderField> {
    DecoderField::new(params, condition, bbox)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub seed: u64,
    pub step: usize,
    /// Threshold chosen on validation data.
    pub tau: f64,
    /// Region the model was trained on.
    pub bbox: BoundingBox,
    /// Snapshot of the training configuration.
    #[serde(default)]
    pub training: serde_json::Value,
}

/// Decoder, encoder and metadata; the unit stored in a weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyModel {
    pub format: String,
    pub version: u32,
    pub metadata: ModelMetadata,
    pub decoder: DecoderParams,
    pub encoder: EncoderParams,
}

impl OccupancyModel {
    pub fn new(decoder: DecoderParams, encoder: EncoderParams, metadata: ModelMetadata) -> Result<Self> {
        let m = OccupancyModel {
            format: WEIGHTS_FORMAT.into(),
            version: WEIGHTS_VERSION,
            metadata,
            decoder,
            encoder,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != WEIGHTS_FORMAT {
            return Err(Error::Weights(format!("unknown format {:?}", self.format)));
        }
        if self.version != WEIGHTS_VERSION {
            return Err(Error::Weights(format!("unsupported version {}", self.version)));
        }
        self.decoder.validate()?;
        self.encoder.validate()?;
        if self.encoder.output_dim() != self.decoder.condition_dim() {
            return Err(Error::Weights(format!(
                "encoder produces {} values, decoder expects {}",
                self.encoder.output_dim(),
                self.decoder.condition_dim()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: OccupancyModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        OccupancyModel::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// The decoder conditioned on `condition`, as a field over the
    /// training region.
    pub fn field(&self, condition: Vec<f64>) -> Result<DecoderField> {
        DecoderField::new(Arc::new(self.decoder.clone()), condition, self.metadata.bbox)
    }

    pub fn field_for(&self, input: EncoderInput) -> Result<DecoderField> {
        let c = self.encoder.encode(input)?;
        self.field(c.mean().to_vec())
    }
}
