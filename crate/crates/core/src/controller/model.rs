//! Controller model file.
//!
//! ```text
//! "SGCM" | u8 version | u8 role | f64 lambda | [u8; 32] schema hash
//! u32 F | F × f64 mean | F × f64 std
//! u32 L | (L + 1) × u32 layer widths
//! per layer: outputs × inputs f64 weights (row-major), outputs × f64 bias
//! ```
//! Integers and floats are little-endian.

use std::path::Path;

use thiserror::Error;

use super::{ControllerError, Layer, Mlp};
use crate::features::{schema_hash, FeatureNormalizer, FeatureVector, FEATURE_COUNT};

pub const MODEL_MAGIC: [u8; 4] = *b"SGCM";
pub const MODEL_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("not a controller model file")]
    BadMagic,
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated model file")]
    Truncated,
    #[error("feature schema hash does not match this build")]
    SchemaMismatch,
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("model i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Steps,
    Cfg,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Steps => "steps",
            Role::Cfg => "cfg",
        }
    }
}

/// A trained MLP together with its feature schema and normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerModel {
    pub role: Role,
    pub lambda: f64,
    pub schema: [u8; 32],
    pub normalizer: FeatureNormalizer,
    pub mlp: Mlp,
}

impl ControllerModel {
    pub fn new(role: Role, lambda: f64, normalizer: FeatureNormalizer, mlp: Mlp) -> Self {
        Self {
            role,
            lambda,
            schema: schema_hash(),
            normalizer,
            mlp,
        }
    }

    /// Output in `(0, 1)` for raw (unnormalized) features.
    pub fn predict(&self, raw: &FeatureVector) -> Result<f64, ControllerError> {
        if self.schema != schema_hash() {
            return Err(ControllerError::SchemaMismatch);
        }
        self.mlp.forward(self.normalizer.normalize(raw).as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.push(MODEL_VERSION);
        out.push(match self.role {
            Role::Steps => 0,
            Role::Cfg => 1,
        });
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.extend_from_slice(&self.schema);
        out.extend_from_slice(&(FEATURE_COUNT as u32).to_le_bytes());
        for v in self.normalizer.mean.iter().chain(&self.normalizer.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let dims = self.mlp.layer_dims();
        out.extend_from_slice(&(self.mlp.layers.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for l in &self.mlp.layers {
            for v in l.weights.iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = r.u8()?;
        if version != MODEL_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let role = match r.u8()? {
            0 => Role::Steps,
            1 => Role::Cfg,
            v => return Err(ModelError::Corrupt(format!("role {v}"))),
        };
        let lambda = r.f64()?;
        let schema: [u8; 32] = r.take(32)?.try_into().unwrap();
        if schema != schema_hash() {
            return Err(ModelError::SchemaMismatch);
        }
        let f = r.u32()? as usize;
        if f != FEATURE_COUNT {
            return Err(ModelError::SchemaMismatch);
        }
        let mut normalizer = FeatureNormalizer::identity();
        for k in 0..f {
            normalizer.mean[k] = r.f64()?;
        }
        for k in 0..f {
            normalizer.std[k] = r.f64()?;
        }
        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 64 {
            return Err(ModelError::Corrupt(format!("{n_layers} layers")));
        }
        let dims = (0..=n_layers).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        if dims[0] != f || *dims.last().unwrap() != 1 {
            return Err(ModelError::Corrupt(format!("layer widths {dims:?}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for w in dims.windows(2) {
            let (inputs, outputs) = (w[0], w[1]);
            let weights = (0..inputs * outputs).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let bias = (0..outputs).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            layers.push(Layer {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Corrupt("trailing bytes".into()));
        }
        let mlp = Mlp { layers };
        if !mlp.is_finite() || !lambda.is_finite() {
            return Err(ModelError::Corrupt("non-finite parameter".into()));
        }
        Ok(Self {
            role,
            lambda,
            schema,
            normalizer,
            mlp,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.bytes.len() - self.pos < n {
            return Err(ModelError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ControllerModel {
        let mut n = FeatureNormalizer::identity();
        n.mean[2] = 3.5;
        n.std[4] = 0.25;
        ControllerModel::new(Role::Steps, 0.64, n, Mlp::random(FEATURE_COUNT, 5))
    }

    #[test]
    fn round_trip() {
        let m = sample();
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"SGCM");
        assert_eq!(ControllerModel::from_bytes(&bytes).unwrap(), m);
    }

    #[test]
    fn rejects_schema_and_truncation() {
        let mut bytes = sample().to_bytes();
        assert!(matches!(ControllerModel::from_bytes(&bytes[..bytes.len() - 3]), Err(ModelError::Truncated)));
        bytes[14] ^= 1;
        assert!(matches!(ControllerModel::from_bytes(&bytes), Err(ModelError::SchemaMismatch)));
        let mut m = sample();
        m.schema[0] ^= 1;
        assert_eq!(m.predict(&FeatureVector([0.0; 8])), Err(ControllerError::SchemaMismatch));
    }
}
