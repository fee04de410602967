//! Multi-granularity skeleton tokens from an encoder feature map.
//!
//! * semantic: mean over frames and joints, then an affine map `C → D_tok`;
//! * spatial: mean over frames, shared `C × C` channel mixing, flattened joint-major;
//! * temporal: mean over joints, shared `C × C` channel mixing, flattened frame-major.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Params, PoolAxes, Tape, Tensor, Var};

pub const SEMANTIC_W: &str = "tok.sem.w";
pub const SEMANTIC_B: &str = "tok.sem.b";
pub const SPATIAL_W: &str = "tok.sp.w";
pub const SPATIAL_B: &str = "tok.sp.b";
pub const TEMPORAL_W: &str = "tok.tp.w";
pub const TEMPORAL_B: &str = "tok.tp.b";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    /// Width of the semantic token.
    pub token_dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { token_dim: 768 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenBundle {
    pub semantic: Vec<f64>,
    pub spatial: Vec<f64>,
    pub temporal: Vec<f64>,
    /// `(T, J, C)` of the feature map the tokens came from.
    pub source_dims: (usize, usize, usize),
}

/// Tape handles of the three token kinds; all are flat vectors.
#[derive(Clone, Copy, Debug)]
pub struct TokenVars {
    pub semantic: Var,
    pub spatial: Var,
    pub temporal: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonTokenizer {
    pub config: TokenizerConfig,
    pub channels: usize,
    pub params: Params,
}

impl SkeletonTokenizer {
    pub fn new(channels: usize, config: TokenizerConfig, seed: u64) -> Result<Self> {
        if channels == 0 || config.token_dim == 0 {
            return Err(Error::param("tokenizer widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.token_dim;
        let mut params = Params::new();
        params.insert(
            SEMANTIC_W,
            Tensor::glorot(&[channels, d], channels, d, &mut rng),
        );
        params.insert(SEMANTIC_B, Tensor::zeros(&[d]));
        params.insert(
            SPATIAL_W,
            Tensor::glorot(&[channels, channels], channels, channels, &mut rng),
        );
        params.insert(SPATIAL_B, Tensor::zeros(&[channels]));
        params.insert(
            TEMPORAL_W,
            Tensor::glorot(&[channels, channels], channels, channels, &mut rng),
        );
        params.insert(TEMPORAL_B, Tensor::zeros(&[channels]));
        Ok(Self {
            config,
            channels,
            params,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.config.token_dim
    }

    /// Semantic token of a `(T·J, C)` feature variable.
    pub fn semantic(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        features: Var,
        dims: (usize, usize, usize),
    ) -> Var {
        let (t, j, c) = dims;
        let pooled = tape.mean_pool(features, [t, j, c], PoolAxes::Both);
        let pooled = tape.reshape(pooled, &[1, c]);
        let y = tape.matmul(pooled, bound.var(SEMANTIC_W));
        let y = tape.add_row(y, bound.var(SEMANTIC_B));
        tape.reshape(y, &[self.token_dim()])
    }

    pub fn spatial(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        features: Var,
        dims: (usize, usize, usize),
    ) -> Var {
        let (t, j, c) = dims;
        let pooled = tape.mean_pool(features, [t, j, c], PoolAxes::First);
        let y = tape.matmul(pooled, bound.var(SPATIAL_W));
        let y = tape.add_row(y, bound.var(SPATIAL_B));
        tape.reshape(y, &[j * c])
    }

    pub fn temporal(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        features: Var,
        dims: (usize, usize, usize),
    ) -> Var {
        let (t, j, c) = dims;
        let pooled = tape.mean_pool(features, [t, j, c], PoolAxes::Second);
        let y = tape.matmul(pooled, bound.var(TEMPORAL_W));
        let y = tape.add_row(y, bound.var(TEMPORAL_B));
        tape.reshape(y, &[t * c])
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        features: Var,
        dims: (usize, usize, usize),
    ) -> Result<TokenVars> {
        let (t, j, c) = dims;
        if c != self.channels || tape.value(features).len() != t * j * c {
            return Err(Error::param(format!(
                "feature map {:?} does not match (T, J, C) = {dims:?} with C = {}",
                tape.value(features).shape(),
                self.channels
            )));
        }
        Ok(TokenVars {
            semantic: self.semantic(tape, bound, features, dims),
            spatial: self.spatial(tape, bound, features, dims),
            temporal: self.temporal(tape, bound, features, dims),
        })
    }

    pub fn tokenize(&self, features: &FeatureMap) -> Result<TokenBundle> {
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let f = tape.constant(features.values.clone());
        let dims = features.dims();
        let vars = self.forward(&mut tape, &bound, f, dims)?;
        Ok(TokenBundle {
            semantic: tape.value(vars.semantic).data().to_vec(),
            spatial: tape.value(vars.spatial).data().to_vec(),
            temporal: tape.value(vars.temporal).data().to_vec(),
            source_dims: dims,
        })
    }
}
