//! Low-rank adapters over frozen linear maps and the skeleton-token projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::prompt::{Granularity, SkeletonSlots};
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Params, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 64,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

impl LoraConfig {
    pub fn desk() -> Self {
        Self {
            rank: 8,
            ..Self::default()
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || !(self.alpha > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param(format!(
                "LoRA needs rank > 0, alpha > 0 and dropout in [0, 1); got {self:?}"
            )));
        }
        Ok(())
    }
}

pub fn lora_a_name(target: &str) -> String {
    format!("{target}.lora_a")
}

pub fn lora_b_name(target: &str) -> String {
    format!("{target}.lora_b")
}

/// Factor pairs `A: (r, d_in)` and `B: (d_out, r)` for each adapted matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub targets: Vec<String>,
    pub params: Params,
}

impl LoraAdapter {
    /// `targets` pairs each frozen matrix name with its `(d_out, d_in)`.
    /// `A` is uniform in ±1/√d_in and `B` starts at zero.
    pub fn new(
        config: LoraConfig,
        targets: &[(String, (usize, usize))],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        for (name, (d_out, d_in)) in targets {
            let bound = 1.0 / (*d_in as f64).sqrt();
            params.insert(
                lora_a_name(name),
                Tensor::uniform(&[config.rank, *d_in], bound, &mut rng),
            );
            params.insert(lora_b_name(name), Tensor::zeros(&[*d_out, config.rank]));
        }
        Ok(Self {
            config,
            targets: targets.iter().map(|(n, _)| n.clone()).collect(),
            params,
        })
    }

    pub fn adapts(&self, target: &str) -> bool {
        self.targets.iter().any(|t| t == target)
    }
}

/// `W·x + (alpha/r)·B·(A·x)` for a frozen `W: (d_out, d_in)`.
pub fn lora_forward(
    w: &Tensor,
    a: &Tensor,
    b: &Tensor,
    config: &LoraConfig,
    x: &[f64],
) -> Result<Vec<f64>> {
    let (d_out, d_in) = (w.rows(), w.cols());
    if x.len() != d_in || a.shape() != [config.rank, d_in] || b.shape() != [d_out, config.rank] {
        return Err(Error::param(format!(
            "LoRA shapes do not fit: W {:?}, A {:?}, B {:?}, x {}",
            w.shape(),
            a.shape(),
            b.shape(),
            x.len()
        )));
    }
    let xv = Tensor::matrix(d_in, 1, x.to_vec())?;
    let base = w.matmul(&xv)?;
    let delta = b.matmul(&a.matmul(&xv)?)?;
    let s = config.scale();
    Ok(base
        .data()
        .iter()
        .zip(delta.data())
        .map(|(p, q)| p + s * q)
        .collect())
}

/// Row form `X·Wᵀ + s·((X·Aᵀ) ⊙ drop)·Bᵀ` on the tape; `drop` is an
/// inverted-dropout mask over the `(n, r)` intermediate, or `None` at inference.
pub fn lora_linear(
    tape: &mut Tape,
    x: Var,
    w: Var,
    ab: Option<(Var, Var)>,
    scale: f64,
    drop: Option<Vec<f64>>,
) -> Var {
    let base = tape.matmul_nt(x, w);
    let Some((a, b)) = ab else {
        return base;
    };
    let mut xa = tape.matmul_nt(x, a);
    if let Some(mask) = drop {
        xa = tape.mul_const(xa, mask);
    }
    let delta = tape.matmul_nt(xa, b);
    let delta = tape.scale(delta, scale);
    tape.add(base, delta)
}

/// Affine maps from skeleton-token space into the decoder embedding space.
/// Weights are stored `(d_model, d_in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionLayer {
    pub granularity: Granularity,
    pub input_dim: usize,
    pub output_dim: usize,
    pub params: Params,
}

pub const PROJ_SEM_W: &str = "proj.sem.w";
pub const PROJ_SEM_B: &str = "proj.sem.b";
pub const PROJ_SP_W: &str = "proj.sp.w";
pub const PROJ_SP_B: &str = "proj.sp.b";
pub const PROJ_TP_W: &str = "proj.tp.w";
pub const PROJ_TP_B: &str = "proj.tp.b";

impl ProjectionLayer {
    /// `input_dim` is the token width for semantic slots and the channel
    /// count for spatiotemporal slots.
    pub fn new(
        granularity: Granularity,
        input_dim: usize,
        output_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::param("projection dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let names: &[(&str, &str)] = match granularity {
            Granularity::Semantic => &[(PROJ_SEM_W, PROJ_SEM_B)],
            Granularity::Spatiotemporal => &[(PROJ_SP_W, PROJ_SP_B), (PROJ_TP_W, PROJ_TP_B)],
        };
        for (w, b) in names {
            params.insert(
                *w,
                Tensor::glorot(&[output_dim, input_dim], input_dim, output_dim, &mut rng),
            );
            params.insert(*b, Tensor::zeros(&[output_dim]));
        }
        Ok(Self {
            granularity,
            input_dim,
            output_dim,
            params,
        })
    }

    fn weights_for_slot(&self, spatial: bool) -> (&'static str, &'static str) {
        match (self.granularity, spatial) {
            (Granularity::Semantic, _) => (PROJ_SEM_W, PROJ_SEM_B),
            (Granularity::Spatiotemporal, true) => (PROJ_SP_W, PROJ_SP_B),
            (Granularity::Spatiotemporal, false) => (PROJ_TP_W, PROJ_TP_B),
        }
    }

    /// `W·token + b` for a single semantic-layout token.
    pub fn project(&self, token: &[f64]) -> Result<Vec<f64>> {
        if token.len() != self.input_dim {
            return Err(Error::param(format!(
                "token of width {} does not fit projection input {}",
                token.len(),
                self.input_dim
            )));
        }
        let (w, b) = self.weights_for_slot(false);
        let (w, b) = (self.params.get(w)?, self.params.get(b)?);
        Ok((0..self.output_dim)
            .map(|o| b.data()[o] + w.row(o).iter().zip(token).map(|(p, q)| p * q).sum::<f64>())
            .collect())
    }

    /// Projected slots `(slots, d_model)` on the tape.
    pub fn project_var(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        slots: &SkeletonSlots,
    ) -> Result<Var> {
        if slots.granularity != self.granularity || slots.width() != self.input_dim {
            return Err(Error::param(format!(
                "slots ({:?}, width {}) do not fit projection ({:?}, input {})",
                slots.granularity,
                slots.width(),
                self.granularity,
                self.input_dim
            )));
        }
        let n = slots.len();
        let mut parts = Vec::new();
        let ranges = match self.granularity {
            Granularity::Semantic => vec![(0, n, false)],
            Granularity::Spatiotemporal => vec![
                (0, slots.spatial_slots, true),
                (slots.spatial_slots, n, false),
            ],
        };
        for (start, end, spatial) in ranges {
            if start == end {
                continue;
            }
            let rows = Tensor::matrix(
                end - start,
                self.input_dim,
                slots.values.data()[start * self.input_dim..end * self.input_dim].to_vec(),
            )?;
            let x = tape.constant(rows);
            let (w, b) = self.weights_for_slot(spatial);
            let y = tape.matmul_nt(x, bound.var(w));
            parts.push(tape.add_row(y, bound.var(b)));
        }
        Ok(if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)
        })
    }
}
