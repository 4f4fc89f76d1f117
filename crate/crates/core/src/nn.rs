//! Parameterised layers shared by the correlation, fusion and decoder stacks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Creates named parameters with seeded initialisation.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    std: f32,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, std: f32) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            std,
        }
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        let t = Tensor::randn(shape, self.std, &mut self.rng);
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId> {
        self.store.add(name, Tensor::filled(shape, 1.0))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let w = pb.normal(&format!("{name}.w"), vec![in_dim, out_dim])?;
        let b = if bias {
            Some(pb.zeros(&format!("{name}.b"), vec![out_dim])?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// `x · W (+ b)` row-wise.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w)?;
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: pb.ones(&format!("{name}.gamma"), vec![dim])?,
            beta: pb.zeros(&format!("{name}.beta"), vec![dim])?,
            eps,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Two affine maps around a GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(pb, &format!("{name}.up"), dim, dim * ratio, true)?,
            down: Linear::new(pb, &format!("{name}.down"), dim * ratio, dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}
