use ptm_tensor::rng::StreamRng;
use ptm_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Uniform `±1/√fan_in` initialization.
pub fn uniform_init(rng: &mut StreamRng, shape: [usize; 2], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

/// `y = x Wᵀ + b` with `W` stored as `[d_out × d_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        trainable: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, [d_out, d_in], d_in),
            trainable,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([d_out]), trainable));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.tape.matmul_t(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                Ok(g.tape.add_bias(y, b)?)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Low-rank adapter `scale · B(A(dropout(x)))` with `B` starting at zero.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            dropout: 0.1,
        }
    }
}

/// A frozen-or-trainable base linear map with an optional adapter.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    pub base: Linear,
    pub adapter: Option<LoraAdapter>,
}

impl LoraLinear {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        base_trainable: bool,
        lora: Option<&LoraConfig>,
    ) -> Self {
        let base = Linear::new(store, rng, name, d_in, d_out, bias, base_trainable);
        let adapter = lora.map(|cfg| LoraAdapter {
            a: store.add(
                format!("{name}.lora_a"),
                uniform_init(rng, [cfg.rank, d_in], d_in),
                true,
            ),
            b: store.add(format!("{name}.lora_b"), Tensor::zeros([d_out, cfg.rank]), true),
            rank: cfg.rank,
            scale: cfg.alpha / cfg.rank as f64,
            dropout: cfg.dropout,
        });
        Self { base, adapter }
    }

    /// `use_adapter = false` evaluates the base map alone.
    pub fn forward(&self, g: &mut Graph, x: Var, use_adapter: bool, site: &str) -> Result<Var> {
        let y = self.base.forward(g, x)?;
        let Some(ad) = self.adapter.as_ref().filter(|_| use_adapter) else {
            return Ok(y);
        };
        let xd = g.dropout(x, ad.dropout, site)?;
        let a = g.param(ad.a);
        let b = g.param(ad.b);
        let t = g.tape.matmul_t(xd, a)?;
        let u = g.tape.matmul_t(t, b)?;
        let u = g.tape.scale(u, ad.scale)?;
        Ok(g.tape.add(y, u)?)
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.adapter.iter().flat_map(|a| [a.a, a.b]).collect()
    }
}

/// Two linear layers with a relu between them.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.0"), d_in, hidden, true, true),
            l2: Linear::new(store, rng, &format!("{name}.1"), hidden, d_out, true, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.tape.relu(h)?;
        self.l2.forward(g, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.l1.params();
        p.extend(self.l2.params());
        p
    }
}

/// Affine layer normalization over the trailing axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, d: usize, trainable: bool) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones([d]), trainable),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([d]), trainable),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        Ok(g.tape.layer_norm(x, gain, bias, Self::EPS)?)
    }
}
