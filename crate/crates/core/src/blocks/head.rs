use ptm_tensor::rng::StreamRng;
use ptm_tensor::{Graph, ParamStore, Var};

use super::linear::{Linear, Mlp2};
use crate::error::Result;

/// `W2·relu(W1·h) + P·h`, with `P` the identity when input and output
/// widths agree.
#[derive(Clone, Debug)]
pub struct ResidualMlpHead {
    pub mlp: Mlp2,
    pub skip: Option<Linear>,
}

impl ResidualMlpHead {
    pub fn new(store: &mut ParamStore, rng: &mut StreamRng, name: &str, d: usize, hidden: usize, out: usize) -> Self {
        Self {
            mlp: Mlp2::new(store, rng, &format!("{name}.mlp"), d, hidden, out),
            skip: (d != out).then(|| Linear::new(store, rng, &format!("{name}.skip"), d, out, false, true)),
        }
    }

    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let y = self.mlp.forward(g, h)?;
        let s = match &self.skip {
            Some(p) => p.forward(g, h)?,
            None => h,
        };
        Ok(g.tape.add(y, s)?)
    }
}
