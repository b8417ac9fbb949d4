use ptm_tensor::rng::StreamRng;
use ptm_tensor::{Graph, ParamStore, Tensor, Var};

use super::linear::{LayerNorm, Linear, LoraConfig, LoraLinear, Mlp2};
use crate::crosstalk::{project_prior, prompt_bias_batched, PromptParams};
use crate::error::{data_err, Result};

/// Additive logit offset that removes padded keys from attention.
pub const MASK_VALUE: f64 = -1e9;

/// Batch geometry shared by every layer of one forward pass.
#[derive(Clone, Debug)]
pub struct BatchLayout {
    pub n: usize,
    pub l: usize,
    /// `valid[b·l + i]` is false for padding.
    pub valid: Vec<bool>,
}

impl BatchLayout {
    pub fn dense(n: usize, l: usize) -> Self {
        Self {
            n,
            l,
            valid: vec![true; n * l],
        }
    }

    pub fn has_padding(&self) -> bool {
        self.valid.iter().any(|v| !v)
    }

    /// `[n·h × l × l]` key mask, or `None` without padding.
    pub fn key_mask(&self, heads: usize) -> Option<Tensor> {
        if !self.has_padding() {
            return None;
        }
        let (n, l) = (self.n, self.l);
        let mut data = vec![0.0; n * heads * l * l];
        for b in 0..n {
            for h in 0..heads {
                for i in 0..l {
                    for j in 0..l {
                        if !self.valid[b * l + j] {
                            data[((b * heads + h) * l + i) * l + j] = MASK_VALUE;
                        }
                    }
                }
            }
        }
        Some(Tensor::new([n * heads, l, l], data).expect("mask shape"))
    }

    /// `[n·l × d]` matrix of ones on valid rows and zeros on padding.
    pub fn row_mask(&self, d: usize) -> Tensor {
        Tensor::from_fn([self.n * self.l, d], |i| if self.valid[i / d] { 1.0 } else { 0.0 })
    }

    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.valid.len()).filter(|&i| self.valid[i]).collect()
    }
}

/// Zeroes padded rows so they carry no signal downstream.
pub fn zero_padding(g: &mut Graph, x: Var, layout: &BatchLayout) -> Result<Var> {
    if !layout.has_padding() {
        return Ok(x);
    }
    let d = g.value(x).last_dim();
    let m = g.input(layout.row_mask(d));
    Ok(g.tape.mul(x, m)?)
}

/// Multi-head scaled dot-product attention over `[n·l × d]` inputs with
/// an optional per-sequence `[n × l × l]` bias shared by every head.
pub fn multi_head_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    layout: &BatchLayout,
    bias: Option<Var>,
) -> Result<Var> {
    let (n, l) = (layout.n, layout.l);
    let d = g.value(q).last_dim();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(data_err(format!("model dim {d} not divisible by {heads} heads")));
    }
    let qh = g.tape.split_heads(q, n, l, heads)?;
    let kh = g.tape.split_heads(k, n, l, heads)?;
    let vh = g.tape.split_heads(v, n, l, heads)?;
    let s = g.tape.bmm(qh, kh, true)?;
    let mut s = g.tape.scale(s, 1.0 / ((d / heads) as f64).sqrt())?;
    if let Some(b) = bias {
        let rb = g.tape.repeat_groups(b, heads)?;
        s = g.tape.add(s, rb)?;
    }
    if let Some(mask) = layout.key_mask(heads) {
        let m = g.input(mask);
        s = g.tape.add(s, m)?;
    }
    let w = g.tape.softmax_lastdim(s)?;
    let o = g.tape.bmm(w, vh, false)?;
    Ok(g.tape.merge_heads(o, n, l, heads)?)
}

/// Pre-norm transformer layer whose q/k/v projections may carry adapters.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub name: String,
    pub heads: usize,
    pub ln1: LayerNorm,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff: Mlp2,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        name: &str,
        d: usize,
        heads: usize,
        ff_hidden: usize,
        trainable: bool,
        lora: Option<&LoraConfig>,
    ) -> Self {
        let ff = Mlp2::new(store, rng, &format!("{name}.ff"), d, ff_hidden, d);
        for id in ff.params() {
            store.set_trainable(id, trainable);
        }
        Self {
            name: name.to_string(),
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, trainable),
            q: LoraLinear::new(store, rng, &format!("{name}.q"), d, d, true, trainable, lora),
            k: LoraLinear::new(store, rng, &format!("{name}.k"), d, d, false, trainable, lora),
            v: LoraLinear::new(store, rng, &format!("{name}.v"), d, d, true, trainable, lora),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, true, trainable),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, trainable),
            ff,
        }
    }

    /// `h + Attn(LN(h), B)` followed by `+ FF(LN(·))`; padded rows are zeroed.
    pub fn forward(
        &self,
        g: &mut Graph,
        h: Var,
        layout: &BatchLayout,
        bias: Option<Var>,
        use_adapters: bool,
    ) -> Result<Var> {
        let x = self.ln1.forward(g, h)?;
        let q = self.q.forward(g, x, use_adapters, &format!("{}.q.lora", self.name))?;
        let k = self.k.forward(g, x, use_adapters, &format!("{}.k.lora", self.name))?;
        let v = self.v.forward(g, x, use_adapters, &format!("{}.v.lora", self.name))?;
        let a = multi_head_attention(g, q, k, v, self.heads, layout, bias)?;
        let a = self.o.forward(g, a)?;
        let h1 = g.tape.add(h, a)?;
        let x2 = self.ln2.forward(g, h1)?;
        let f = self.ff.forward(g, x2)?;
        let h2 = g.tape.add(h1, f)?;
        zero_padding(g, h2, layout)
    }

    pub fn adapter_params(&self) -> Vec<ptm_tensor::ParamId> {
        [&self.q, &self.k, &self.v]
            .iter()
            .flat_map(|l| l.adapter_params())
            .collect()
    }
}

/// Transformer layer whose attention logits receive the crosstalk prompt.
#[derive(Clone, Debug)]
pub struct PromptLayer {
    pub layer: TransformerLayer,
    /// Preliminary per-residue type classifier.
    pub predictor: Linear,
    pub prompt: PromptParams,
}

impl PromptLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut StreamRng,
        name: &str,
        d: usize,
        heads: usize,
        ff_hidden: usize,
        num_types: usize,
        prompt_alpha: f64,
        prompt_dropout: f64,
    ) -> Self {
        Self {
            layer: TransformerLayer::new(store, rng, name, d, heads, ff_hidden, true, None),
            predictor: Linear::new(store, rng, &format!("{name}.predictor"), d, num_types, true, true),
            prompt: PromptParams::init(
                store,
                &format!("{name}.prompt"),
                num_types,
                prompt_alpha,
                prompt_dropout,
            ),
        }
    }

    /// Preliminary type distributions `softmax(predictor(h))`.
    pub fn preliminary(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let logits = self.predictor.forward(g, h)?;
        Ok(g.tape.softmax_lastdim(logits)?)
    }

    /// Prompt bias `[n × l × l]` from distributions `p` and the prior.
    pub fn bias_from(&self, g: &mut Graph, p: Var, prior: Var, layout: &BatchLayout) -> Result<Var> {
        let a = g.param(self.prompt.proj_a);
        let b = g.param(self.prompt.proj_b);
        let r = project_prior(&mut g.tape, prior, a, b)?;
        let site = format!("{}.prompt", self.layer.name);
        prompt_bias_batched(g, p, layout.n, layout.l, r, &self.prompt, &site)
    }

    pub fn forward(&self, g: &mut Graph, h: Var, layout: &BatchLayout, bias: Option<Var>) -> Result<Var> {
        self.layer.forward(g, h, layout, bias, false)
    }
}

/// One complete prompted layer: preliminary distributions from `h`, the
/// bias they induce through `prior`, then biased attention and feed-forward.
pub fn prompt_transformer_layer(
    g: &mut Graph,
    layer: &PromptLayer,
    h: Var,
    prior: Var,
    layout: &BatchLayout,
) -> Result<Var> {
    let p = layer.preliminary(g, h)?;
    let b = layer.bias_from(g, p, prior, layout)?;
    layer.forward(g, h, layout, Some(b))
}
