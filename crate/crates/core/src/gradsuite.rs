//! Finite-difference gradient checks over every tape op, every layer and
//! both full training graphs, on small random inputs.

use ptm_tensor::rng::{stream, Stream, StreamRng};
use ptm_tensor::{grad_check_multi, grad_check_params, Coverage, Graph, Mode, ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    BatchLayout, BioCoupledFusion, DualGatedFusion, LayerNorm, Linear, LoraConfig, LoraLinear, Mlp2, PromptLayer,
    ResidualMlpHead, TransformerLayer,
};
use crate::crosstalk::{prompt_bias_batched, CrosstalkMatrix, PromptParams};
use crate::data::{PairSample, PeptideSample};
use crate::error::Result;
use crate::losses::{bce_loss, dice_loss, focal_loss, hybrid_loss, magnification_loss, LossParams};
use crate::models::{EspsModel, ExperimentConfig, MspnModel, PairInput};
use crate::residues::Eligibility;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Minimum distance from every relu/clamp kink at a probe point.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 200;

/// Result of one named check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub group: String,
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
    /// Parameter holding the worst coordinate, for layer and model checks.
    pub worst: Option<String>,
}

impl GradCase {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn random(rng: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Fixed random projection of `y` to a scalar, so every output coordinate
/// contributes a distinct weight.
fn project(tape: &mut Tape, y: Var, salt: u64) -> ptm_tensor::Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = stream(salt, Stream::Sub(3, 1));
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> ptm_tensor::Result<Var>>;

fn op(name: &str, shapes: &[&[usize]], range: (f64, f64), f: OpFn) -> (String, Vec<Vec<usize>>, (f64, f64), OpFn) {
    (name.to_string(), shapes.iter().map(|s| s.to_vec()).collect(), range, f)
}

/// Pushes values that sit too close to a relu/clamp kink away from it.
fn off_kink(t: Tensor, kinks: &[f64], gap: f64) -> Tensor {
    t.map(|v| {
        for &k in kinks {
            if (v - k).abs() < gap {
                return k + if v >= k { gap } else { -gap };
            }
        }
        v
    })
}

/// Every differentiable tape op, each on several random inputs.
#[allow(clippy::type_complexity)]
pub fn op_cases(seed: u64, trials: usize) -> Result<Vec<GradCase>> {
    let ops: Vec<(String, Vec<Vec<usize>>, (f64, f64), OpFn)> = vec![
        op(
            "add",
            &[&[3, 4], &[3, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        op(
            "sub",
            &[&[3, 4], &[3, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        op(
            "mul",
            &[&[3, 4], &[3, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        op(
            "div",
            &[&[3, 4], &[3, 4]],
            (0.5, 2.0),
            Box::new(|t, v| t.div(v[0], v[1])),
        ),
        op(
            "matmul",
            &[&[3, 4], &[4, 2]],
            (-2.0, 2.0),
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        op(
            "matmul_t",
            &[&[3, 4], &[5, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| t.matmul_t(v[0], v[1])),
        ),
        op(
            "bmm",
            &[&[2, 3, 4], &[2, 4, 2]],
            (-2.0, 2.0),
            Box::new(|t, v| t.bmm(v[0], v[1], false)),
        ),
        op(
            "bmm_t",
            &[&[2, 3, 4], &[2, 5, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| t.bmm(v[0], v[1], true)),
        ),
        op(
            "add_bias",
            &[&[3, 4], &[4]],
            (-2.0, 2.0),
            Box::new(|t, v| t.add_bias(v[0], v[1])),
        ),
        op(
            "concat_last",
            &[&[3, 4], &[3, 2]],
            (-2.0, 2.0),
            Box::new(|t, v| t.concat_last(v[0], v[1])),
        ),
        op(
            "mul_scalar",
            &[&[3, 4], &[1]],
            (-2.0, 2.0),
            Box::new(|t, v| t.mul_scalar(v[0], v[1])),
        ),
        op("scale", &[&[3, 4]], (-2.0, 2.0), Box::new(|t, v| t.scale(v[0], -1.7))),
        op("neg", &[&[3, 4]], (-2.0, 2.0), Box::new(|t, v| t.neg(v[0]))),
        op(
            "add_const",
            &[&[3, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| t.add_const(v[0], 0.3)),
        ),
        op("sigmoid", &[&[3, 4]], (-3.0, 3.0), Box::new(|t, v| t.sigmoid(v[0]))),
        op("tanh", &[&[3, 4]], (-2.0, 2.0), Box::new(|t, v| t.tanh(v[0]))),
        op("relu", &[&[3, 4]], (-2.0, 2.0), Box::new(|t, v| t.relu(v[0]))),
        op("softplus", &[&[3, 4]], (-4.0, 4.0), Box::new(|t, v| t.softplus(v[0]))),
        op("ln", &[&[3, 4]], (0.2, 3.0), Box::new(|t, v| t.ln(v[0]))),
        op("powf", &[&[3, 4]], (0.2, 2.0), Box::new(|t, v| t.powf(v[0], 2.0))),
        op(
            "clamp",
            &[&[3, 4]],
            (-1.0, 2.0),
            Box::new(|t, v| t.clamp(v[0], 0.0, 1.0)),
        ),
        op(
            "softmax_lastdim",
            &[&[3, 4]],
            (-3.0, 3.0),
            Box::new(|t, v| t.softmax_lastdim(v[0])),
        ),
        op("sum", &[&[3, 4]], (-2.0, 2.0), Box::new(|t, v| t.sum(v[0]))),
        op("mean", &[&[3, 4]], (-2.0, 2.0), Box::new(|t, v| t.mean(v[0]))),
        op("sum_rows", &[&[3, 4]], (-2.0, 2.0), Box::new(|t, v| t.sum_rows(v[0]))),
        op(
            "mean_rows_grouped",
            &[&[6, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| t.mean_rows_grouped(v[0], 3)),
        ),
        op(
            "reshape",
            &[&[3, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| t.reshape(v[0], [2, 6])),
        ),
        op(
            "gather_rows",
            &[&[3, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 1])),
        ),
        op(
            "split_heads",
            &[&[6, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| t.split_heads(v[0], 2, 3, 2)),
        ),
        op(
            "merge_heads",
            &[&[4, 3, 2]],
            (-2.0, 2.0),
            Box::new(|t, v| t.merge_heads(v[0], 2, 3, 2)),
        ),
        op(
            "repeat_groups",
            &[&[2, 3, 3]],
            (-2.0, 2.0),
            Box::new(|t, v| t.repeat_groups(v[0], 3)),
        ),
        op(
            "layer_norm",
            &[&[3, 5], &[5], &[5]],
            (-2.0, 2.0),
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        op(
            "dropout",
            &[&[3, 4]],
            (-2.0, 2.0),
            Box::new(|t, v| {
                let mut rng = stream(5, Stream::Dropout);
                t.dropout(v[0], 0.3, Mode::Train, &mut rng)
            }),
        ),
    ];
    let mut rng = stream(seed, Stream::Sub(3, 0));
    let mut out = Vec::new();
    for (k, (name, shapes, (lo, hi), f)) in ops.iter().enumerate() {
        let mut worst = 0.0f64;
        let mut coords = 0;
        for trial in 0..trials {
            let xs: Vec<Tensor> = shapes
                .iter()
                .map(|s| off_kink(random(&mut rng, s, *lo, *hi), &[0.0, 1.0], 1e-3))
                .collect();
            coords += xs.iter().map(Tensor::numel).sum::<usize>();
            let salt = (k * 1000 + trial) as u64;
            let err = grad_check_multi(
                |t, v| {
                    let y = f(t, v)?;
                    project(t, y, salt)
                },
                &xs,
                EPS,
            )?;
            worst = worst.max(err);
        }
        out.push(GradCase {
            group: "op".into(),
            name: name.clone(),
            max_rel_err: worst,
            coords,
            worst: None,
        });
    }
    Ok(out)
}

/// Perturbs every trainable value by a random offset so no gradient is
/// identically zero at the probe point (zero-initialised adapters would
/// otherwise hide their partner's gradient).
pub fn randomize(store: &mut ParamStore, rng: &mut StreamRng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.is_trainable(id) {
            for v in store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
}

/// Redraws the perturbation of `base` until the probe point keeps every
/// kink at least [`KINK_MARGIN`] away.
pub fn settle(base: &ParamStore, rng: &mut StreamRng, f: impl Fn(&mut Graph) -> Result<Var>) -> Result<ParamStore> {
    for _ in 0..MAX_DRAWS {
        let mut s = base.clone();
        randomize(&mut s, rng);
        let mut g = Graph::new(&s, Mode::Eval, 0);
        f(&mut g)?;
        if g.tape.kink_margin() >= KINK_MARGIN {
            return Ok(s);
        }
    }
    Err(crate::Error::Numeric(format!(
        "no probe point keeps relu inputs {KINK_MARGIN} away from zero"
    )))
}

fn param_case(group: &str, name: &str, store: &ParamStore, f: impl Fn(&mut Graph) -> Result<Var>) -> Result<GradCase> {
    let check = grad_check_params(
        store,
        |g| f(g).map_err(|e| ptm_tensor::TensorError::Invalid(e.to_string())),
        EPS,
        Coverage::All,
    )?;
    Ok(GradCase {
        group: group.into(),
        name: name.into(),
        max_rel_err: check.max_rel_err,
        coords: check.coords_checked,
        worst: check.worst_param,
    })
}

fn toy_prior(c: usize, rng: &mut StreamRng) -> CrosstalkMatrix {
    let mut m = CrosstalkMatrix::zeros((0..c).map(|i| format!("t{i}")).collect());
    for i in 0..c {
        for j in (i + 1)..c {
            let v = rng.random_range(-1.0..1.0);
            m.npmi[i][j] = v;
            m.npmi[j][i] = v;
        }
    }
    m
}

fn scalar_out(g: &mut Graph, y: Var, salt: u64) -> Result<Var> {
    Ok(project(&mut g.tape, y, salt)?)
}

/// Every layer with all of its trainable parameters probed.
#[allow(clippy::type_complexity)]
pub fn block_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = stream(seed, Stream::Sub(3, 2));
    let mut out = Vec::new();
    let (n, l, d) = (2usize, 5usize, 8usize);
    let x = random(&mut rng, &[n * l, d], -1.0, 1.0);
    // Second sequence has its last two residues padded.
    let mut valid = vec![true; n * l];
    valid[n * l - 1] = false;
    valid[n * l - 2] = false;
    let layout = BatchLayout { n, l, valid };

    macro_rules! case {
        ($name:expr, $build:expr, $fwd:expr) => {{
            let mut store = ParamStore::new();
            let mut init = stream(seed, Stream::Init);
            #[allow(clippy::redundant_closure_call)]
            let block = ($build)(&mut store, &mut init);
            let salt = out.len() as u64;
            let xc = x.clone();
            let f = |g: &mut Graph| {
                let xv = g.input(xc.clone());
                #[allow(clippy::redundant_closure_call)]
                let y = ($fwd)(g, &block, xv)?;
                scalar_out(g, y, salt)
            };
            let store = settle(&store, &mut rng, f)?;
            let case = param_case("block", $name, &store, f)?;
            out.push(case);
        }};
    }

    case!(
        "linear",
        |s: &mut ParamStore, r: &mut StreamRng| Linear::new(s, r, "lin", d, 3, true, true),
        |g: &mut Graph, b: &Linear, x| b.forward(g, x)
    );
    case!(
        "lora_linear",
        |s: &mut ParamStore, r: &mut StreamRng| {
            let cfg = LoraConfig {
                rank: 2,
                alpha: 4.0,
                dropout: 0.1,
            };
            LoraLinear::new(s, r, "lora", d, 4, true, false, Some(&cfg))
        },
        |g: &mut Graph, b: &LoraLinear, x| b.forward(g, x, true, "lora")
    );
    case!(
        "mlp2",
        |s: &mut ParamStore, r: &mut StreamRng| Mlp2::new(s, r, "mlp", d, 6, 3),
        |g: &mut Graph, b: &Mlp2, x| b.forward(g, x)
    );
    case!(
        "layer_norm",
        |s: &mut ParamStore, _r: &mut StreamRng| LayerNorm::new(s, "ln", d, true),
        |g: &mut Graph, b: &LayerNorm, x| b.forward(g, x)
    );
    case!(
        "residual_mlp_head",
        |s: &mut ParamStore, r: &mut StreamRng| ResidualMlpHead::new(s, r, "head", d, 6, 3),
        |g: &mut Graph, b: &ResidualMlpHead, x| b.forward(g, x)
    );
    case!(
        "bio_coupled_fusion",
        |s: &mut ParamStore, r: &mut StreamRng| BioCoupledFusion::new(s, r, "fuse", 5, 3),
        |g: &mut Graph, b: &BioCoupledFusion, x| {
            let xp = g.input(random(&mut stream(seed, Stream::Sub(3, 3)), &[4, 5], -1.0, 1.0));
            let xa = g.input(random(&mut stream(seed, Stream::Sub(3, 4)), &[4, 3], -1.0, 1.0));
            let _ = x;
            b.forward(g, xp, xa)
        }
    );
    case!(
        "dual_gated_fusion",
        |s: &mut ParamStore, r: &mut StreamRng| DualGatedFusion::new(s, r, "dual", 4),
        |g: &mut Graph, b: &DualGatedFusion, x| {
            let hs = g.input(random(&mut stream(seed, Stream::Sub(3, 5)), &[3, 4], -1.0, 1.0));
            let he = g.input(random(&mut stream(seed, Stream::Sub(3, 6)), &[3, 4], -1.0, 1.0));
            let _ = x;
            b.forward(g, hs, he)
        }
    );
    let lay = layout.clone();
    case!(
        "transformer_layer",
        |s: &mut ParamStore, r: &mut StreamRng| {
            let cfg = LoraConfig {
                rank: 2,
                alpha: 4.0,
                dropout: 0.1,
            };
            TransformerLayer::new(s, r, "tf", d, 2, 12, true, Some(&cfg))
        },
        |g: &mut Graph, b: &TransformerLayer, x| b.forward(g, x, &lay, None, true)
    );
    let lay = layout.clone();
    let prior = toy_prior(3, &mut rng);
    case!(
        "prompt_layer",
        |s: &mut ParamStore, r: &mut StreamRng| PromptLayer::new(s, r, "pl", d, 2, 12, 3, 0.5, 0.1),
        |g: &mut Graph, b: &PromptLayer, x| {
            let pv = g.input(prior.to_tensor());
            crate::blocks::prompt_transformer_layer(g, b, x, pv, &lay)
        }
    );
    let prior = toy_prior(3, &mut rng);
    case!(
        "prompt_bias",
        |s: &mut ParamStore, _r: &mut StreamRng| {
            let logits = s.add("logits", Tensor::zeros([n * l, 3]), true);
            (logits, PromptParams::init(s, "prompt", 3, 0.5, 0.1))
        },
        |g: &mut Graph, b: &(ParamId, PromptParams), x| {
            let _ = x;
            let z = g.param(b.0);
            let p = g.tape.softmax_lastdim(z)?;
            let pv = g.input(prior.to_tensor());
            let a = g.param(b.1.proj_a);
            let bb = g.param(b.1.proj_b);
            let r = crate::crosstalk::project_prior(&mut g.tape, pv, a, bb)?;
            prompt_bias_batched(g, p, n, l, r, &b.1, "prompt")
        }
    );

    // Losses, with the prediction itself as the probed parameter.
    let labels = Tensor::from_fn([6, 3], |i| f64::from(u8::from((i * 7 + 3) % 5 < 2)));
    let loss_cases: Vec<(&str, Box<dyn Fn(&mut Graph, Var, &LossParams) -> Result<Var>>)> = vec![
        (
            "dice_loss",
            Box::new(|g: &mut Graph, z: Var, _p: &LossParams| {
                let p = g.tape.sigmoid(z)?;
                dice_loss(&mut g.tape, p, &labels, 1.0)
            }),
        ),
        (
            "focal_loss",
            Box::new(|g: &mut Graph, z: Var, _p: &LossParams| {
                let p = g.tape.sigmoid(z)?;
                focal_loss(&mut g.tape, p, &labels, 2.0)
            }),
        ),
        (
            "magnification_loss",
            Box::new(|g: &mut Graph, z: Var, _p: &LossParams| magnification_loss(&mut g.tape, z)),
        ),
        (
            "hybrid_loss",
            Box::new(|g: &mut Graph, z: Var, p: &LossParams| hybrid_loss(g, z, &labels, p)),
        ),
        (
            "bce_loss",
            Box::new(|g: &mut Graph, z: Var, _p: &LossParams| bce_loss(&mut g.tape, z, &labels)),
        ),
    ];
    for (name, f) in &loss_cases {
        let mut store = ParamStore::new();
        let z = store.add("logits", random(&mut rng, &[6, 3], -2.0, 2.0), true);
        let lp = LossParams::init(&mut store, "loss");
        let run = |g: &mut Graph| {
            let zv = g.param(z);
            f(g, zv, &lp)
        };
        let store = settle(&store, &mut rng, run)?;
        out.push(param_case("loss", name, &store, run)?);
    }
    Ok(out)
}

/// Small model config for the full-graph checks.
pub fn toy_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        types: vec![
            "phosphorylation".into(),
            "acetylation".into(),
            "methylation".into(),
            "n_linked_glycosylation".into(),
        ],
        ..ExperimentConfig::default()
    };
    c.model.d_model = 8;
    c.model.heads = 2;
    c.model.ff_hidden = 12;
    c.model.head_hidden = 8;
    c.model.chem_embed_dim = 4;
    c.model.lora.rank = 2;
    c.model.lora.alpha = 4.0;
    c.model.max_len = 15;
    // A unit prompt scale keeps prompt-path gradients well above the
    // finite-difference rounding floor of an O(1) loss.
    c.model.prompt_alpha = 1.0;
    c.train.seed = seed;
    c.stage2.seed = seed;
    c
}

pub fn toy_prior_for(config: &ExperimentConfig, rng: &mut StreamRng) -> CrosstalkMatrix {
    let mut m = toy_prior(config.types.len(), rng);
    m.labels = config.types.clone();
    m
}

/// A 2 × 10 toy batch; the second peptide is shorter and gets padded.
pub fn toy_peptides(eligibility: &Eligibility) -> Vec<PeptideSample> {
    let mk = |seq: &str, pos: &[(usize, usize)]| {
        let c = eligibility.num_types();
        let mut labels = vec![vec![0u8; c]; seq.len()];
        for &(i, t) in pos {
            labels[i][t] = 1;
        }
        PeptideSample {
            parent_id: "toy".into(),
            window_start: 1,
            sequence: seq.into(),
            labels,
            site_mask: seq
                .bytes()
                .map(|r| (0..c).any(|t| eligibility.is_eligible(t, r)))
                .collect(),
            assigned_sites: vec![],
        }
    };
    vec![
        mk("MRRASPGKSN", &[(4, 0), (7, 1)]),
        mk("GKTDNGSRG", &[(1, 1), (4, 3), (7, 2)]),
    ]
}

/// Full Stage-1 objective and Stage-2 objective over random parameters.
pub fn model_cases(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = stream(seed, Stream::Sub(3, 7));
    let config = toy_config(seed);
    let prior = toy_prior_for(&config, &mut rng);
    let mut stage1 = MspnModel::new(&config, prior, None)?;
    let batch = toy_peptides(&stage1.eligibility);
    stage1.store = settle(&stage1.store, &mut rng, |g| stage1.net.loss(g, &batch))?;
    let mut out = vec![param_case("model", "stage1_hybrid_loss", &stage1.store, |g| {
        stage1.net.loss(g, &batch)
    })?];

    let mut stage2 = EspsModel::from_stage1(&stage1, &config)?;
    let pairs: Vec<PairSample> = ["MRRASPGKSNLLAKQ", "XXXXMRRASPGKSNL", "GKTDNGSRGAAAKRR"]
        .iter()
        .enumerate()
        .map(|(i, s)| PairSample {
            substrate_id: format!("s{i}"),
            substrate_peptide: (*s).into(),
            center_position: 8,
            enzyme_id: format!("e{i}"),
            enzyme_sequence: ["MKKLLRRSSTT", "ACDEFGHIKLMNPQRSTVWY", "WWWWKKKK"][i].into(),
            ptm_type: 0,
            label: u8::from(i != 1),
        })
        .collect();
    let inputs: Vec<PairInput> = pairs.iter().map(PairInput::from).collect();
    let labels = Tensor::new([pairs.len(), 1], pairs.iter().map(|p| f64::from(p.label)).collect())?;
    let run = |g: &mut Graph, m: &EspsModel| {
        let z = m.forward(g, &inputs)?;
        bce_loss(&mut g.tape, z, &labels)
    };
    stage2.store = settle(&stage2.store, &mut rng, |g| run(g, &stage2))?;
    out.push(param_case("model", "stage2_bce_loss", &stage2.store, |g| {
        run(g, &stage2)
    })?);
    Ok(out)
}

/// Runs every group.
pub fn run_all(seed: u64) -> Result<Vec<GradCase>> {
    let mut v = op_cases(seed, 5)?;
    v.extend(block_cases(seed)?);
    v.extend(model_cases(seed)?);
    Ok(v)
}
