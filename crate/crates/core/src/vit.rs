//! Vision Transformer over rasterized waveforms.
//!
//! ```text
//! patches (N × P²C) ─E─▶ [cls; x·E] + E_pos
//!   ─▶ L × { z' = MSA(LN(z)) + z ; z = MLP(LN(z')) + z' }
//!   ─▶ LN(z[0]) ─head─▶ logits ─▶ softmax
//! ```

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tape::{normal_cdf, softmax_in_place, Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    /// Layer norm on the class token before the head.
    pub final_norm: bool,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl Default for ViTConfig {
    /// ViT-Base/16 on 224×224 grayscale input with 17 classes.
    fn default() -> Self {
        ViTConfig {
            image_height: 224,
            image_width: 224,
            channels: 1,
            patch_size: 16,
            dim: 768,
            layers: 12,
            heads: 12,
            mlp_ratio: 4,
            num_classes: 17,
            final_norm: true,
            ln_eps: 1e-6,
            init_seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return Err(Error::Config(format!(
                "{}x{} image is not divisible into {p}x{p} patches",
                self.image_height, self.image_width
            )));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden width {} does not split into {} heads",
                self.dim, self.heads
            )));
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "channels, mlp ratio and class count must be positive".into(),
            ));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config(format!("ln_eps = {}", self.ln_eps)));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.image_height * self.image_width / (self.patch_size * self.patch_size)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }
}

/// Splits an `H×W×C` grid into `N` row-major patches, each flattened
/// row-major with channels innermost. Returns `N × P²C`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w, c) = grid_dims(image)?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} grid is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let len = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * len);
    for pr in 0..gh {
        for pc in 0..gw {
            for r in 0..patch {
                let start = ((pr * patch + r) * w + pc * patch) * c;
                out.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, len], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, height: usize, width: usize, channels: usize, patch: usize) -> Result<Tensor> {
    let (n, len) = patches.as_matrix("unpatchify")?;
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) || n * len != height * width * channels {
        return Err(Error::Shape(format!(
            "{n} patches of {len} values do not tile a {height}x{width}x{channels} grid"
        )));
    }
    let gw = width / patch;
    let mut out = vec![0.0; height * width * channels];
    for (i, p) in patches.data().chunks_exact(len).enumerate() {
        let (pr, pc) = (i / gw, i % gw);
        for r in 0..patch {
            let start = ((pr * patch + r) * width + pc * patch) * channels;
            out[start..start + patch * channels]
                .copy_from_slice(&p[r * patch * channels..(r + 1) * patch * channels]);
        }
    }
    Tensor::new(vec![height, width, channels], out)
}

fn grid_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        [h, w] => Ok((h, w, 1)),
        _ => Err(Error::Shape(format!(
            "expected an H×W×C grid, got shape {:?}",
            image.shape()
        ))),
    }
}

/// Weights of one encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub norm1_gamma: T,
    pub norm1_beta: T,
    pub query_weight: T,
    pub query_bias: T,
    pub key_weight: T,
    pub key_bias: T,
    pub value_weight: T,
    pub value_bias: T,
    pub out_weight: T,
    pub out_bias: T,
    pub norm2_gamma: T,
    pub norm2_beta: T,
    pub fc1_weight: T,
    pub fc1_bias: T,
    pub fc2_weight: T,
    pub fc2_bias: T,
}

impl<T> LayerWeights<T> {
    const NAMES: [&'static str; 16] = [
        "norm1.gamma",
        "norm1.beta",
        "attn.query.weight",
        "attn.query.bias",
        "attn.key.weight",
        "attn.key.bias",
        "attn.value.weight",
        "attn.value.bias",
        "attn.out.weight",
        "attn.out.bias",
        "norm2.gamma",
        "norm2.beta",
        "mlp.fc1.weight",
        "mlp.fc1.bias",
        "mlp.fc2.weight",
        "mlp.fc2.bias",
    ];

    fn refs(&self) -> [&T; 16] {
        [
            &self.norm1_gamma,
            &self.norm1_beta,
            &self.query_weight,
            &self.query_bias,
            &self.key_weight,
            &self.key_bias,
            &self.value_weight,
            &self.value_bias,
            &self.out_weight,
            &self.out_bias,
            &self.norm2_gamma,
            &self.norm2_beta,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.norm1_gamma,
            &mut self.norm1_beta,
            &mut self.query_weight,
            &mut self.query_bias,
            &mut self.key_weight,
            &mut self.key_bias,
            &mut self.value_weight,
            &mut self.value_bias,
            &mut self.out_weight,
            &mut self.out_bias,
            &mut self.norm2_gamma,
            &mut self.norm2_beta,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("weight iterator ran short");
        LayerWeights {
            norm1_gamma: next(),
            norm1_beta: next(),
            query_weight: next(),
            query_bias: next(),
            key_weight: next(),
            key_bias: next(),
            value_weight: next(),
            value_bias: next(),
            out_weight: next(),
            out_bias: next(),
            norm2_gamma: next(),
            norm2_beta: next(),
            fc1_weight: next(),
            fc1_bias: next(),
            fc2_weight: next(),
            fc2_bias: next(),
        }
    }
}

/// Every trainable tensor of the model, generic over what is stored per
/// tensor: values, tape handles, gradients or optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// Patch projection `E`, `P²C × D`.
    pub patch_embed: T,
    /// Position embeddings `E_pos`, `(N+1) × D`.
    pub pos_embed: T,
    /// Class token, `1 × D`.
    pub cls_token: T,
    pub layers: Vec<LayerWeights<T>>,
    pub norm_gamma: T,
    pub norm_beta: T,
    /// Head, `D × K`.
    pub head_weight: T,
    pub head_bias: T,
}

pub type ModelParams = Weights<Tensor>;

impl<T> Weights<T> {
    /// Canonical tensor names, in canonical order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec![
            "patch_embed.weight".to_string(),
            "pos_embed".to_string(),
            "cls_token".to_string(),
        ];
        for i in 0..self.layers.len() {
            names.extend(LayerWeights::<T>::NAMES.iter().map(|n| format!("encoder.{i}.{n}")));
        }
        names.extend(
            ["norm.gamma", "norm.beta", "head.weight", "head.bias"]
                .iter()
                .map(|s| s.to_string()),
        );
        names
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        [&self.patch_embed, &self.pos_embed, &self.cls_token]
            .into_iter()
            .chain(self.layers.iter().flat_map(|l| l.refs()))
            .chain([&self.norm_gamma, &self.norm_beta, &self.head_weight, &self.head_bias])
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut T> {
        [&mut self.patch_embed, &mut self.pos_embed, &mut self.cls_token]
            .into_iter()
            .chain(self.layers.iter_mut().flat_map(|l| l.refs_mut()))
            .chain([
                &mut self.norm_gamma,
                &mut self.norm_beta,
                &mut self.head_weight,
                &mut self.head_bias,
            ])
    }

    pub fn named(&self) -> impl Iterator<Item = (String, &T)> {
        self.names().into_iter().zip(self.iter())
    }

    pub fn count(&self) -> usize {
        3 + 16 * self.layers.len() + 4
    }

    /// Rebuilds a structure from tensors in canonical order.
    pub fn from_ordered(layers: usize, items: Vec<T>) -> Result<Self> {
        if items.len() != 3 + 16 * layers + 4 {
            return Err(Error::Shape(format!(
                "{layers}-layer model has {} tensors, got {}",
                3 + 16 * layers + 4,
                items.len()
            )));
        }
        let mut it = items.into_iter();
        let patch_embed = it.next().unwrap();
        let pos_embed = it.next().unwrap();
        let cls_token = it.next().unwrap();
        let layers = (0..layers).map(|_| LayerWeights::from_iter(&mut it)).collect();
        Ok(Weights {
            patch_embed,
            pos_embed,
            cls_token,
            layers,
            norm_gamma: it.next().unwrap(),
            norm_beta: it.next().unwrap(),
            head_weight: it.next().unwrap(),
            head_bias: it.next().unwrap(),
        })
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Weights<U> {
        let items: Vec<U> = self.iter().map(f).collect();
        Weights::from_ordered(self.layers.len(), items).expect("map preserves layout")
    }
}

/// Whether decoupled weight decay applies to a tensor. Projection matrices
/// decay; position embeddings, the class token, norms and biases do not.
/// Standard deviation of initialized weight entries.
pub const INIT_STD: f64 = 0.02;

/// Standard deviation of a unit normal truncated to `[-c, c]`.
fn truncated_std(c: f64) -> f64 {
    let mass = 2.0 * normal_cdf(c) - 1.0;
    let density = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
    (1.0 - 2.0 * c * density / mass).sqrt()
}

/// The cut `c` (in units of the untruncated σ) at which the truncated
/// distribution's own deviation is half the cut, so that scaling to
/// `±2·INIT_STD` leaves a deviation of exactly `INIT_STD`.
fn truncation_point() -> f64 {
    let (mut lo, mut hi) = (0.5, 3.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if truncated_std(mid) / mid > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".weight")
}

impl ModelParams {
    /// Truncated-normal weights with standard deviation [`INIT_STD`] and
    /// support `±2·INIT_STD`; zero biases, class token and LN shifts; unit LN
    /// scales.
    pub fn init(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = rng_from_seed(config.init_seed);
        let cut = truncation_point();
        let scale = 2.0 * INIT_STD / cut;
        let mut trunc = |rows: usize, cols: usize| -> Tensor {
            let data = (0..rows * cols)
                .map(|_| loop {
                    let z: f64 = rng.sample(StandardNormal);
                    let w = (scale * z) as f32 as f64;
                    if z.abs() <= cut && w.abs() <= 2.0 * INIT_STD {
                        break w;
                    }
                })
                .collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let patch_embed = trunc(config.patch_len(), d);
        let pos_embed = trunc(config.num_patches() + 1, d);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                norm1_gamma: Tensor::filled(&[d], 1.0),
                norm1_beta: Tensor::zeros(&[d]),
                query_weight: trunc(d, d),
                query_bias: Tensor::zeros(&[d]),
                key_weight: trunc(d, d),
                key_bias: Tensor::zeros(&[d]),
                value_weight: trunc(d, d),
                value_bias: Tensor::zeros(&[d]),
                out_weight: trunc(d, d),
                out_bias: Tensor::zeros(&[d]),
                norm2_gamma: Tensor::filled(&[d], 1.0),
                norm2_beta: Tensor::zeros(&[d]),
                fc1_weight: trunc(d, config.hidden()),
                fc1_bias: Tensor::zeros(&[config.hidden()]),
                fc2_weight: trunc(config.hidden(), d),
                fc2_bias: Tensor::zeros(&[d]),
            })
            .collect();
        let head_weight = trunc(d, config.num_classes);
        Ok(Weights {
            patch_embed,
            pos_embed,
            cls_token: Tensor::zeros(&[1, d]),
            layers,
            norm_gamma: Tensor::filled(&[d], 1.0),
            norm_beta: Tensor::zeros(&[d]),
            head_weight,
            head_bias: Tensor::zeros(&[config.num_classes]),
        })
    }

    /// Shapes every tensor should have under `config`.
    pub fn expected_shapes(config: &ViTConfig) -> Vec<Vec<usize>> {
        let d = config.dim;
        let h = config.hidden();
        let mut shapes = vec![
            vec![config.patch_len(), d],
            vec![config.num_patches() + 1, d],
            vec![1, d],
        ];
        for _ in 0..config.layers {
            shapes.extend([
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, h],
                vec![h],
                vec![h, d],
                vec![d],
            ]);
        }
        shapes.extend([vec![d], vec![d], vec![d, config.num_classes], vec![config.num_classes]]);
        shapes
    }

    pub fn check_shapes(&self, config: &ViTConfig) -> Result<()> {
        let expected = Self::expected_shapes(config);
        if self.count() != expected.len() {
            return Err(Error::Shape(format!(
                "model has {} tensors, config expects {}",
                self.count(),
                expected.len()
            )));
        }
        for ((name, t), shape) in self.named().zip(&expected) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(Tensor::is_finite)
    }

    /// Records every tensor on `tape` as a borrowed leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Weights<Var> {
        let vars: Vec<Var> = self.iter().map(|t| tape.param(t)).collect();
        Weights::from_ordered(self.layers.len(), vars).expect("bind preserves layout")
    }
}

impl Weights<Var> {
    /// Collects the gradient of every bound tensor.
    pub fn gradients(&self, grads: &mut Gradients) -> ModelParams {
        let items = self.iter().map(|&v| grads.take(v)).collect();
        Weights::from_ordered(self.layers.len(), items).expect("layout preserved")
    }
}

/// Nodes of interest from one forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    pub logits: Var,
    /// Final token sequence of each encoder layer.
    pub layer_outputs: Vec<Var>,
    /// Attention probabilities, indexed `[layer][head]`, each `(N+1)×(N+1)`.
    pub attention: Vec<Vec<Var>>,
}

/// Patch embedding: `[cls; patches·E] + E_pos`.
pub fn embed(tape: &mut Tape<'_>, patches: Var, w: &Weights<Var>) -> Result<Var> {
    let projected = tape.matmul(patches, w.patch_embed)?;
    let tokens = tape.concat_rows(&[w.cls_token, projected])?;
    tape.add(tokens, w.pos_embed)
}

/// Pre-LN encoder layer. Returns the new tokens and each head's attention
/// probabilities.
pub fn encoder_layer(
    tape: &mut Tape<'_>,
    tokens: Var,
    w: &LayerWeights<Var>,
    config: &ViTConfig,
) -> Result<(Var, Vec<Var>)> {
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let normed = tape.layer_norm(tokens, w.norm1_gamma, w.norm1_beta, config.ln_eps)?;
    let q = linear(tape, normed, w.query_weight, w.query_bias)?;
    let k = linear(tape, normed, w.key_weight, w.key_bias)?;
    let v = linear(tape, normed, w.value_weight, w.value_bias)?;
    let mut heads = Vec::with_capacity(config.heads);
    let mut probs = Vec::with_capacity(config.heads);
    for h in 0..config.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        probs.push(attn);
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let attended = linear(tape, merged, w.out_weight, w.out_bias)?;
    let mid = tape.add(attended, tokens)?;

    let normed = tape.layer_norm(mid, w.norm2_gamma, w.norm2_beta, config.ln_eps)?;
    let hidden = linear(tape, normed, w.fc1_weight, w.fc1_bias)?;
    let hidden = tape.gelu(hidden);
    let out = linear(tape, hidden, w.fc2_weight, w.fc2_bias)?;
    Ok((tape.add(out, mid)?, probs))
}

fn linear(tape: &mut Tape<'_>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul(x, weight)?;
    tape.add_row(y, bias)
}

/// Records the full network on `tape` for one `H×W×C` input.
pub fn forward_tape(
    tape: &mut Tape<'_>,
    input: &Tensor,
    w: &Weights<Var>,
    config: &ViTConfig,
) -> Result<ForwardTrace> {
    let (h, wd, c) = grid_dims(input)?;
    if (h, wd, c) != (config.image_height, config.image_width, config.channels) {
        return Err(Error::Shape(format!(
            "input is {h}x{wd}x{c}, model expects {}x{}x{}",
            config.image_height, config.image_width, config.channels
        )));
    }
    let patches = tape.leaf(patchify(input, config.patch_size)?);
    let mut tokens = embed(tape, patches, w)?;
    let mut layer_outputs = Vec::with_capacity(w.layers.len());
    let mut attention = Vec::with_capacity(w.layers.len());
    for layer in &w.layers {
        let (next, probs) = encoder_layer(tape, tokens, layer, config)?;
        tokens = next;
        layer_outputs.push(next);
        attention.push(probs);
    }
    let mut cls = tape.row(tokens, 0)?;
    if config.final_norm {
        cls = tape.layer_norm(cls, w.norm_gamma, w.norm_beta, config.ln_eps)?;
    }
    let logits = linear(tape, cls, w.head_weight, w.head_bias)?;
    Ok(ForwardTrace {
        logits,
        layer_outputs,
        attention,
    })
}

/// A model: configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer {
    pub config: ViTConfig,
    pub params: ModelParams,
}

/// Loss, gradients and prediction for one labelled input.
#[derive(Debug)]
pub struct SampleGrad {
    pub loss: f64,
    pub grads: ModelParams,
    pub probs: Vec<f64>,
}

impl VisionTransformer {
    pub fn new(config: ViTConfig) -> Result<Self> {
        let params = ModelParams::init(&config)?;
        Ok(VisionTransformer { config, params })
    }

    pub fn from_params(config: ViTConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(VisionTransformer { config, params })
    }

    pub fn logits(&self, input: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape);
        let trace = forward_tape(&mut tape, input, &w, &self.config)?;
        Ok(tape.value(trace.logits).data().to_vec())
    }

    /// Class probabilities for one input.
    pub fn forward(&self, input: &Tensor) -> Result<Vec<f64>> {
        let mut p = self.logits(input)?;
        softmax_in_place(&mut p);
        Ok(p)
    }

    pub fn predict(&self, input: &Tensor) -> Result<usize> {
        Ok(argmax(&self.forward(input)?))
    }

    /// Cross-entropy of `input` against `label` and its gradient.
    pub fn loss_and_grad(&self, input: &Tensor, label: usize) -> Result<SampleGrad> {
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape);
        let trace = forward_tape(&mut tape, input, &w, &self.config)?;
        let loss = tape.cross_entropy(trace.logits, label)?;
        let mut grads = tape.backward(loss)?;
        let mut probs = tape.value(trace.logits).data().to_vec();
        softmax_in_place(&mut probs);
        Ok(SampleGrad {
            loss: tape.value(loss).item()?,
            grads: w.gradients(&mut grads),
            probs,
        })
    }

    pub fn loss(&self, input: &Tensor, label: usize) -> Result<f64> {
        let mut tape = Tape::new();
        let w = self.params.bind(&mut tape);
        let trace = forward_tape(&mut tape, input, &w, &self.config)?;
        let loss = tape.cross_entropy(trace.logits, label)?;
        tape.value(loss).item()
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
