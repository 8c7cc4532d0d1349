//! Latent-bottleneck set encoder and coordinate-query decoder.
//!
//! The encoder embeds every k-space sample as a token and alternates
//! cross-attention (latents attend to tokens) with latent self-attention, so
//! no token-by-token score matrix is ever formed. The decoder lets encoded
//! image-domain coordinates attend to the latents and maps the result to
//! per-class logits.

use crate::kspace::KSpaceSampleSet;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::PI;
use thiserror::Error;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Default number of queries decoded per tape when predicting a full grid.
pub const DEFAULT_QUERY_CHUNK: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("the encoder needs at least one k-space sample")]
    EmptySampleSet,
    #[error("coordinate {value} at position {index} lies outside [-1, 1]")]
    CoordinateOutOfRange { index: usize, value: f64 },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("expected {expected} parameters, found {found}")]
    ParamCount { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Latent vector count `M`.
    pub latents: usize,
    /// Model width `D`.
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Octave count `F` of the Fourier positional features.
    pub frequencies: usize,
    pub classes: usize,
    pub ff_mult: usize,
    /// Append `re·pos` and `im·pos` to each sample's features.
    pub modulated_features: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latents: 64,
            width: 64,
            heads: 4,
            encoder_layers: 4,
            decoder_layers: 4,
            frequencies: 8,
            classes: 3,
            ff_mult: 2,
            modulated_features: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("latents", self.latents),
            ("width", self.width),
            ("heads", self.heads),
            ("classes", self.classes),
            ("ff_mult", self.ff_mult),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.width % self.heads != 0 {
            return Err(ModelError::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Width of `encode_positions` output for one coordinate component.
    pub fn position_width(&self) -> usize {
        2 * self.frequencies + 1
    }

    /// Per-sample feature width: `re, im` plus encoded `(kx, ky, t)`, and
    /// with modulation the encoding scaled by `re` and by `im`.
    pub fn sample_feature_width(&self) -> usize {
        let positions = 3 * self.position_width();
        2 + positions * if self.modulated_features { 3 } else { 1 }
    }

    pub fn query_feature_width(&self) -> usize {
        3 * self.position_width()
    }
}

/// Fourier features of coordinates in `[-1, 1]`, `coords` holding `n` rows
/// of `dims` components. Each component `c` becomes
/// `[c, sin(π2⁰c), cos(π2⁰c), …, sin(π2^{F−1}c), cos(π2^{F−1}c)]`.
pub fn encode_positions(coords: &[f64], dims: usize, frequencies: usize) -> Result<Tensor> {
    let width = dims * (2 * frequencies + 1);
    let rows = coords.len() / dims.max(1);
    let mut out = Vec::with_capacity(rows * width);
    for (index, &c) in coords.iter().enumerate() {
        if !(-1.0..=1.0).contains(&c) {
            return Err(ModelError::CoordinateOutOfRange { index, value: c });
        }
        push_fourier(&mut out, c, frequencies);
    }
    Ok(Tensor::new(vec![rows, width], out)?)
}

fn push_fourier(out: &mut Vec<f64>, c: f64, frequencies: usize) {
    out.push(c);
    let mut freq = PI;
    for _ in 0..frequencies {
        let (s, co) = (freq * c).sin_cos();
        out.push(s);
        out.push(co);
        freq *= 2.0;
    }
}

/// Maps grid index `i` of an axis with `extent` entries linearly onto `[-1, 1]`.
pub fn normalize_index(i: usize, extent: usize) -> f64 {
    if extent <= 1 {
        0.0
    } else {
        2.0 * i as f64 / (extent - 1) as f64 - 1.0
    }
}

/// Per-sample input rows `[re, im, enc(kx), enc(ky), enc(t)]`.
pub fn sample_features(samples: &KSpaceSampleSet, frequencies: usize, modulated: bool) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(ModelError::EmptySampleSet);
    }
    let positions = 3 * (2 * frequencies + 1);
    let width = 2 + positions * if modulated { 3 } else { 1 };
    let mut data = Vec::with_capacity(samples.len() * width);
    for s in &samples.samples {
        data.push(s.re);
        data.push(s.im);
        let start = data.len();
        push_fourier(&mut data, normalize_index(s.kx as usize, samples.width), frequencies);
        push_fourier(&mut data, normalize_index(s.ky as usize, samples.height), frequencies);
        push_fourier(&mut data, normalize_index(s.t as usize, samples.frames), frequencies);
        if modulated {
            let end = data.len();
            for part in [s.re, s.im] {
                for i in start..end {
                    data.push(part * data[i]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![samples.len(), width], data)?)
}

/// Image-domain query coordinates `(x, y, t)` in `[-1, 1]³`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    coords: Vec<[f64; 3]>,
}

impl QuerySet {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        for (i, c) in coords.iter().enumerate() {
            for (j, &v) in c.iter().enumerate() {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(ModelError::CoordinateOutOfRange {
                        index: 3 * i + j,
                        value: v,
                    });
                }
            }
        }
        Ok(Self { coords })
    }

    /// Coordinates of voxel `(t, y, x)`.
    pub fn voxel(t: usize, y: usize, x: usize, frames: usize, h: usize, w: usize) -> [f64; 3] {
        [
            normalize_index(x, w),
            normalize_index(y, h),
            normalize_index(t, frames),
        ]
    }

    /// Every voxel of a `T×H×W` grid in row-major order.
    pub fn grid(frames: usize, h: usize, w: usize) -> Self {
        let mut coords = Vec::with_capacity(frames * h * w);
        for t in 0..frames {
            for y in 0..h {
                for x in 0..w {
                    coords.push(Self::voxel(t, y, x, frames, h, w));
                }
            }
        }
        Self { coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn features(&self, frequencies: usize) -> Result<Tensor> {
        let flat: Vec<f64> = self.coords.iter().flatten().copied().collect();
        encode_positions(&flat, 3, frequencies)
    }

    pub fn chunks(&self, size: usize) -> impl Iterator<Item = QuerySet> + '_ {
        self.coords.chunks(size.max(1)).map(|c| QuerySet { coords: c.to_vec() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Norm {
    gamma: usize,
    beta: usize,
}

/// One pre-norm attention block followed by a pre-norm feed-forward.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Block {
    norm_q: Norm,
    /// `None` for self-attention, where queries and keys share one norm.
    norm_kv: Option<Norm>,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm_ff: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Parameter indices of every learned tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    embed: Linear,
    latents: usize,
    encoder: Vec<(Block, Block)>,
    query_embed: Linear,
    decoder: Vec<Block>,
    final_norm: Norm,
    head: Linear,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Normal(f64),
}

#[derive(Default)]
struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.add(format!("{name}.weight"), vec![fan_in, fan_out], Init::Xavier { fan_in, fan_out }),
            b: self.add(format!("{name}.bias"), vec![fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), vec![d], Init::Ones),
            beta: self.add(format!("{name}.beta"), vec![d], Init::Zeros),
        }
    }

    fn block(&mut self, name: &str, d: usize, ff: usize, cross: bool) -> Block {
        Block {
            norm_q: self.norm(&format!("{name}.norm_q"), d),
            norm_kv: cross.then(|| self.norm(&format!("{name}.norm_kv"), d)),
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
            norm_ff: self.norm(&format!("{name}.norm_ff"), d),
            ff_in: self.linear(&format!("{name}.ff_in"), d, ff),
            ff_out: self.linear(&format!("{name}.ff_out"), ff, d),
        }
    }
}

fn build_layout(config: &ModelConfig) -> (Layout, LayoutBuilder) {
    let mut b = LayoutBuilder::default();
    let d = config.width;
    let ff = config.ff_mult * d;
    let embed = b.linear("embed", config.sample_feature_width(), d);
    let latents = b.add("latents".into(), vec![config.latents, d], Init::Normal(0.02));
    let encoder = (0..config.encoder_layers)
        .map(|i| {
            (
                b.block(&format!("encoder.{i}.cross"), d, ff, true),
                b.block(&format!("encoder.{i}.self"), d, ff, false),
            )
        })
        .collect();
    let query_embed = b.linear("query_embed", config.query_feature_width(), d);
    let decoder = (0..config.decoder_layers)
        .map(|i| b.block(&format!("decoder.{i}.cross"), d, ff, true))
        .collect();
    let final_norm = b.norm("final_norm", d);
    let head = b.linear("head", d, config.classes);
    let layout = Layout {
        embed,
        latents,
        encoder,
        query_embed,
        decoder,
        final_norm,
        head,
    };
    (layout, b)
}

/// Number of learned scalars for a configuration.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let (_, b) = build_layout(config);
    b.shapes.iter().map(|s| s.iter().product::<usize>()).sum()
}

/// All learned tensors, in a fixed order with stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Xavier-uniform projections, zero biases, unit norms and `N(0, 0.02)` latents.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(builder.shapes.len());
        for (shape, init) in builder.shapes.iter().zip(&builder.inits) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match *init {
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(std) => {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
            };
            tensors.push(Tensor::new(shape.clone(), data)?);
        }
        Ok(Self {
            config,
            layout,
            names: builder.names,
            tensors,
        })
    }

    /// Rebuilds parameters from named tensors, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        if named.len() != builder.names.len() {
            return Err(ModelError::ParamCount {
                expected: builder.names.len(),
                found: named.len(),
            });
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, tensor), (want_name, want_shape)) in
            named.into_iter().zip(builder.names.iter().zip(&builder.shapes))
        {
            if &name != want_name || tensor.shape() != want_shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name,
                    expected: want_shape.clone(),
                    found: tensor.shape().to_vec(),
                });
            }
            tensors.push(tensor);
        }
        Ok(Self {
            config,
            layout,
            names: builder.names,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape, requires_grad: bool) -> Bound<'a> {
        let vars = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        Bound { params: self, vars }
    }

    pub fn encode(&self, samples: &KSpaceSampleSet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let latents = bound.encoder_forward(&mut tape, samples)?;
        Ok(tape.value(latents).clone())
    }

    /// Logits `P×C` for `queries` given encoded latents.
    pub fn decode(&self, latents: &Tensor, queries: &QuerySet) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let lat = tape.constant(latents.clone());
        let logits = bound.decoder_forward(&mut tape, lat, queries)?;
        Ok(tape.value(logits).clone())
    }

    /// Probabilities and labels for every voxel of a `T×H×W` grid, decoding
    /// `chunk` queries at a time.
    pub fn predict_segmentation(
        &self,
        samples: &KSpaceSampleSet,
        frames: usize,
        h: usize,
        w: usize,
        chunk: usize,
    ) -> Result<Segmentation> {
        let latents = self.encode(samples)?;
        let grid = QuerySet::grid(frames, h, w);
        let c = self.config.classes;
        let mut probs = Vec::with_capacity(grid.len() * c);
        for part in grid.chunks(chunk) {
            let logits = self.decode(&latents, &part)?;
            probs.extend(logits.data().iter().map(|&z| sigmoid(z)));
        }
        let labels = probs.chunks_exact(c).map(argmax_background_first).collect();
        Ok(Segmentation {
            frames,
            height: h,
            width: w,
            classes: c,
            probs,
            labels,
        })
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Index of the largest entry; the lowest class wins ties.
pub fn argmax_background_first(row: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u8
}

/// Dense prediction over a grid: `probs` is `T×H×W×C`, `labels` is `T×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub probs: Vec<f64>,
    pub labels: Vec<u8>,
}

/// Parameters bound to a tape.
pub struct Bound<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn linear(&self, t: &mut Tape, x: Var, l: Linear) -> Result<Var> {
        let y = t.matmul(x, self.vars[l.w])?;
        Ok(t.add_bias(y, self.vars[l.b])?)
    }

    fn norm(&self, t: &mut Tape, x: Var, n: Norm) -> Result<Var> {
        Ok(t.layer_norm(x, self.vars[n.gamma], self.vars[n.beta], LAYER_NORM_EPS)?)
    }

    /// `q ← q + Attn(LN(q), LN(kv))`, then `q ← q + FF(LN(q))`.
    /// Passing `kv = None` makes it self-attention.
    fn block(&self, t: &mut Tape, q: Var, kv: Option<Var>, b: &Block) -> Result<Var> {
        let xq = self.norm(t, q, b.norm_q)?;
        let xkv = match (kv, b.norm_kv) {
            (Some(kv), Some(n)) => self.norm(t, kv, n)?,
            _ => xq,
        };
        let qp = self.linear(t, xq, b.q)?;
        let kp = self.linear(t, xkv, b.k)?;
        let vp = self.linear(t, xkv, b.v)?;
        let mixed = t.attention(qp, kp, vp, self.params.config.heads)?;
        let out = self.linear(t, mixed, b.o)?;
        let q = t.add(q, out)?;
        let h = self.norm(t, q, b.norm_ff)?;
        let h = self.linear(t, h, b.ff_in)?;
        let h = t.gelu(h);
        let h = self.linear(t, h, b.ff_out)?;
        Ok(t.add(q, h)?)
    }

    /// Projects every sample's features to a width-`D` token.
    pub fn embed_samples(&self, t: &mut Tape, samples: &KSpaceSampleSet) -> Result<Var> {
        let c = &self.params.config;
        let features = sample_features(samples, c.frequencies, c.modulated_features)?;
        let f = t.constant(features);
        self.linear(t, f, self.params.layout.embed)
    }

    pub fn encoder_forward(&self, t: &mut Tape, samples: &KSpaceSampleSet) -> Result<Var> {
        let tokens = self.embed_samples(t, samples)?;
        let mut latents = self.vars[self.params.layout.latents];
        for (cross, selfb) in &self.params.layout.encoder {
            latents = self.block(t, latents, Some(tokens), cross)?;
            latents = self.block(t, latents, None, selfb)?;
        }
        Ok(latents)
    }

    pub fn decoder_forward(&self, t: &mut Tape, latents: Var, queries: &QuerySet) -> Result<Var> {
        let layout = &self.params.layout;
        let f = t.constant(queries.features(self.params.config.frequencies)?);
        let mut q = self.linear(t, f, layout.query_embed)?;
        for b in &layout.decoder {
            q = self.block(t, q, Some(latents), b)?;
        }
        let q = self.norm(t, q, layout.final_norm)?;
        self.linear(t, q, layout.head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::KSample;

    fn tiny() -> ModelConfig {
        ModelConfig {
            latents: 4,
            width: 8,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            frequencies: 2,
            classes: 3,
            ff_mult: 2,
            modulated_features: true,
        }
    }

    fn samples(n: usize) -> KSpaceSampleSet {
        let mut set = KSpaceSampleSet::empty(2, 8, 8);
        for i in 0..n {
            set.samples.push(KSample {
                ky: (i % 8) as u32,
                kx: ((i * 3) % 8) as u32,
                t: (i % 2) as u32,
                re: (i as f64 * 0.37).sin(),
                im: (i as f64 * 0.91).cos(),
            });
        }
        set
    }

    #[test]
    fn positional_encoding_of_zero() {
        let e = encode_positions(&[0.0], 1, 2).unwrap();
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 0.0, 1.0]);
        let e = encode_positions(&[0.1, 0.2, 0.3], 3, 8).unwrap();
        assert_eq!(e.shape(), &[1, 51]);
        assert!(matches!(
            encode_positions(&[1.5], 1, 2),
            Err(ModelError::CoordinateOutOfRange { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.heads = 3;
        assert!(ModelParams::init(c, 0).is_err());
    }

    #[test]
    fn parameter_count_is_config_function() {
        let p = ModelParams::init(tiny(), 1).unwrap();
        assert_eq!(p.parameter_count(), parameter_count(&tiny()));
        assert!(p.is_finite());
    }

    #[test]
    fn empty_sample_set_is_rejected() {
        let p = ModelParams::init(tiny(), 1).unwrap();
        assert!(matches!(p.encode(&samples(0)), Err(ModelError::EmptySampleSet)));
    }

    #[test]
    fn token_and_latent_shapes() {
        let p = ModelParams::init(tiny(), 1).unwrap();
        let mut t = Tape::new();
        let b = p.bind(&mut t, false);
        let tokens = b.embed_samples(&mut t, &samples(13)).unwrap();
        assert_eq!(t.shape(tokens), &[13, 8]);
        assert_eq!(p.encode(&samples(13)).unwrap().shape(), &[4, 8]);
    }

    #[test]
    fn prediction_probabilities_and_labels() {
        let p = ModelParams::init(tiny(), 2).unwrap();
        let seg = p.predict_segmentation(&samples(20), 2, 4, 4, 5).unwrap();
        assert_eq!(seg.labels.len(), 32);
        assert_eq!(seg.probs.len(), 96);
        assert!(seg.probs.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(seg.labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn argmax_prefers_background_on_ties() {
        assert_eq!(argmax_background_first(&[0.5, 0.5, 0.2]), 0);
        assert_eq!(argmax_background_first(&[0.1, 0.7, 0.7]), 1);
        assert_eq!(argmax_background_first(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn from_named_rejects_wrong_shapes() {
        let p = ModelParams::init(tiny(), 3).unwrap();
        let mut named: Vec<_> = p.names().iter().cloned().zip(p.tensors().iter().cloned()).collect();
        assert_eq!(ModelParams::from_named(tiny(), named.clone()).unwrap(), p);
        named[0].1 = Tensor::zeros(vec![1, 1]).unwrap();
        assert!(matches!(
            ModelParams::from_named(tiny(), named),
            Err(ModelError::ParamShape { .. })
        ));
    }
}
