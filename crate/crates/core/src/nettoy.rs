//! Deterministic toy-scale assembly of the whole network: encoder stubs,
//! masked edge attention on the first level, multi-level aggregation and
//! union attention, and two object attention decoder steps, producing four
//! deep supervision maps.
//!
//! Weights are drawn from [`SplitMix64`] seeded by [`ToyConfig::seed`], in
//! the order the layers run (weights before biases within a layer). Dense
//! and depthwise weights use LeCun-uniform bounds `±sqrt(3 / fan_in)`;
//! biases are `±1/sqrt(fan_in)` or exactly zero with
//! [`ToyConfig::zero_bias`].
//!
//! # Parameter count
//!
//! With encoder widths `c1..c4`, input channels `c0`, aggregation widths
//! `a2, a3, a4`, `S = a2 + a3 + a4`, `T = a3 + a4`, aggregation kernel `k`
//! and `n` receptive-field branches:
//!
//! ```text
//! dws(i, o)    = 10·i + i·o + o
//! ddrm(i, o)   = n·(i·b + 12·b + b²) + n·b·o + o + i·o + o,  b = max(max(i, o) / 4, 1)
//! dense(i, o)  = k²·i·o + o
//! encoder      = Σ_s dws(c_{s-1}, c_s) + dws(c_s, c_s)
//! blocks       = ddrm(c1, c1) + ddrm(c2, a2) + ddrm(c3, a3) + ddrm(c4, a4)
//!              + ddrm(c2, 1) + ddrm(c1, 1)
//! aggregation  = dense(a3, a2) + dense(a4, a2) + dense(a4, a3) + dense(a4, a4)
//!              + 2·dense(T, T) + dense(S, S)
//! attention    = 3·(S² + S) + 3·(S + 1)
//! ```
//!
//! [`expected_param_count`] evaluates this; for the default configuration
//! it is 1 592 413.

use crate::attention::{
    aggregate_multilevel, object_attention, union_attention, AggregationParams, AttentionParams,
    DdrmBranch, DdrmParams, DEFAULT_ATTENTION_BUDGET, DEFAULT_DENOISE, DEFAULT_DILATIONS,
    DEFAULT_GAMMA,
};
use crate::error::{Error, Result};
use crate::grid::{
    apply_conv, decimate2, sigmoid, upsample_grid, ConvParams, FeatureMap, Grid2D,
};
use crate::loss::{DEFAULT_KERNELS, DEFAULT_LAMBDA};
use crate::spectral::{masked_edge_attention, DEFAULT_RADIUS};

/// Softmax rows must sum to one within this tolerance.
pub const SOFTMAX_TOLERANCE: f64 = 1e-5;

/// SplitMix64 (Steele, Lea and Flood), the weight generator.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Widths of encoder levels E1..E4.
    pub encoder_channels: [usize; 4],
    /// Widths the levels E2..E4 are reduced to before aggregation.
    pub aggregation_channels: [usize; 3],
    pub radius: f64,
    pub denoise: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub kernels: Vec<usize>,
    /// One receptive-field branch per dilation.
    pub dilations: Vec<usize>,
    /// Kernel side of the aggregation convolutions.
    pub agg_kernel: usize,
    pub zero_bias: bool,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 64,
            width: 64,
            encoder_channels: [8, 16, 24, 32],
            aggregation_channels: [32, 64, 128],
            radius: DEFAULT_RADIUS,
            denoise: DEFAULT_DENOISE,
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_LAMBDA,
            kernels: DEFAULT_KERNELS.to_vec(),
            dilations: DEFAULT_DILATIONS.to_vec(),
            agg_kernel: 3,
            zero_bias: false,
            seed: 42,
        }
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl ToyConfig {
    /// Default configuration at a square input size.
    pub fn with_size(size: usize) -> Self {
        Self { height: size, width: size, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            return config_err(format!(
                "input {}x{} must be non-empty and divisible by 8",
                self.height, self.width
            ));
        }
        if self.in_channels == 0
            || self.encoder_channels.contains(&0)
            || self.aggregation_channels.contains(&0)
        {
            return config_err("channel counts must be >= 1");
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return config_err("need at least one dilation, all >= 1");
        }
        let deepest = (self.height / 8).max(self.width / 8);
        let reach = self.dilations.iter().max().copied().unwrap_or(1);
        if reach >= deepest {
            return config_err(format!(
                "dilation {reach} reaches past the {}x{} deepest level",
                self.height / 8,
                self.width / 8
            ));
        }
        if self.agg_kernel.is_multiple_of(2) || self.agg_kernel / 2 >= deepest {
            return config_err(format!("aggregation kernel {} must be odd and fit the deepest level", self.agg_kernel));
        }
        if !self.radius.is_finite() || self.radius < 0.0 {
            return config_err(format!("radius must be finite and >= 0, got {}", self.radius));
        }
        if !(self.denoise > 0.0 && self.denoise < 1.0) {
            return config_err(format!("denoising ratio must lie in (0, 1), got {}", self.denoise));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return config_err(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return config_err(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if self.kernels.is_empty() || self.kernels.iter().any(|k| k % 2 == 0) {
            return config_err("loss kernels must be odd and non-empty");
        }
        Ok(())
    }
}

/// Depthwise 3×3 then pointwise, both SELU-activated. A stride-2 block
/// subsamples after the depthwise stage.
#[derive(Clone, Debug, PartialEq)]
pub struct DwsBlock {
    pub depthwise: ConvParams,
    pub pointwise: ConvParams,
    pub stride: usize,
}

impl DwsBlock {
    fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let mut y = apply_conv(x, &self.depthwise)?;
        if self.stride == 2 {
            y = decimate2(&y)?;
        }
        apply_conv(&y, &self.pointwise)
    }
}

struct Init {
    rng: SplitMix64,
    zero_bias: bool,
}

impl Init {
    fn weights(&mut self, n: usize, fan_in: usize) -> Vec<f64> {
        let bound = (3.0 / fan_in as f64).sqrt();
        (0..n).map(|_| self.rng.uniform(-bound, bound)).collect()
    }

    fn bias(&mut self, n: usize, fan_in: usize) -> Vec<f64> {
        if self.zero_bias {
            return vec![0.0; n];
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        (0..n).map(|_| self.rng.uniform(-bound, bound)).collect()
    }

    fn dense(&mut self, cin: usize, cout: usize, k: usize, act: bool) -> Result<ConvParams> {
        let fan_in = cin * k * k;
        let w = self.weights(cin * cout * k * k, fan_in);
        let b = self.bias(cout, fan_in);
        Ok(ConvParams::dense(cin, cout, k, 1, w, b)?.with_activation(act))
    }

    fn depthwise(&mut self, c: usize, k: usize, dilation: usize, act: bool) -> Result<ConvParams> {
        let w = self.weights(c * k * k, k * k);
        let b = self.bias(c, k * k);
        Ok(ConvParams::depthwise(c, k, dilation, w, b)?.with_activation(act))
    }

    fn dws(&mut self, cin: usize, cout: usize, stride: usize) -> Result<DwsBlock> {
        Ok(DwsBlock {
            depthwise: self.depthwise(cin, 3, 1, true)?,
            pointwise: self.dense(cin, cout, 1, true)?,
            stride,
        })
    }

    fn ddrm(&mut self, cin: usize, cout: usize, dilations: &[usize]) -> Result<DdrmParams> {
        let b = branch_width(cin, cout);
        let branches = dilations
            .iter()
            .map(|&d| {
                let reduce = self.dense(cin, b, 1, true)?;
                let depthwise = self.depthwise(b, 3, d, true)?;
                let pointwise = self.dense(b, b, 1, false)?;
                DdrmBranch::new(reduce, depthwise, pointwise)
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = self.dense(b * dilations.len(), cout, 1, false)?;
        let residual = self.dense(cin, cout, 1, false)?;
        DdrmParams::new(branches, fuse, residual)
    }
}

fn branch_width(cin: usize, cout: usize) -> usize {
    (cin.max(cout) / 4).max(1)
}

/// An instantiated toy network. Immutable after [`build_toy`].
#[derive(Clone, Debug, PartialEq)]
pub struct ToyNet {
    cfg: ToyConfig,
    stages: Vec<[DwsBlock; 2]>,
    meam: DdrmParams,
    reducers: [DdrmParams; 3],
    aggregation: AggregationParams,
    attention: AttentionParams,
    oam: [DdrmParams; 2],
}

pub fn build_toy(cfg: &ToyConfig) -> Result<ToyNet> {
    cfg.validate()?;
    let mut init = Init { rng: SplitMix64::new(cfg.seed), zero_bias: cfg.zero_bias };
    let dil = &cfg.dilations;
    let [c1, c2, c3, c4] = cfg.encoder_channels;
    let [a2, a3, a4] = cfg.aggregation_channels;
    let k = cfg.agg_kernel;

    let mut stages = Vec::with_capacity(4);
    let mut prev = cfg.in_channels;
    let mut meam = None;
    for (s, &c) in cfg.encoder_channels.iter().enumerate() {
        let stride = if s == 0 { 1 } else { 2 };
        stages.push([init.dws(prev, c, stride)?, init.dws(c, c, 1)?]);
        if s == 0 {
            meam = Some(init.ddrm(c1, c1, dil)?);
        }
        prev = c;
    }
    let meam = meam.expect("first stage always built");
    let reducers = [init.ddrm(c2, a2, dil)?, init.ddrm(c3, a3, dil)?, init.ddrm(c4, a4, dil)?];
    let t = a3 + a4;
    let s = a2 + t;
    let aggregation = AggregationParams {
        up3_to2: init.dense(a3, a2, k, true)?,
        up4_to2: init.dense(a4, a2, k, true)?,
        up4_to3: init.dense(a4, a3, k, true)?,
        up4_keep: init.dense(a4, a4, k, true)?,
        concat3: init.dense(t, t, k, true)?,
        up_e3: init.dense(t, t, k, true)?,
        fuse: init.dense(s, s, k, true)?,
    };
    let attention = AttentionParams {
        channel_q: init.dense(s, s, 1, false)?,
        channel_k: init.dense(s, s, 1, false)?,
        channel_v: init.dense(s, s, 1, false)?,
        spatial_q: init.dense(s, 1, 1, false)?,
        spatial_k: init.dense(s, 1, 1, false)?,
        spatial_v: init.dense(s, 1, 1, false)?,
        gamma: cfg.gamma,
        denoise: cfg.denoise,
        attention_budget: DEFAULT_ATTENTION_BUDGET,
    };
    let oam = [init.ddrm(c2, 1, dil)?, init.ddrm(c1, 1, dil)?];
    Ok(ToyNet { cfg: cfg.clone(), stages, meam, reducers, aggregation, attention, oam })
}

fn ddrm_convs(p: &DdrmParams) -> Vec<&ConvParams> {
    let mut v: Vec<&ConvParams> =
        p.branches().iter().flat_map(|b| [&b.reduce, &b.depthwise, &b.pointwise]).collect();
    v.push(p.fuse());
    v.push(p.residual());
    v
}

/// The four supervision maps `DS_0, DS_1, DS_2, DS_e` and the edge map.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Probabilities at input resolution.
    pub ds: [Grid2D; 4],
    /// Channel mean of the denoised edge features, as logits.
    pub edge: Grid2D,
}

/// Intermediates recorded during a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `(C, H, W)` of E1..E4.
    pub encoder_shapes: [(usize, usize, usize); 4],
    pub aggregated_shape: (usize, usize, usize),
    pub d0: Grid2D,
    pub d1: Grid2D,
    pub d2: Grid2D,
    pub alpha_c: Vec<f64>,
    pub kept_channels: usize,
    pub softmax_row_error: f64,
}

impl ToyNet {
    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    /// Every convolution in draw order.
    pub fn convs(&self) -> Vec<&ConvParams> {
        let mut v = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for block in stage {
                v.push(&block.depthwise);
                v.push(&block.pointwise);
            }
            if s == 0 {
                v.extend(ddrm_convs(&self.meam));
            }
        }
        for r in &self.reducers {
            v.extend(ddrm_convs(r));
        }
        let a = &self.aggregation;
        v.extend([&a.up3_to2, &a.up4_to2, &a.up4_to3, &a.up4_keep, &a.concat3, &a.up_e3, &a.fuse]);
        let p = &self.attention;
        v.extend([&p.channel_q, &p.channel_k, &p.channel_v, &p.spatial_q, &p.spatial_k, &p.spatial_v]);
        for o in &self.oam {
            v.extend(ddrm_convs(o));
        }
        v
    }

    /// All weights and biases flattened in draw order.
    pub fn parameters(&self) -> Vec<f64> {
        self.convs()
            .into_iter()
            .flat_map(|c| c.weights().iter().chain(c.bias()).copied())
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.convs().iter().map(|c| c.num_params()).sum()
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<ForwardOutput> {
        self.forward_traced(image).map(|(out, _)| out)
    }

    pub fn forward_traced(&self, image: &FeatureMap) -> Result<(ForwardOutput, ForwardTrace)> {
        let cfg = &self.cfg;
        let want = (cfg.in_channels, cfg.height, cfg.width);
        if image.shape() != want {
            return Err(Error::Shape(format!("image is {:?}, network expects {want:?}", image.shape())));
        }

        let mut levels: Vec<FeatureMap> = Vec::with_capacity(4);
        let mut edge = None;
        let mut x = image.clone();
        for (s, [entry, body]) in self.stages.iter().enumerate() {
            let e = body.forward(&entry.forward(&x)?)?;
            if s == 0 {
                let meam = masked_edge_attention(&e, cfg.radius, &self.meam)?;
                x = meam.refined;
                edge = Some(meam.edge.mean_over_channels());
            } else {
                x = e.clone();
            }
            levels.push(e);
        }
        let edge = edge.expect("first stage always runs");
        let encoder_shapes = [levels[0].shape(), levels[1].shape(), levels[2].shape(), levels[3].shape()];

        let reduced = levels[1..]
            .iter()
            .zip(&self.reducers)
            .map(|(e, r)| crate::attention::ddrm_forward(e, r))
            .collect::<Result<Vec<_>>>()?;
        let agg = aggregate_multilevel(&reduced[0], &reduced[1], &reduced[2], &self.aggregation)?;
        let uam = union_attention(&agg.x, &self.attention)?;
        debug_assert!(uam.softmax_row_error <= SOFTMAX_TOLERANCE);

        let d0 = uam.d0;
        let d1 = object_attention(&d0, &levels[1], cfg.denoise, &self.oam[0])?;
        let d2 = object_attention(&upsample_grid(&d1, 2)?, &levels[0], cfg.denoise, &self.oam[1])?;

        let ds0 = upsample_grid(&d0, 2)?.map(sigmoid);
        let ds1 = upsample_grid(&d1, 2)?.map(sigmoid);
        let ds2 = d2.map(sigmoid);
        let ens = Grid2D::from_fn(cfg.height, cfg.width, |i, j| {
            (ds0.get(i, j) + ds1.get(i, j) + ds2.get(i, j)) / 3.0
        });

        let trace = ForwardTrace {
            encoder_shapes,
            aggregated_shape: agg.x.shape(),
            d0,
            d1,
            d2,
            kept_channels: uam.kept_mask.iter().filter(|&&k| k).count(),
            alpha_c: uam.alpha_c,
            softmax_row_error: uam.softmax_row_error,
        };
        Ok((ForwardOutput { ds: [ds0, ds1, ds2, ens], edge }, trace))
    }
}

/// Closed-form parameter count; see the module docs.
pub fn expected_param_count(cfg: &ToyConfig) -> usize {
    let n = cfg.dilations.len();
    let k2 = cfg.agg_kernel * cfg.agg_kernel;
    let dws = |i: usize, o: usize| 10 * i + i * o + o;
    let ddrm = |i: usize, o: usize| {
        let b = (i.max(o) / 4).max(1);
        n * (i * b + 12 * b + b * b) + n * b * o + o + i * o + o
    };
    let dense = |i: usize, o: usize| k2 * i * o + o;
    let [c1, c2, c3, c4] = cfg.encoder_channels;
    let [a2, a3, a4] = cfg.aggregation_channels;
    let (t, s) = (a3 + a4, a2 + a3 + a4);
    let encoder: usize = [cfg.in_channels, c1, c2, c3]
        .iter()
        .zip(&cfg.encoder_channels)
        .map(|(&i, &o)| dws(i, o) + dws(o, o))
        .sum();
    let blocks = ddrm(c1, c1) + ddrm(c2, a2) + ddrm(c3, a3) + ddrm(c4, a4) + ddrm(c2, 1) + ddrm(c1, 1);
    let aggregation =
        dense(a3, a2) + dense(a4, a2) + dense(a4, a3) + dense(a4, a4) + 2 * dense(t, t) + dense(s, s);
    let attention = 3 * (s * s + s) + 3 * (s + 1);
    encoder + blocks + aggregation + attention
}

/// Deterministic test image: `x[c, i, j] = (c + i + j) / (C + H + W − 3)`.
pub fn ramp_input(channels: usize, height: usize, width: usize) -> FeatureMap {
    let denom = (channels + height + width).saturating_sub(3).max(1) as f64;
    FeatureMap::from_fn(channels, height, width, |c, i, j| (c + i + j) as f64 / denom)
}
