//! Union attention, object attention and the depthwise dilated receptive
//! field block (DDRM) they share with the edge module.

use crate::error::{param_err, shape_err, Error, Result};
use crate::grid::{
    apply_conv, conv1x1, sigmoid, softmax_rows, upsample, ConvKind, ConvParams, FeatureMap,
    Grid2D, Matrix,
};

/// Default confidence ratio.
pub const DEFAULT_GAMMA: f64 = 0.1;
/// Default denoising ratio.
pub const DEFAULT_DENOISE: f64 = 0.93;
/// Default branch dilations of the receptive-field block.
pub const DEFAULT_DILATIONS: [usize; 4] = [1, 3, 5, 7];
/// Default cap on spatial attention table entries (`(H·W)²`).
pub const DEFAULT_ATTENTION_BUDGET: usize = 1 << 24;

fn require_pointwise(p: &ConvParams, what: &str) -> Result<()> {
    if p.kind() != ConvKind::Dense || p.kernel_size() != 1 {
        return Err(param_err(format!("{what} must be a dense 1x1 convolution")));
    }
    Ok(())
}

/// One DDRM branch: 1×1 reduce, dilated depthwise, 1×1 pointwise.
#[derive(Clone, Debug, PartialEq)]
pub struct DdrmBranch {
    pub reduce: ConvParams,
    pub depthwise: ConvParams,
    pub pointwise: ConvParams,
}

impl DdrmBranch {
    pub fn new(reduce: ConvParams, depthwise: ConvParams, pointwise: ConvParams) -> Result<Self> {
        require_pointwise(&reduce, "branch reduce")?;
        require_pointwise(&pointwise, "branch pointwise")?;
        if depthwise.kind() != ConvKind::Depthwise {
            return Err(param_err("branch spatial conv must be depthwise"));
        }
        let width = reduce.out_channels();
        if depthwise.in_channels() != width || pointwise.in_channels() != width {
            return Err(shape_err(format!(
                "branch width {width} does not match depthwise {} / pointwise {}",
                depthwise.in_channels(),
                pointwise.in_channels()
            )));
        }
        Ok(Self { reduce, depthwise, pointwise })
    }

    fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let r = conv1x1(x, &self.reduce)?;
        let d = apply_conv(&r, &self.depthwise)?;
        conv1x1(&d, &self.pointwise)
    }

    fn num_params(&self) -> usize {
        self.reduce.num_params() + self.depthwise.num_params() + self.pointwise.num_params()
    }
}

/// Multi-branch receptive-field block: branches are concatenated, fused
/// by a 1×1 conv and added to a 1×1 projection of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct DdrmParams {
    branches: Vec<DdrmBranch>,
    fuse: ConvParams,
    residual: ConvParams,
}

impl DdrmParams {
    pub fn new(branches: Vec<DdrmBranch>, fuse: ConvParams, residual: ConvParams) -> Result<Self> {
        let first = branches.first().ok_or_else(|| param_err("DDRM needs at least one branch"))?;
        let in_channels = first.reduce.in_channels();
        require_pointwise(&fuse, "DDRM fuse")?;
        require_pointwise(&residual, "DDRM residual")?;
        let mut concat = 0;
        for b in &branches {
            if b.reduce.in_channels() != in_channels {
                return Err(shape_err("DDRM branches disagree on input channels"));
            }
            concat += b.pointwise.out_channels();
        }
        if fuse.in_channels() != concat {
            return Err(shape_err(format!(
                "fuse takes {} channels but branches emit {concat}",
                fuse.in_channels()
            )));
        }
        if residual.in_channels() != in_channels || residual.out_channels() != fuse.out_channels() {
            return Err(shape_err("residual projection does not match DDRM input/output"));
        }
        Ok(Self { branches, fuse, residual })
    }

    /// A block whose output equals its input: branch 0 is an identity
    /// path, the fuse selects it and the residual projection is zero.
    pub fn identity(channels: usize, dilations: &[usize]) -> Result<Self> {
        if dilations.is_empty() {
            return Err(param_err("DDRM needs at least one branch"));
        }
        let branches = dilations
            .iter()
            .map(|&d| {
                DdrmBranch::new(
                    ConvParams::identity_pointwise(channels),
                    ConvParams::delta_depthwise(channels, 3, d)?,
                    ConvParams::identity_pointwise(channels),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let concat = channels * dilations.len();
        let mut w = vec![0.0; channels * concat];
        for c in 0..channels {
            w[c * concat + c] = 1.0;
        }
        let fuse = ConvParams::pointwise(concat, channels, w, vec![0.0; channels])?;
        Self::new(branches, fuse, ConvParams::zero_pointwise(channels, channels))
    }

    /// All weights and biases zero.
    pub fn zero(
        in_channels: usize,
        out_channels: usize,
        branch_width: usize,
        dilations: &[usize],
    ) -> Result<Self> {
        let branches = dilations
            .iter()
            .map(|&d| {
                let k2 = 9;
                DdrmBranch::new(
                    ConvParams::zero_pointwise(in_channels, branch_width),
                    ConvParams::depthwise(branch_width, 3, d, vec![0.0; branch_width * k2], vec![0.0; branch_width])?,
                    ConvParams::zero_pointwise(branch_width, branch_width),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = ConvParams::zero_pointwise(branch_width * dilations.len(), out_channels);
        Self::new(branches, fuse, ConvParams::zero_pointwise(in_channels, out_channels))
    }

    pub fn in_channels(&self) -> usize {
        self.residual.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.fuse.out_channels()
    }

    pub fn branches(&self) -> &[DdrmBranch] {
        &self.branches
    }

    pub fn fuse(&self) -> &ConvParams {
        &self.fuse
    }

    pub fn residual(&self) -> &ConvParams {
        &self.residual
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.depthwise.dilation()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.branches.iter().map(DdrmBranch::num_params).sum::<usize>()
            + self.fuse.num_params()
            + self.residual.num_params()
    }
}

pub fn ddrm_forward(x: &FeatureMap, p: &DdrmParams) -> Result<FeatureMap> {
    if x.channels() != p.in_channels() {
        return Err(shape_err(format!(
            "DDRM expects {} channels, got {}",
            p.in_channels(),
            x.channels()
        )));
    }
    let outs = p
        .branches
        .iter()
        .map(|b| b.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&FeatureMap> = outs.iter().collect();
    let fused = conv1x1(&FeatureMap::concat(&refs)?, &p.fuse)?;
    fused.add(&conv1x1(x, &p.residual)?)
}

/// Convolutions of the multi-level aggregation. Channel counts follow
/// from `(c2, c3, c4)`, the widths of the three encoder levels.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationParams {
    /// `c3 → c2`, applied to `Up(E3)`.
    pub up3_to2: ConvParams,
    /// `c4 → c2`, applied to `Up(Up(E4))`.
    pub up4_to2: ConvParams,
    /// `c4 → c3`, applied to `Up(E4)` before the product with `E3`.
    pub up4_to3: ConvParams,
    /// `c4 → c4`, applied to `Up(E4)` for the concatenation.
    pub up4_keep: ConvParams,
    /// `c3+c4 → c3+c4`, producing `E″3`.
    pub concat3: ConvParams,
    /// `c3+c4 → c3+c4`, applied to `Up(E″3)` to give `E″2`.
    pub up_e3: ConvParams,
    /// `c2+c3+c4 → c2+c3+c4`, producing `X`.
    pub fuse: ConvParams,
}

impl AggregationParams {
    pub fn validate(&self) -> Result<(usize, usize, usize)> {
        let c2 = self.up3_to2.out_channels();
        let c3 = self.up3_to2.in_channels();
        let c4 = self.up4_to2.in_channels();
        let expect = [
            ("up3_to2", &self.up3_to2, c3, c2),
            ("up4_to2", &self.up4_to2, c4, c2),
            ("up4_to3", &self.up4_to3, c4, c3),
            ("up4_keep", &self.up4_keep, c4, c4),
            ("concat3", &self.concat3, c3 + c4, c3 + c4),
            ("up_e3", &self.up_e3, c3 + c4, c3 + c4),
            ("fuse", &self.fuse, c2 + c3 + c4, c2 + c3 + c4),
        ];
        for (name, p, i, o) in expect {
            if p.kind() != ConvKind::Dense {
                return Err(param_err(format!("{name} must be a dense convolution")));
            }
            if p.in_channels() != i || p.out_channels() != o {
                return Err(shape_err(format!(
                    "{name} maps {} -> {} channels, expected {i} -> {o}",
                    p.in_channels(),
                    p.out_channels()
                )));
            }
        }
        Ok((c2, c3, c4))
    }

    pub fn num_params(&self) -> usize {
        [
            &self.up3_to2,
            &self.up4_to2,
            &self.up4_to3,
            &self.up4_keep,
            &self.concat3,
            &self.up_e3,
            &self.fuse,
        ]
        .iter()
        .map(|p| p.num_params())
        .sum()
    }
}

/// Aggregated features and the intermediates that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregation {
    pub e2_prime: FeatureMap,
    pub e3_double_prime: FeatureMap,
    pub e2_double_prime: FeatureMap,
    pub x: FeatureMap,
}

/// Fuses three encoder levels at the resolution of the shallowest one.
pub fn aggregate_multilevel(
    e2: &FeatureMap,
    e3: &FeatureMap,
    e4: &FeatureMap,
    p: &AggregationParams,
) -> Result<Aggregation> {
    let (c2, c3, c4) = p.validate()?;
    if e2.channels() != c2 || e3.channels() != c3 || e4.channels() != c4 {
        return Err(shape_err(format!(
            "levels have {}/{}/{} channels, convs expect {c2}/{c3}/{c4}",
            e2.channels(),
            e3.channels(),
            e4.channels()
        )));
    }
    let (h, w) = e2.spatial_dims();
    if e3.spatial_dims() != (h / 2, w / 2)
        || e4.spatial_dims() != (h / 4, w / 4)
        || h % 4 != 0
        || w % 4 != 0
    {
        return Err(shape_err(format!(
            "levels must be at 1, 1/2, 1/4 scale: got {:?}, {:?}, {:?}",
            e2.spatial_dims(),
            e3.spatial_dims(),
            e4.spatial_dims()
        )));
    }
    let up_e3 = upsample(e3, 2)?;
    let up_e4 = upsample(e4, 2)?;
    let up_up_e4 = upsample(&up_e4, 2)?;

    let e2_prime = e2
        .mul(&apply_conv(&up_e3, &p.up3_to2)?)?
        .mul(&apply_conv(&up_up_e4, &p.up4_to2)?)?;
    let gated = e3.mul(&apply_conv(&up_e4, &p.up4_to3)?)?;
    let kept = apply_conv(&up_e4, &p.up4_keep)?;
    let e3_double_prime = apply_conv(&FeatureMap::concat(&[&gated, &kept])?, &p.concat3)?;
    let e2_double_prime = apply_conv(&upsample(&e3_double_prime, 2)?, &p.up_e3)?;
    let x = apply_conv(&FeatureMap::concat(&[&e2_prime, &e2_double_prime])?, &p.fuse)?;
    Ok(Aggregation { e2_prime, e3_double_prime, e2_double_prime, x })
}

/// Projections and ratios of the union and object attention modules.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub channel_q: ConvParams,
    pub channel_k: ConvParams,
    pub channel_v: ConvParams,
    pub spatial_q: ConvParams,
    pub spatial_k: ConvParams,
    pub spatial_v: ConvParams,
    pub gamma: f64,
    pub denoise: f64,
    /// Maximum entries of the spatial attention table.
    pub attention_budget: usize,
}

impl AttentionParams {
    pub fn validate(&self) -> Result<usize> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(param_err(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(self.denoise > 0.0 && self.denoise < 1.0) {
            return Err(param_err(format!("denoising ratio must lie in (0, 1), got {}", self.denoise)));
        }
        let c = self.channel_q.in_channels();
        for (name, p, out) in [
            ("channel_q", &self.channel_q, c),
            ("channel_k", &self.channel_k, c),
            ("channel_v", &self.channel_v, c),
            ("spatial_q", &self.spatial_q, 1),
            ("spatial_k", &self.spatial_k, 1),
            ("spatial_v", &self.spatial_v, 1),
        ] {
            require_pointwise(p, name)?;
            if p.in_channels() != c || p.out_channels() != out {
                return Err(shape_err(format!(
                    "{name} maps {} -> {}, expected {c} -> {out}",
                    p.in_channels(),
                    p.out_channels()
                )));
            }
        }
        Ok(c)
    }

    /// Identity channel projections and single-weight spatial projections
    /// that pass channel 0 through.
    pub fn identity(channels: usize) -> Self {
        let mut w = vec![0.0; channels];
        w[0] = 1.0;
        let pick = ConvParams::pointwise(channels, 1, w, vec![0.0]).expect("valid projection");
        Self {
            channel_q: ConvParams::identity_pointwise(channels),
            channel_k: ConvParams::identity_pointwise(channels),
            channel_v: ConvParams::identity_pointwise(channels),
            spatial_q: pick.clone(),
            spatial_k: pick.clone(),
            spatial_v: pick,
            gamma: DEFAULT_GAMMA,
            denoise: DEFAULT_DENOISE,
            attention_budget: DEFAULT_ATTENTION_BUDGET,
        }
    }

    pub fn num_params(&self) -> usize {
        [
            &self.channel_q,
            &self.channel_k,
            &self.channel_v,
            &self.spatial_q,
            &self.spatial_k,
            &self.spatial_v,
        ]
        .iter()
        .map(|p| p.num_params())
        .sum()
    }
}

/// Channel weights, reweighted features and the softmax table behind them.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention {
    pub alpha: Vec<f64>,
    pub features: FeatureMap,
    pub scores: Matrix,
}

fn column(values: &[f64]) -> FeatureMap {
    FeatureMap::from_fn(values.len(), 1, 1, |c, _, _| values[c])
}

/// Self-attention over the channel-pooled descriptor; returns
/// `α = σ(softmax(q kᵀ) v)` and `X ⊗ α + X`.
pub fn channel_attention(x: &FeatureMap, p: &AttentionParams) -> Result<ChannelAttention> {
    let c = p.validate()?;
    if x.channels() != c {
        return Err(shape_err(format!("attention expects {c} channels, got {}", x.channels())));
    }
    let pooled = column(&x.channel_means());
    let q = conv1x1(&pooled, &p.channel_q)?;
    let k = conv1x1(&pooled, &p.channel_k)?;
    let v = conv1x1(&pooled, &p.channel_v)?;
    let scores = softmax_rows(&Matrix::outer(q.data(), k.data()));
    let alpha: Vec<f64> = scores.mul_vec(v.data())?.into_iter().map(sigmoid).collect();
    let features = x.scale_channels(&alpha)?.add(x)?;
    Ok(ChannelAttention { alpha, features, scores })
}

/// Lower nearest-rank `gamma`-quantile: the `⌈γ·n⌉`-th smallest value
/// (the smallest one when `γ·n < 1`).
pub fn lower_quantile(values: &[f64], gamma: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (gamma * sorted.len() as f64).ceil() as usize;
    sorted[rank.saturating_sub(1).min(sorted.len() - 1)]
}

/// Which channels survive the confidence cut: `α_c > quantile_γ(α)`.
/// When the strict comparison would drop every channel (all weights equal),
/// every channel is kept.
pub fn confidence_keep(alpha: &[f64], gamma: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(param_err(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if alpha.is_empty() {
        return Err(shape_err("no channel weights"));
    }
    let q = lower_quantile(alpha, gamma);
    let keep: Vec<bool> = alpha.iter().map(|&a| a > q).collect();
    if keep.iter().any(|&k| k) {
        Ok(keep)
    } else {
        Ok(vec![true; alpha.len()])
    }
}

/// Zeroes the channels that fail [`confidence_keep`].
pub fn confidence_mask(x_c: &FeatureMap, alpha: &[f64], gamma: f64) -> Result<FeatureMap> {
    if alpha.len() != x_c.channels() {
        return Err(shape_err(format!(
            "{} channel weights for {} channels",
            alpha.len(),
            x_c.channels()
        )));
    }
    let keep = confidence_keep(alpha, gamma)?;
    let scales: Vec<f64> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
    x_c.scale_channels(&scales)
}

/// Spatial self-attention on one-channel projections, returning the map
/// and its softmax table. `D = softmax(Q Kᵀ) V + V`, as logits.
pub fn spatial_attention_traced(x: &FeatureMap, p: &AttentionParams) -> Result<(Grid2D, Matrix)> {
    let c = p.validate()?;
    if x.channels() != c {
        return Err(shape_err(format!("attention expects {c} channels, got {}", x.channels())));
    }
    let n = x.plane_len();
    let entries = n.saturating_mul(n);
    if entries > p.attention_budget {
        return Err(Error::Resource(format!(
            "spatial attention over {n} positions needs {entries} entries, budget is {}",
            p.attention_budget
        )));
    }
    let q = conv1x1(x, &p.spatial_q)?;
    let k = conv1x1(x, &p.spatial_k)?;
    let v = conv1x1(x, &p.spatial_v)?;
    let scores = softmax_rows(&Matrix::outer(q.data(), k.data()));
    let attended = scores.mul_vec(v.data())?;
    let out: Vec<f64> = attended.iter().zip(v.data()).map(|(a, b)| a + b).collect();
    Ok((Grid2D::new(x.height(), x.width(), out)?, scores))
}

pub fn spatial_attention(x: &FeatureMap, p: &AttentionParams) -> Result<Grid2D> {
    spatial_attention_traced(x, p).map(|(g, _)| g)
}

/// Result of the full union attention module.
#[derive(Clone, Debug, PartialEq)]
pub struct UamOutput {
    /// First decoder map, logits at the input resolution.
    pub d0: Grid2D,
    pub alpha_c: Vec<f64>,
    pub kept_mask: Vec<bool>,
    /// Largest `|row sum − 1|` over both softmax tables.
    pub softmax_row_error: f64,
}

/// Channel attention, confidence masking and spatial attention on an
/// aggregated feature map.
pub fn union_attention(x: &FeatureMap, p: &AttentionParams) -> Result<UamOutput> {
    let ca = channel_attention(x, p)?;
    let kept_mask = confidence_keep(&ca.alpha, p.gamma)?;
    let masked = confidence_mask(&ca.features, &ca.alpha, p.gamma)?;
    let (d0, spatial_scores) = spatial_attention_traced(&masked, p)?;
    let softmax_row_error = ca.scores.max_row_sum_error().max(spatial_scores.max_row_sum_error());
    Ok(UamOutput { d0, alpha_c: ca.alpha, kept_mask, softmax_row_error })
}

/// Object weight `σ(D)` and complementary edge weight: `1 − σ(D)`, zeroed
/// where it exceeds the denoising ratio.
pub fn object_weights(d_prev: &Grid2D, denoise: f64) -> Result<(Grid2D, Grid2D)> {
    if !(denoise > 0.0 && denoise < 1.0) {
        return Err(param_err(format!("denoising ratio must lie in (0, 1), got {denoise}")));
    }
    let alpha_o = d_prev.map(sigmoid);
    let alpha_e = alpha_o.map(|s| {
        let rev = 1.0 - s;
        if rev > denoise {
            0.0
        } else {
            rev
        }
    });
    Ok((alpha_o, alpha_e))
}

/// Object attention decoder step: weight the encoder features by object
/// and complementary edge weights, then run the receptive-field block down
/// to a single channel.
pub fn object_attention(
    d_prev: &Grid2D,
    e_enc: &FeatureMap,
    denoise: f64,
    rfb: &DdrmParams,
) -> Result<Grid2D> {
    if d_prev.dims() != e_enc.spatial_dims() {
        return Err(shape_err(format!(
            "decoder map {:?} does not match encoder features {:?}",
            d_prev.dims(),
            e_enc.spatial_dims()
        )));
    }
    if rfb.out_channels() != 1 {
        return Err(shape_err(format!(
            "object attention block must emit 1 channel, emits {}",
            rfb.out_channels()
        )));
    }
    let (alpha_o, alpha_e) = object_weights(d_prev, denoise)?;
    let weighted = e_enc.mul_spatial(&alpha_o)?.add(&e_enc.mul_spatial(&alpha_e)?)?;
    Ok(ddrm_forward(&weighted, rfb)?.channel_grid(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        }
    }

    fn random_conv(rng: &mut impl FnMut() -> f64, i: usize, o: usize, k: usize) -> ConvParams {
        ConvParams::dense(i, o, k, 1, (0..i * o * k * k).map(|_| 0.5 * rng()).collect(), (0..o).map(|_| 0.1 * rng()).collect())
            .unwrap()
    }

    fn random_map(rng: &mut impl FnMut() -> f64, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng())
    }

    fn random_ddrm(rng: &mut impl FnMut() -> f64, i: usize, o: usize, b: usize, dil: &[usize], symmetric: bool) -> DdrmParams {
        let branches = dil
            .iter()
            .map(|&d| {
                let mut k = vec![0.0; b * 9];
                for c in 0..b {
                    for y in 0..3 {
                        for x in 0..3 {
                            if !symmetric || x >= y {
                                let v = rng();
                                k[c * 9 + y * 3 + x] = v;
                                if symmetric {
                                    k[c * 9 + x * 3 + y] = v;
                                }
                            }
                        }
                    }
                }
                DdrmBranch::new(
                    random_conv(rng, i, b, 1).with_activation(true),
                    ConvParams::depthwise(b, 3, d, k, (0..b).map(|_| 0.1 * rng()).collect()).unwrap().with_activation(true),
                    random_conv(rng, b, b, 1).with_activation(true),
                )
                .unwrap()
            })
            .collect();
        DdrmParams::new(branches, random_conv(rng, b * dil.len(), o, 1), random_conv(rng, i, o, 1)).unwrap()
    }

    #[test]
    fn ddrm_zero_and_shape_contract() {
        let p = DdrmParams::zero(3, 2, 2, &DEFAULT_DILATIONS).unwrap();
        let y = ddrm_forward(&FeatureMap::zeros(3, 8, 8), &p).unwrap();
        assert_eq!(y.shape(), (2, 8, 8));
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut rng = lcg(7);
        for dil in [&[1usize][..], &[1, 2], &[1, 3, 5, 7], &[2, 4, 6]] {
            let p = random_ddrm(&mut rng, 3, 4, 2, dil, false);
            let x = random_map(&mut rng, 3, 9, 11);
            assert_eq!(ddrm_forward(&x, &p).unwrap().shape(), (4, 9, 11));
        }
        assert!(matches!(
            ddrm_forward(&FeatureMap::zeros(2, 8, 8), &p),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn ddrm_single_branch_trace() {
        // reduce = P, delta depthwise, identity pointwise and fuse, residual = P
        let proj = ConvParams::pointwise(2, 2, vec![0.5, -1.0, 2.0, 0.25], vec![0.0, 0.0]).unwrap();
        let branch = DdrmBranch::new(
            proj.clone(),
            ConvParams::delta_depthwise(2, 3, 3).unwrap(),
            ConvParams::identity_pointwise(2),
        )
        .unwrap();
        let p = DdrmParams::new(vec![branch], ConvParams::identity_pointwise(2), proj.clone()).unwrap();
        let x = FeatureMap::from_fn(2, 6, 6, |c, i, j| (c * 36 + i * 6 + j) as f64 * 0.1);
        let y = ddrm_forward(&x, &p).unwrap();
        let px = conv1x1(&x, &proj).unwrap();
        for (a, b) in y.data().iter().zip(px.data()) {
            assert_abs_diff_eq!(*a, 2.0 * b, epsilon = 1e-12);
        }
    }

    fn identity_aggregation(c: usize) -> AggregationParams {
        let id = ConvParams::identity_pointwise(c);
        let id2 = ConvParams::identity_pointwise(2 * c);
        AggregationParams {
            up3_to2: id.clone(),
            up4_to2: id.clone(),
            up4_to3: id.clone(),
            up4_keep: id,
            concat3: id2.clone(),
            up_e3: id2,
            fuse: ConvParams::identity_pointwise(3 * c),
        }
    }

    #[test]
    fn aggregation_zero_and_ones() {
        let p = identity_aggregation(2);
        let z = aggregate_multilevel(
            &FeatureMap::zeros(2, 8, 8),
            &FeatureMap::zeros(2, 4, 4),
            &FeatureMap::zeros(2, 2, 2),
            &p,
        )
        .unwrap();
        assert_eq!(z.x.shape(), (6, 8, 8));
        assert!(z.x.data().iter().all(|&v| v == 0.0));

        let ones = aggregate_multilevel(
            &FeatureMap::filled(2, 8, 8, 1.0),
            &FeatureMap::filled(2, 4, 4, 1.0),
            &FeatureMap::filled(2, 2, 2, 1.0),
            &p,
        )
        .unwrap();
        assert!(ones.e2_prime.data().iter().all(|&v| v == 1.0));

        let bad = aggregate_multilevel(
            &FeatureMap::zeros(2, 8, 8),
            &FeatureMap::zeros(2, 4, 4),
            &FeatureMap::zeros(2, 4, 4),
            &p,
        );
        assert!(matches!(bad, Err(Error::Shape(_))));
    }

    /// Straight-line transcription of the aggregation with explicit loops
    /// for bilinear upsampling and convolution.
    mod naive {
        pub type T = Vec<Vec<Vec<f64>>>;

        pub fn up2(x: &T) -> T {
            let (h, w) = (x[0].len(), x[0][0].len());
            let src = |o: usize, n: usize| -> (usize, usize, f64) {
                let s = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let i0 = s.floor() as usize;
                let i0 = i0.min(n - 1);
                (i0, (i0 + 1).min(n - 1), s - i0 as f64)
            };
            x.iter()
                .map(|p| {
                    (0..2 * h)
                        .map(|i| {
                            let (a, b, fy) = src(i, h);
                            (0..2 * w)
                                .map(|j| {
                                    let (c, d, fx) = src(j, w);
                                    (1.0 - fy) * ((1.0 - fx) * p[a][c] + fx * p[a][d])
                                        + fy * ((1.0 - fx) * p[b][c] + fx * p[b][d])
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        }

        pub fn conv(x: &T, w: &[f64], b: &[f64], k: usize, selu: bool) -> T {
            let (ci, h, wd) = (x.len(), x[0].len(), x[0][0].len());
            let r = (k / 2) as isize;
            (0..b.len())
                .map(|o| {
                    (0..h)
                        .map(|i| {
                            (0..wd)
                                .map(|j| {
                                    let mut s = b[o];
                                    for c in 0..ci {
                                        for ky in 0..k {
                                            for kx in 0..k {
                                                let y = i as isize + ky as isize - r;
                                                let xx = j as isize + kx as isize - r;
                                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                                    s += w[((o * ci + c) * k + ky) * k + kx] * x[c][y as usize][xx as usize];
                                                }
                                            }
                                        }
                                    }
                                    if selu {
                                        s = crate::grid::selu(s);
                                    }
                                    s
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect()
        }

        pub fn mul(a: &T, b: &T) -> T {
            a.iter()
                .zip(b)
                .map(|(p, q)| p.iter().zip(q).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u * v).collect()).collect())
                .collect()
        }

        pub fn cat(a: &T, b: &T) -> T {
            a.iter().chain(b.iter()).cloned().collect()
        }
    }

    fn to_nested(x: &FeatureMap) -> naive::T {
        (0..x.channels())
            .map(|c| (0..x.height()).map(|i| (0..x.width()).map(|j| x.get(c, i, j)).collect()).collect())
            .collect()
    }

    #[test]
    fn aggregation_matches_straight_line_transcription() {
        let mut rng = lcg(99);
        let (c2, c3, c4) = (4, 8, 4);
        let mk = |rng: &mut dyn FnMut() -> f64, i: usize, o: usize, k: usize| {
            ConvParams::dense(i, o, k, 1, (0..i * o * k * k).map(|_| 0.4 * rng()).collect(), (0..o).map(|_| 0.1 * rng()).collect())
                .unwrap()
                .with_activation(true)
        };
        let p = AggregationParams {
            up3_to2: mk(&mut rng, c3, c2, 3),
            up4_to2: mk(&mut rng, c4, c2, 3),
            up4_to3: mk(&mut rng, c4, c3, 1),
            up4_keep: mk(&mut rng, c4, c4, 3),
            concat3: mk(&mut rng, c3 + c4, c3 + c4, 3),
            up_e3: mk(&mut rng, c3 + c4, c3 + c4, 1),
            fuse: mk(&mut rng, c2 + c3 + c4, c2 + c3 + c4, 3),
        };
        let e2 = random_map(&mut rng, c2, 8, 8);
        let e3 = random_map(&mut rng, c3, 4, 4);
        let e4 = random_map(&mut rng, c4, 2, 2);
        let got = aggregate_multilevel(&e2, &e3, &e4, &p).unwrap();

        let c = |x: &naive::T, q: &ConvParams| naive::conv(x, q.weights(), q.bias(), q.kernel_size(), q.activation());
        let (n2, n3, n4) = (to_nested(&e2), to_nested(&e3), to_nested(&e4));
        let e2p = naive::mul(&naive::mul(&n2, &c(&naive::up2(&n3), &p.up3_to2)), &c(&naive::up2(&naive::up2(&n4)), &p.up4_to2));
        let e3pp = c(&naive::cat(&naive::mul(&n3, &c(&naive::up2(&n4), &p.up4_to3)), &c(&naive::up2(&n4), &p.up4_keep)), &p.concat3);
        let e2pp = c(&naive::up2(&e3pp), &p.up_e3);
        let x = c(&naive::cat(&e2p, &e2pp), &p.fuse);

        assert_eq!(got.x.shape(), (c2 + c3 + c4, 8, 8));
        let want = x.into_iter().flatten().flatten();
        for (a, b) in got.x.data().iter().zip(want) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn channel_attention_zero_input() {
        let p = AttentionParams::identity(4);
        let ca = channel_attention(&FeatureMap::zeros(4, 3, 3), &p).unwrap();
        assert!(ca.alpha.iter().all(|&a| a == 0.5));
        assert!(ca.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_attention_hand_computed() {
        // channel means 1, 2, 3
        let x = FeatureMap::from_fn(3, 2, 2, |c, i, j| (c + 1) as f64 + if (i + j) % 2 == 0 { 0.5 } else { -0.5 });
        let ca = channel_attention(&x, &AttentionParams::identity(3)).unwrap();
        let m = [1.0f64, 2.0, 3.0];
        for r in 0..3 {
            let exps: Vec<f64> = m.iter().map(|&k| (m[r] * k).exp()).collect();
            let z: f64 = exps.iter().sum();
            let av: f64 = exps.iter().zip(&m).map(|(e, v)| e / z * v).sum();
            assert_abs_diff_eq!(ca.alpha[r], 1.0 / (1.0 + (-av).exp()), epsilon = 1e-12);
            assert_abs_diff_eq!(ca.scores.row(r).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        }
        for c in 0..3 {
            for (a, b) in ca.features.channel(c).iter().zip(x.channel(c)) {
                assert_abs_diff_eq!(*a, b * (1.0 + ca.alpha[c]), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn confidence_mask_counts() {
        let alpha: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let kept = |g: f64| confidence_keep(&alpha, g).unwrap().iter().filter(|&&k| k).count();
        assert_eq!(kept(0.1), 9);
        assert_eq!(kept(0.5), 5);
        assert_eq!(kept(0.0), 9);
        assert_eq!(confidence_keep(&[0.3; 6], 0.5).unwrap(), vec![true; 6]);

        let x = FeatureMap::filled(10, 2, 2, 1.0);
        let masked = confidence_mask(&x, &alpha, 0.5).unwrap();
        for c in 0..10 {
            let expected = if c >= 5 { 1.0 } else { 0.0 };
            assert!(masked.channel(c).iter().all(|&v| v == expected));
        }
        assert!(matches!(confidence_keep(&alpha, 1.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn spatial_attention_hand_computed_and_budget() {
        let x = FeatureMap::new(1, 2, 2, vec![0.5, -1.0, 1.5, 0.25]).unwrap();
        let p = AttentionParams::identity(1);
        let d = spatial_attention(&x, &p).unwrap();
        let v = x.data();
        for r in 0..4 {
            let e: Vec<f64> = v.iter().map(|&k| (v[r] * k).exp()).collect();
            let z: f64 = e.iter().sum();
            let att: f64 = e.iter().zip(v).map(|(a, b)| a / z * b).sum();
            assert_abs_diff_eq!(d.data()[r], att + v[r], epsilon = 1e-12);
        }
        assert_eq!(d.dims(), (2, 2));
        assert!(spatial_attention(&FeatureMap::zeros(1, 3, 5), &p).unwrap().data().iter().all(|&v| v == 0.0));

        let tight = AttentionParams { attention_budget: 15, ..p };
        assert!(matches!(spatial_attention(&x, &tight), Err(Error::Resource(_))));
    }

    #[test]
    fn union_attention_zero_input_is_zero() {
        let mut rng = lcg(3);
        let c = 5;
        let zero_bias = |rng: &mut dyn FnMut() -> f64, o: usize| {
            ConvParams::pointwise(c, o, (0..c * o).map(|_| rng()).collect(), vec![0.0; o]).unwrap()
        };
        let p = AttentionParams {
            channel_q: zero_bias(&mut rng, c),
            channel_k: zero_bias(&mut rng, c),
            channel_v: zero_bias(&mut rng, c),
            spatial_q: zero_bias(&mut rng, 1),
            spatial_k: zero_bias(&mut rng, 1),
            spatial_v: zero_bias(&mut rng, 1),
            gamma: 0.1,
            denoise: 0.93,
            attention_budget: DEFAULT_ATTENTION_BUDGET,
        };
        let out = union_attention(&FeatureMap::zeros(c, 4, 4), &p).unwrap();
        assert!(out.d0.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.kept_mask, vec![true; c]);
        assert!(out.softmax_row_error < 1e-12);
    }

    #[test]
    fn object_weight_scalar_cases() {
        let d = Grid2D::new(1, 3, vec![40.0, -40.0, 0.0]).unwrap();
        let (ao, ae) = object_weights(&d, 0.93).unwrap();
        assert!(ao.get(0, 0) > 1.0 - 1e-12 && ae.get(0, 0) < 1e-12);
        assert!(ao.get(0, 1) < 1e-12 && ae.get(0, 1) == 0.0);
        assert_eq!((ao.get(0, 2), ae.get(0, 2)), (0.5, 0.5));
        assert_eq!(ao.get(0, 2) + ae.get(0, 2), 1.0);
        assert!(matches!(object_weights(&d, 1.0), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn object_attention_shapes() {
        let mut rng = lcg(5);
        let rfb = random_ddrm(&mut rng, 3, 1, 2, &DEFAULT_DILATIONS, false);
        let e = random_map(&mut rng, 3, 8, 8);
        let d = Grid2D::from_fn(8, 8, |i, j| (i as f64 - j as f64) * 0.3);
        assert_eq!(object_attention(&d, &e, 0.93, &rfb).unwrap().dims(), (8, 8));
        assert!(matches!(object_attention(&Grid2D::zeros(4, 4), &e, 0.93, &rfb), Err(Error::Shape(_))));
        let wide = random_ddrm(&mut rng, 3, 2, 2, &[1, 3], false);
        assert!(matches!(object_attention(&d, &e, 0.93, &wide), Err(Error::Shape(_))));
    }

    #[test]
    fn object_attention_transpose_equivariant() {
        let mut rng = lcg(21);
        let rfb = random_ddrm(&mut rng, 3, 1, 2, &[1, 3, 5], true);
        let e = random_map(&mut rng, 3, 9, 9);
        let d = Grid2D::from_fn(9, 9, |_, _| 3.0 * rng());
        let straight = object_attention(&d, &e, 0.93, &rfb).unwrap();
        let flipped = object_attention(&d.transpose(), &e.transpose_spatial(), 0.93, &rfb).unwrap();
        for (a, b) in straight.transpose().data().iter().zip(flipped.data()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn confidence_keep_matches_sort_oracle(
            alpha in proptest::collection::vec(0.0001f64..0.9999, 1..256),
            gamma in 0.0f64..0.999,
        ) {
            let keep = confidence_keep(&alpha, gamma).unwrap();
            let mut sorted = alpha.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let idx = ((gamma * alpha.len() as f64).ceil() as usize).max(1) - 1;
            let q = sorted[idx];
            let above = alpha.iter().filter(|&&a| a > q).count();
            let expected = if above == 0 { alpha.len() } else { above };
            prop_assert_eq!(keep.iter().filter(|&&k| k).count(), expected);
        }

        #[test]
        fn complementary_weight_is_bounded(logits in proptest::collection::vec(-30.0f64..30.0, 16), d in 0.05f64..0.99) {
            let g = Grid2D::new(4, 4, logits).unwrap();
            let (ao, ae) = object_weights(&g, d).unwrap();
            for (&o, &e) in ao.data().iter().zip(ae.data()) {
                prop_assert!(e >= 0.0 && e <= d);
                if 1.0 - o > d {
                    prop_assert_eq!(e, 0.0);
                }
            }
        }

        #[test]
        fn channel_weights_strictly_inside_unit_interval(data in proptest::collection::vec(-3.0f64..3.0, 4 * 9)) {
            let x = FeatureMap::new(4, 3, 3, data).unwrap();
            let ca = channel_attention(&x, &AttentionParams::identity(4)).unwrap();
            prop_assert!(ca.scores.max_row_sum_error() <= 1e-6);
            for a in ca.alpha {
                prop_assert!(a > 0.0 && a < 1.0);
            }
        }
    }
}
