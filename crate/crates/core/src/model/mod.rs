//! The cascaded reconstruction network.
//!
//! Each functional unit is a five-layer CNN block with a residual connection
//! followed by a k-space data-fidelity (DF) block. In MAC mode every kernel
//! of cascade `n` is produced by an affine map of the context vector γ
//! (`W_i = W^FC_i γ + B^FC_i`); those affine maps are the only trainable
//! tensors. STATIC mode stores the kernels directly and serves as the
//! context-specific and joint-context baselines.

mod checkpoint;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_as, parse_checkpoint, save_checkpoint, CHECKPOINT_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{LinearAdjoint, Tape, Var};
use crate::error::{Error, Result};
use crate::fourier::{forward_dft_plane, inverse_dft_planes, KSpaceGrid};
use crate::ops;
use crate::sampling::SamplingMask;
use crate::tensor::Tensor;

pub use crate::ops::Precision;

pub const LAYERS: usize = 5;

/// Shape of one CNN block: conv+ReLU ×4, then a single-channel output conv.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnBlockSpec {
    pub channels: usize,
    pub kernel: usize,
}

impl Default for CnnBlockSpec {
    fn default() -> Self {
        CnnBlockSpec {
            channels: 32,
            kernel: 3,
        }
    }
}

impl CnnBlockSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "block needs channels >= 1 and an odd kernel size, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `(N_out, N_in, k, k)` of layer `i` (0-based).
    pub fn kernel_shape(&self, i: usize) -> [usize; 4] {
        let (c, k) = (self.channels, self.kernel);
        match i {
            0 => [c, 1, k, k],
            4 => [1, c, k, k],
            _ => [c, c, k, k],
        }
    }

    pub fn kernel_len(&self, i: usize) -> usize {
        self.kernel_shape(i).iter().product()
    }

    pub fn fan_in(&self, i: usize) -> usize {
        let [_, nin, kh, kw] = self.kernel_shape(i);
        nin * kh * kw
    }

    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    Mac,
    Static,
}

impl ModelMode {
    pub fn code(self) -> u8 {
        match self {
            ModelMode::Mac => 1,
            ModelMode::Static => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(ModelMode::Mac),
            2 => Some(ModelMode::Static),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelMode::Mac => "mac",
            ModelMode::Static => "static",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub cascades: usize,
    /// Context vector length Nγ (1 or 2). Ignored by STATIC models beyond bookkeeping.
    pub context_len: usize,
    #[serde(default)]
    pub block: CnnBlockSpec,
    /// Finite λ blends measured and predicted k-space on Ω; `None` is hard replacement.
    #[serde(default)]
    pub df_lambda: Option<f64>,
    /// Convolution arithmetic. Not stored in checkpoints.
    #[serde(default)]
    pub precision: Precision,
}

impl ModelConfig {
    pub fn mac(cascades: usize, context_len: usize) -> Self {
        ModelConfig {
            mode: ModelMode::Mac,
            cascades,
            context_len,
            block: CnnBlockSpec::default(),
            df_lambda: None,
            precision: Precision::F64,
        }
    }

    pub fn static_(cascades: usize, context_len: usize) -> Self {
        ModelConfig {
            mode: ModelMode::Static,
            ..Self::mac(cascades, context_len)
        }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.block.channels = channels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.cascades == 0 || self.cascades > u8::MAX as usize {
            return Err(Error::Config(format!("cascades must be in 1..=255, got {}", self.cascades)));
        }
        if self.mode == ModelMode::Mac && !(1..=2).contains(&self.context_len) {
            return Err(Error::Config(format!(
                "context length must be 1 or 2, got {}",
                self.context_len
            )));
        }
        if let Some(l) = self.df_lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::Config(format!("df_lambda must be finite and >= 0, got {l}")));
            }
        }
        Ok(())
    }
}

/// `W^FC` (`[Nw, Nγ]`) and `B^FC` (`[Nw]`) for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Affine weight predictors for every cascade and layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DwpParameters {
    pub context_len: usize,
    pub blocks: Vec<[AffineMap; LAYERS]>,
}

/// Directly stored kernels for every cascade and layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticKernels {
    pub blocks: Vec<[Tensor; LAYERS]>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Weights {
    Mac(DwpParameters),
    Static(StaticKernels),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconModel {
    config: ModelConfig,
    weights: Weights,
}

/// Predicts the five kernels of cascade `n` (0-based) for context `gamma`.
pub fn dwp_predict(
    params: &DwpParameters,
    spec: &CnnBlockSpec,
    gamma: &Tensor,
    n: usize,
) -> Result<[Tensor; LAYERS]> {
    if gamma.shape() != [params.context_len] {
        return Err(Error::ContextLength {
            expected: params.context_len,
            got: gamma.len(),
        });
    }
    let block = params.blocks.get(n).ok_or_else(|| {
        Error::InvalidArgument(format!("cascade {n} out of range ({})", params.blocks.len()))
    })?;
    let mut out = Vec::with_capacity(LAYERS);
    for (i, map) in block.iter().enumerate() {
        let flat = ops::affine(gamma, &map.weight, &map.bias)?;
        out.push(flat.reshape(&spec.kernel_shape(i))?);
    }
    Ok(out.try_into().expect("five layers"))
}

fn check_kernels(spec: &CnnBlockSpec, kernels: &[Tensor; LAYERS]) -> Result<()> {
    for (i, k) in kernels.iter().enumerate() {
        k.expect_shape("cnn_block (kernel)", &spec.kernel_shape(i))?;
    }
    Ok(())
}

fn check_images(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [b, 1, h, w] => Ok((*b, *h, *w)),
        other => Err(Error::InvalidArgument(format!(
            "expected images shaped (B, 1, H, W), got {other:?}"
        ))),
    }
}

/// conv→ReLU ×4, conv, plus the block input.
pub fn cnn_block(x: &Tensor, kernels: &[Tensor; LAYERS], spec: &CnnBlockSpec) -> Result<Tensor> {
    cnn_block_with(x, kernels, spec, Precision::F64)
}

pub fn cnn_block_with(
    x: &Tensor,
    kernels: &[Tensor; LAYERS],
    spec: &CnnBlockSpec,
    precision: Precision,
) -> Result<Tensor> {
    check_images(x)?;
    check_kernels(spec, kernels)?;
    let pad = spec.pad();
    let mut h = x.clone();
    for (i, k) in kernels.iter().enumerate() {
        h = ops::conv2d_with(&h, k, pad, precision)?;
        if i + 1 < LAYERS {
            h = ops::relu(&h);
        }
    }
    h.add(x)
}

/// Per-frequency weight applied to the network's own k-space on Ω.
fn kept_fraction(lambda: Option<f64>) -> f64 {
    match lambda {
        None => 0.0,
        Some(l) => 1.0 / (1.0 + l),
    }
}

fn check_df(x: &Tensor, ys: &[KSpaceGrid], mask: &SamplingMask) -> Result<(usize, usize, usize)> {
    let (b, h, w) = check_images(x)?;
    if mask.dims() != [h, w] {
        return Err(Error::shape("df_apply (mask)", &[h, w], &mask.dims()));
    }
    if ys.len() != b {
        return Err(Error::shape("df_apply (k-space batch)", &[b], &[ys.len()]));
    }
    for y in ys {
        if y.dims() != [h, w] {
            return Err(Error::shape("df_apply (k-space)", &[h, w], &y.dims()));
        }
    }
    Ok((b, h, w))
}

/// Data fidelity: replaces (or, for finite λ, blends) the network's k-space
/// with the measurement `y` on the sampled set, keeping it elsewhere.
pub fn df_apply_with(
    x_cnn: &Tensor,
    ys: &[KSpaceGrid],
    mask: &SamplingMask,
    lambda: Option<f64>,
) -> Result<Tensor> {
    let (b, h, w) = check_df(x_cnn, ys, mask)?;
    let keep = kept_fraction(lambda);
    let meas = 1.0 - keep;
    let plane = h * w;
    let mut out = Vec::with_capacity(b * plane);
    for (bi, y) in ys.iter().enumerate() {
        let mut k = forward_dft_plane(h, w, &x_cnn.data()[bi * plane..(bi + 1) * plane]);
        for idx in 0..plane {
            if mask.is_sampled(idx) {
                k.re[idx] = keep * k.re[idx] + meas * y.re[idx];
                k.im[idx] = keep * k.im[idx] + meas * y.im[idx];
            }
        }
        out.extend(inverse_dft_planes(&k).0);
    }
    Ok(Tensor::from_parts(x_cnn.shape().to_vec(), out))
}

/// Hard-replacement data fidelity (λ → ∞).
pub fn df_apply(x_cnn: &Tensor, ys: &[KSpaceGrid], mask: &SamplingMask) -> Result<Tensor> {
    df_apply_with(x_cnn, ys, mask, None)
}

/// The derivative of DF w.r.t. its input is DF with `y = 0`; it is self-adjoint.
struct DfAdjoint {
    sampled: Vec<bool>,
    keep: f64,
    h: usize,
    w: usize,
}

impl LinearAdjoint for DfAdjoint {
    fn adjoint(&self, upstream: &Tensor) -> Result<Tensor> {
        let plane = self.h * self.w;
        let mut out = Vec::with_capacity(upstream.len());
        for g in upstream.data().chunks_exact(plane) {
            let mut k = forward_dft_plane(self.h, self.w, g);
            for (idx, &s) in self.sampled.iter().enumerate() {
                if s {
                    k.re[idx] *= self.keep;
                    k.im[idx] *= self.keep;
                }
            }
            out.extend(inverse_dft_planes(&k).0);
        }
        Ok(Tensor::from_parts(upstream.shape().to_vec(), out))
    }
}

/// Tape variables for one model's trainable tensors, in [`ReconModel::parameters`] order.
pub struct RecordedParams {
    pub vars: Vec<Var>,
}

impl ReconModel {
    /// Fresh model. DWP weights start at zero and biases uniform in ±1/√fan_in;
    /// STATIC kernels are drawn from the same uniform range.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = config.block;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |i: usize| -> Vec<f64> {
            let bound = 1.0 / (spec.fan_in(i) as f64).sqrt();
            (0..spec.kernel_len(i)).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let weights = match config.mode {
            ModelMode::Mac => {
                let blocks = (0..config.cascades)
                    .map(|_| {
                        let maps: Vec<AffineMap> = (0..LAYERS)
                            .map(|i| AffineMap {
                                weight: Tensor::zeros(&[spec.kernel_len(i), config.context_len]),
                                bias: Tensor::from_parts(vec![spec.kernel_len(i)], uniform(i)),
                            })
                            .collect();
                        maps.try_into().expect("five layers")
                    })
                    .collect();
                Weights::Mac(DwpParameters {
                    context_len: config.context_len,
                    blocks,
                })
            }
            ModelMode::Static => {
                let blocks = (0..config.cascades)
                    .map(|_| {
                        let ks: Vec<Tensor> = (0..LAYERS)
                            .map(|i| Tensor::from_parts(spec.kernel_shape(i).to_vec(), uniform(i)))
                            .collect();
                        ks.try_into().expect("five layers")
                    })
                    .collect();
                Weights::Static(StaticKernels { blocks })
            }
        };
        Ok(ReconModel { config, weights })
    }

    /// Assembles a model from explicit weights, checking every shape.
    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let spec = config.block;
        match (&weights, config.mode) {
            (Weights::Mac(p), ModelMode::Mac) => {
                if p.blocks.len() != config.cascades || p.context_len != config.context_len {
                    return Err(Error::Config("DWP parameter count does not match config".into()));
                }
                for block in &p.blocks {
                    for (i, m) in block.iter().enumerate() {
                        m.weight.expect_shape("dwp weight", &[spec.kernel_len(i), config.context_len])?;
                        m.bias.expect_shape("dwp bias", &[spec.kernel_len(i)])?;
                    }
                }
            }
            (Weights::Static(k), ModelMode::Static) => {
                if k.blocks.len() != config.cascades {
                    return Err(Error::Config("kernel block count does not match config".into()));
                }
                for block in &k.blocks {
                    check_kernels(&spec, block)?;
                }
            }
            (Weights::Mac(_), ModelMode::Static) => {
                return Err(Error::ModeMismatch {
                    expected: "static",
                    found: "mac",
                })
            }
            (Weights::Static(_), ModelMode::Mac) => {
                return Err(Error::ModeMismatch {
                    expected: "mac",
                    found: "static",
                })
            }
        }
        Ok(ReconModel { config, weights })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn set_df_lambda(&mut self, lambda: Option<f64>) {
        self.config.df_lambda = lambda;
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.config.precision = precision;
    }

    /// Stage-two initialisation: `cascades` copies of a single-unit model.
    pub fn replicate_unit(unit: &ReconModel, cascades: usize) -> Result<Self> {
        if unit.config.cascades != 1 {
            return Err(Error::Precondition(format!(
                "stage-one model must have one cascade, has {}",
                unit.config.cascades
            )));
        }
        let config = ModelConfig {
            cascades,
            ..unit.config
        };
        let weights = match &unit.weights {
            Weights::Mac(p) => Weights::Mac(DwpParameters {
                context_len: p.context_len,
                blocks: vec![p.blocks[0].clone(); cascades],
            }),
            Weights::Static(k) => Weights::Static(StaticKernels {
                blocks: vec![k.blocks[0].clone(); cascades],
            }),
        };
        Self::from_weights(config, weights)
    }

    /// The five kernels of cascade `n` (0-based). MAC models require `gamma`.
    pub fn kernels(&self, gamma: Option<&Tensor>, n: usize) -> Result<[Tensor; LAYERS]> {
        match &self.weights {
            Weights::Mac(p) => {
                let g = gamma.ok_or_else(|| {
                    Error::InvalidArgument("MAC model needs a context vector".into())
                })?;
                dwp_predict(p, &self.config.block, g, n)
            }
            Weights::Static(k) => k
                .blocks
                .get(n)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("cascade {n} out of range"))),
        }
    }

    /// STATIC model whose kernels equal this model's kernels at `gamma`.
    pub fn freeze(&self, gamma: Option<&Tensor>) -> Result<Self> {
        let blocks = (0..self.config.cascades)
            .map(|n| self.kernels(gamma, n))
            .collect::<Result<Vec<_>>>()?;
        Self::from_weights(
            ModelConfig {
                mode: ModelMode::Static,
                ..self.config
            },
            Weights::Static(StaticKernels { blocks }),
        )
    }

    /// Forward pass: `x ← DF(CNN_n(x) + x)` for every cascade, starting from `x_u`.
    ///
    /// `x_u` is `[B, 1, H, W]` and `ys` holds the measured k-space of each image.
    pub fn forward(
        &self,
        gamma: Option<&Tensor>,
        x_u: &Tensor,
        ys: &[KSpaceGrid],
        mask: &SamplingMask,
    ) -> Result<Tensor> {
        check_df(x_u, ys, mask)?;
        let mut x = x_u.clone();
        for n in 0..self.config.cascades {
            let kernels = self.kernels(gamma, n)?;
            let c = cnn_block_with(&x, &kernels, &self.config.block, self.config.precision)?;
            x = df_apply_with(&c, ys, mask, self.config.df_lambda)?;
        }
        Ok(x)
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        match &self.weights {
            Weights::Mac(p) => p
                .blocks
                .iter()
                .flat_map(|b| b.iter().flat_map(|m| [&m.weight, &m.bias]))
                .collect(),
            Weights::Static(k) => k.blocks.iter().flat_map(|b| b.iter()).collect(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.weights {
            Weights::Mac(p) => p
                .blocks
                .iter_mut()
                .flat_map(|b| b.iter_mut().flat_map(|m| [&mut m.weight, &mut m.bias]))
                .collect(),
            Weights::Static(k) => k.blocks.iter_mut().flat_map(|b| b.iter_mut()).collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Records the forward pass on `tape`. Returns the output variable and the
    /// parameter variables in [`Self::parameters`] order.
    pub fn record(
        &self,
        tape: &mut Tape,
        gamma: Option<&Tensor>,
        x_u: &Tensor,
        ys: &[KSpaceGrid],
        mask: &SamplingMask,
    ) -> Result<(Var, RecordedParams)> {
        let (_, h, w) = check_df(x_u, ys, mask)?;
        let spec = self.config.block;
        let pad = spec.pad();
        let param_vars: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|p| tape.param(p.clone()))
            .collect();

        let gamma_var = match (&self.weights, gamma) {
            (Weights::Mac(p), Some(g)) => {
                if g.shape() != [p.context_len] {
                    return Err(Error::ContextLength {
                        expected: p.context_len,
                        got: g.len(),
                    });
                }
                Some(tape.constant(g.clone()))
            }
            (Weights::Mac(_), None) => {
                return Err(Error::InvalidArgument("MAC model needs a context vector".into()))
            }
            (Weights::Static(_), _) => None,
        };

        let sampled: Vec<bool> = (0..h * w).map(|i| mask.is_sampled(i)).collect();
        let keep = kept_fraction(self.config.df_lambda);
        let mut x = tape.constant(x_u.clone());
        for n in 0..self.config.cascades {
            let mut kernels = Vec::with_capacity(LAYERS);
            for i in 0..LAYERS {
                let k = match gamma_var {
                    Some(g) => {
                        let (wv, bv) = (param_vars[2 * (n * LAYERS + i)], param_vars[2 * (n * LAYERS + i) + 1]);
                        let flat = tape.affine(g, wv, bv)?;
                        tape.reshape(flat, &spec.kernel_shape(i))?
                    }
                    None => param_vars[n * LAYERS + i],
                };
                kernels.push(k);
            }
            let mut hv = x;
            for (i, &k) in kernels.iter().enumerate() {
                hv = tape.conv2d_with(hv, k, pad, self.config.precision)?;
                if i + 1 < LAYERS {
                    hv = tape.relu(hv);
                }
            }
            let c = tape.add(hv, x)?;
            let value = df_apply_with(tape.value(c), ys, mask, self.config.df_lambda)?;
            x = tape.linear(
                c,
                value,
                Box::new(DfAdjoint {
                    sampled: sampled.clone(),
                    keep,
                    h,
                    w,
                }),
            );
        }
        Ok((x, RecordedParams { vars: param_vars }))
    }
}
