//! Convolutional encoder `q(s | o)` and transposed-convolutional decoder
//! `p(o | s)`.
//!
//! Encoder (64x64 preset): four stride-2 valid Conv2d layers with 4x4 kernels
//! and 32/64/128/256 filters and ReLU, spatial chain 64 -> 31 -> 14 -> 6 -> 2
//! (flattened 256*2*2 = 1024 features), then two heads:
//! `mu = Linear(1024 -> 3)` and `sigma = softplus(Linear(1024 -> 3) + 0.55) + 0.01`,
//! so `sigma >= 0.01` holds for every input and every parameter value.
//!
//! Decoder: `Linear(3 -> 1024) + ReLU`, reshaped to `[1024, 1, 1]`, then
//! stride-2 valid ConvTranspose2d layers with 128/64/32/6 output channels and
//! kernels 5, 5, 6, 6 (spatial chain 1 -> 5 -> 13 -> 30 -> 64), sigmoid
//! output in `(0, 1)`.
//!
//! A scaled-down variant with the same layer pattern is provided for 8x8
//! inputs; gradient checks run against it.

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{bernoulli_loglik_value, Act, Tape, Var};
use crate::tensor::{conv_out_size, conv_transpose_out_size, Tensor};
use crate::util::Stream;

/// Offset inside the sigma head's softplus.
pub const SIGMA_SOFTPLUS_OFFSET: f64 = 0.55;
/// Additive floor of the sigma head.
pub const SIGMA_FLOOR: f64 = 0.01;

/// Diagonal Gaussian over the latent state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl LatentGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `mean + stddev .* noise`; gradients (when run on the tape) flow to both
/// mean and stddev.
pub fn reparam_sample(lg: &LatentGaussian, noise: &[f64]) -> Vec<f64> {
    assert_eq!(lg.mean.len(), noise.len());
    lg.mean
        .iter()
        .zip(lg.stddev.iter())
        .zip(noise.iter())
        .map(|((&m, &s), &e)| m + s * e)
        .collect()
}

/// Differential entropy of a diagonal Gaussian:
/// `D/2 (1 + log 2 pi) + sum_i log sigma_i`.
pub fn diag_gaussian_entropy(lg: &LatentGaussian) -> f64 {
    let d = lg.dim() as f64;
    0.5 * d * (1.0 + LN_2PI) + lg.stddev.iter().map(|s| s.ln()).sum::<f64>()
}

/// Bernoulli log-likelihood of real-valued targets in `[0,1]` under predicted
/// probabilities in `(0,1)`; the negative of the binary cross-entropy. The
/// prediction is clamped to `[1e-6, 1 - 1e-6]` inside the log only.
pub fn bernoulli_loglik(target: &[f64], predicted: &[f64]) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::Shape(format!(
            "bernoulli_loglik: {} targets vs {} predictions",
            target.len(),
            predicted.len()
        )));
    }
    if predicted.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::InvalidArgument(
            "bernoulli_loglik: predictions must lie strictly in (0, 1)".into(),
        ));
    }
    Ok(bernoulli_loglik_value(target, predicted))
}

const LN_2PI: f64 = 1.8378770664093454;

/// One convolution layer: filters, square kernel size, stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Encoder architecture description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub in_size: usize,
    pub convs: Vec<ConvSpec>,
    pub latent_dim: usize,
}

/// Decoder architecture description. The latent is mapped by a linear layer
/// to `reshape_channels` features viewed as `[reshape_channels, 1, 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub latent_dim: usize,
    pub reshape_channels: usize,
    pub convts: Vec<ConvSpec>,
}

impl EncoderSpec {
    /// The 6x64x64 observation encoder.
    pub fn standard() -> Self {
        EncoderSpec {
            in_channels: 6,
            in_size: 64,
            convs: vec![
                ConvSpec { filters: 32, kernel: 4, stride: 2 },
                ConvSpec { filters: 64, kernel: 4, stride: 2 },
                ConvSpec { filters: 128, kernel: 4, stride: 2 },
                ConvSpec { filters: 256, kernel: 4, stride: 2 },
            ],
            latent_dim: 3,
        }
    }

    /// Scaled-down 6x8x8 variant with the same layer pattern, for gradient
    /// checks.
    pub fn tiny() -> Self {
        EncoderSpec {
            in_channels: 6,
            in_size: 8,
            convs: vec![
                ConvSpec { filters: 4, kernel: 4, stride: 2 },
                ConvSpec { filters: 8, kernel: 3, stride: 1 },
            ],
            latent_dim: 3,
        }
    }

    /// Spatial sizes after each conv layer.
    pub fn shape_chain(&self) -> Vec<usize> {
        let mut sizes = vec![self.in_size];
        for c in &self.convs {
            sizes.push(conv_out_size(*sizes.last().unwrap(), c.kernel, c.stride));
        }
        sizes
    }

    /// Flattened feature count feeding the heads.
    pub fn feature_dim(&self) -> usize {
        let final_size = *self.shape_chain().last().unwrap();
        self.convs.last().map(|c| c.filters).unwrap_or(self.in_channels) * final_size * final_size
    }
}

impl DecoderSpec {
    /// The 3 -> 6x64x64 observation decoder.
    pub fn standard() -> Self {
        DecoderSpec {
            latent_dim: 3,
            reshape_channels: 1024,
            convts: vec![
                ConvSpec { filters: 128, kernel: 5, stride: 2 },
                ConvSpec { filters: 64, kernel: 5, stride: 2 },
                ConvSpec { filters: 32, kernel: 6, stride: 2 },
                ConvSpec { filters: 6, kernel: 6, stride: 2 },
            ],
        }
    }

    /// Scaled-down companion of [`EncoderSpec::tiny`], output 6x8x8.
    pub fn tiny() -> Self {
        DecoderSpec {
            latent_dim: 3,
            reshape_channels: 8,
            convts: vec![
                ConvSpec { filters: 4, kernel: 4, stride: 2 },
                ConvSpec { filters: 6, kernel: 2, stride: 2 },
            ],
        }
    }

    /// Spatial sizes after each transposed conv (starting from 1x1).
    pub fn shape_chain(&self) -> Vec<usize> {
        let mut sizes = vec![1usize];
        for c in &self.convts {
            sizes.push(conv_transpose_out_size(*sizes.last().unwrap(), c.kernel, c.stride));
        }
        sizes
    }

    pub fn out_channels(&self) -> usize {
        self.convts.last().map(|c| c.filters).unwrap_or(self.reshape_channels)
    }

    pub fn out_size(&self) -> usize {
        *self.shape_chain().last().unwrap()
    }
}

/// Weights of one conv / linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// All encoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub spec: EncoderSpec,
    pub convs: Vec<LayerParams>,
    pub mu_head: LayerParams,
    pub sigma_head: LayerParams,
}

/// All decoder weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub spec: DecoderSpec,
    pub linear: LayerParams,
    pub convts: Vec<LayerParams>,
}

/// Fan-in-scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for both
/// weights and biases.
fn init_layer(shape_w: &[usize], fan_in: usize, out: usize, rng: &mut Stream) -> LayerParams {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let weight = Tensor::fill_with(shape_w, || rng.random_range(-bound..bound));
    let bias = Tensor::fill_with(&[out], || rng.random_range(-bound..bound));
    LayerParams { weight, bias }
}

impl EncoderParams {
    pub fn init(spec: &EncoderSpec, rng: &mut Stream) -> Self {
        let mut convs = Vec::new();
        let mut cin = spec.in_channels;
        for c in &spec.convs {
            let fan_in = cin * c.kernel * c.kernel;
            convs.push(init_layer(&[c.filters, cin, c.kernel, c.kernel], fan_in, c.filters, rng));
            cin = c.filters;
        }
        let feat = spec.feature_dim();
        let mu_head = init_layer(&[feat, spec.latent_dim], feat, spec.latent_dim, rng);
        let sigma_head = init_layer(&[feat, spec.latent_dim], feat, spec.latent_dim, rng);
        EncoderParams {
            spec: spec.clone(),
            convs,
            mu_head,
            sigma_head,
        }
    }

    /// All-zero weights; the sigma head then outputs
    /// `softplus(0.55) + 0.01` everywhere.
    pub fn zeros(spec: &EncoderSpec) -> Self {
        let mut convs = Vec::new();
        let mut cin = spec.in_channels;
        for c in &spec.convs {
            convs.push(LayerParams {
                weight: Tensor::zeros(&[c.filters, cin, c.kernel, c.kernel]),
                bias: Tensor::zeros(&[c.filters]),
            });
            cin = c.filters;
        }
        let feat = spec.feature_dim();
        EncoderParams {
            spec: spec.clone(),
            convs,
            mu_head: LayerParams {
                weight: Tensor::zeros(&[feat, spec.latent_dim]),
                bias: Tensor::zeros(&[spec.latent_dim]),
            },
            sigma_head: LayerParams {
                weight: Tensor::zeros(&[feat, spec.latent_dim]),
                bias: Tensor::zeros(&[spec.latent_dim]),
            },
        }
    }
}

impl DecoderParams {
    pub fn init(spec: &DecoderSpec, rng: &mut Stream) -> Self {
        let linear = init_layer(
            &[spec.latent_dim, spec.reshape_channels],
            spec.latent_dim,
            spec.reshape_channels,
            rng,
        );
        let mut convts = Vec::new();
        let mut cin = spec.reshape_channels;
        for c in &spec.convts {
            // transposed conv weight layout [Cin, Cout, KH, KW]
            let fan_in = cin * c.kernel * c.kernel;
            convts.push(init_layer(&[cin, c.filters, c.kernel, c.kernel], fan_in, c.filters, rng));
            cin = c.filters;
        }
        DecoderParams {
            spec: spec.clone(),
            linear,
            convts,
        }
    }

    pub fn zeros(spec: &DecoderSpec) -> Self {
        let linear = LayerParams {
            weight: Tensor::zeros(&[spec.latent_dim, spec.reshape_channels]),
            bias: Tensor::zeros(&[spec.reshape_channels]),
        };
        let mut convts = Vec::new();
        let mut cin = spec.reshape_channels;
        for c in &spec.convts {
            convts.push(LayerParams {
                weight: Tensor::zeros(&[cin, c.filters, c.kernel, c.kernel]),
                bias: Tensor::zeros(&[c.filters]),
            });
            cin = c.filters;
        }
        DecoderParams {
            spec: spec.clone(),
            linear,
            convts,
        }
    }
}

/// Tape handles for bound encoder parameters.
pub struct EncoderVars {
    pub convs: Vec<(Var, Var)>,
    pub mu_head: (Var, Var),
    pub sigma_head: (Var, Var),
}

pub struct DecoderVars {
    pub linear: (Var, Var),
    pub convts: Vec<(Var, Var)>,
}

impl EncoderParams {
    pub fn bind(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            convs: self
                .convs
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
            mu_head: (
                tape.leaf(self.mu_head.weight.clone()),
                tape.leaf(self.mu_head.bias.clone()),
            ),
            sigma_head: (
                tape.leaf(self.sigma_head.weight.clone()),
                tape.leaf(self.sigma_head.bias.clone()),
            ),
        }
    }
}

impl DecoderParams {
    pub fn bind(&self, tape: &mut Tape) -> DecoderVars {
        DecoderVars {
            linear: (
                tape.leaf(self.linear.weight.clone()),
                tape.leaf(self.linear.bias.clone()),
            ),
            convts: self
                .convts
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }
}

/// Encoder forward pass on the tape. `x: [B, C, H, W]` observations in
/// `[0,1]`. Returns `(mu, sigma)`, both `[B, latent_dim]`, with
/// `sigma >= 0.01` by construction.
pub fn encode_on_tape(
    tape: &mut Tape,
    spec: &EncoderSpec,
    vars: &EncoderVars,
    x: Var,
) -> (Var, Var) {
    let mut h = x;
    for (conv_spec, (w, b)) in spec.convs.iter().zip(vars.convs.iter()) {
        h = tape.conv2d(h, *w, *b, conv_spec.stride, Act::Relu);
    }
    let bsz = tape.value(h).shape()[0];
    let feat = spec.feature_dim();
    let flat = tape.reshape(h, &[bsz, feat]);
    let mu = tape.linear(flat, vars.mu_head.0, vars.mu_head.1, Act::None);
    let pre = tape.linear(flat, vars.sigma_head.0, vars.sigma_head.1, Act::None);
    let shifted = tape.add_scalar(pre, SIGMA_SOFTPLUS_OFFSET);
    let sp = tape.softplus(shifted);
    let sigma = tape.add_scalar(sp, SIGMA_FLOOR);
    (mu, sigma)
}

/// Decoder forward pass on the tape. `s: [B, latent_dim]`, output
/// `[B, C, H, W]` strictly inside `(0, 1)`.
pub fn decode_on_tape(
    tape: &mut Tape,
    spec: &DecoderSpec,
    vars: &DecoderVars,
    s: Var,
) -> Var {
    decode_impl(tape, spec, vars, s, true)
}

/// Decoder forward pass stopping before the output sigmoid; pairs with the
/// fused logits Bernoulli likelihood, which stays exact for saturated values.
pub fn decode_logits_on_tape(
    tape: &mut Tape,
    spec: &DecoderSpec,
    vars: &DecoderVars,
    s: Var,
) -> Var {
    decode_impl(tape, spec, vars, s, false)
}

fn decode_impl(
    tape: &mut Tape,
    spec: &DecoderSpec,
    vars: &DecoderVars,
    s: Var,
    final_sigmoid: bool,
) -> Var {
    let bsz = tape.value(s).shape()[0];
    let h = tape.linear(s, vars.linear.0, vars.linear.1, Act::Relu);
    let mut img = tape.reshape(h, &[bsz, spec.reshape_channels, 1, 1]);
    let n = spec.convts.len();
    for (i, (conv_spec, (w, b))) in spec.convts.iter().zip(vars.convts.iter()).enumerate() {
        let act = if i + 1 == n {
            if final_sigmoid {
                Act::Sigmoid
            } else {
                Act::None
            }
        } else {
            Act::Relu
        };
        img = tape.conv_transpose2d(img, *w, *b, conv_spec.stride, act);
    }
    img
}

/// Encodes a batch of flattened observations (rows of length `C*H*W`).
/// Plain inference entry point; runs a throwaway tape internally.
pub fn encode_batch(params: &EncoderParams, rows: &[f64], batch: usize) -> Vec<LatentGaussian> {
    let spec = &params.spec;
    let item = spec.in_channels * spec.in_size * spec.in_size;
    assert_eq!(rows.len(), batch * item, "encode_batch input size");
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x = tape.constant(Tensor::from_vec(
        &[batch, spec.in_channels, spec.in_size, spec.in_size],
        rows.to_vec(),
    ));
    let (mu, sigma) = encode_on_tape(&mut tape, spec, &vars, x);
    let mu = tape.value(mu).data();
    let sigma = tape.value(sigma).data();
    let d = spec.latent_dim;
    (0..batch)
        .map(|i| LatentGaussian {
            mean: mu[i * d..(i + 1) * d].to_vec(),
            stddev: sigma[i * d..(i + 1) * d].to_vec(),
        })
        .collect()
}

/// Encodes one observation.
pub fn encode(obs: &crate::env::Observation, params: &EncoderParams) -> Result<LatentGaussian> {
    let spec = &params.spec;
    if spec.in_size != crate::env::FRAME_SIZE || spec.in_channels != crate::env::OBS_CHANNELS {
        return Err(Error::Shape(format!(
            "encoder expects {}x{}x{} inputs",
            spec.in_channels, spec.in_size, spec.in_size
        )));
    }
    let rows = obs.to_f64();
    Ok(encode_batch(params, &rows, 1).pop().unwrap())
}

/// Decodes one latent state into an expected observation (values in (0,1),
/// layout `[C * H * W]`).
pub fn decode(s: &[f64], params: &DecoderParams) -> Result<Vec<f64>> {
    let spec = &params.spec;
    if s.len() != spec.latent_dim {
        return Err(Error::Shape(format!(
            "decoder expects a {}-dim latent, got {}",
            spec.latent_dim,
            s.len()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decoder input".into()));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let sv = tape.constant(Tensor::from_vec(&[1, spec.latent_dim], s.to_vec()));
    let out = decode_on_tape(&mut tape, spec, &vars, sv);
    Ok(tape.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{softplus, stream};

    #[test]
    fn standard_shapes() {
        let enc = EncoderSpec::standard();
        assert_eq!(enc.shape_chain(), vec![64, 31, 14, 6, 2]);
        assert_eq!(enc.feature_dim(), 1024);
        let dec = DecoderSpec::standard();
        assert_eq!(dec.shape_chain(), vec![1, 5, 13, 30, 64]);
        assert_eq!(dec.out_channels(), 6);
    }

    #[test]
    fn tiny_shapes() {
        let enc = EncoderSpec::tiny();
        assert_eq!(enc.shape_chain(), vec![8, 3, 1]);
        assert_eq!(enc.feature_dim(), 8);
        let dec = DecoderSpec::tiny();
        assert_eq!(dec.shape_chain(), vec![1, 4, 8]);
        assert_eq!(dec.out_channels(), 6);
    }

    #[test]
    fn zero_weights_sigma_head_closed_form() {
        let spec = EncoderSpec::tiny();
        let params = EncoderParams::zeros(&spec);
        let item = spec.in_channels * spec.in_size * spec.in_size;
        let rows: Vec<f64> = (0..item).map(|i| (i as f64 * 0.1).sin().abs()).collect();
        let lg = &encode_batch(&params, &rows, 1)[0];
        let expect = softplus(SIGMA_SOFTPLUS_OFFSET) + SIGMA_FLOOR;
        for &s in &lg.stddev {
            assert!((s - expect).abs() < 1e-15, "sigma {s} vs {expect}");
        }
        assert_eq!(lg.mean, vec![0.0; 3]);
        assert_eq!(lg.mean.len(), 3);
    }

    #[test]
    fn sigma_floor_holds_for_random_params() {
        let spec = EncoderSpec::tiny();
        let mut rng = stream(4, &[0]);
        let item = spec.in_channels * spec.in_size * spec.in_size;
        for trial in 0..5 {
            let mut params = EncoderParams::init(&spec, &mut rng);
            // exaggerate weights to push the head negative
            for l in params.convs.iter_mut() {
                for v in l.weight.data_mut() {
                    *v *= 30.0;
                }
            }
            for v in params.sigma_head.weight.data_mut() {
                *v *= -50.0;
            }
            let rows: Vec<f64> = (0..item).map(|i| ((i + trial) as f64 * 0.3).cos().abs()).collect();
            let lg = &encode_batch(&params, &rows, 1)[0];
            for &s in &lg.stddev {
                assert!(s >= SIGMA_FLOOR, "sigma {s} under floor");
            }
        }
    }

    #[test]
    fn encode_deterministic_and_batch_consistent() {
        let spec = EncoderSpec::tiny();
        let mut rng = stream(8, &[1]);
        let params = EncoderParams::init(&spec, &mut rng);
        let item = spec.in_channels * spec.in_size * spec.in_size;
        let mk = |seed: usize| -> Vec<f64> {
            (0..item).map(|i| (((i + seed * 31) as f64) * 0.05).sin().abs()).collect()
        };
        let (a, b) = (mk(0), mk(1));
        let mut batch = a.clone();
        batch.extend_from_slice(&b);
        let both = encode_batch(&params, &batch, 2);
        let solo_a = &encode_batch(&params, &a, 1)[0];
        let solo_b = &encode_batch(&params, &b, 1)[0];
        assert_eq!(&both[0], solo_a);
        assert_eq!(&both[1], solo_b);
        // determinism
        let again = &encode_batch(&params, &a, 1)[0];
        assert_eq!(again, solo_a);
    }

    #[test]
    fn decode_zero_weights_gives_half() {
        let spec = DecoderSpec::tiny();
        let params = DecoderParams::zeros(&spec);
        let out = decode(&[0.3, -0.7, 1.1], &params).unwrap();
        assert_eq!(out.len(), 6 * 8 * 8);
        for v in out {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn decode_in_open_unit_interval_and_continuous() {
        let spec = DecoderSpec::tiny();
        let mut rng = stream(2, &[5]);
        let params = DecoderParams::init(&spec, &mut rng);
        let s = [0.2, 0.4, -0.9];
        let out = decode(&s, &params).unwrap();
        for &v in &out {
            assert!(v > 0.0 && v < 1.0);
        }
        // numerical continuity probe
        let eps = 1e-6;
        let out2 = decode(&[s[0] + eps, s[1], s[2]], &params).unwrap();
        let max_change = out
            .iter()
            .zip(out2.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_change < 1e-3, "decode jump {max_change} for input step {eps}");
        assert!(decode(&[f64::NAN, 0.0, 0.0], &params).is_err());
        assert!(decode(&[0.0, 0.0], &params).is_err());
    }

    #[test]
    fn reparam_basics() {
        let lg = LatentGaussian {
            mean: vec![1.0, -2.0, 0.5],
            stddev: vec![0.1, 0.2, 0.3],
        };
        assert_eq!(reparam_sample(&lg, &[0.0, 0.0, 0.0]), lg.mean);
        let degenerate = LatentGaussian {
            mean: vec![1.0, -2.0, 0.5],
            stddev: vec![0.0, 0.0, 0.0],
        };
        assert_eq!(reparam_sample(&degenerate, &[3.0, -9.0, 2.0]), degenerate.mean);
        // Monte-Carlo mean
        let mut rng = stream(3, &[7]);
        let n = 100_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let noise: Vec<f64> = (0..3).map(|_| crate::util::standard_normal(&mut rng)).collect();
            let s = reparam_sample(&lg, &noise);
            for (a, v) in acc.iter_mut().zip(s.iter()) {
                *a += v;
            }
        }
        for (i, a) in acc.iter().enumerate() {
            let sample_mean = a / n as f64;
            let tol = 3.0 * lg.stddev[i] / (n as f64).sqrt();
            assert!(
                (sample_mean - lg.mean[i]).abs() < tol.max(1e-3),
                "dim {i}: {sample_mean} vs {}",
                lg.mean[i]
            );
        }
    }

    #[test]
    fn entropy_closed_forms() {
        let lg = LatentGaussian {
            mean: vec![5.0, -3.0, 0.0],
            stddev: vec![1.0, 1.0, 1.0],
        };
        let h = diag_gaussian_entropy(&lg);
        assert!((h - 1.5 * (1.0 + LN_2PI)).abs() < 1e-12);
        assert!((h - 4.256815599614018).abs() < 1e-12);
        // scaling one sigma by e adds exactly 1
        let mut lg2 = lg.clone();
        lg2.stddev[1] *= std::f64::consts::E;
        assert!((diag_gaussian_entropy(&lg2) - h - 1.0).abs() < 1e-12);
        // invariant to the mean
        let mut lg3 = lg.clone();
        lg3.mean = vec![0.0, 100.0, -42.0];
        assert_eq!(diag_gaussian_entropy(&lg3), h);
    }

    #[test]
    fn bernoulli_values_and_errors() {
        let m = 10;
        let v = bernoulli_loglik(&vec![0.5; m], &vec![0.5; m]).unwrap();
        assert!((v - m as f64 * 0.5f64.ln()).abs() < 1e-12);
        // perfect reconstruction limit (within the 1e-6 clamp)
        let v2 = bernoulli_loglik(&[1.0], &[1.0 - 1e-5]).unwrap();
        assert!(v2.abs() < 1.1e-5);
        let v3 = bernoulli_loglik(&[0.3], &[0.7]).unwrap();
        assert!((v3 - (-0.949783446209775)).abs() < 1e-12);
        assert!(bernoulli_loglik(&[0.5], &[1.0]).is_err());
        assert!(bernoulli_loglik(&[0.5], &[0.0]).is_err());
        assert!(bernoulli_loglik(&[0.5, 0.5], &[0.5]).is_err());
    }

    #[test]
    fn gradcheck_encoder_decoder_chain() {
        // end-to-end through encode -> reparam -> decode -> bernoulli
        let espec = EncoderSpec::tiny();
        let dspec = DecoderSpec::tiny();
        let mut rng = stream(77, &[0]);
        let enc = EncoderParams::init(&espec, &mut rng);
        let dec = DecoderParams::init(&dspec, &mut rng);
        let item = espec.in_channels * espec.in_size * espec.in_size;
        let obs: Vec<f64> = (0..2 * item).map(|i| ((i as f64) * 0.13).sin().abs()).collect();
        let noise: Vec<f64> = (0..2 * 3).map(|_| crate::util::standard_normal(&mut rng)).collect();

        let eval = |enc: &EncoderParams, dec: &DecoderParams| -> (f64, Tape, Vec<Var>) {
            let mut tape = Tape::new();
            let evars = enc.bind(&mut tape);
            let dvars = dec.bind(&mut tape);
            let x = tape.leaf(Tensor::from_vec(&[2, 6, 8, 8], obs.clone()));
            let (mu, sigma) = encode_on_tape(&mut tape, &espec, &evars, x);
            let nv = tape.leaf(Tensor::from_vec(&[2, 3], noise.clone()));
            let scaled = tape.mul(sigma, nv);
            let s = tape.add(mu, scaled);
            let out = decode_on_tape(&mut tape, &dspec, &dvars, s);
            let flat_target = tape.leaf(Tensor::from_vec(&[2 * item], obs.clone()));
            let flat_out = tape.reshape(out, &[2 * item]);
            let ll = tape.bernoulli_loglik(flat_target, flat_out);
            let v = tape.value(ll).item();
            let mut watch = vec![evars.convs[0].0, evars.sigma_head.0, dvars.linear.0];
            watch.push(dvars.convts[1].0);
            (v, tape, vec![ll.to_owned(), watch[0], watch[1], watch[2], watch[3]])
        };

        let (_, mut tape, handles) = eval(&enc, &dec);
        let root = handles[0];
        let grads = tape.backward(root);

        // check a few specific weights by central differences
        let checks: Vec<(usize, usize)> = vec![(1, 3), (2, 5), (3, 1), (4, 7)];
        for (hi, widx) in checks {
            let analytic = grads.get(handles[hi]).expect("grad missing").data()[widx];
            let mut enc_p = enc.clone();
            let mut dec_p = dec.clone();
            let slot: &mut f64 = match hi {
                1 => &mut enc_p.convs[0].weight.data_mut()[widx],
                2 => &mut enc_p.sigma_head.weight.data_mut()[widx],
                3 => &mut dec_p.linear.weight.data_mut()[widx],
                _ => &mut dec_p.convts[1].weight.data_mut()[widx],
            };
            let x0 = *slot;
            let h = 1e-5 * x0.abs().max(1.0);
            *slot = x0 + h;
            let (fp, _, _) = eval(&enc_p, &dec_p);
            let slot2: &mut f64 = match hi {
                1 => &mut enc_p.convs[0].weight.data_mut()[widx],
                2 => &mut enc_p.sigma_head.weight.data_mut()[widx],
                3 => &mut dec_p.linear.weight.data_mut()[widx],
                _ => &mut dec_p.convts[1].weight.data_mut()[widx],
            };
            *slot2 = x0 - h;
            let (fm, _, _) = eval(&enc_p, &dec_p);
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(analytic.abs()).max(1.0);
            assert!(
                (fd - analytic).abs() / denom < 1e-4,
                "handle {hi} idx {widx}: fd {fd} analytic {analytic}"
            );
        }
    }
}
