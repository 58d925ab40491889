//! Sequential attention over a padded `B×L×D` embedding tensor.
//!
//! A feature-wise map re-weights the `D` embedding dimensions (optionally
//! clamped by an adaptive threshold `delta`), then a token-wise map re-weights
//! the `L` positions. Both maps are built from max- and average-pooled views
//! of their input, fed through one shared two-layer feed-forward network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Mask, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    /// Feature-wise map first, token-wise map on its output.
    FamThenTam,
    TamThenFam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamConfig {
    pub d_model: usize,
    pub max_len: usize,
    /// Threshold subtracted from the feature map before clamping at zero.
    pub delta: f64,
    pub bottleneck_ratio: usize,
    pub order: Order,
    pub fam_enabled: bool,
    pub tam_enabled: bool,
}

impl SamConfig {
    pub fn new(d_model: usize, max_len: usize) -> Self {
        Self {
            d_model,
            max_len,
            delta: 0.0,
            bottleneck_ratio: 4,
            order: Order::FamThenTam,
            fam_enabled: true,
            tam_enabled: true,
        }
    }

    /// Both modules off: the plain-backbone baseline.
    pub fn is_identity(&self) -> bool {
        !self.fam_enabled && !self.tam_enabled
    }

    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        if self.d_model == 0 || self.max_len == 0 {
            return Err(Error::Config("d_model and max_len must be positive".into()));
        }
        if self.bottleneck_ratio == 0 {
            return Err(Error::Config("bottleneck_ratio must be positive".into()));
        }
        Ok(())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::Config(format!(
            "delta = {delta} is outside [0, 1]; the adaptive filter threshold must satisfy 0 <= delta <= 1"
        )));
    }
    Ok(())
}

/// Weights of `max(0, x W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    pub fn hidden_width(input: usize, bottleneck_ratio: usize) -> usize {
        (input / bottleneck_ratio).max(1)
    }

    pub fn zeros(input: usize, bottleneck_ratio: usize) -> Self {
        let hidden = Self::hidden_width(input, bottleneck_ratio);
        Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, input]),
            b2: Tensor::zeros(&[input]),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(input: usize, bottleneck_ratio: usize, rng: &mut R) -> Self {
        let hidden = Self::hidden_width(input, bottleneck_ratio);
        Self {
            w1: glorot(input, hidden, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: glorot(hidden, input, rng),
            b2: Tensor::zeros(&[input]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> FfnVars {
        FfnVars {
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Widens the input/output to `input` and the hidden layer to
    /// `hidden_width(input, ratio)`, with zeros in every new slot. The new
    /// slots contribute exact zeros, so outputs on the old coordinates are
    /// unchanged whenever the new input coordinates are zero.
    fn zero_extended(&self, input: usize, bottleneck_ratio: usize) -> Self {
        let (old_in, old_h) = (self.input_dim(), self.hidden_dim());
        let hidden = Self::hidden_width(input, bottleneck_ratio).max(old_h);
        let mut out = Self {
            w1: Tensor::zeros(&[input, hidden]),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::zeros(&[hidden, input]),
            b2: Tensor::zeros(&[input]),
        };
        for i in 0..old_in {
            for h in 0..old_h {
                out.w1.set(&[i, h], self.w1.get(&[i, h]));
                out.w2.set(&[h, i], self.w2.get(&[h, i]));
            }
            out.b2.set(&[i], self.b2.get(&[i]));
        }
        for h in 0..old_h {
            out.b1.set(&[h], self.b1.get(&[h]));
        }
        out
    }
}

pub(crate) fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("glorot shape")
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl FfnVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Feature-wise network (`D → D/r → D`) and token-wise network (`L → L/r → L`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamParams {
    pub ffn_f: FfnParams,
    pub ffn_t: FfnParams,
}

impl SamParams {
    pub fn init<R: Rng>(cfg: &SamConfig, rng: &mut R) -> Self {
        Self {
            ffn_f: FfnParams::init(cfg.d_model, cfg.bottleneck_ratio, rng),
            ffn_t: FfnParams::init(cfg.max_len, cfg.bottleneck_ratio, rng),
        }
    }

    pub fn zeros(cfg: &SamConfig) -> Self {
        Self {
            ffn_f: FfnParams::zeros(cfg.d_model, cfg.bottleneck_ratio),
            ffn_t: FfnParams::zeros(cfg.max_len, cfg.bottleneck_ratio),
        }
    }

    pub fn check(&self, cfg: &SamConfig) -> Result<()> {
        if self.ffn_f.input_dim() != cfg.d_model || self.ffn_t.input_dim() != cfg.max_len {
            return Err(Error::shape(
                "sam params",
                &[self.ffn_f.input_dim(), self.ffn_t.input_dim()],
                &[cfg.d_model, cfg.max_len],
            ));
        }
        Ok(())
    }

    /// Re-targets the token-wise network to a longer padded length. Valid
    /// positions produce bit-identical outputs under the extended parameters.
    pub fn with_max_len(&self, max_len: usize, bottleneck_ratio: usize) -> Result<Self> {
        if max_len < self.ffn_t.input_dim() {
            return Err(Error::Config(format!(
                "cannot shrink max_len from {} to {max_len}",
                self.ffn_t.input_dim()
            )));
        }
        Ok(Self {
            ffn_f: self.ffn_f.clone(),
            ffn_t: self.ffn_t.zero_extended(max_len, bottleneck_ratio),
        })
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> SamVars {
        SamVars {
            ffn_f: self.ffn_f.register(tape, trainable),
            ffn_t: self.ffn_t.register(tape, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SamVars {
    pub ffn_f: FfnVars,
    pub ffn_t: FfnVars,
}

/// Attention maps captured during one forward pass.
///
/// A map is `None` when its module is disabled; [`SamTrace::feature_weights`]
/// and [`SamTrace::token_weights`] fill the gap with the identity weighting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamTrace {
    /// Filtered feature map, `B×D`, entries in `[0, 1 - delta]`.
    pub fam_map: Option<Tensor>,
    /// Feature map before the threshold, `B×D`.
    pub fam_unfiltered: Option<Tensor>,
    /// Token map, `B×L`, rows summing to one over valid positions.
    pub tam_map: Option<Tensor>,
}

impl SamTrace {
    pub fn is_empty(&self) -> bool {
        self.fam_map.is_none() && self.tam_map.is_none()
    }

    /// Row `b` of the filtered feature map, or all ones without one.
    pub fn feature_weights(&self, b: usize, d_model: usize) -> Vec<f64> {
        match &self.fam_map {
            Some(m) => row(m, b).to_vec(),
            None => vec![1.0; d_model],
        }
    }

    /// Row `b` of the token map, or the mask row as ones/zeros without one.
    pub fn token_weights(&self, b: usize, mask: &Mask) -> Vec<f64> {
        match &self.tam_map {
            Some(m) => row(m, b).to_vec(),
            None => mask.row(b).iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }
}

fn row(t: &Tensor, b: usize) -> &[f64] {
    let w = t.shape()[1];
    &t.data()[b * w..(b + 1) * w]
}

pub fn ffn_forward(tape: &mut Tape, x: Var, p: &FfnVars) -> Result<Var> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_bias(h, p.b1)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, p.w2)?;
    tape.add_bias(y, p.b2)
}

/// `sigmoid(FFN(maxpool_tokens(x)) + FFN(avgpool_tokens(x)))`, shape `B×D`.
pub fn fam_map(tape: &mut Tape, x: Var, mask: &Mask, p: &FfnVars) -> Result<Var> {
    let max = tape.masked_max_pool(x, mask, Axis::Token)?;
    let avg = tape.masked_avg_pool(x, mask, Axis::Token)?;
    let a = ffn_forward(tape, max, p)?;
    let b = ffn_forward(tape, avg, p)?;
    let logits = tape.add(a, b)?;
    tape.sigmoid(logits)
}

/// Applies the threshold `max(0, m_f - delta)` and re-weights `x` feature-wise.
/// Returns the re-weighted tensor and the filtered map.
pub fn af_fam_apply(tape: &mut Tape, x: Var, m_f: Var, delta: f64) -> Result<(Var, Var)> {
    check_delta(delta)?;
    let shifted = tape.add_scalar(m_f, -delta)?;
    let filtered = tape.relu(shifted)?;
    let out = tape.scale_features(x, filtered)?;
    Ok((out, filtered))
}

/// `masked_softmax(FFN(maxpool_features(x)) + FFN(avgpool_features(x)))`, shape `B×L`.
pub fn tam_map(tape: &mut Tape, x: Var, mask: &Mask, p: &FfnVars) -> Result<Var> {
    let max = tape.masked_max_pool(x, mask, Axis::Feature)?;
    let avg = tape.masked_avg_pool(x, mask, Axis::Feature)?;
    let a = ffn_forward(tape, max, p)?;
    let b = ffn_forward(tape, avg, p)?;
    let logits = tape.add(a, b)?;
    tape.masked_softmax(logits, mask)
}

pub fn tam_apply(tape: &mut Tape, x: Var, m_t: Var) -> Result<Var> {
    tape.scale_tokens(x, m_t)
}

/// Runs the enabled modules in the configured order.
///
/// With both modules disabled `x` is returned as-is with an empty trace.
/// Otherwise padded rows of `x` are zeroed first, so padded rows of the
/// output are zero whatever they held on input.
pub fn sam_forward(tape: &mut Tape, x: Var, mask: &Mask, cfg: &SamConfig, p: &SamVars) -> Result<(Var, SamTrace)> {
    cfg.validate()?;
    let shape = tape.shape(x);
    if shape.len() != 3 || shape[1] != cfg.max_len || shape[2] != cfg.d_model {
        return Err(Error::shape("sam_forward", shape, &[cfg.max_len, cfg.d_model]));
    }
    let mut trace = SamTrace::default();
    if cfg.is_identity() {
        return Ok((x, trace));
    }
    let mut h = tape.zero_padding(x, mask)?;

    let fam = |tape: &mut Tape, h: Var, trace: &mut SamTrace| -> Result<Var> {
        if !cfg.fam_enabled {
            return Ok(h);
        }
        let m_f = fam_map(tape, h, mask, &p.ffn_f)?;
        let (out, filtered) = af_fam_apply(tape, h, m_f, cfg.delta)?;
        trace.fam_unfiltered = Some(tape.value(m_f).clone());
        trace.fam_map = Some(tape.value(filtered).clone());
        Ok(out)
    };
    let tam = |tape: &mut Tape, h: Var, trace: &mut SamTrace| -> Result<Var> {
        if !cfg.tam_enabled {
            return Ok(h);
        }
        let m_t = tam_map(tape, h, mask, &p.ffn_t)?;
        trace.tam_map = Some(tape.value(m_t).clone());
        tam_apply(tape, h, m_t)
    };

    match cfg.order {
        Order::FamThenTam => {
            h = fam(tape, h, &mut trace)?;
            h = tam(tape, h, &mut trace)?;
        }
        Order::TamThenFam => {
            h = tam(tape, h, &mut trace)?;
            h = fam(tape, h, &mut trace)?;
        }
    }
    Ok((h, trace))
}

/// A configured module with its parameters, for use outside training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sam {
    pub config: SamConfig,
    pub params: SamParams,
}

impl Sam {
    pub fn new<R: Rng>(config: SamConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = SamParams::init(&config, rng);
        Ok(Self { config, params })
    }

    /// Re-weights a `B×L×D` tensor and returns the output with its trace.
    pub fn forward(&self, x: &Tensor, mask: &Mask) -> Result<(Tensor, SamTrace)> {
        self.params.check(&self.config)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.params.register(&mut tape, false);
        let (out, trace) = sam_forward(&mut tape, xv, mask, &self.config, &vars)?;
        Ok((tape.value(out).clone(), trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_ffn(x: &Tensor, p: &FfnParams) -> Result<Tensor> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let vars = p.register(&mut t, false);
        let y = ffn_forward(&mut t, xv, &vars)?;
        Ok(t.value(y).clone())
    }

    #[test]
    fn hidden_width_floor_and_minimum() {
        assert_eq!(FfnParams::hidden_width(32, 4), 8);
        assert_eq!(FfnParams::hidden_width(3, 4), 1);
        assert_eq!(FfnParams::hidden_width(7, 2), 3);
    }

    #[test]
    fn ffn_zero_weights_gives_bias() {
        let mut p = FfnParams::zeros(3, 1);
        p.b2 = Tensor::vector(&[0.5, -1.0, 2.0]);
        let y = run_ffn(&Tensor::matrix(&[&[4.0, 5.0, 6.0]]).unwrap(), &p).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn ffn_hand_evaluation() {
        // W1 = I, W2 sums the hidden units into each output.
        let p = FfnParams {
            w1: Tensor::eye(2),
            b1: Tensor::zeros(&[2]),
            w2: Tensor::full(&[2, 2], 1.0),
            b2: Tensor::zeros(&[2]),
        };
        let y = run_ffn(&Tensor::matrix(&[&[1.0, -1.0]]).unwrap(), &p).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0]);
    }

    #[test]
    fn ffn_dead_relu_gives_b2() {
        let p = FfnParams {
            w1: Tensor::eye(2),
            b1: Tensor::vector(&[-10.0, -10.0]),
            w2: Tensor::full(&[2, 2], 3.0),
            b2: Tensor::vector(&[0.25, 0.75]),
        };
        let y = run_ffn(&Tensor::matrix(&[&[1.0, 2.0]]).unwrap(), &p).unwrap();
        assert_eq!(y.data(), &[0.25, 0.75]);
    }

    #[test]
    fn ffn_rejects_wrong_width() {
        let p = FfnParams::zeros(3, 1);
        assert!(matches!(run_ffn(&Tensor::zeros(&[1, 2]), &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn fam_zero_ffn_is_half() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 2, 4], (0..8).map(f64::from).collect()).unwrap());
        let p = FfnParams::zeros(4, 2).register(&mut t, false);
        let m = fam_map(&mut t, x, &Mask::full(1, 2), &p).unwrap();
        assert!(t.value(m).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn filter_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![1, 1, 2], vec![2.0, 3.0]).unwrap());
        let m = t.constant(Tensor::matrix(&[&[0.4, 0.7]]).unwrap());
        let (xp, filt) = af_fam_apply(&mut t, x, m, 0.5).unwrap();
        let f = t.value(filt).data();
        assert_eq!(f[0], 0.0);
        assert!((f[1] - 0.2).abs() < 1e-15);
        assert_eq!(t.value(xp).data()[0], 0.0);

        let (xp, _) = af_fam_apply(&mut t, x, m, 0.0).unwrap();
        assert_eq!(t.value(xp).data(), &[0.8, 0.7 * 3.0]);
        let (xp, _) = af_fam_apply(&mut t, x, m, 1.0).unwrap();
        assert!(t.value(xp).data().iter().all(|&v| v == 0.0));
        assert!(matches!(af_fam_apply(&mut t, x, m, 1.2), Err(Error::Config(_))));
        assert!(matches!(af_fam_apply(&mut t, x, m, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn tam_zero_ffn_is_uniform_over_valid() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 4, 2], 1.0));
        let mask = Mask::from_lengths(4, &[3]).unwrap();
        let p = FfnParams::zeros(4, 2).register(&mut t, false);
        let m = tam_map(&mut t, x, &mask, &p).unwrap();
        let w = t.value(m).data();
        for &v in &w[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(w[3], 0.0);

        let single = Mask::from_lengths(4, &[1]).unwrap();
        let m = tam_map(&mut t, x, &single, &p).unwrap();
        assert_eq!(t.value(m).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tam_hand_logits() {
        // Logits are FFN(max) + FFN(avg) = b2 + b2 with dead hidden units.
        let p = FfnParams {
            w1: Tensor::zeros(&[2, 1]),
            b1: Tensor::vector(&[-1.0]),
            w2: Tensor::zeros(&[1, 2]),
            b2: Tensor::vector(&[0.5, 1.0]),
        };
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 2, 3], 0.3));
        let p = p.register(&mut t, false);
        let m = tam_map(&mut t, x, &Mask::full(1, 2), &p).unwrap();
        let w = t.value(m).data();
        assert!((w[0] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert!((w[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    }

    #[test]
    fn tam_apply_cases() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[1, 2, 2], 4.0));
        let m = t.constant(Tensor::matrix(&[&[0.25, 0.75]]).unwrap());
        let y = tam_apply(&mut t, x, m).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 1.0, 3.0, 3.0]);

        let onehot = t.constant(Tensor::matrix(&[&[0.0, 1.0]]).unwrap());
        let y = tam_apply(&mut t, x, onehot).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 4.0, 4.0]);
        let bad = t.constant(Tensor::zeros(&[1, 3]));
        assert!(tam_apply(&mut t, x, bad).is_err());
    }

    fn random_input(rng: &mut ChaCha8Rng, b: usize, l: usize, d: usize) -> Tensor {
        Tensor::new(vec![b, l, d], (0..b * l * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn identity_when_both_disabled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = SamConfig::new(4, 3);
        cfg.fam_enabled = false;
        cfg.tam_enabled = false;
        let sam = Sam::new(cfg, &mut rng).unwrap();
        let x = random_input(&mut rng, 2, 3, 4);
        let (y, trace) = sam.forward(&x, &Mask::full(2, 3)).unwrap();
        assert_eq!(y, x);
        assert!(trace.is_empty());
    }

    #[test]
    fn delta_one_zeroes_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = SamConfig::new(4, 3);
        cfg.delta = 1.0;
        let sam = Sam::new(cfg, &mut rng).unwrap();
        let x = random_input(&mut rng, 2, 3, 4);
        let (y, trace) = sam.forward(&x, &Mask::full(2, 3)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(trace.fam_map.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orders_disagree_for_generic_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = SamConfig::new(8, 5);
        let mut sam = Sam::new(cfg, &mut rng).unwrap();
        let x = random_input(&mut rng, 2, 5, 8);
        let mask = Mask::from_lengths(5, &[5, 3]).unwrap();
        let (a, _) = sam.forward(&x, &mask).unwrap();
        sam.config.order = Order::TamThenFam;
        let (b, _) = sam.forward(&x, &mask).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-8);
    }

    #[test]
    fn disabled_modules_leave_identity_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cfg = SamConfig::new(4, 3);
        cfg.tam_enabled = false;
        let sam = Sam::new(cfg, &mut rng).unwrap();
        let mask = Mask::from_lengths(3, &[2]).unwrap();
        let (_, trace) = sam.forward(&random_input(&mut rng, 1, 3, 4), &mask).unwrap();
        assert!(trace.tam_map.is_none());
        assert_eq!(trace.token_weights(0, &mask), vec![1.0, 1.0, 0.0]);
        assert_eq!(trace.feature_weights(0, 4).len(), 4);
    }

    #[test]
    fn forward_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sam = Sam::new(SamConfig::new(4, 3), &mut rng).unwrap();
        let x = random_input(&mut rng, 1, 2, 4);
        assert!(matches!(sam.forward(&x, &Mask::full(1, 2)), Err(Error::Shape { .. })));
    }
}
