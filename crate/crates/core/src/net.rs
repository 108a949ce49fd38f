//! Time-conditioned encoder–decoder `f_θ` mapping a bridge state `x_t` to a
//! terminal prediction, with shallow and deep encoder taps exposed for the
//! feature losses.
//!
//! Layout for `levels = L`: a stem at full resolution (level 0), then
//! `L - 1` strided encoder blocks, each halving resolution. Level `k` is the
//! output of encoder block `k`; level `L - 1` is the bottleneck. The decoder
//! mirrors it with nearest upsampling and skip concatenation. Every block is
//! conditioned on `t` through a sinusoidal embedding mapped to a per-channel
//! scale and shift. The output head is `tanh(z + atanh(clamp(x_t)))`, so a
//! zero correction `z` reproduces the input and predictions stay in `[-1, 1]`.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AcmtError, Result};
use crate::image::Image;
use crate::nn::{ConvSpec, LinearSpec, ParamLayout, ParamSlot, Tape, Tensor};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Expected input size `[H, W]`; both must be divisible by `2^(levels-1)`.
    pub image_size: [usize; 2],
    pub levels: usize,
    pub base_channels: usize,
    pub time_embed_dim: usize,
    pub shallow_tap_level: usize,
    /// Defaults to the bottleneck, `levels - 1`.
    pub deep_tap_level: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            image_size: [64, 64],
            levels: 4,
            base_channels: 16,
            time_embed_dim: 64,
            shallow_tap_level: 1,
            deep_tap_level: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(AcmtError::Config(m));
        if self.levels < 2 {
            return err(format!("levels must be >= 2, got {}", self.levels));
        }
        if self.base_channels == 0 {
            return err("base_channels must be positive".into());
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return err("time_embed_dim must be even and >= 2".into());
        }
        if !(1 <= self.shallow_tap_level
            && self.shallow_tap_level < self.deep_tap_level
            && self.deep_tap_level <= self.levels - 1)
        {
            return err(format!(
                "need 1 <= shallow_tap_level ({}) < deep_tap_level ({}) <= levels - 1 ({})",
                self.shallow_tap_level,
                self.deep_tap_level,
                self.levels - 1
            ));
        }
        let stride = 1usize << (self.levels - 1);
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return err(format!(
                "image_size {h}x{w} must be positive multiples of {stride}"
            ));
        }
        Ok(())
    }

    /// Channel width at level `k`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level / 2)
    }

    /// `(C, H, W)` of the activation at encoder level `k`.
    pub fn level_shape(&self, level: usize) -> (usize, usize, usize) {
        let [h, w] = self.image_size;
        (self.channels(level), h >> level, w >> level)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Shallow (`F^s`) and deep (`F^d`) encoder activations.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps {
    pub shallow: Array3<f64>,
    pub deep: Array3<f64>,
}

/// Recorded forward pass for back-propagation.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    tape: Tape,
    output: usize,
}

/// Recorded encoder pass; supports gradients with respect to the input only.
#[derive(Clone, Debug)]
pub struct FeatureTrace {
    tape: Tape,
    input: usize,
    shallow: usize,
    deep: usize,
}

pub struct ForwardOutput {
    pub x1_pred: Image,
    pub features: FeatureMaps,
    /// Present in [`Mode::Train`].
    pub trace: Option<ForwardTrace>,
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    down: ConvSpec,
    down_mod: LinearSpec,
    conv: ConvSpec,
    conv_mod: LinearSpec,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    conv: ConvSpec,
    modulation: LinearSpec,
}

#[derive(Clone, Debug)]
struct Architecture {
    layout: ParamLayout,
    time_fc: LinearSpec,
    stem: ConvSpec,
    stem_mod: LinearSpec,
    encoder: Vec<EncoderBlock>,
    /// Ordered from the bottleneck upward; entry `i` produces level `L-2-i`.
    decoder: Vec<DecoderBlock>,
    out: ConvSpec,
}

impl Architecture {
    fn build(cfg: &NetworkConfig) -> Self {
        let mut layout = ParamLayout::default();
        let d = cfg.time_embed_dim;
        let linear = |layout: &mut ParamLayout, name: &str, din: usize, dout: usize| LinearSpec {
            weight: layout.push(format!("{name}.weight"), din * dout),
            bias: layout.push(format!("{name}.bias"), dout),
            din,
            dout,
        };
        let conv = |layout: &mut ParamLayout, name: &str, cin: usize, cout: usize, stride: usize| ConvSpec {
            weight: layout.push(format!("{name}.weight"), cout * cin * 9),
            bias: layout.push(format!("{name}.bias"), cout),
            cin,
            cout,
            k: 3,
            stride,
        };
        let time_fc = linear(&mut layout, "time.fc", d, d);
        let c0 = cfg.channels(0);
        let stem = conv(&mut layout, "enc0.conv", 1, c0, 1);
        let stem_mod = linear(&mut layout, "enc0.mod", d, 2 * c0);
        let mut encoder = Vec::new();
        for k in 1..cfg.levels {
            let (cin, cout) = (cfg.channels(k - 1), cfg.channels(k));
            encoder.push(EncoderBlock {
                down: conv(&mut layout, &format!("enc{k}.down"), cin, cout, 2),
                down_mod: linear(&mut layout, &format!("enc{k}.down_mod"), d, 2 * cout),
                conv: conv(&mut layout, &format!("enc{k}.conv"), cout, cout, 1),
                conv_mod: linear(&mut layout, &format!("enc{k}.mod"), d, 2 * cout),
            });
        }
        let mut decoder = Vec::new();
        let mut width = cfg.channels(cfg.levels - 1);
        for k in (1..cfg.levels).rev() {
            let skip = cfg.channels(k - 1);
            decoder.push(DecoderBlock {
                conv: conv(&mut layout, &format!("dec{k}.conv"), width + skip, skip, 1),
                modulation: linear(&mut layout, &format!("dec{k}.mod"), d, 2 * skip),
            });
            width = skip;
        }
        let out = conv(&mut layout, "out.conv", width, 1, 1);
        Architecture {
            layout,
            time_fc,
            stem,
            stem_mod,
            encoder,
            decoder,
            out,
        }
    }

    fn init(&self, seed: u64) -> Vec<f32> {
        let mut rng = rng::stream(seed, "net/init", 0);
        let mut params = vec![0.0f32; self.layout.total];
        let mut fill = |slot: usize, std: f64, rng: &mut rng::SeededRng| {
            for v in &mut params[self.layout.range(slot)] {
                *v = (std * rng::normal(rng)) as f32;
            }
        };
        let conv_std = |c: &ConvSpec, gain: f64| gain * (1.0 / c.fan_in() as f64).sqrt();
        fill(self.time_fc.weight, (1.0 / self.time_fc.din as f64).sqrt(), &mut rng);
        fill(self.stem.weight, conv_std(&self.stem, 1.4), &mut rng);
        fill(self.stem_mod.weight, 0.02, &mut rng);
        for b in &self.encoder {
            fill(b.down.weight, conv_std(&b.down, 1.4), &mut rng);
            fill(b.down_mod.weight, 0.02, &mut rng);
            fill(b.conv.weight, conv_std(&b.conv, 1.4), &mut rng);
            fill(b.conv_mod.weight, 0.02, &mut rng);
        }
        for b in &self.decoder {
            fill(b.conv.weight, conv_std(&b.conv, 1.4), &mut rng);
            fill(b.modulation.weight, 0.02, &mut rng);
        }
        fill(self.out.weight, conv_std(&self.out, 0.1), &mut rng);
        params
    }
}

fn time_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        v[i] = arg.sin() as f32;
        v[half + i] = arg.cos() as f32;
    }
    Tensor::vector(v)
}

fn to_f64_array3(t: &Tensor) -> Array3<f64> {
    Array3::from_shape_vec((t.c, t.h, t.w), t.data.iter().map(|&v| f64::from(v)).collect())
        .expect("tensor shape")
}

fn from_f64_array3(a: &Array3<f64>) -> Tensor {
    let (c, h, w) = a.dim();
    Tensor::from_vec(c, h, w, a.iter().map(|&v| v as f32).collect())
}

#[derive(Clone, Debug)]
pub struct TranslatorNet {
    config: NetworkConfig,
    arch: Architecture,
    params: Vec<f32>,
}

impl TranslatorNet {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::build(&config);
        let params = arch.init(seed);
        Ok(TranslatorNet {
            config,
            arch,
            params,
        })
    }

    pub fn from_params(config: NetworkConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let arch = Architecture::build(&config);
        if params.len() != arch.layout.total {
            return Err(AcmtError::invalid(format!(
                "expected {} parameters, got {}",
                arch.layout.total,
                params.len()
            )));
        }
        Ok(TranslatorNet {
            config,
            arch,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.arch.layout.slots
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.params {
            hasher.update(v.to_le_bytes());
        }
        hex_digest(hasher)
    }

    fn check_input(&self, x: &Image, t: f64) -> Result<()> {
        let [h, w] = self.config.image_size;
        if x.shape() != (h, w) {
            return Err(AcmtError::shape(format!(
                "network expects {h}x{w}, got {:?}",
                x.shape()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(AcmtError::invalid(format!("time {t} outside [0, 1]")));
        }
        Ok(())
    }

    fn input_tensor(x: &Image) -> Tensor {
        let (h, w) = x.shape();
        Tensor::from_vec(1, h, w, x.as_slice().iter().map(|&v| v as f32).collect())
    }

    /// Runs the encoder up to `max_level`, returning the tape, the input node,
    /// the time-embedding node and the per-level activation nodes.
    fn encode(&self, tape: &mut Tape, x: &Image, t: f64, max_level: usize) -> (usize, usize, Vec<usize>) {
        let p = &self.params;
        let l = &self.arch.layout;
        let input = tape.leaf(Self::input_tensor(x));
        let emb = tape.leaf(time_embedding(t, self.config.time_embed_dim));
        let hidden = tape.linear(p, l, self.arch.time_fc, emb);
        let temb = tape.silu(hidden);

        let block = |tape: &mut Tape, conv: ConvSpec, modulation: LinearSpec, from: usize| {
            let z = tape.conv(p, l, conv, from);
            let m = tape.linear(p, l, modulation, temb);
            let zm = tape.modulate(z, m);
            tape.silu(zm)
        };
        let mut levels = vec![block(tape, self.arch.stem, self.arch.stem_mod, input)];
        for b in self.arch.encoder.iter().take(max_level) {
            let prev = *levels.last().expect("stem level");
            let a = block(tape, b.down, b.down_mod, prev);
            levels.push(block(tape, b.conv, b.conv_mod, a));
        }
        (input, temb, levels)
    }

    fn run(&self, x: &Image, t: f64) -> (Tape, usize, Vec<usize>) {
        let p = &self.params;
        let l = &self.arch.layout;
        let mut tape = Tape::default();
        let (input, temb, levels) = self.encode(&mut tape, x, t, self.config.levels - 1);
        let mut d = *levels.last().expect("bottleneck");
        for (i, b) in self.arch.decoder.iter().enumerate() {
            let skip = levels[self.config.levels - 2 - i];
            let up = tape.upsample2(d);
            let cat = tape.concat(up, skip);
            let z = tape.conv(p, l, b.conv, cat);
            let m = tape.linear(p, l, b.modulation, temb);
            let zm = tape.modulate(z, m);
            d = tape.silu(zm);
        }
        let z = tape.conv(p, l, self.arch.out, d);
        let out = tape.residual_tanh(z, input);
        (tape, out, levels)
    }

    fn features_from(&self, tape: &Tape, levels: &[usize]) -> FeatureMaps {
        FeatureMaps {
            shallow: to_f64_array3(tape.value(levels[self.config.shallow_tap_level])),
            deep: to_f64_array3(tape.value(levels[self.config.deep_tap_level])),
        }
    }

    fn output_image(tape: &Tape, out: usize) -> Image {
        let v = tape.value(out);
        let arr = Array2::from_shape_vec((v.h, v.w), v.data.iter().map(|&a| f64::from(a)).collect())
            .expect("output shape");
        Image::from_array_unchecked(arr)
    }

    pub fn forward(&self, x: &Image, t: f64, mode: Mode) -> Result<ForwardOutput> {
        self.check_input(x, t)?;
        let (tape, out, levels) = self.run(x, t);
        let x1_pred = Self::output_image(&tape, out);
        let features = self.features_from(&tape, &levels);
        let trace = match mode {
            Mode::Train => Some(ForwardTrace { tape, output: out }),
            Mode::Eval => None,
        };
        Ok(ForwardOutput {
            x1_pred,
            features,
            trace,
        })
    }

    /// Eval-mode terminal prediction only.
    pub fn predict(&self, x: &Image, t: f64) -> Result<Image> {
        self.check_input(x, t)?;
        let (tape, out, _) = self.run(x, t);
        Ok(Self::output_image(&tape, out))
    }

    /// Encoder-only pass returning the configured taps.
    pub fn extract_features(&self, x: &Image, t_feat: f64) -> Result<FeatureMaps> {
        self.extract_features_traced(x, t_feat).map(|(f, _)| f)
    }

    pub fn extract_features_traced(&self, x: &Image, t_feat: f64) -> Result<(FeatureMaps, FeatureTrace)> {
        self.check_input(x, t_feat)?;
        let mut tape = Tape::default();
        let (input, _, levels) = self.encode(&mut tape, x, t_feat, self.config.deep_tap_level);
        let features = self.features_from(&tape, &levels);
        let trace = FeatureTrace {
            tape,
            input,
            shallow: levels[self.config.shallow_tap_level],
            deep: levels[self.config.deep_tap_level],
        };
        Ok((features, trace))
    }

    /// Gradient of a feature-space loss with respect to the encoder input,
    /// holding the encoder weights fixed.
    pub fn feature_input_grad(
        &self,
        trace: &FeatureTrace,
        d_shallow: &Array3<f64>,
        d_deep: &Array3<f64>,
    ) -> Result<Array2<f64>> {
        let s = trace.tape.value(trace.shallow);
        let d = trace.tape.value(trace.deep);
        if d_shallow.dim() != (s.c, s.h, s.w) || d_deep.dim() != (d.c, d.h, d.w) {
            return Err(AcmtError::shape("feature gradient shape mismatch"));
        }
        let seeds = [
            (trace.shallow, from_f64_array3(d_shallow)),
            (trace.deep, from_f64_array3(d_deep)),
        ];
        let adj = trace.tape.backward(&self.params, &self.arch.layout, &seeds, None, true);
        let dx = adj[trace.input]
            .as_ref()
            .expect("input reached by feature gradient");
        Ok(Array2::from_shape_vec((dx.h, dx.w), dx.data.iter().map(|&v| f64::from(v)).collect())
            .expect("input gradient shape"))
    }

    /// Accumulates `dL/dθ` into `grads` given `dL/dx1_pred`.
    pub fn backward(&self, trace: &ForwardTrace, d_x1: &Array2<f64>, grads: &mut [f32]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(AcmtError::shape("gradient buffer length"));
        }
        let out = trace.tape.value(trace.output);
        if d_x1.dim() != (out.h, out.w) {
            return Err(AcmtError::shape("output gradient shape mismatch"));
        }
        let seed = Tensor::from_vec(1, out.h, out.w, d_x1.iter().map(|&v| v as f32).collect());
        trace
            .tape
            .backward(&self.params, &self.arch.layout, &[(trace.output, seed)], Some(grads), false);
        Ok(())
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;
    use rand::Rng;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            image_size: [16, 16],
            levels: 3,
            base_channels: 4,
            time_embed_dim: 8,
            shallow_tap_level: 1,
            deep_tap_level: 2,
        }
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = from_seed(seed);
        Image::from_fn(h, w, |_| r.random_range(-0.9..0.9)).unwrap()
    }

    #[test]
    fn default_shapes() {
        let net = TranslatorNet::new(NetworkConfig::default(), 0).unwrap();
        let x = random_image(64, 64, 1);
        let out = net.forward(&x, 0.0, Mode::Eval).unwrap();
        assert_eq!(out.x1_pred.shape(), (64, 64));
        assert_eq!(out.features.shallow.dim(), (16, 32, 32));
        assert_eq!(out.features.deep.dim(), (32, 8, 8));
    }

    #[test]
    fn eval_is_deterministic_and_bounded() {
        let net = TranslatorNet::new(NetworkConfig::default(), 3).unwrap();
        let x = Image::zeros(64, 64);
        let a = net.predict(&x, 0.0).unwrap();
        let b = net.predict(&x, 0.0).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }

    #[test]
    fn rejects_wrong_size_and_time() {
        let net = TranslatorNet::new(small_config(), 0).unwrap();
        assert!(net.predict(&Image::zeros(8, 16), 0.0).is_err());
        assert!(net.predict(&Image::zeros(16, 16), 1.5).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = NetworkConfig::default();
        c.shallow_tap_level = 3;
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::default();
        c.image_size = [60, 64];
        assert!(c.validate().is_err());
        let mut c = NetworkConfig::default();
        c.deep_tap_level = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encoder_features_match_forward() {
        let net = TranslatorNet::new(small_config(), 5).unwrap();
        let x = random_image(16, 16, 2);
        let f = net.forward(&x, 0.3, Mode::Eval).unwrap().features;
        assert_eq!(net.extract_features(&x, 0.3).unwrap(), f);
    }

    /// Finite-difference check of the parameter gradient of `sum(w ⊙ x1)`.
    #[test]
    fn parameter_gradient_matches_finite_difference() {
        let mut net = TranslatorNet::new(small_config(), 7).unwrap();
        // Move the output head off its tiny initialisation so every path
        // carries signal.
        let r = net.arch.layout.range(net.arch.out.weight);
        for v in &mut net.params[r] {
            *v *= 10.0;
        }
        let x = random_image(16, 16, 3);
        let weights = random_image(16, 16, 4).into_array();
        let loss = |n: &TranslatorNet| -> f64 {
            let y = n.predict(&x, 0.4).unwrap();
            (y.as_array() * &weights).sum()
        };
        let out = net.forward(&x, 0.4, Mode::Train).unwrap();
        let mut grads = vec![0.0f32; net.param_count()];
        net.backward(out.trace.as_ref().unwrap(), &weights, &mut grads).unwrap();

        let mut rng = from_seed(11);
        let mut checked = 0;
        for _ in 0..60 {
            let i = rng.random_range(0..net.param_count());
            let h = 1e-2f32;
            let orig = net.params[i];
            net.params[i] = orig + h;
            let up = loss(&net);
            net.params[i] = orig - h;
            let down = loss(&net);
            net.params[i] = orig;
            let fd = (up - down) / (2.0 * f64::from(h));
            let an = f64::from(grads[i]);
            if fd.abs().max(an.abs()) < 1e-3 {
                continue;
            }
            checked += 1;
            let rel = (fd - an).abs() / fd.abs().max(an.abs());
            assert!(rel < 5e-2, "param {i}: analytic {an} vs fd {fd}");
        }
        assert!(checked > 10);
    }

    #[test]
    fn feature_input_gradient_matches_finite_difference() {
        let net = TranslatorNet::new(small_config(), 8).unwrap();
        let x = random_image(16, 16, 5);
        let (f, trace) = net.extract_features_traced(&x, 0.0).unwrap();
        let ws = {
            let mut r = from_seed(6);
            Array3::from_shape_simple_fn(f.shallow.dim(), || r.random_range(-1.0..1.0))
        };
        let wd = {
            let mut r = from_seed(7);
            Array3::from_shape_simple_fn(f.deep.dim(), || r.random_range(-1.0..1.0))
        };
        let loss = |img: &Image| {
            let f = net.extract_features(img, 0.0).unwrap();
            (&f.shallow * &ws).sum() + (&f.deep * &wd).sum()
        };
        let g = net.feature_input_grad(&trace, &ws, &wd).unwrap();
        for &(y, xx) in &[(0, 0), (3, 7), (8, 8), (15, 2), (10, 13)] {
            let h = 1e-2;
            let mut up = x.as_array().clone();
            up[[y, xx]] += h;
            let mut down = x.as_array().clone();
            down[[y, xx]] -= h;
            let fd = (loss(&Image::new(up).unwrap()) - loss(&Image::new(down).unwrap())) / (2.0 * h);
            let an = g[[y, xx]];
            assert!((fd - an).abs() <= 2e-2 * fd.abs().max(an.abs()).max(1e-2), "({y},{xx}) {an} vs {fd}");
        }
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let mut net = TranslatorNet::new(small_config(), 0).unwrap();
        let a = net.fingerprint();
        let _ = net.predict(&Image::zeros(16, 16), 0.2).unwrap();
        assert_eq!(net.fingerprint(), a);
        net.params_mut()[0] += 1.0;
        assert_ne!(net.fingerprint(), a);
    }
}
