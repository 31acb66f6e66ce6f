//! The counting network (generator) and the density-map discriminator.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, NamedArray};
use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;
use crate::kernels::ConvSpec;
use crate::tape::{Tape, Var};

/// Named, ordered learnable arrays of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arrays: IndexMap<String, DenseGrid>,
    pub init_seed: u64,
}

/// Parameters recorded on a tape, by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Bind names to variables already on a tape.
    pub fn from_vars<'a>(pairs: impl IntoIterator<Item = (&'a str, Var)>) -> Self {
        BoundParams {
            vars: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| CodaError::invalid("params", format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl ModelParams {
    pub fn new(init_seed: u64) -> Self {
        ModelParams {
            arrays: IndexMap::new(),
            init_seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseGrid) -> Result<()> {
        let name = name.into();
        if self.arrays.contains_key(&name) {
            return Err(CodaError::invalid("params", format!("duplicate parameter `{name}`")));
        }
        self.arrays.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseGrid> {
        self.arrays.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseGrid)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DenseGrid)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.arrays.values().map(DenseGrid::len).sum()
    }

    /// Record every array on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .arrays
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.variable(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    /// Largest absolute elementwise difference to `other` (same layout).
    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.arrays
            .values()
            .zip(other.arrays.values())
            .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(DenseGrid::all_finite)
    }

    /// Store under `prefix`; biases are written as rank-1 arrays.
    pub fn write_to(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.insert(format!("{prefix}__init_seed"), NamedArray::scalar(self.init_seed as f64));
        for (name, grid) in &self.arrays {
            let dims = if name.ends_with(".bias") {
                vec![grid.len()]
            } else {
                grid.shape().to_vec()
            };
            ckpt.insert(format!("{prefix}{name}"), NamedArray::from_grid(grid, dims));
        }
    }

    pub fn read_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut params = ModelParams::new(ckpt.scalar(&format!("{prefix}__init_seed")).unwrap_or(0.0) as u64);
        for (name, arr) in ckpt.with_prefix(prefix) {
            if name.starts_with("__") {
                continue;
            }
            params.insert(name, arr.to_grid()?)?;
        }
        if params.is_empty() {
            return Err(CodaError::Format {
                format: "CKPT",
                detail: format!("no parameters under prefix `{prefix}`"),
            });
        }
        Ok(params)
    }

    /// Check that the arrays match `expected` (name → shape) exactly.
    fn check_layout(&self, expected: &ModelParams, what: &str) -> Result<()> {
        let same = self.arrays.len() == expected.arrays.len()
            && self
                .arrays
                .iter()
                .zip(&expected.arrays)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape());
        if same {
            Ok(())
        } else {
            Err(CodaError::shape(
                "params",
                format!("{what} parameters do not match the configured architecture"),
            ))
        }
    }
}

fn he_conv(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, k: usize) -> DenseGrid {
    let fan_in = (in_ch * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let data = (0..out_ch * in_ch * k * k).map(|_| normal.sample(rng)).collect();
    DenseGrid::new([out_ch, in_ch, k, k], data).expect("sized by construction")
}

fn add_conv(params: &mut ModelParams, rng: &mut ChaCha8Rng, name: &str, out_ch: usize, in_ch: usize, k: usize) {
    params
        .insert(format!("{name}.weight"), he_conv(rng, out_ch, in_ch, k))
        .expect("unique layer names");
    params
        .insert(format!("{name}.bias"), DenseGrid::zeros([out_ch, 1, 1, 1]))
        .expect("unique layer names");
}

fn conv_layer(tape: &mut Tape, p: &BoundParams, name: &str, x: Var, spec: ConvSpec) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), spec)
}

/// Counting network layout: VGG-style front-end blocks (3×3 convs + ReLU,
/// each block closed by a 2×2 max pool), two dilated 3×3 back-end convs, and
/// a 1×1 output conv followed by ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountingNetConfig {
    pub in_channels: usize,
    pub front_channels: Vec<Vec<usize>>,
    pub backend_channels: usize,
    pub backend_dilation: usize,
}

impl Default for CountingNetConfig {
    fn default() -> Self {
        CountingNetConfig {
            in_channels: 1,
            front_channels: vec![vec![16, 16], vec![32, 32]],
            backend_channels: 32,
            backend_dilation: 4,
        }
    }
}

impl CountingNetConfig {
    /// VGG-16 front end truncated before its final pool, at full widths.
    pub fn vgg16() -> Self {
        CountingNetConfig {
            in_channels: 3,
            front_channels: vec![vec![64, 64], vec![128, 128], vec![256, 256, 256], vec![512, 512, 512]],
            backend_channels: 512,
            backend_dilation: 4,
        }
    }

    /// Input pixels per output cell along each axis.
    pub fn output_stride(&self) -> usize {
        1 << self.front_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.backend_channels == 0 {
            return Err(CodaError::config("counting_net", "channel counts must be ≥ 1"));
        }
        if self.backend_dilation == 0 {
            return Err(CodaError::config("counting_net.backend_dilation", "must be ≥ 1"));
        }
        if self.front_channels.is_empty() || self.front_channels.iter().any(|b| b.is_empty() || b.contains(&0)) {
            return Err(CodaError::config(
                "counting_net.front_channels",
                "every block needs at least one conv with ≥ 1 channel",
            ));
        }
        Ok(())
    }

    fn front_layers(&self) -> Vec<(String, usize, usize)> {
        let mut layers = vec![];
        let mut in_ch = self.in_channels;
        for (b, block) in self.front_channels.iter().enumerate() {
            for (i, &out_ch) in block.iter().enumerate() {
                layers.push((format!("front{b}_{i}"), in_ch, out_ch));
                in_ch = out_ch;
            }
        }
        layers
    }

    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new(seed);
        let mut last = self.in_channels;
        for (name, in_ch, out_ch) in self.front_layers() {
            add_conv(&mut params, &mut rng, &name, out_ch, in_ch, 3);
            last = out_ch;
        }
        add_conv(&mut params, &mut rng, "back0", self.backend_channels, last, 3);
        add_conv(&mut params, &mut rng, "back1", self.backend_channels, self.backend_channels, 3);
        add_conv(&mut params, &mut rng, "out", 1, self.backend_channels, 1);
        Ok(params)
    }

    /// Check that `params` was built for this architecture.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        params.check_layout(&self.init_params(0)?, "counting network")
    }

    /// Record the forward pass; `input` is `N × in_channels × H × W` with
    /// `H, W` divisible by the output stride. Output: `N × 1 × H/s × W/s`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, input: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(input).shape();
        let stride = self.output_stride();
        if c != self.in_channels {
            return Err(CodaError::shape(
                "counting_forward",
                format!("input has {c} channels, network expects {}", self.in_channels),
            ));
        }
        if h % stride != 0 || w % stride != 0 {
            return Err(CodaError::shape(
                "counting_forward",
                format!("input {h}×{w} not divisible by output stride {stride}"),
            ));
        }
        let same = ConvSpec::new(1, 1, 1);
        let mut x = input;
        for (b, block) in self.front_channels.iter().enumerate() {
            for i in 0..block.len() {
                x = conv_layer(tape, p, &format!("front{b}_{i}"), x, same)?;
                x = tape.relu(x);
            }
            x = tape.maxpool2(x)?;
        }
        let d = self.backend_dilation;
        let dilated = ConvSpec::new(1, d, d);
        for name in ["back0", "back1"] {
            x = conv_layer(tape, p, name, x, dilated)?;
            x = tape.relu(x);
        }
        x = conv_layer(tape, p, "out", x, ConvSpec::new(1, 0, 1))?;
        Ok(tape.relu(x))
    }

    /// Forward pass without recording gradients.
    pub fn predict(&self, params: &ModelParams, input: &DenseGrid) -> Result<DenseGrid> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Five stride-2 4×4 convolutions with leaky ReLU between layers, ending in
/// a one-channel logit map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub leaky_slope: f64,
}

pub const DISC_KERNEL: usize = 4;
pub const DISC_STRIDE: usize = 2;
pub const DISC_LAYERS: usize = 5;

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::with_width_divisor(8)
    }
}

impl DiscriminatorConfig {
    /// Widths `[64, 128, 256, 512] / divisor` followed by the 1-channel head.
    pub fn with_width_divisor(divisor: usize) -> Self {
        DiscriminatorConfig {
            in_channels: 1,
            channels: [64, 128, 256, 512]
                .iter()
                .map(|c| (c / divisor.max(1)).max(1))
                .chain([1])
                .collect(),
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != DISC_LAYERS {
            return Err(CodaError::config(
                "discriminator.channels",
                format!("exactly {DISC_LAYERS} layers required, got {}", self.channels.len()),
            ));
        }
        if self.channels.last() != Some(&1) {
            return Err(CodaError::config("discriminator.channels", "final layer must have 1 channel"));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(CodaError::config("discriminator.channels", "channel counts must be ≥ 1"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(CodaError::config("discriminator.leaky_slope", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Smallest input side accepted by five halvings.
    pub fn min_input(&self) -> usize {
        1 << DISC_LAYERS
    }

    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new(seed);
        let mut in_ch = self.in_channels;
        for (i, &out_ch) in self.channels.iter().enumerate() {
            add_conv(&mut params, &mut rng, &format!("conv{i}"), out_ch, in_ch, DISC_KERNEL);
            in_ch = out_ch;
        }
        Ok(params)
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        params.check_layout(&self.init_params(0)?, "discriminator")
    }

    /// Logit map of shape `N × 1 × ⌊H/32⌋ × ⌊W/32⌋`.
    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, density: Var) -> Result<Var> {
        let [_, c, h, w] = tape.value(density).shape();
        if c != self.in_channels {
            return Err(CodaError::shape(
                "discriminator_forward",
                format!("input has {c} channels, expected {}", self.in_channels),
            ));
        }
        if h < self.min_input() || w < self.min_input() {
            return Err(CodaError::shape(
                "discriminator_forward",
                format!("{h}×{w} input too small for five stride-2 layers (need ≥ {})", self.min_input()),
            ));
        }
        let spec = ConvSpec::new(DISC_STRIDE, 1, 1);
        let mut x = density;
        for i in 0..DISC_LAYERS {
            x = conv_layer(tape, p, &format!("conv{i}"), x, spec)?;
            if i + 1 < DISC_LAYERS {
                x = tape.leaky_relu(x, self.leaky_slope);
            }
        }
        Ok(x)
    }

    pub fn predict(&self, params: &ModelParams, density: &DenseGrid) -> Result<DenseGrid> {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, false);
        let x = tape.constant(density.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting_output_is_quarter_resolution() {
        let cfg = CountingNetConfig::default();
        let params = cfg.init_params(1).unwrap();
        let y = cfg.predict(&params, &DenseGrid::filled([2, 1, 64, 64], 0.3)).unwrap();
        assert_eq!(y.shape(), [2, 1, 16, 16]);
        assert!(y.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_weights_give_zero_density() {
        let cfg = CountingNetConfig::default();
        let mut params = cfg.init_params(1).unwrap();
        for (_, g) in params.iter_mut() {
            g.data_mut().fill(0.0);
        }
        let y = cfg.predict(&params, &DenseGrid::filled([1, 1, 32, 32], 0.7)).unwrap();
        assert_eq!(y.sum(), 0.0);
    }

    #[test]
    fn counting_rejects_bad_input() {
        let cfg = CountingNetConfig::default();
        let params = cfg.init_params(1).unwrap();
        assert!(cfg.predict(&params, &DenseGrid::zeros([1, 1, 30, 32])).is_err());
        assert!(cfg.predict(&params, &DenseGrid::zeros([1, 3, 32, 32])).is_err());
    }

    #[test]
    fn discriminator_shapes() {
        let cfg = DiscriminatorConfig::default();
        assert_eq!(cfg.channels, vec![8, 16, 32, 64, 1]);
        let params = cfg.init_params(2).unwrap();
        let y = cfg.predict(&params, &DenseGrid::zeros([1, 1, 64, 64])).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        let y = cfg.predict(&params, &DenseGrid::zeros([1, 1, 32, 32])).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 1]);
        let y = cfg.predict(&params, &DenseGrid::zeros([1, 1, 100, 70])).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 2]);
        assert!(cfg.predict(&params, &DenseGrid::zeros([1, 1, 16, 64])).is_err());
    }

    #[test]
    fn zero_final_layer_gives_zero_logits() {
        let cfg = DiscriminatorConfig::default();
        let mut params = cfg.init_params(2).unwrap();
        for (name, g) in params.iter_mut() {
            if name.starts_with("conv4") {
                g.data_mut().fill(0.0);
            }
        }
        let y = cfg.predict(&params, &DenseGrid::filled([1, 1, 64, 64], 0.2)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(y.data().iter().all(|&v| crate::kernels::sigmoid(v) == 0.5));
    }

    #[test]
    fn discriminator_requires_five_layers_ending_in_one() {
        let mut cfg = DiscriminatorConfig::default();
        cfg.channels = vec![8, 16, 1];
        assert!(cfg.validate().is_err());
        cfg.channels = vec![8, 16, 32, 64, 2];
        assert!(cfg.validate().is_err());
        assert_eq!(DiscriminatorConfig::with_width_divisor(1).channels, vec![64, 128, 256, 512, 1]);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = CountingNetConfig::default();
        assert_eq!(cfg.init_params(5).unwrap(), cfg.init_params(5).unwrap());
        assert_ne!(cfg.init_params(5).unwrap(), cfg.init_params(6).unwrap());
    }

    #[test]
    fn he_variance_on_large_layer() {
        let cfg = CountingNetConfig::vgg16();
        let params = cfg.init_params(11).unwrap();
        let w = params.get("front3_1.weight").unwrap();
        let fan_in = (512 * 9) as f64;
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / fan_in;
        assert!((var / expected - 1.0).abs() < 0.2, "var {var} vs {expected}");
        let b = params.get("front3_1.bias").unwrap();
        assert_eq!(b.max_abs(), 0.0);
    }

    #[test]
    fn params_round_trip_through_checkpoint() {
        let cfg = CountingNetConfig::default();
        let params = cfg.init_params(3).unwrap();
        let mut ckpt = Checkpoint::default();
        params.write_to(&mut ckpt, "cn.");
        assert_eq!(ckpt.get("cn.out.bias").unwrap().dims, vec![1]);
        let back = ModelParams::read_from(&ckpt, "cn.").unwrap();
        cfg.check_params(&back).unwrap();
        assert_eq!(back.init_seed, 3);
        assert!(params.max_abs_diff(&back) < 1e-6);
        assert!(DiscriminatorConfig::default().check_params(&back).is_err());
    }
}
