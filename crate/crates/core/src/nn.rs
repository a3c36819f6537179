//! Global classifier and anomaly auto-encoder definitions.
//!
//! Canonical parameter order (also the gradient segment order):
//!
//! | arch      | parameters                                                  |
//! |-----------|-------------------------------------------------------------|
//! | `dense1`  | `fc.weight [K, D]`, `fc.bias [K]`                           |
//! | `mlp2`    | `fc1.weight [h, D]`, `fc1.bias`, `fc2.weight [h, h]`, `fc2.bias`, `fc3.weight [K, h]`, `fc3.bias` |
//! | `convnet` | `conv{1,2,3}.weight [o, c, 3, 3]` + `.bias`, then `fc.weight [K, D']`, `fc.bias` |
//! | AE        | `enc1`, `enc2`, `dec1`, `dec2` (`.weight`, `.bias` each)    |
//!
//! `D = C·H·W`, `h = MLP_HIDDEN`, `D'` is the flattened size after the three
//! stride-2 convolutions.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{GradientVector, Graph, Tensor, Var};

pub const MLP_HIDDEN: usize = 64;
pub const CONVNET_CHANNELS: [usize; 3] = [16, 32, 64];
pub const AE_CHANNELS: [usize; 2] = [16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Dense1,
    Mlp2,
    ConvNet,
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense1" => Ok(Arch::Dense1),
            "mlp2" => Ok(Arch::Mlp2),
            "convnet" => Ok(Arch::ConvNet),
            other => Err(Error::config(format!(
                "unknown architecture `{other}` (expected dense1, mlp2 or convnet)"
            ))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Dense1 => "dense1",
            Arch::Mlp2 => "mlp2",
            Arch::ConvNet => "convnet",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    Normal { sigma: f64 },
    KaimingUniform,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitScheme {
    pub kind: InitKind,
    pub seed: u64,
}

impl InitScheme {
    pub fn kaiming(seed: u64) -> Self {
        InitScheme { kind: InitKind::KaimingUniform, seed }
    }

    pub fn normal(sigma: f64, seed: u64) -> Self {
        InitScheme { kind: InitKind::Normal { sigma }, seed }
    }
}

struct Initializer {
    kind: InitKind,
    rng: ChaCha8Rng,
}

impl Initializer {
    fn new(scheme: InitScheme) -> Result<Self> {
        if let InitKind::Normal { sigma } = scheme.kind {
            if !(sigma.is_finite() && sigma >= 0.0) {
                return Err(Error::config(format!("normal init sigma must be finite and >= 0, got {sigma}")));
            }
        }
        Ok(Initializer { kind: scheme.kind, rng: ChaCha8Rng::seed_from_u64(scheme.seed) })
    }

    fn draw(&mut self, n: usize, bound: f64) -> Vec<f64> {
        match self.kind {
            InitKind::Normal { sigma } => {
                if sigma == 0.0 {
                    return vec![0.0; n];
                }
                let dist = Normal::new(0.0, sigma).expect("validated sigma");
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
            InitKind::KaimingUniform => (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect(),
        }
    }

    /// Weight with fan-in `fan_in` plus its bias of length `shape[0]`.
    fn layer(&mut self, set: &mut ParamSet, name: &str, shape: Vec<usize>, fan_in: usize) {
        let n: usize = shape.iter().product();
        let out = shape[0];
        let w = self.draw(n, (6.0 / fan_in as f64).sqrt());
        let b = self.draw(out, 1.0 / (fan_in as f64).sqrt());
        set.push(format!("{name}.weight"), Tensor::from_parts(shape, w));
        set.push(format!("{name}.bias"), Tensor::from_parts(vec![out], b));
    }
}

/// Named tensors in canonical order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        ParamSet { entries }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), t));
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Inserts every tensor into `graph`, as variables or as constants.
    pub fn bind(&self, graph: &mut Graph, as_variables: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| if as_variables { graph.variable(t.clone()) } else { graph.constant(t.clone()) })
            .collect()
    }

    /// Flat values in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Same names and shapes as `self`, values taken from `flat`.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ParamSet> {
        if flat.len() != self.num_values() {
            return Err(Error::arg(format!(
                "flat vector has {} values, parameters need {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        let entries = self
            .entries
            .iter()
            .map(|(name, t)| {
                let n = t.numel();
                let v = flat[offset..offset + n].to_vec();
                offset += n;
                (name.clone(), Tensor::from_parts(t.shape().to_vec(), v))
            })
            .collect();
        Ok(ParamSet { entries })
    }

    /// Gradient-shaped view with the same segment layout.
    pub fn to_gradient_vector(&self) -> GradientVector {
        GradientVector::from_named(self.entries.iter().cloned())
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Flat parameter vector in canonical order.
pub fn flatten_params(params: &ParamSet) -> Vec<f64> {
    params.flatten()
}

pub fn unflatten_params(template: &ParamSet, flat: &[f64]) -> Result<ParamSet> {
    template.unflatten(flat)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifierSpec {
    pub arch: Arch,
    /// Per-image shape `[C, H, W]`.
    pub input: [usize; 3],
    pub num_classes: usize,
}

impl ClassifierSpec {
    pub fn new(arch: Arch, input: [usize; 3], num_classes: usize) -> Self {
        ClassifierSpec { arch, input, num_classes }
    }

    fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    fn conv_extents(&self) -> [(usize, usize); 3] {
        let step = |h: usize| (h - 1) / 2 + 1;
        let (mut h, mut w) = (self.input[1], self.input[2]);
        let mut out = [(0, 0); 3];
        for e in &mut out {
            h = step(h);
            w = step(w);
            *e = (h, w);
        }
        out
    }

    fn convnet_flat_len(&self) -> usize {
        let (h, w) = self.conv_extents()[2];
        CONVNET_CHANNELS[2] * h * w
    }

    /// Parameter count from the architecture arithmetic.
    pub fn param_count(&self) -> usize {
        let (d, k) = (self.input_len(), self.num_classes);
        match self.arch {
            Arch::Dense1 => d * k + k,
            Arch::Mlp2 => {
                let h = MLP_HIDDEN;
                d * h + h + h * h + h + h * k + k
            }
            Arch::ConvNet => {
                let mut c_in = self.input[0];
                let mut total = 0;
                for c in CONVNET_CHANNELS {
                    total += c * c_in * 9 + c;
                    c_in = c;
                }
                total + self.convnet_flat_len() * k + k
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if self.input.contains(&0) || self.num_classes == 0 {
            return Err(Error::config(format!(
                "classifier needs positive input extents and classes, got {:?} / {}",
                self.input, self.num_classes
            )));
        }
        Ok(())
    }
}

/// Parameters of the global model.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub spec: ClassifierSpec,
    pub params: ParamSet,
}

pub fn init_classifier(spec: ClassifierSpec, scheme: InitScheme) -> Result<ClassifierParams> {
    spec.validate()?;
    let mut init = Initializer::new(scheme)?;
    let mut p = ParamSet::default();
    let (d, k) = (spec.input_len(), spec.num_classes);
    match spec.arch {
        Arch::Dense1 => init.layer(&mut p, "fc", vec![k, d], d),
        Arch::Mlp2 => {
            let h = MLP_HIDDEN;
            init.layer(&mut p, "fc1", vec![h, d], d);
            init.layer(&mut p, "fc2", vec![h, h], h);
            init.layer(&mut p, "fc3", vec![k, h], h);
        }
        Arch::ConvNet => {
            let mut c_in = spec.input[0];
            for (i, c) in CONVNET_CHANNELS.into_iter().enumerate() {
                init.layer(&mut p, &format!("conv{}", i + 1), vec![c, c_in, 3, 3], c_in * 9);
                c_in = c;
            }
            let flat = spec.convnet_flat_len();
            init.layer(&mut p, "fc", vec![k, flat], flat);
        }
    }
    Ok(ClassifierParams { spec, params: p })
}

fn dense(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = g.transpose(w)?;
    let y = g.matmul(x, wt)?;
    g.bias_add(y, b)
}

fn conv_block(g: &mut Graph, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
    let y = g.conv2d(x, w, stride, 1)?;
    g.bias_add(y, b)
}

impl ClassifierParams {
    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 4 || shape[1..] != self.spec.input {
            return Err(Error::dim(format!(
                "classifier expects N×{:?} images, got {shape:?}",
                self.spec.input
            )));
        }
        Ok(shape[0])
    }

    /// Logits `N×K` built on `graph` from bound parameters `params`.
    pub fn forward(&self, g: &mut Graph, params: &[Var], images: Var) -> Result<Var> {
        let n = self.check_images(g.shape(images))?;
        if params.len() != self.params.len() {
            return Err(Error::arg(format!(
                "{} parameter nodes for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        match self.spec.arch {
            Arch::Dense1 => {
                let x = g.reshape(images, vec![n, self.spec.input_len()])?;
                dense(g, x, params[0], params[1])
            }
            Arch::Mlp2 => {
                let x = g.reshape(images, vec![n, self.spec.input_len()])?;
                let h = dense(g, x, params[0], params[1])?;
                let h = g.relu(h);
                let h = dense(g, h, params[2], params[3])?;
                let h = g.relu(h);
                dense(g, h, params[4], params[5])
            }
            Arch::ConvNet => {
                let mut h = images;
                for layer in 0..3 {
                    h = conv_block(g, h, params[2 * layer], params[2 * layer + 1], 2)?;
                    h = g.relu(h);
                }
                let h = g.reshape(h, vec![n, self.spec.convnet_flat_len()])?;
                dense(g, h, params[6], params[7])
            }
        }
    }

    /// Plain forward pass returning logit values.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

/// Parameters of the anomaly-scoring auto-encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AutoEncoderParams {
    pub channels: usize,
    pub params: ParamSet,
}

const AE_NAMES: [&str; 4] = ["enc1", "enc2", "dec1", "dec2"];

fn ae_layer_shapes(channels: usize) -> [[usize; 4]; 4] {
    let [c1, c2] = AE_CHANNELS;
    [[c1, channels, 3, 3], [c2, c1, 3, 3], [c1, c2, 3, 3], [channels, c1, 3, 3]]
}

pub fn init_autoencoder(channels: usize, scheme: InitScheme) -> Result<AutoEncoderParams> {
    if channels == 0 {
        return Err(Error::config("auto-encoder needs at least one channel"));
    }
    let mut init = Initializer::new(scheme)?;
    let mut p = ParamSet::default();
    for (name, shape) in AE_NAMES.iter().zip(ae_layer_shapes(channels)) {
        init.layer(&mut p, name, shape.to_vec(), shape[1] * 9);
    }
    Ok(AutoEncoderParams { channels, params: p })
}

impl AutoEncoderParams {
    /// Validates names and shapes of a loaded parameter set.
    pub fn from_param_set(params: ParamSet) -> Result<Self> {
        let channels = params
            .get("enc1.weight")
            .map(|t| t.shape().get(1).copied().unwrap_or(0))
            .ok_or_else(|| Error::dim("auto-encoder parameters lack enc1.weight"))?;
        let expected: Vec<(String, Vec<usize>)> = AE_NAMES
            .iter()
            .zip(ae_layer_shapes(channels))
            .flat_map(|(n, s)| [(format!("{n}.weight"), s.to_vec()), (format!("{n}.bias"), vec![s[0]])])
            .collect();
        let actual: Vec<(String, Vec<usize>)> =
            params.entries().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if expected != actual {
            return Err(Error::dim(format!(
                "auto-encoder layout mismatch: expected {expected:?}, found {actual:?}"
            )));
        }
        Ok(AutoEncoderParams { channels, params })
    }

    pub fn check_images(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim(format!(
                "auto-encoder expects N×{}×H×W images, got {shape:?}",
                self.channels
            )));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(Error::dim(format!(
                "auto-encoder needs spatial extents divisible by 4, got {}x{}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Reconstruction in (0, 1), same shape as `images`.
    pub fn forward(&self, g: &mut Graph, params: &[Var], images: Var) -> Result<Var> {
        self.check_images(g.shape(images))?;
        let h = conv_block(g, images, params[0], params[1], 2)?;
        let h = g.relu(h);
        let h = conv_block(g, h, params[2], params[3], 2)?;
        let h = g.relu(h);
        let h = g.upsample2(h)?;
        let h = conv_block(g, h, params[4], params[5], 1)?;
        let h = g.relu(h);
        let h = g.upsample2(h)?;
        let h = conv_block(g, h, params[6], params[7], 1)?;
        Ok(g.sigmoid(h))
    }

    pub fn reconstruct(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(p: &ParamSet) -> Vec<u8> {
        p.flatten().iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = ClassifierSpec::new(Arch::ConvNet, [3, 32, 32], 10);
        let a = init_classifier(spec, InitScheme::kaiming(7)).unwrap();
        let b = init_classifier(spec, InitScheme::kaiming(7)).unwrap();
        let c = init_classifier(spec, InitScheme::kaiming(8)).unwrap();
        assert_eq!(bytes(&a.params), bytes(&b.params));
        assert_ne!(bytes(&a.params), bytes(&c.params));
        assert!(a.params.flatten().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_sigma_gives_zero_parameters() {
        let spec = ClassifierSpec::new(Arch::Mlp2, [1, 4, 4], 3);
        let p = init_classifier(spec, InitScheme::normal(0.0, 1)).unwrap();
        assert!(p.params.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kaiming_bound_on_fc_layer() {
        let spec = ClassifierSpec::new(Arch::Dense1, [1, 6, 6], 5);
        let p = init_classifier(spec, InitScheme::kaiming(3)).unwrap();
        let bound = (6.0f64 / 36.0).sqrt();
        let w = p.params.get("fc.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|v| v.abs() > 0.5 * bound));
    }

    #[test]
    fn param_counts_match_layout() {
        for arch in [Arch::Dense1, Arch::Mlp2, Arch::ConvNet] {
            for input in [[1, 8, 8], [3, 32, 32], [1, 28, 28]] {
                let spec = ClassifierSpec::new(arch, input, 10);
                let p = init_classifier(spec, InitScheme::kaiming(0)).unwrap();
                assert_eq!(p.params.num_values(), spec.param_count(), "{arch} {input:?}");
            }
        }
        // mlp2 on 8×8 grayscale with 10 classes: 64·64+64 + 64·64+64 + 64·10+10
        let spec = ClassifierSpec::new(Arch::Mlp2, [1, 8, 8], 10);
        assert_eq!(spec.param_count(), 4160 + 4160 + 650);
    }

    #[test]
    fn unknown_arch_is_config_error() {
        assert!(matches!("resnet18".parse::<Arch>(), Err(Error::Config(_))));
        assert_eq!("convnet".parse::<Arch>().unwrap(), Arch::ConvNet);
    }

    #[test]
    fn dense1_zero_weights_give_zero_logits() {
        let spec = ClassifierSpec::new(Arch::Dense1, [1, 4, 4], 3);
        let p = init_classifier(spec, InitScheme::normal(0.0, 0)).unwrap();
        let x = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|i| i as f64 / 32.0).collect()).unwrap();
        assert!(p.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense1_identity_on_single_pixel() {
        let spec = ClassifierSpec::new(Arch::Dense1, [1, 1, 1], 1);
        let params = ParamSet::new(vec![
            ("fc.weight".into(), Tensor::new(vec![1, 1], vec![1.0]).unwrap()),
            ("fc.bias".into(), Tensor::new(vec![1], vec![0.0]).unwrap()),
        ]);
        let model = ClassifierParams { spec, params };
        let x = Tensor::new(vec![1, 1, 1, 1], vec![0.37]).unwrap();
        assert_eq!(model.logits(&x).unwrap().data(), &[0.37]);
    }

    #[test]
    fn classifier_rejects_wrong_image_shape() {
        let spec = ClassifierSpec::new(Arch::ConvNet, [3, 16, 16], 10);
        let p = init_classifier(spec, InitScheme::kaiming(0)).unwrap();
        let x = Tensor::zeros(vec![1, 1, 16, 16]).unwrap();
        assert!(matches!(p.logits(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn autoencoder_shape_and_range() {
        let ae = init_autoencoder(1, InitScheme::kaiming(2)).unwrap();
        let x = Tensor::new(vec![1, 1, 32, 32], (0..1024).map(|i| ((i * 7) % 13) as f64 / 13.0).collect())
            .unwrap();
        let y = ae.reconstruct(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let bad = Tensor::zeros(vec![1, 1, 30, 30]).unwrap();
        assert!(matches!(ae.reconstruct(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn autoencoder_layout_validation() {
        let ae = init_autoencoder(3, InitScheme::kaiming(2)).unwrap();
        assert_eq!(AutoEncoderParams::from_param_set(ae.params.clone()).unwrap(), ae);
        let mut broken = ae.params.entries().to_vec();
        broken.pop();
        assert!(AutoEncoderParams::from_param_set(ParamSet::new(broken)).is_err());
    }

    #[test]
    fn flatten_round_trip_and_empty() {
        let spec = ClassifierSpec::new(Arch::Mlp2, [1, 8, 8], 10);
        let p = init_classifier(spec, InitScheme::kaiming(5)).unwrap();
        let flat = flatten_params(&p.params);
        assert_eq!(flat.len(), spec.param_count());
        let back = unflatten_params(&p.params, &flat).unwrap();
        assert_eq!(bytes(&back), bytes(&p.params));
        assert!(matches!(unflatten_params(&p.params, &flat[1..]), Err(Error::Argument(_))));
        assert!(flatten_params(&ParamSet::default()).is_empty());
    }
}
