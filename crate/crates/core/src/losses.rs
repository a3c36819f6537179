//! Gradient matching, anomaly-score and total-variation terms of the
//! inversion objective.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{AutoEncoderParams, ClassifierParams};
use crate::tensor::{GradientVector, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_as: f64,
    pub lambda_tv: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights { lambda_as: 0.0, lambda_tv: 0.0 };

    pub fn new(lambda_as: f64, lambda_tv: f64) -> Result<Self> {
        let w = LossWeights { lambda_as, lambda_tv };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_as", self.lambda_as), ("lambda_tv", self.lambda_tv)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Matching {
    Cosine,
    Mse,
}

/// How the image regularizers are reduced over pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RegReduction {
    #[default]
    Sum,
    /// Divides by the element count of `x`, making useful weights
    /// independent of resolution.
    Mean,
}

impl FromStr for RegReduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(RegReduction::Sum),
            "mean" => Ok(RegReduction::Mean),
            other => Err(Error::config(format!("unknown reduction `{other}` (expected sum or mean)"))),
        }
    }
}

impl fmt::Display for RegReduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RegReduction::Sum => "sum",
            RegReduction::Mean => "mean",
        })
    }
}

fn check_layout(dummy: &[Var], g: &Graph, target: &GradientVector) -> Result<()> {
    let segs = target.segments();
    if dummy.len() != segs.len() {
        return Err(Error::arg(format!(
            "gradient has {} segments, target has {}",
            dummy.len(),
            segs.len()
        )));
    }
    for (v, s) in dummy.iter().zip(segs) {
        if g.shape(*v) != s.shape.as_slice() {
            return Err(Error::arg(format!(
                "segment `{}` shape {:?} does not match dummy gradient shape {:?}",
                s.name,
                s.shape,
                g.shape(*v)
            )));
        }
    }
    Ok(())
}

fn sum_all(g: &mut Graph, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t).expect("scalars");
    }
    acc
}

/// `1 − ⟨g, g′⟩ / (‖g‖‖g′‖)` over the whole flattened gradient.
///
/// A dummy gradient of zero norm yields the constant 1 (no gradient flows).
pub fn gradient_matching_cosine(g: &mut Graph, dummy: &[Var], target: &GradientVector) -> Result<Var> {
    check_layout(dummy, g, target)?;
    let target_norm = target.norm();
    if target_norm == 0.0 {
        return Err(Error::arg("target gradient has zero norm"));
    }
    if dummy.is_empty() {
        return Err(Error::arg("empty gradient"));
    }
    let mut dots = Vec::with_capacity(dummy.len());
    let mut sqs = Vec::with_capacity(dummy.len());
    for (&d, seg) in dummy.iter().zip(target.segments()) {
        let t = g.constant(Tensor::from_parts(seg.shape.clone(), seg.values.clone()));
        let prod = g.mul(d, t)?;
        dots.push(g.sum(prod));
        let sq = g.mul(d, d)?;
        sqs.push(g.sum(sq));
    }
    let dot = sum_all(g, &dots);
    let sq = sum_all(g, &sqs);
    if g.value(sq).item() == 0.0 {
        return Ok(g.constant(Tensor::scalar(1.0)));
    }
    let norm = g.sqrt(sq);
    let denom = g.scale(norm, target_norm);
    let cos = g.div(dot, denom)?;
    let neg = g.neg(cos);
    Ok(g.add_scalar(neg, 1.0))
}

/// Sum of squared differences over every segment.
pub fn gradient_matching_mse(g: &mut Graph, dummy: &[Var], target: &GradientVector) -> Result<Var> {
    check_layout(dummy, g, target)?;
    if dummy.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut parts = Vec::with_capacity(dummy.len());
    for (&d, seg) in dummy.iter().zip(target.segments()) {
        let t = g.constant(Tensor::from_parts(seg.shape.clone(), seg.values.clone()));
        let diff = g.sub(d, t)?;
        let sq = g.mul(diff, diff)?;
        parts.push(g.sum(sq));
    }
    Ok(sum_all(g, &parts))
}

fn reduce_reg(g: &mut Graph, total: Var, x: Var, reduction: RegReduction) -> Var {
    match reduction {
        RegReduction::Sum => total,
        RegReduction::Mean => {
            let n = g.value(x).numel() as f64;
            g.scale(total, 1.0 / n)
        }
    }
}

/// Sum of squared horizontal and vertical neighbour differences of NCHW `x`.
pub fn tv_loss(g: &mut Graph, x: Var) -> Result<Var> {
    tv_loss_reduced(g, x, RegReduction::Sum)
}

pub fn tv_loss_reduced(g: &mut Graph, x: Var, reduction: RegReduction) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("tv loss needs NCHW input, got {s:?}")));
    }
    let mut parts = Vec::with_capacity(2);
    for (along_w, extent) in [(true, s[3]), (false, s[2])] {
        if extent >= 2 {
            let d = g.diff(x, along_w)?;
            let sq = g.mul(d, d)?;
            parts.push(g.sum(sq));
        }
    }
    if parts.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let total = sum_all(g, &parts);
    Ok(reduce_reg(g, total, x, reduction))
}

/// `‖AE(x) − x‖²` summed over the batch.
pub fn as_loss(g: &mut Graph, x: Var, ae: &AutoEncoderParams, ae_params: &[Var]) -> Result<Var> {
    as_loss_reduced(g, x, ae, ae_params, RegReduction::Sum)
}

pub fn as_loss_reduced(
    g: &mut Graph,
    x: Var,
    ae: &AutoEncoderParams,
    ae_params: &[Var],
    reduction: RegReduction,
) -> Result<Var> {
    let recon = ae.forward(g, ae_params, x)?;
    let r = g.sub(recon, x)?;
    let sq = g.mul(r, r)?;
    let total = g.sum(sq);
    Ok(reduce_reg(g, total, x, reduction))
}

/// Everything the objective needs besides the dummy images.
#[derive(Clone, Copy, Debug)]
pub struct Objective<'a> {
    pub target: &'a GradientVector,
    pub classifier: &'a ClassifierParams,
    pub autoencoder: Option<&'a AutoEncoderParams>,
    pub labels: &'a [usize],
    pub weights: LossWeights,
    pub matching: Matching,
    pub reduction: RegReduction,
}

/// Unweighted term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TermBreakdown {
    pub grad_matching: f64,
    /// Zero when no auto-encoder is attached.
    pub anomaly: f64,
    pub tv: f64,
    pub total: f64,
}

pub struct ObjectiveNodes {
    pub total: Var,
    pub breakdown: TermBreakdown,
}

impl<'a> Objective<'a> {
    /// Builds `D(g′(x), g) + λ_AS·R_AS(x) + λ_TV·R_TV(x)` on `g`, where
    /// `g′(x)` is the cross-entropy gradient over all classifier parameters.
    pub fn build(&self, g: &mut Graph, x: Var) -> Result<ObjectiveNodes> {
        self.weights.validate()?;
        if self.weights.lambda_as > 0.0 && self.autoencoder.is_none() {
            return Err(Error::Contract("anomaly-score weight set without an auto-encoder".into()));
        }
        let theta = self.classifier.params.bind(g, true);
        let logits = self.classifier.forward(g, &theta, x)?;
        let ce = g.softmax_cross_entropy(logits, self.labels)?;
        let dummy = g.backward(ce, &theta, true)?;
        let gm = match self.matching {
            Matching::Cosine => gradient_matching_cosine(g, &dummy, self.target)?,
            Matching::Mse => gradient_matching_mse(g, &dummy, self.target)?,
        };

        let mut total = gm;
        let mut breakdown = TermBreakdown { grad_matching: g.value(gm).item(), ..Default::default() };
        if let Some(ae) = self.autoencoder {
            let ae_vars = ae.params.bind(g, false);
            let a = as_loss_reduced(g, x, ae, &ae_vars, self.reduction)?;
            breakdown.anomaly = g.value(a).item();
            if self.weights.lambda_as > 0.0 {
                let wa = g.scale(a, self.weights.lambda_as);
                total = g.add(total, wa)?;
            }
        }
        let tv = tv_loss_reduced(g, x, self.reduction)?;
        breakdown.tv = g.value(tv).item();
        if self.weights.lambda_tv > 0.0 {
            let wt = g.scale(tv, self.weights.lambda_tv);
            total = g.add(total, wt)?;
        }
        breakdown.total = g.value(total).item();
        Ok(ObjectiveNodes { total, breakdown })
    }

    /// Objective value, term breakdown and gradient with respect to `x`.
    pub fn value_and_grad(&self, x: &Tensor) -> Result<(TermBreakdown, Tensor)> {
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let nodes = self.build(&mut g, xv)?;
        let grad = g.gradients(nodes.total, &[xv])?.remove(0);
        Ok((nodes.breakdown, grad))
    }

    pub fn evaluate(&self, x: &Tensor) -> Result<TermBreakdown> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        Ok(self.build(&mut g, xv)?.breakdown)
    }
}

/// Convenience: `total_objective` as a free function.
pub fn total_objective(objective: &Objective<'_>, x: &Tensor) -> Result<TermBreakdown> {
    objective.evaluate(x)
}

/// Value-only cosine distance between two flat vectors.
pub fn cosine_distance(dummy: &[f64], target: &[f64]) -> Result<f64> {
    if dummy.len() != target.len() {
        return Err(Error::arg(format!("lengths differ: {} vs {}", dummy.len(), target.len())));
    }
    let tn = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if tn == 0.0 {
        return Err(Error::arg("target gradient has zero norm"));
    }
    let dn = dummy.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dn == 0.0 {
        return Ok(1.0);
    }
    let dot: f64 = dummy.iter().zip(target).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (dn * tn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Segment;

    fn gv(values: &[f64]) -> GradientVector {
        GradientVector::new(vec![Segment { name: "w".into(), shape: vec![values.len()], values: values.to_vec() }])
    }

    fn cos_of(dummy: &[f64], target: &[f64]) -> f64 {
        let mut g = Graph::new();
        let d = g.variable(Tensor::new(vec![dummy.len()], dummy.to_vec()).unwrap());
        let c = gradient_matching_cosine(&mut g, &[d], &gv(target)).unwrap();
        g.value(c).item()
    }

    #[test]
    fn cosine_examples() {
        let t = [1.0, -2.0, 0.5];
        assert!(cos_of(&t, &t).abs() < 1e-12);
        assert!((cos_of(&[2.0, 1.0, 0.0], &t) - 1.0).abs() < 1e-12);
        assert!((cos_of(&[-1.0, 2.0, -0.5], &t) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_guards() {
        let mut g = Graph::new();
        let d = g.variable(Tensor::zeros(vec![3]).unwrap());
        let c = gradient_matching_cosine(&mut g, &[d], &gv(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(g.value(c).item(), 1.0);
        assert_eq!(g.gradients(c, &[d]).unwrap()[0].data(), &[0.0, 0.0, 0.0]);
        let d = g.variable(Tensor::ones(vec![3]).unwrap());
        assert!(matches!(
            gradient_matching_cosine(&mut g, &[d], &gv(&[0.0, 0.0, 0.0])),
            Err(Error::Argument(_))
        ));
        assert!(matches!(gradient_matching_cosine(&mut g, &[d], &gv(&[1.0])), Err(Error::Argument(_))));
    }

    #[test]
    fn mse_examples() {
        let mut g = Graph::new();
        let d = g.variable(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let m = gradient_matching_mse(&mut g, &[d], &gv(&[0.0, 0.0])).unwrap();
        assert_eq!(g.value(m).item(), 5.0);
        let m = gradient_matching_mse(&mut g, &[d], &gv(&[1.0, 2.0])).unwrap();
        assert_eq!(g.value(m).item(), 0.0);
        assert!(matches!(gradient_matching_mse(&mut g, &[d], &gv(&[1.0])), Err(Error::Argument(_))));
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let dummy = [0.3, -1.1, 2.4];
        let target = [1.0, 0.5, -0.2];
        let mut g = Graph::new();
        let d = g.variable(Tensor::new(vec![3], dummy.to_vec()).unwrap());
        let m = gradient_matching_mse(&mut g, &[d], &gv(&target)).unwrap();
        let grad = g.gradients(m, &[d]).unwrap().remove(0);
        let f = |v: &[f64]| v.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let h = 1e-5;
        for i in 0..3 {
            let mut p = dummy;
            p[i] += h;
            let mut q = dummy;
            q[i] -= h;
            let fd = (f(&p) - f(&q)) / (2.0 * h);
            assert!((grad.data()[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
            assert!((grad.data()[i] - 2.0 * (dummy[i] - target[i])).abs() < 1e-12);
        }
    }

    fn tv_of(shape: &[usize], data: &[f64]) -> f64 {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(shape.to_vec(), data.to_vec()).unwrap());
        let t = tv_loss(&mut g, x).unwrap();
        g.value(t).item()
    }

    #[test]
    fn tv_examples() {
        assert_eq!(tv_of(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]), 10.0);
        assert_eq!(tv_of(&[2, 3, 4, 4], &[0.7; 96]), 0.0);
        assert_eq!(tv_of(&[1, 3, 1, 1], &[0.1, 0.5, 0.9]), 0.0);
        // single row: only horizontal pairs
        assert_eq!(tv_of(&[1, 1, 1, 3], &[0.0, 1.0, 3.0]), 5.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::new(1e-4, 1e-2).is_ok());
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        assert!(LossWeights::new(0.0, f64::NAN).is_err());
    }

    #[test]
    fn value_cosine_matches_graph_cosine() {
        let a = [0.3, -0.7, 1.9, 0.1];
        let b = [1.0, 0.2, -0.4, 0.8];
        assert!((cosine_distance(&a, &b).unwrap() - cos_of(&a, &b)).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0; 4], &b).unwrap(), 1.0);
    }
}
