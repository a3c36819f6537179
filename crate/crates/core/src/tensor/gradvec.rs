use crate::error::{Error, Result};

use super::value::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered per-parameter gradients, flattened on demand into one vector.
///
/// Segment order is the owning model's canonical parameter order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientVector {
    segments: Vec<Segment>,
}

impl GradientVector {
    pub fn new(segments: Vec<Segment>) -> Self {
        GradientVector { segments }
    }

    pub fn from_named(named: impl IntoIterator<Item = (String, Tensor)>) -> Self {
        GradientVector {
            segments: named
                .into_iter()
                .map(|(name, t)| Segment { name, shape: t.shape().to_vec(), values: t.into_data() })
                .collect(),
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.iter().map(|s| s.values.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.segments {
            out.extend_from_slice(&s.values);
        }
        out
    }

    /// Rebuilds a vector with this one's layout from flat values.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<GradientVector> {
        if flat.len() != self.len() {
            return Err(Error::arg(format!(
                "flat vector has {} values, layout needs {}",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        let segments = self
            .segments
            .iter()
            .map(|s| {
                let n = s.values.len();
                let seg = Segment {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    values: flat[offset..offset + n].to_vec(),
                };
                offset += n;
                seg
            })
            .collect();
        Ok(GradientVector { segments })
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.segments
            .iter()
            .map(|s| Tensor::from_parts(s.shape.clone(), s.values.clone()))
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.segments
            .iter()
            .flat_map(|s| s.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn same_layout(&self, other: &GradientVector) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flatten_unflatten_round_trip(a in proptest::collection::vec(-1e6f64..1e6, 1..20),
                                        b in proptest::collection::vec(-1e6f64..1e6, 1..20)) {
            let gv = GradientVector::new(vec![
                Segment { name: "w".into(), shape: vec![a.len()], values: a },
                Segment { name: "b".into(), shape: vec![b.len()], values: b },
            ]);
            let flat = gv.flatten();
            prop_assert_eq!(gv.unflatten_like(&flat).unwrap(), gv);
        }
    }

    #[test]
    fn unflatten_rejects_wrong_length() {
        let gv = GradientVector::new(vec![Segment { name: "w".into(), shape: vec![2], values: vec![1.0, 2.0] }]);
        assert!(matches!(gv.unflatten_like(&[1.0]), Err(Error::Argument(_))));
        assert!(GradientVector::default().flatten().is_empty());
    }
}
