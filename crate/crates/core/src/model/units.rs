use std::ops::Range;

use serde::Serialize;

use super::ModelGraph;
use crate::error::{Error, Result};

/// A run of `u` consecutive quantizable layers optimized together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Unit {
    pub index: usize,
    /// Positions among the quantizable layers (0-based).
    pub ordinals: Range<usize>,
    /// Graph indices of the unit's quantizable layers.
    pub layers: Vec<usize>,
    /// Graph layers executed by the unit: everything after the previous
    /// quantizable layer up to and including `tap`.
    pub span: Range<usize>,
    /// Graph index whose output (the pre-activation of the unit's last
    /// quantizable layer) is the unit's output.
    pub tap: usize,
}

impl Unit {
    /// Ordinal of the quantizable layer whose output feeds the unit, if any.
    pub fn input_ordinal(&self) -> Option<usize> {
        self.ordinals.start.checked_sub(1)
    }
}

/// Overlapping units of `u` quantizable layers, stepping by one layer.
///
/// With `L ≥ u` quantizable layers this yields `L − u + 1` units; with
/// `L < u` a single unit holds every quantizable layer.
pub fn partition_units(graph: &ModelGraph, u: usize) -> Result<Vec<Unit>> {
    if u == 0 {
        return Err(Error::Parameter("unit size must be >= 1".into()));
    }
    let q = graph.quantizable_indices();
    let l = q.len();
    if l == 0 {
        return Ok(Vec::new());
    }
    let (count, width) = if l < u { (1, l) } else { (l - u + 1, u) };
    Ok((0..count)
        .map(|i| {
            let ordinals = i..i + width;
            let layers = q[ordinals.clone()].to_vec();
            let tap = *layers.last().expect("width >= 1");
            let entry = if i == 0 { 0 } else { q[i - 1] + 1 };
            Unit {
                index: i,
                ordinals,
                layers,
                span: entry..tap + 1,
                tap,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::model::Layer;
    use crate::tensor::Tensor;

    fn mlp(l: usize) -> ModelGraph {
        let mut layers = Vec::new();
        for i in 0..l {
            layers.push(Layer::linear(Tensor::full(&[2, 2], 0.1), vec![0.0; 2]));
            if i + 1 < l {
                layers.push(Layer::Relu);
            }
        }
        ModelGraph::new(layers, vec![2], 2).unwrap()
    }

    #[test]
    fn five_layers_three_units() {
        let units = partition_units(&mlp(5), 3).unwrap();
        let ords: Vec<_> = units.iter().map(|u| u.ordinals.clone()).collect();
        assert_eq!(ords, vec![0..3, 1..4, 2..5]);
        assert_eq!(units[1].layers, vec![2, 4, 6]);
        assert_eq!(units[1].span, 1..7);
        assert_eq!(units[1].tap, 6);
        assert_eq!(units[0].span, 0..5);
    }

    #[test]
    fn single_and_degenerate_units() {
        let u = partition_units(&mlp(3), 3).unwrap();
        assert_eq!(u.len(), 1);
        assert_eq!(u[0].ordinals, 0..3);
        let u = partition_units(&mlp(2), 3).unwrap();
        assert_eq!(u.len(), 1);
        assert_eq!(u[0].ordinals, 0..2);
        assert!(partition_units(&mlp(2), 0).is_err());
    }

    proptest! {
        #[test]
        fn coverage_multiplicity(l in 1usize..9, u in 1usize..6) {
            let units = partition_units(&mlp(l), u).unwrap();
            for j in 1..=l {
                let hits = units.iter().filter(|un| un.ordinals.contains(&(j - 1))).count();
                let expect = if l >= u { j.min(u).min(l - j + 1).min(l - u + 1) } else { 1 };
                prop_assert_eq!(hits, expect);
            }
            for w in units.windows(2) {
                let shared = w[0].ordinals.end.min(w[1].ordinals.end) - w[1].ordinals.start;
                prop_assert_eq!(shared, u.min(l) - 1);
            }
        }
    }
}
