//! Named, group-annotated parameter collections.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{NodeId, Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Learning-rate group; one learned step size per adaptable group.
    pub group: String,
    /// Trained only by the outer loop; never touched by task adaptation.
    pub is_warp: bool,
    pub inner_adaptable: bool,
}

/// Ordered parameter list with unique names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamTree {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

/// Parameter counts by role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCensus {
    pub total: usize,
    pub warp: usize,
    pub adaptable: usize,
    /// Outer-loop only parameters that are not warp (e.g. the head generator).
    pub outer_only: usize,
}

impl ParamCensus {
    pub fn warp_fraction(&self) -> f64 {
        self.warp as f64 / self.total as f64
    }
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an entry. Panics on duplicate names or on a warp entry
    /// marked adaptable, both of which are construction bugs.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor, group: impl Into<String>, is_warp: bool, inner_adaptable: bool) {
        let name = name.into();
        assert!(!(is_warp && inner_adaptable), "warp parameter {name} cannot be inner-adaptable");
        let prev = self.by_name.insert(name.clone(), self.entries.len());
        assert!(prev.is_none(), "duplicate parameter name {name}");
        self.entries.push(ParamEntry {
            name,
            tensor,
            group: group.into(),
            is_warp,
            inner_adaptable,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &ParamEntry {
        &self.entries[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index_of(name).map(|i| &self.entries[i])
    }

    /// Group names in first-appearance order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    /// Groups whose members are inner-adaptable.
    pub fn adaptable_groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in self.entries.iter().filter(|e| e.inner_adaptable) {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }

    pub fn census(&self) -> ParamCensus {
        let mut c = ParamCensus { total: 0, warp: 0, adaptable: 0, outer_only: 0 };
        for e in &self.entries {
            let n = e.tensor.len();
            c.total += n;
            if e.is_warp {
                c.warp += n;
            } else if e.inner_adaptable {
                c.adaptable += n;
            } else {
                c.outer_only += n;
            }
        }
        c
    }

    /// Registers every entry on `tape`, as leaves when `trainable`,
    /// otherwise as constants.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|e| {
                if trainable {
                    tape.leaf(e.tensor.clone())
                } else {
                    tape.constant(e.tensor.clone())
                }
            })
            .collect()
    }

    /// Appends the entries of `other`. Panics on name collisions.
    pub fn extend(&mut self, other: ParamTree) {
        for e in other.entries {
            self.push(e.name, e.tensor, e.group, e.is_warp, e.inner_adaptable);
        }
    }
}

/// Weight initializer: Normal(0, std²) truncated at ±2 std.
pub fn truncated_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite init")
}
