use crate::linalg::Matrix;

/// One recorded point of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    /// `step · η`, i.e. time measured in units of τ.
    pub time: f64,
    pub loss: f64,
    /// `|W_l|_F` for every layer.
    pub layer_norms: Vec<f64>,
    /// `|W_L ⋯ W_1|_F`.
    pub prod_norm: f64,
    /// `W_{l+1}ᵀW_{l+1} − W_l W_lᵀ` for every adjacent pair; empty when not tracked.
    pub conservation: Vec<Matrix>,
    /// Mode strengths `[layer][mode]` when the run tracks a mode alignment.
    pub modes: Option<Vec<Vec<f64>>>,
    /// Per adjacent pair `|Δ(W_{l+1}ᵀW_{l+1}) − Δ(W_l W_lᵀ)|_F / η` over the
    /// step that starts here; empty when not tracked.
    pub growth_discrepancy: Vec<f64>,
    /// Mask agreement per layer; empty for linear runs.
    pub mask_agreement: Vec<f64>,
}

impl Snapshot {
    pub fn new(step: usize, time: f64, loss: f64, layer_norms: Vec<f64>, prod_norm: f64) -> Self {
        Self {
            step,
            time,
            loss,
            layer_norms,
            prod_norm,
            conservation: Vec::new(),
            modes: None,
            growth_discrepancy: Vec::new(),
            mask_agreement: Vec::new(),
        }
    }
}

/// Time-indexed log of a training run. Every series has one entry per snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub eta: f64,
    pub snapshots: Vec<Snapshot>,
}

impl Trajectory {
    pub fn new(eta: f64) -> Self {
        Self {
            eta,
            snapshots: Vec::new(),
        }
    }

    pub fn push(&mut self, snap: Snapshot) {
        if let Some(last) = self.snapshots.last() {
            debug_assert!(snap.step > last.step, "snapshots must advance");
            debug_assert_eq!(snap.layer_norms.len(), last.layer_norms.len());
        }
        self.snapshots.push(snap);
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.snapshots.first().map_or(0, |s| s.layer_norms.len())
    }

    pub fn first(&self) -> Option<&Snapshot> {
        self.snapshots.first()
    }

    pub fn last(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.loss).collect()
    }

    pub fn prod_norms(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.prod_norm).collect()
    }

    pub fn layer_norm_series(&self, layer: usize) -> Vec<f64> {
        self.snapshots
            .iter()
            .map(|s| s.layer_norms[layer])
            .collect()
    }
}
