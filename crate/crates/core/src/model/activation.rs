//! Per-layer tallies of positive feed-forward gate pre-activations.

/// Counts, per layer and FFN neuron, at how many observed token positions the
/// gate pre-activation was strictly greater than zero. Since the Swish output
/// shares the sign of its input, this equals counting positive Swish outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationRecord {
    layers: Vec<LayerCounts>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCounts {
    pub positive_counts: Vec<u64>,
    pub token_count: u64,
}

impl ActivationRecord {
    pub fn new(num_layers: usize, ffn_dim: usize) -> Self {
        ActivationRecord {
            layers: (0..num_layers)
                .map(|_| LayerCounts { positive_counts: vec![0; ffn_dim], token_count: 0 })
                .collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, layer_index0: usize) -> &LayerCounts {
        &self.layers[layer_index0]
    }

    /// Tally one token position's gate pre-activations for a layer.
    /// Exactly-zero pre-activations are not counted.
    pub fn observe(&mut self, layer_index0: usize, pre_activations: &[f64]) {
        let layer = &mut self.layers[layer_index0];
        debug_assert_eq!(layer.positive_counts.len(), pre_activations.len());
        for (count, &z) in layer.positive_counts.iter_mut().zip(pre_activations) {
            if z > 0.0 {
                *count += 1;
            }
        }
        layer.token_count += 1;
    }

    /// Merge counts from another record of identical shape.
    pub fn merge(&mut self, other: &ActivationRecord) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            assert_eq!(a.positive_counts.len(), b.positive_counts.len());
            for (x, y) in a.positive_counts.iter_mut().zip(&b.positive_counts) {
                *x += y;
            }
            a.token_count += b.token_count;
        }
    }

    /// Fraction of observed positions with a positive pre-activation, per neuron.
    pub fn neuron_probabilities(&self, layer_index0: usize) -> Vec<f64> {
        let layer = &self.layers[layer_index0];
        if layer.token_count == 0 {
            return vec![0.0; layer.positive_counts.len()];
        }
        let n = layer.token_count as f64;
        layer.positive_counts.iter().map(|&c| c as f64 / n).collect()
    }

    /// Mean of the per-neuron probabilities for a layer.
    pub fn layer_mean(&self, layer_index0: usize) -> f64 {
        let layer = &self.layers[layer_index0];
        if layer.token_count == 0 || layer.positive_counts.is_empty() {
            return 0.0;
        }
        let total: u64 = layer.positive_counts.iter().sum();
        total as f64 / (layer.token_count as f64 * layer.positive_counts.len() as f64)
    }
}
