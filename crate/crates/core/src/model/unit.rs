//! Parameter-unit identifiers.
//!
//! A parameter unit is one matrix of the model treated as the atomic element
//! of importance analysis and masked updates. In full mode the seven block
//! matrices of each layer are units; in low-rank mode the adapter factors on
//! the attention projections are. The embedding table, positional table, and
//! output head are deliberately outside the unit universe: they are frozen
//! once pretraining ends and never belong to any subspace.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::{AdapterMode, ModelConfig};

/// Which attention projection an adapter pair is attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AdapterTarget {
    Query,
    Key,
    Value,
    Output,
}

impl AdapterTarget {
    pub const ALL: [AdapterTarget; 4] =
        [AdapterTarget::Query, AdapterTarget::Key, AdapterTarget::Value, AdapterTarget::Output];

    fn suffix(self) -> &'static str {
        match self {
            AdapterTarget::Query => "q",
            AdapterTarget::Key => "k",
            AdapterTarget::Value => "v",
            AdapterTarget::Output => "o",
        }
    }
}

/// The matrix role a unit plays inside its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum UnitKind {
    Wq,
    Wk,
    Wv,
    Wo,
    W1Gate,
    VUp,
    W2Down,
    AdapterA(AdapterTarget),
    AdapterB(AdapterTarget),
}

impl UnitKind {
    /// The seven block matrices, in canonical column order.
    pub const BLOCK: [UnitKind; 7] = [
        UnitKind::Wq,
        UnitKind::Wk,
        UnitKind::Wv,
        UnitKind::Wo,
        UnitKind::W1Gate,
        UnitKind::VUp,
        UnitKind::W2Down,
    ];

    /// The eight adapter factors, in canonical column order.
    pub fn adapter_kinds() -> Vec<UnitKind> {
        let mut kinds = Vec::with_capacity(8);
        for t in AdapterTarget::ALL {
            kinds.push(UnitKind::AdapterA(t));
            kinds.push(UnitKind::AdapterB(t));
        }
        kinds
    }

    /// Unit kinds that form the trainable universe under `mode`.
    pub fn universe(mode: AdapterMode) -> Vec<UnitKind> {
        match mode {
            AdapterMode::Full => UnitKind::BLOCK.to_vec(),
            AdapterMode::LowRank => UnitKind::adapter_kinds(),
        }
    }

    pub fn label(self) -> String {
        match self {
            UnitKind::Wq => "wq".into(),
            UnitKind::Wk => "wk".into(),
            UnitKind::Wv => "wv".into(),
            UnitKind::Wo => "wo".into(),
            UnitKind::W1Gate => "w1_gate".into(),
            UnitKind::VUp => "v_up".into(),
            UnitKind::W2Down => "w2_down".into(),
            UnitKind::AdapterA(t) => format!("adapter_a_{}", t.suffix()),
            UnitKind::AdapterB(t) => format!("adapter_b_{}", t.suffix()),
        }
    }

    pub fn parse(s: &str) -> Option<UnitKind> {
        match s {
            "wq" => Some(UnitKind::Wq),
            "wk" => Some(UnitKind::Wk),
            "wv" => Some(UnitKind::Wv),
            "wo" => Some(UnitKind::Wo),
            "w1_gate" => Some(UnitKind::W1Gate),
            "v_up" => Some(UnitKind::VUp),
            "w2_down" => Some(UnitKind::W2Down),
            _ => {
                let (which, suffix) = if let Some(sfx) = s.strip_prefix("adapter_a_") {
                    ('a', sfx)
                } else if let Some(sfx) = s.strip_prefix("adapter_b_") {
                    ('b', sfx)
                } else {
                    return None;
                };
                let target = match suffix {
                    "q" => AdapterTarget::Query,
                    "k" => AdapterTarget::Key,
                    "v" => AdapterTarget::Value,
                    "o" => AdapterTarget::Output,
                    _ => return None,
                };
                Some(if which == 'a' { UnitKind::AdapterA(target) } else { UnitKind::AdapterB(target) })
            }
        }
    }

    /// Expected (rows, cols) given the model shape.
    pub fn shape(self, cfg: &ModelConfig) -> (usize, usize) {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        let r = cfg.adapter_rank;
        match self {
            UnitKind::Wq | UnitKind::Wk | UnitKind::Wv | UnitKind::Wo => (d, d),
            UnitKind::W1Gate | UnitKind::VUp => (d, f),
            UnitKind::W2Down => (f, d),
            UnitKind::AdapterA(_) => (d, r),
            UnitKind::AdapterB(_) => (r, d),
        }
    }
}

/// Identifies one matrix of the model. Layers are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParameterUnitId {
    pub layer: usize,
    pub kind: UnitKind,
}

impl ParameterUnitId {
    pub fn new(layer: usize, kind: UnitKind) -> Self {
        ParameterUnitId { layer, kind }
    }

    /// Zero-based layer index for internal storage.
    pub(crate) fn layer_index0(&self) -> usize {
        self.layer - 1
    }
}

impl fmt::Display for ParameterUnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.kind.label())
    }
}

impl FromStr for ParameterUnitId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (layer, kind) = s.split_once(':').ok_or_else(|| format!("bad unit id `{s}`"))?;
        let layer: usize = layer.parse().map_err(|_| format!("bad layer in unit id `{s}`"))?;
        if layer == 0 {
            return Err(format!("unit layers are 1-based, got `{s}`"));
        }
        let kind = UnitKind::parse(kind).ok_or_else(|| format!("unknown unit kind in `{s}`"))?;
        Ok(ParameterUnitId { layer, kind })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn id_roundtrips_through_display() {
        let ids = [
            ParameterUnitId::new(3, UnitKind::W1Gate),
            ParameterUnitId::new(1, UnitKind::AdapterB(AdapterTarget::Output)),
        ];
        for id in ids {
            let parsed: ParameterUnitId = id.to_string().parse().unwrap();
            assert_eq!(parsed, id);
        }
    }

    #[test]
    fn zero_layer_rejected() {
        assert!("0:wq".parse::<ParameterUnitId>().is_err());
    }
}
