//! Z-score standardization and subspace localization.
//!
//! Unit importances are standardized per behavior (population deviation), and
//! every unit lands in exactly one subspace by comparing its two Z-scores to
//! the threshold τ: above τ for both → entangled; above for exactly one →
//! that behavior's subspace; otherwise → other. Values exactly equal to τ
//! count as "not above", which closes the partition. The entangled subspace
//! also yields the adaptive loss weights: a two-way softmax over the mean
//! Z-scores of its members.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParameterUnitId;

/// Standardized importance scores for one behavior.
#[derive(Debug, Clone, PartialEq)]
pub struct ZScores {
    pub values: BTreeMap<ParameterUnitId, f64>,
    pub mean: f64,
    pub std_dev: f64,
}

/// Standardize with the population standard deviation. A zero deviation maps
/// every score to zero.
pub fn zscores(importance: &BTreeMap<ParameterUnitId, f64>) -> Result<ZScores> {
    let n = importance.len();
    if n < 2 {
        return Err(Error::Input("z-scores need at least two units".into()));
    }
    let mean = importance.values().sum::<f64>() / n as f64;
    let var = importance.values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std_dev = var.sqrt();
    let values = importance
        .iter()
        .map(|(&id, &v)| (id, if std_dev > 0.0 { (v - mean) / std_dev } else { 0.0 }))
        .collect();
    Ok(ZScores { values, mean, std_dev })
}

/// The four disjoint subspaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Subspace {
    Entangled,
    Adherence,
    Robustness,
    Other,
}

impl Subspace {
    pub fn name(self) -> &'static str {
        match self {
            Subspace::Entangled => "entangled",
            Subspace::Adherence => "adherence",
            Subspace::Robustness => "robustness",
            Subspace::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Subspace> {
        match s {
            "entangled" => Some(Subspace::Entangled),
            "adherence" => Some(Subspace::Adherence),
            "robustness" => Some(Subspace::Robustness),
            "other" => Some(Subspace::Other),
            _ => None,
        }
    }
}

/// Disjoint assignment of every unit, plus the loss-mixing weights derived
/// from the entangled subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspacePartition {
    pub entangled: BTreeSet<ParameterUnitId>,
    pub adherence: BTreeSet<ParameterUnitId>,
    pub robustness: BTreeSet<ParameterUnitId>,
    pub other: BTreeSet<ParameterUnitId>,
    pub tau: f64,
    pub gamma_a: f64,
    pub gamma_r: f64,
    /// Z-scores retained for persistence and inspection.
    pub z_adherence: BTreeMap<ParameterUnitId, f64>,
    pub z_robustness: BTreeMap<ParameterUnitId, f64>,
}

impl SubspacePartition {
    pub fn assignment(&self, id: ParameterUnitId) -> Option<Subspace> {
        if self.entangled.contains(&id) {
            Some(Subspace::Entangled)
        } else if self.adherence.contains(&id) {
            Some(Subspace::Adherence)
        } else if self.robustness.contains(&id) {
            Some(Subspace::Robustness)
        } else if self.other.contains(&id) {
            Some(Subspace::Other)
        } else {
            None
        }
    }

    pub fn members(&self, which: Subspace) -> &BTreeSet<ParameterUnitId> {
        match which {
            Subspace::Entangled => &self.entangled,
            Subspace::Adherence => &self.adherence,
            Subspace::Robustness => &self.robustness,
            Subspace::Other => &self.other,
        }
    }

    /// All units that receive updates during tuning.
    pub fn trainable(&self) -> BTreeSet<ParameterUnitId> {
        self.entangled.union(&self.adherence).cloned().chain(self.robustness.iter().cloned()).collect()
    }

    pub fn len(&self) -> usize {
        self.entangled.len() + self.adherence.len() + self.robustness.len() + self.other.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tab-separated persistence with τ and the γ weights in the header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "# raglab-partition v1").map_err(|e| Error::io("writing partition", e))?;
        writeln!(w, "# tau = {}", self.tau).map_err(|e| Error::io("writing partition", e))?;
        writeln!(w, "# gamma_a = {}", self.gamma_a).map_err(|e| Error::io("writing partition", e))?;
        writeln!(w, "# gamma_r = {}", self.gamma_r).map_err(|e| Error::io("writing partition", e))?;
        writeln!(w, "unit\tz_adherence\tz_robustness\tsubspace")
            .map_err(|e| Error::io("writing partition", e))?;
        for (id, za) in &self.z_adherence {
            let zr = self.z_robustness[id];
            let subspace = self.assignment(*id).expect("every unit is assigned").name();
            writeln!(w, "{id}\t{za}\t{zr}\t{subspace}")
                .map_err(|e| Error::io("writing partition", e))?;
        }
        w.flush().map_err(|e| Error::io("flushing partition", e))
    }

    pub fn load(path: &Path) -> Result<SubspacePartition> {
        let body = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut tau = None;
        let mut gamma_a = None;
        let mut gamma_r = None;
        let mut entangled = BTreeSet::new();
        let mut adherence = BTreeSet::new();
        let mut robustness = BTreeSet::new();
        let mut other = BTreeSet::new();
        let mut z_adherence = BTreeMap::new();
        let mut z_robustness = BTreeMap::new();
        for (n, line) in body.lines().enumerate() {
            let bad = |what: &str| Error::Format(format!("{what} on line {} of {}", n + 1, path.display()));
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if let Some(v) = rest.strip_prefix("tau =") {
                    tau = Some(v.trim().parse().map_err(|_| bad("bad tau"))?);
                } else if let Some(v) = rest.strip_prefix("gamma_a =") {
                    gamma_a = Some(v.trim().parse().map_err(|_| bad("bad gamma_a"))?);
                } else if let Some(v) = rest.strip_prefix("gamma_r =") {
                    gamma_r = Some(v.trim().parse().map_err(|_| bad("bad gamma_r"))?);
                }
                continue;
            }
            if line.starts_with("unit") || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad("bad partition record"));
            }
            let id: ParameterUnitId = fields[0].parse().map_err(|_| bad("bad unit id"))?;
            z_adherence.insert(id, fields[1].parse().map_err(|_| bad("bad z_adherence"))?);
            z_robustness.insert(id, fields[2].parse().map_err(|_| bad("bad z_robustness"))?);
            match Subspace::parse(fields[3]).ok_or_else(|| bad("bad subspace"))? {
                Subspace::Entangled => entangled.insert(id),
                Subspace::Adherence => adherence.insert(id),
                Subspace::Robustness => robustness.insert(id),
                Subspace::Other => other.insert(id),
            };
        }
        Ok(SubspacePartition {
            entangled,
            adherence,
            robustness,
            other,
            tau: tau.ok_or_else(|| Error::Format("partition file lacks tau header".into()))?,
            gamma_a: gamma_a.ok_or_else(|| Error::Format("partition file lacks gamma_a header".into()))?,
            gamma_r: gamma_r.ok_or_else(|| Error::Format("partition file lacks gamma_r header".into()))?,
            z_adherence,
            z_robustness,
        })
    }
}

/// Mean Z-scores over the entangled subspace, softmaxed into the two loss
/// weights. An empty entangled subspace degenerates to (0.5, 0.5).
pub fn gamma_weights(
    z_a: &ZScores,
    z_r: &ZScores,
    entangled: &BTreeSet<ParameterUnitId>,
) -> (f64, f64) {
    if entangled.is_empty() {
        log::warn!("entangled subspace is empty; falling back to gamma = (0.5, 0.5)");
        return (0.5, 0.5);
    }
    let n = entangled.len() as f64;
    let mean_a: f64 = entangled.iter().map(|id| z_a.values[id]).sum::<f64>() / n;
    let mean_r: f64 = entangled.iter().map(|id| z_r.values[id]).sum::<f64>() / n;
    let mut w = vec![mean_a, mean_r];
    crate::matrix::softmax_inplace(&mut w);
    (w[0], w[1])
}

/// Partition the unit universe by thresholding both Z-score maps at `tau`.
pub fn localize(z_a: &ZScores, z_r: &ZScores, tau: f64) -> Result<SubspacePartition> {
    if z_a.values.len() != z_r.values.len()
        || z_a.values.keys().any(|id| !z_r.values.contains_key(id))
    {
        return Err(Error::Input(
            "adherence and robustness z-scores cover different unit sets".into(),
        ));
    }
    let mut entangled = BTreeSet::new();
    let mut adherence = BTreeSet::new();
    let mut robustness = BTreeSet::new();
    let mut other = BTreeSet::new();
    for (&id, &za) in &z_a.values {
        let zr = z_r.values[&id];
        match (za > tau, zr > tau) {
            (true, true) => entangled.insert(id),
            (true, false) => adherence.insert(id),
            (false, true) => robustness.insert(id),
            (false, false) => other.insert(id),
        };
    }
    let (gamma_a, gamma_r) = gamma_weights(z_a, z_r, &entangled);
    Ok(SubspacePartition {
        entangled,
        adherence,
        robustness,
        other,
        tau,
        gamma_a,
        gamma_r,
        z_adherence: z_a.values.clone(),
        z_robustness: z_r.values.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::UnitKind;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<ParameterUnitId> {
        let kinds = UnitKind::BLOCK;
        (0..n).map(|i| ParameterUnitId::new(1 + i / kinds.len(), kinds[i % kinds.len()])).collect()
    }

    fn map_from(values: &[f64]) -> BTreeMap<ParameterUnitId, f64> {
        ids(values.len()).into_iter().zip(values.iter().copied()).collect()
    }

    #[test]
    fn zscores_match_hand_computation() {
        let z = zscores(&map_from(&[1.0, 2.0, 3.0])).unwrap();
        let mut vals: Vec<f64> = z.values.values().copied().collect();
        vals.sort_by(f64::total_cmp);
        assert!((vals[0] + 1.224745).abs() < 1e-5);
        assert!(vals[1].abs() < 1e-12);
        assert!((vals[2] - 1.224745).abs() < 1e-5);

        let z = zscores(&map_from(&[0.0, 4.0])).unwrap();
        let mut vals: Vec<f64> = z.values.values().copied().collect();
        vals.sort_by(f64::total_cmp);
        assert_eq!(vals, vec![-1.0, 1.0]);
    }

    #[test]
    fn constant_scores_standardize_to_zero() {
        let z = zscores(&map_from(&[5.0, 5.0, 5.0])).unwrap();
        assert!(z.values.values().all(|&v| v == 0.0));
    }

    #[test]
    fn too_few_units_is_an_input_error() {
        assert!(matches!(zscores(&map_from(&[1.0])), Err(crate::error::Error::Input(_))));
    }

    #[test]
    fn localization_cases_and_boundary() {
        let keys = ids(4);
        let z_a = ZScores {
            values: keys.iter().copied().zip([1.5, 1.5, 0.3, 1.0]).collect(),
            mean: 0.0,
            std_dev: 1.0,
        };
        let z_r = ZScores {
            values: keys.iter().copied().zip([1.2, 0.2, 1.4, 1.5]).collect(),
            mean: 0.0,
            std_dev: 1.0,
        };
        let p = localize(&z_a, &z_r, 1.0).unwrap();
        assert_eq!(p.assignment(keys[0]), Some(Subspace::Entangled));
        assert_eq!(p.assignment(keys[1]), Some(Subspace::Adherence));
        assert_eq!(p.assignment(keys[2]), Some(Subspace::Robustness));
        // Z exactly equal to tau counts as not-above
        assert_eq!(p.assignment(keys[3]), Some(Subspace::Robustness));
    }

    #[test]
    fn gamma_examples() {
        let keys = ids(2);
        let mk = |va: f64, vr: f64| {
            let z_a = ZScores {
                values: keys.iter().copied().zip([va, va]).collect(),
                mean: 0.0,
                std_dev: 1.0,
            };
            let z_r = ZScores {
                values: keys.iter().copied().zip([vr, vr]).collect(),
                mean: 0.0,
                std_dev: 1.0,
            };
            (z_a, z_r)
        };
        let entangled: BTreeSet<_> = keys.iter().copied().collect();

        let (z_a, z_r) = mk(1.3, 1.3);
        let (ga, gr) = gamma_weights(&z_a, &z_r, &entangled);
        assert_eq!((ga, gr), (0.5, 0.5));

        let (z_a, z_r) = mk(2.0, 1.0);
        let (ga, gr) = gamma_weights(&z_a, &z_r, &entangled);
        assert!((ga - 0.7310586).abs() < 1e-5);
        assert!((ga + gr - 1.0).abs() < 1e-12);

        let (ga, gr) = gamma_weights(&z_a, &z_r, &BTreeSet::new());
        assert_eq!((ga, gr), (0.5, 0.5));
    }

    #[test]
    fn gamma_is_monotone_in_the_adherence_mean() {
        let keys = ids(3);
        let entangled: BTreeSet<_> = keys.iter().copied().collect();
        let z_r = ZScores {
            values: keys.iter().copied().zip([1.1, 1.2, 1.3]).collect(),
            mean: 0.0,
            std_dev: 1.0,
        };
        let mut last = 0.0;
        for boost in [0.0, 0.5, 1.0, 2.0] {
            let z_a = ZScores {
                values: keys.iter().copied().zip([1.1 + boost, 1.2 + boost, 1.3 + boost]).collect(),
                mean: 0.0,
                std_dev: 1.0,
            };
            let (ga, _) = gamma_weights(&z_a, &z_r, &entangled);
            assert!(ga > last, "gamma_a should increase with the adherence mean");
            last = ga;
        }
    }

    #[test]
    fn partition_file_roundtrip() {
        let values = [1.4, 0.2, -0.3, 2.2, 0.9, 1.1, -1.0];
        let z_a = zscores(&map_from(&values)).unwrap();
        let z_r = zscores(&map_from(&[0.3, 2.5, 0.1, 2.0, -0.2, 0.8, 0.4])).unwrap();
        let p = localize(&z_a, &z_r, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partition.tsv");
        p.save(&path).unwrap();
        let loaded = SubspacePartition::load(&path).unwrap();
        assert_eq!(loaded, p);
    }

    #[test]
    fn raising_tau_never_grows_entangled() {
        let z_a = zscores(&map_from(&[0.1, 0.9, 1.7, 2.5, 3.1, 0.2, 1.1, 0.4])).unwrap();
        let z_r = zscores(&map_from(&[2.0, 0.1, 1.9, 2.1, 0.3, 0.2, 1.5, 0.8])).unwrap();
        let mut last = usize::MAX;
        for tau in [0.0, 0.5, 1.0, 1.5, 2.0] {
            let p = localize(&z_a, &z_r, tau).unwrap();
            assert!(p.entangled.len() <= last);
            last = p.entangled.len();
        }
    }

    proptest! {
        #[test]
        fn partition_is_complete_disjoint_and_affine_invariant(
            raw in proptest::collection::vec(0.0f64..10.0, 8..40),
            scale in 0.01f64..50.0,
            shift in -5.0f64..5.0,
        ) {
            let importance_a = map_from(&raw);
            // a second, derived-but-different map for the other behavior
            let rotated: Vec<f64> = raw.iter().rev().map(|v| v * 1.7 + 0.3).collect();
            let importance_r = map_from(&rotated);

            let z_a = zscores(&importance_a).unwrap();
            let z_r = zscores(&importance_r).unwrap();
            let p = localize(&z_a, &z_r, 1.0).unwrap();

            // complete and disjoint
            prop_assert_eq!(p.len(), raw.len());
            let mut all: Vec<_> = p.entangled.iter()
                .chain(&p.adherence).chain(&p.robustness).chain(&p.other).collect();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), raw.len());

            // affine transformation of raw importances leaves it unchanged
            let scaled_a = importance_a.iter().map(|(&k, &v)| (k, v * scale + shift)).collect();
            let scaled_r = importance_r.iter().map(|(&k, &v)| (k, v * scale + shift)).collect();
            let z_a2 = zscores(&scaled_a).unwrap();
            let z_r2 = zscores(&scaled_r).unwrap();
            let p2 = localize(&z_a2, &z_r2, 1.0).unwrap();
            prop_assert_eq!(p.entangled, p2.entangled);
            prop_assert_eq!(p.adherence, p2.adherence);
            prop_assert_eq!(p.robustness, p2.robustness);
            prop_assert_eq!(p.other, p2.other);
        }

        #[test]
        fn zscores_have_zero_mean_unit_deviation(
            raw in proptest::collection::vec(-100.0f64..100.0, 2..50),
        ) {
            let z = zscores(&map_from(&raw)).unwrap();
            let n = raw.len() as f64;
            let mean: f64 = z.values.values().sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            if z.std_dev > 0.0 {
                let var: f64 = z.values.values().map(|v| v * v).sum::<f64>() / n;
                prop_assert!((var - 1.0).abs() < 1e-9);
            }
        }
    }
}
