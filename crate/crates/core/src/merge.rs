//! Checkpoint merging: weighted linear averaging and TIES
//! (trim, elect sign, disjoint mean) over task vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamError, ParameterMap};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MergeError {
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("invalid merge weights: {0}")]
    Weights(String),
    #[error("density must lie in (0, 1], got {0}")]
    Density(f64),
    #[error("{0}")]
    Models(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    Linear,
    Ties,
}

/// A merge request as read from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSpec {
    pub mode: MergeMode,
    /// Linear: convex weights (required). TIES: optional weights for the aligned mean.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    /// TIES: fraction of each tensor's entries kept.
    #[serde(default = "default_density")]
    pub density: f64,
}

fn default_density() -> f64 {
    1.0
}

impl MergeSpec {
    /// Run the merge; `base` is required for TIES and ignored for linear.
    pub fn apply(
        &self,
        base: Option<&ParameterMap>,
        models: &[ParameterMap],
    ) -> Result<ParameterMap, MergeError> {
        match self.mode {
            MergeMode::Linear => {
                let w = self
                    .weights
                    .as_deref()
                    .ok_or_else(|| MergeError::Weights("linear merge needs weights".into()))?;
                linear_merge(models, w)
            }
            MergeMode::Ties => {
                let base = base.ok_or_else(|| {
                    MergeError::Models("TIES merge needs a base checkpoint".into())
                })?;
                ties_merge(base, models, self.density, self.weights.as_deref())
            }
        }
    }
}

fn check_weights(weights: &[f64], n: usize, convex: bool) -> Result<(), MergeError> {
    if weights.len() != n {
        return Err(MergeError::Weights(format!(
            "{} weights for {n} models",
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(MergeError::Weights(
            "weights must be finite and non-negative".into(),
        ));
    }
    let sum: f64 = weights.iter().sum();
    if convex && (sum - 1.0).abs() > 1e-9 {
        return Err(MergeError::Weights(format!(
            "weights sum to {sum}, expected 1"
        )));
    }
    if !convex && sum <= 0.0 {
        return Err(MergeError::Weights("weights sum to zero".into()));
    }
    Ok(())
}

/// `sum_i w_i * theta_i` with convex weights.
///
/// Zero-weight models are skipped, so a one-hot weight vector returns its
/// model bit for bit.
pub fn linear_merge(models: &[ParameterMap], weights: &[f64]) -> Result<ParameterMap, MergeError> {
    if models.len() < 2 {
        return Err(MergeError::Models(format!(
            "linear merge needs at least 2 models, got {}",
            models.len()
        )));
    }
    check_weights(weights, models.len(), true)?;
    let refs: Vec<&ParameterMap> = models.iter().collect();
    Ok(ParameterMap::zip_with(&refs, |_, cols| {
        (0..cols[0].len())
            .map(|j| {
                let mut terms = weights
                    .iter()
                    .zip(cols)
                    .filter(|(w, _)| **w != 0.0)
                    .map(|(w, c)| w * c[j]);
                let first = terms.next().unwrap_or(0.0);
                terms.fold(first, |acc, t| acc + t)
            })
            .collect()
    })?)
}

/// `model - base`, elementwise.
pub fn task_vector(model: &ParameterMap, base: &ParameterMap) -> Result<ParameterMap, MergeError> {
    Ok(ParameterMap::zip_with(&[model, base], |_, c| {
        c[0].iter().zip(c[1]).map(|(m, b)| m - b).collect()
    })?)
}

/// Zero all but the `ceil(k * n)` largest-magnitude entries; equal magnitudes
/// favor the lower index.
pub fn trim(values: &[f64], density: f64) -> Vec<f64> {
    let n = values.len();
    let keep = ((density * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].abs().total_cmp(&values[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; n];
    for &i in &order[..keep] {
        out[i] = values[i];
    }
    out
}

/// TIES merge of `models` onto `base`.
///
/// Per tensor and model the task vector is trimmed to density `k`. Each
/// coordinate takes the sign of the summed trimmed values (a zero sum leaves
/// the base value), then the mean of the entries agreeing with that sign,
/// weighted when `weights` is given. When every agreeing model holds the same
/// value at a coordinate, that value is returned as is.
pub fn ties_merge(
    base: &ParameterMap,
    models: &[ParameterMap],
    k: f64,
    weights: Option<&[f64]>,
) -> Result<ParameterMap, MergeError> {
    if models.is_empty() {
        return Err(MergeError::Models(
            "TIES merge needs at least one model".into(),
        ));
    }
    if !(k > 0.0 && k <= 1.0) {
        return Err(MergeError::Density(k));
    }
    if let Some(w) = weights {
        check_weights(w, models.len(), false)?;
    }
    for m in models {
        base.check_layout(m)?;
    }
    let mut out = ParameterMap::new();
    for (name, bt) in base.iter() {
        let trimmed: Vec<Vec<f64>> = models
            .iter()
            .map(|m| {
                let data = &m.get(name).expect("layout checked").data;
                let tv: Vec<f64> = data.iter().zip(&bt.data).map(|(x, b)| x - b).collect();
                trim(&tv, k)
            })
            .collect();
        let merged = (0..bt.data.len())
            .map(|j| {
                let sum: f64 = trimmed.iter().map(|t| t[j]).sum();
                if sum == 0.0 {
                    return bt.data[j];
                }
                let agree: Vec<usize> = (0..models.len())
                    .filter(|&i| trimmed[i][j] != 0.0 && (trimmed[i][j] > 0.0) == (sum > 0.0))
                    .collect();
                let raw = |i: usize| models[i].get(name).expect("layout checked").data[j];
                let first = raw(agree[0]);
                if agree.iter().all(|&i| raw(i).to_bits() == first.to_bits()) {
                    return first;
                }
                let delta = match weights {
                    None => agree.iter().map(|&i| trimmed[i][j]).sum::<f64>() / agree.len() as f64,
                    Some(w) => {
                        let num: f64 = agree.iter().map(|&i| w[i] * trimmed[i][j]).sum();
                        let den: f64 = agree.iter().map(|&i| w[i]).sum();
                        if den == 0.0 {
                            0.0
                        } else {
                            num / den
                        }
                    }
                };
                bt.data[j] + delta
            })
            .collect();
        out.insert(name, bt.shape.clone(), merged)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pm(v: &[f64]) -> ParameterMap {
        ParameterMap::new()
            .with("w", vec![v.len()], v.to_vec())
            .unwrap()
    }

    fn vals(m: &ParameterMap) -> Vec<f64> {
        m.get("w").unwrap().data.clone()
    }

    #[test]
    fn linear_examples() {
        let a = pm(&[0.1, -0.0, 3.0]);
        let b = pm(&[7.0, 1.0, -2.0]);
        let c = pm(&[0.3, 0.3, 0.3]);
        let out = linear_merge(&[a.clone(), b.clone(), c.clone()], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            vals(&out).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            vals(&a).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            vals(&linear_merge(&[pm(&[0.0]), pm(&[2.0])], &[0.5, 0.5]).unwrap()),
            vec![1.0]
        );
        assert_eq!(
            linear_merge(&[b.clone(), b.clone()], &[0.3, 0.7]).unwrap(),
            b
        );
        assert!(linear_merge(&[a.clone(), b.clone()], &[0.5, 0.6]).is_err());
        assert!(linear_merge(&[a.clone(), b.clone()], &[1.5, -0.5]).is_err());
        assert!(linear_merge(&[a.clone()], &[1.0]).is_err());
        let other = ParameterMap::new()
            .with("v", vec![3], vec![0.0; 3])
            .unwrap();
        assert!(linear_merge(&[a, other], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn task_vector_examples() {
        assert_eq!(
            vals(&task_vector(&pm(&[3.0, 0.0]), &pm(&[1.0, 1.0])).unwrap()),
            vec![2.0, -1.0]
        );
        assert_eq!(
            vals(&task_vector(&pm(&[2.5, 1.0]), &pm(&[2.5, 1.0])).unwrap()),
            vec![0.0, 0.0]
        );
        assert_eq!(
            vals(&task_vector(&pm(&[2.5, -1.0]), &pm(&[0.0, 0.0])).unwrap()),
            vec![2.5, -1.0]
        );
    }

    #[test]
    fn ties_examples() {
        let base = pm(&[0.0, 0.0]);
        let out = ties_merge(&base, &[pm(&[0.9, -0.1]), pm(&[0.8, 0.2])], 0.5, None).unwrap();
        let v = vals(&out);
        assert!((v[0] - 0.85).abs() < 1e-15);
        assert_eq!(v[1], 0.0);
        let cancel = ties_merge(&pm(&[0.5]), &[pm(&[1.5]), pm(&[-0.5])], 1.0, None).unwrap();
        assert_eq!(vals(&cancel), vec![0.5]);
        let single = ties_merge(&base, &[pm(&[0.9, -0.1])], 0.5, None).unwrap();
        assert_eq!(vals(&single), vec![0.9, 0.0]);
        let m = pm(&[0.3, -0.7, 0.1]);
        let twice = ties_merge(&pm(&[0.1, 0.2, 0.1]), &[m.clone(), m.clone()], 1.0, None).unwrap();
        assert_eq!(twice, m);
        assert!(ties_merge(&base, &[pm(&[1.0, 1.0])], 0.0, None).is_err());
        assert!(ties_merge(&base, &[pm(&[1.0, 1.0])], 1.5, None).is_err());
        assert!(ties_merge(&base, &[], 1.0, None).is_err());
    }

    #[test]
    fn trim_keeps_lower_index_on_ties() {
        assert_eq!(trim(&[1.0, -1.0, 0.5, 1.0], 0.5), vec![1.0, -1.0, 0.0, 0.0]);
        assert_eq!(trim(&[0.1, 0.2, 0.3], 0.01), vec![0.0, 0.0, 0.3]);
    }

    #[test]
    fn weighted_ties_mean() {
        let out = ties_merge(
            &pm(&[0.0]),
            &[pm(&[1.0]), pm(&[4.0])],
            1.0,
            Some(&[3.0, 1.0]),
        )
        .unwrap();
        assert_eq!(vals(&out), vec![1.75]);
    }

    fn finite() -> impl Strategy<Value = f64> {
        -100.0f64..100.0
    }

    proptest! {
        #[test]
        fn ties_single_model_full_density_is_identity(base in prop::collection::vec(finite(), 1..20), seed in prop::collection::vec(finite(), 20)) {
            let m: Vec<f64> = base.iter().zip(&seed).map(|(b, s)| b + s).collect();
            let out = ties_merge(&pm(&base), &[pm(&m)], 1.0, None).unwrap();
            prop_assert_eq!(vals(&out).iter().map(|v| v.to_bits()).collect::<Vec<_>>(), m.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn identical_models_merge_to_themselves(v in prop::collection::vec(finite(), 1..12), n in 2usize..5) {
            let models = vec![pm(&v); n];
            let w = vec![1.0 / n as f64; n];
            let lin = vals(&linear_merge(&models, &w).unwrap());
            for (a, b) in lin.iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            let ties = vals(&ties_merge(&pm(&vec![0.0; v.len()]), &models, 1.0, None).unwrap());
            for (a, b) in ties.iter().zip(&v) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }

        #[test]
        fn linear_is_permutation_equivariant(a in prop::collection::vec(finite(), 4), b in prop::collection::vec(finite(), 4), w in 0.0f64..1.0) {
            let x = linear_merge(&[pm(&a), pm(&b)], &[w, 1.0 - w]).unwrap();
            let y = linear_merge(&[pm(&b), pm(&a)], &[1.0 - w, w]).unwrap();
            for (p, q) in vals(&x).iter().zip(vals(&y)) {
                prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
            }
        }

        #[test]
        fn ties_delta_bounded_by_trimmed_magnitudes(
            base in prop::collection::vec(finite(), 6),
            ms in prop::collection::vec(prop::collection::vec(finite(), 6), 1..4),
            k in 0.1f64..1.0,
        ) {
            let models: Vec<ParameterMap> = ms.iter().map(|m| pm(m)).collect();
            let out = vals(&ties_merge(&pm(&base), &models, k, None).unwrap());
            for j in 0..6 {
                let bound = ms.iter().map(|m| trim(&m.iter().zip(&base).map(|(x, b)| x - b).collect::<Vec<_>>(), k)[j].abs()).fold(0.0, f64::max);
                prop_assert!((out[j] - base[j]).abs() <= bound * (1.0 + 1e-12) + 1e-12);
            }
        }
    }
}
