//! KDE weights over a seed's neighbor labels and the constraint that ties
//! their weighted probability mass back to the seed label.
//!
//! For seed `y` with neighbors `z_1..z_n`, the weights are
//! `w = softmax(y·z + phi)`: the frozen dot products give the kernel, `phi` is a
//! learned per-neighbor correction (zero reproduces the plain kernel). The
//! seed probability is estimated as `sum_t w_t p(z_t|x)`, and `phi` is fitted by
//! minimizing the batch mean of `(p(y|x) - sum_t w_t p(z_t|x))^2`.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datastore::NeighborSet;
use crate::error::{Error, Result};
use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometricWeights {
    pub task: String,
    pub seed: String,
    pub neighbor_tokens: Vec<String>,
    pub base_logits: Vec<f64>,
    pub phi: Vec<f64>,
}

impl GeometricWeights {
    pub fn new(task: String, seed: String, neighbor_tokens: Vec<String>, base_logits: Vec<f64>) -> Result<Self> {
        if neighbor_tokens.len() != base_logits.len() {
            return Err(Error::LengthMismatch { expected: neighbor_tokens.len(), got: base_logits.len() });
        }
        let phi = alloc::vec![0.0; base_logits.len()];
        Ok(GeometricWeights { task, seed, neighbor_tokens, base_logits, phi })
    }

    /// Weight records for every seed of `nset` that has at least one neighbor
    /// other than itself. Seeds with no neighbors get no record.
    pub fn from_neighbor_set(nset: &NeighborSet) -> Vec<GeometricWeights> {
        nset.seeds
            .iter()
            .filter_map(|seed| {
                let (tokens, logits): (Vec<String>, Vec<f64>) = nset
                    .assigned_to(seed)
                    .filter(|e| &e.token != seed)
                    .map(|e| (e.token.clone(), e.score))
                    .unzip();
                if tokens.is_empty() {
                    None
                } else {
                    Some(GeometricWeights {
                        task: nset.task.clone(),
                        seed: seed.clone(),
                        phi: alloc::vec![0.0; tokens.len()],
                        neighbor_tokens: tokens,
                        base_logits: logits,
                    })
                }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.neighbor_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_tokens.is_empty()
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.neighbor_tokens.iter().position(|t| t == token)
    }

    /// Adds uniform noise in `[-scale, scale)` to `phi`.
    pub fn perturb_phi(&mut self, rng: &mut Stream, scale: f64) {
        for p in &mut self.phi {
            *p += rng.uniform(-scale, scale);
        }
    }

    fn check(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyNeighbors);
        }
        if self.phi.len() != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got: self.phi.len() });
        }
        if self.base_logits.len() != self.len() {
            return Err(Error::LengthMismatch { expected: self.len(), got: self.base_logits.len() });
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<Vec<f64>> {
        kde_weights(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let gw: GeometricWeights = serde_json::from_str(text)
            .map_err(|e| Error::MalformedTask(alloc::format!("geometric weights: {e}")))?;
        gw.check()?;
        Ok(gw)
    }
}

/// `softmax(base_logits + phi)`, max-subtracted.
pub fn kde_weights(gw: &GeometricWeights) -> Result<Vec<f64>> {
    gw.check()?;
    Ok(softmax_offsets(&gw.base_logits, &gw.phi))
}

fn softmax_offsets(base: &[f64], phi: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = base.iter().zip(phi).map(|(b, p)| b + p).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|l| libm::exp(l - max)).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// `sum_t w_t p_z[t]`.
pub fn aggregate(gw: &GeometricWeights, p_z: &[f64]) -> Result<f64> {
    let w = kde_weights(gw)?;
    aggregate_with(&w, p_z)
}

pub fn aggregate_with(weights: &[f64], p_z: &[f64]) -> Result<f64> {
    if weights.len() != p_z.len() {
        return Err(Error::LengthMismatch { expected: weights.len(), got: p_z.len() });
    }
    Ok(weights.iter().zip(p_z).map(|(w, p)| w * p).sum())
}

/// Mean squared gap between seed probabilities and their aggregates.
pub fn constraint_loss(p_y: &[f64], aggregates: &[f64]) -> Result<f64> {
    if p_y.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if p_y.len() != aggregates.len() {
        return Err(Error::LengthMismatch { expected: p_y.len(), got: aggregates.len() });
    }
    let sum: f64 = p_y.iter().zip(aggregates).map(|(y, a)| (y - a) * (y - a)).sum();
    Ok(sum / p_y.len() as f64)
}

/// One constraint batch: `p_y[b]` and the row `p_z[b]` of neighbor
/// probabilities, both taken from a frozen model.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBatch {
    pub p_y: Vec<f64>,
    pub p_z: Vec<Vec<f64>>,
}

impl ConstraintBatch {
    fn check(&self, n: usize) -> Result<()> {
        if self.p_y.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if self.p_z.len() != self.p_y.len() {
            return Err(Error::LengthMismatch { expected: self.p_y.len(), got: self.p_z.len() });
        }
        if let Some(row) = self.p_z.iter().find(|r| r.len() != n) {
            return Err(Error::LengthMismatch { expected: n, got: row.len() });
        }
        Ok(())
    }

    fn loss_at(&self, weights: &[f64]) -> f64 {
        let sum: f64 = self
            .p_y
            .iter()
            .zip(&self.p_z)
            .map(|(y, row)| {
                let agg: f64 = weights.iter().zip(row).map(|(w, p)| w * p).sum();
                (y - agg) * (y - agg)
            })
            .sum();
        sum / self.p_y.len() as f64
    }
}

/// Constraint loss of `gw` on `batch`.
pub fn batch_constraint_loss(gw: &GeometricWeights, batch: &ConstraintBatch) -> Result<f64> {
    let w = kde_weights(gw)?;
    batch.check(w.len())?;
    Ok(batch.loss_at(&w))
}

/// Gradient of the constraint loss with respect to `phi`, holding `p_y` and
/// `p_z` fixed:
/// `dL/dphi_s = w_s (g_s - sum_t w_t g_t)` with
/// `g_t = (2/B) sum_b (agg_b - p_y_b) p_z[b][t]`.
pub fn constraint_grad_phi(gw: &GeometricWeights, batch: &ConstraintBatch) -> Result<Vec<f64>> {
    let w = kde_weights(gw)?;
    batch.check(w.len())?;
    Ok(grad_at(&w, batch))
}

fn grad_at(w: &[f64], batch: &ConstraintBatch) -> Vec<f64> {
    let scale = 2.0 / batch.p_y.len() as f64;
    let mut g = alloc::vec![0.0; w.len()];
    for (y, row) in batch.p_y.iter().zip(&batch.p_z) {
        let agg: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
        let r = scale * (agg - y);
        for (gt, p) in g.iter_mut().zip(row) {
            *gt += r * p;
        }
    }
    let mean: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
    w.iter().zip(&g).map(|(ws, gs)| ws * (gs - mean)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhiStep {
    pub loss_before: f64,
    pub loss_after: f64,
    /// Step length actually applied; zero when no trial step decreased the loss.
    pub step: f64,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// One gradient step on `phi`. With `line_search`, the step starts at `lr`
/// and is halved until the Armijo condition holds; if it never does, `phi`
/// is left unchanged, so the loss cannot increase.
pub fn phi_step(gw: &mut GeometricWeights, batch: &ConstraintBatch, lr: f64, line_search: bool) -> Result<PhiStep> {
    let w = kde_weights(gw)?;
    batch.check(w.len())?;
    let loss_before = batch.loss_at(&w);
    let grad = grad_at(&w, batch);
    let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
    let trial = |step: f64| -> (Vec<f64>, f64) {
        let phi: Vec<f64> = gw.phi.iter().zip(&grad).map(|(p, g)| p - step * g).collect();
        let loss = batch.loss_at(&softmax_offsets(&gw.base_logits, &phi));
        (phi, loss)
    };
    if !line_search {
        let (phi, loss_after) = trial(lr);
        gw.phi = phi;
        return Ok(PhiStep { loss_before, loss_after, step: lr });
    }
    if gnorm2 == 0.0 {
        return Ok(PhiStep { loss_before, loss_after: loss_before, step: 0.0 });
    }
    let mut step = lr;
    for _ in 0..MAX_BACKTRACKS {
        let (phi, loss) = trial(step);
        if loss <= loss_before - ARMIJO_C * step * gnorm2 {
            gw.phi = phi;
            return Ok(PhiStep { loss_before, loss_after: loss, step });
        }
        step *= 0.5;
    }
    Ok(PhiStep { loss_before, loss_after: loss_before, step: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn gw(base: &[f64], phi: &[f64]) -> GeometricWeights {
        let n = base.len();
        GeometricWeights {
            task: "t".into(),
            seed: "y".into(),
            neighbor_tokens: (0..n).map(|i| alloc::format!("z{i}")).collect(),
            base_logits: base.to_vec(),
            phi: phi.to_vec(),
        }
    }

    #[test]
    fn uniform_when_logits_equal() {
        let w = kde_weights(&gw(&[0.3; 5], &[0.0; 5])).unwrap();
        for v in w {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn hand_softmax() {
        let w = kde_weights(&gw(&[1.0, 0.0], &[0.0, 0.0])).unwrap();
        let e = core::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn no_overflow() {
        let w = kde_weights(&gw(&[1000.0, 0.0], &[0.0, 0.0])).unwrap();
        assert_eq!(w[0], 1.0);
        assert!(w[1] < 1e-300);
        assert!(w.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_and_mismatch() {
        assert_eq!(kde_weights(&gw(&[], &[])), Err(Error::EmptyNeighbors));
        assert!(kde_weights(&gw(&[1.0], &[])).is_err());
        assert!(aggregate(&gw(&[1.0, 2.0], &[0.0, 0.0]), &[0.5]).is_err());
        assert_eq!(constraint_loss(&[], &[]), Err(Error::EmptyBatch));
        assert!(constraint_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn aggregate_cases() {
        let g = gw(&[1.0, 0.0], &[0.0, 0.0]);
        assert!((aggregate(&g, &[0.5, 0.5]).unwrap() - 0.5).abs() < 1e-15);
        assert!((aggregate_with(&[0.7311, 0.2689], &[0.9, 0.1]).unwrap() - 0.6849).abs() < 1e-4);
        assert_eq!(aggregate(&gw(&[3.0], &[0.0]), &[0.25]).unwrap(), 0.25);
    }

    #[test]
    fn loss_cases() {
        assert_eq!(constraint_loss(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 0.0);
        assert_eq!(constraint_loss(&[1.0], &[0.0]).unwrap(), 1.0);
        assert!((constraint_loss(&[0.8, 0.2], &[0.5, 0.5]).unwrap() - 0.09).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_at_exact_fit() {
        let g = gw(&[0.5, -0.2, 1.0], &[0.0; 3]);
        let w = kde_weights(&g).unwrap();
        let p_z = vec![vec![0.1, 0.5, 0.3], vec![0.9, 0.2, 0.05]];
        let p_y = p_z.iter().map(|r| aggregate_with(&w, r).unwrap()).collect();
        let grad = constraint_grad_phi(&g, &ConstraintBatch { p_y, p_z }).unwrap();
        assert!(grad.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn symmetric_gradient() {
        let g = gw(&[0.7, 0.7], &[0.0, 0.0]);
        let batch = ConstraintBatch { p_y: vec![0.6, 0.6], p_z: vec![vec![0.9, 0.1], vec![0.1, 0.9]] };
        let grad = constraint_grad_phi(&g, &batch).unwrap();
        // swapping the columns swaps the gradient components
        let swapped = ConstraintBatch { p_y: vec![0.6, 0.6], p_z: vec![vec![0.1, 0.9], vec![0.9, 0.1]] };
        let grad2 = constraint_grad_phi(&g, &swapped).unwrap();
        assert!((grad[0] + grad[1]).abs() < 1e-15);
        assert!((grad[0] - grad2[1]).abs() < 1e-15);
        let asym = ConstraintBatch { p_y: vec![0.8, 0.2], p_z: vec![vec![0.9, 0.1], vec![0.3, 0.5]] };
        let ga = constraint_grad_phi(&g, &asym).unwrap();
        assert!((ga[0] + ga[1]).abs() < 1e-15);
        assert!(ga[0].abs() > 1e-6);
    }

    #[test]
    fn line_search_never_increases() {
        let mut g = gw(&[0.2, 1.5, -0.4], &[0.0; 3]);
        let batch = ConstraintBatch {
            p_y: vec![0.9, 0.05, 0.4],
            p_z: vec![vec![0.1, 0.2, 0.7], vec![0.6, 0.1, 0.1], vec![0.3, 0.3, 0.3]],
        };
        let mut prev = batch_constraint_loss(&g, &batch).unwrap();
        for _ in 0..50 {
            let s = phi_step(&mut g, &batch, 10.0, true).unwrap();
            assert!(s.loss_after <= s.loss_before);
            assert_eq!(s.loss_before, prev);
            prev = s.loss_after;
        }
        assert!(prev < batch_constraint_loss(&gw(&[0.2, 1.5, -0.4], &[0.0; 3]), &batch).unwrap());
    }

    #[test]
    fn from_neighbor_set_excludes_seed() {
        use crate::datastore::NeighborEntry;
        let e = |t: &str, s: f64, seed: &str, row| NeighborEntry { token: t.into(), score: s, seed: seed.into(), row };
        let nset = NeighborSet {
            task: "t".into(),
            entries: vec![e("pos", 9.0, "pos", 0), e("good", 6.0, "pos", 1), e("neg", 9.0, "neg", 2), e("ok", 1.0, "pos", 3)],
            seeds: vec!["pos".into(), "neg".into()],
            k_per_seed: 2,
        };
        let gws = GeometricWeights::from_neighbor_set(&nset);
        assert_eq!(gws.len(), 1);
        assert_eq!(gws[0].neighbor_tokens, vec!["good", "ok"]);
        assert_eq!(gws[0].base_logits, vec![6.0, 1.0]);
        assert_eq!(GeometricWeights::from_json(&gws[0].to_json()).unwrap(), gws[0]);
    }

    proptest! {
        #[test]
        fn normalized(
            base in proptest::collection::vec(-1e4f64..1e4, 1..50),
            phi_scale in 0.0f64..1e4,
            seed in 0u64..1000,
        ) {
            let mut rng = Stream::new(seed, 1);
            let phi: Vec<f64> = base.iter().map(|_| rng.uniform(-phi_scale, phi_scale)).collect();
            let w = kde_weights(&gw(&base, &phi)).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        // Rounding of `l + c` grows with |l|, so the 1e-12 bound is checked on
        // logits of moderate magnitude.
        #[test]
        fn shift_invariant(
            base in proptest::collection::vec(-100f64..100.0, 1..20),
            shift in -100f64..100.0,
        ) {
            let n = base.len();
            let w = kde_weights(&gw(&base, &vec![0.0; n])).unwrap();
            let shifted: Vec<f64> = base.iter().map(|b| b + shift).collect();
            let w2 = kde_weights(&gw(&shifted, &vec![0.0; n])).unwrap();
            let w3 = kde_weights(&gw(&base, &vec![shift; n])).unwrap();
            for i in 0..n {
                prop_assert!((w[i] - w2[i]).abs() < 1e-12);
                prop_assert!((w[i] - w3[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn aggregate_is_convex(
            base in proptest::collection::vec(-10f64..10.0, 1..10),
            seed in 0u64..1000,
        ) {
            let n = base.len();
            let mut rng = Stream::new(seed, 0);
            let p: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let agg = aggregate(&gw(&base, &vec![0.0; n]), &p).unwrap();
            let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(agg >= lo - 1e-12 && agg <= hi + 1e-12);
        }
    }
}
