//! Reconstruction, contrastive, adversarial and classification losses.
//!
//! Each loss is recorded on a [`Tape`] so the trainer can differentiate the
//! weighted objective. Batch means stand in for population means.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::data::one_hot;
use crate::error::{IdianError, Result};
use crate::nn::NetId;
use crate::model::IdianModel;

/// Which embedding pairs the contrastive loss averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    /// All unordered pairs from source ∪ labeled target.
    #[default]
    Union,
    /// Only pairs with one member from each domain.
    CrossOnly,
}

/// Loss components of one step and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_cls: f64,
    pub l_ae: f64,
    pub l_cont: f64,
    pub l_adv: f64,
    pub l_total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

/// `L = L_cls + β·L_AE + γ·L_cont − λ·L_adv`.
pub fn loss_total(l_cls: f64, l_ae: f64, l_cont: f64, l_adv: f64, w: LossWeights) -> f64 {
    l_cls + w.beta * l_ae + w.gamma * l_cont - w.lambda * l_adv
}

impl LossReport {
    pub fn new(l_cls: f64, l_ae: f64, l_cont: f64, l_adv: f64, w: LossWeights) -> Self {
        Self {
            l_cls,
            l_ae,
            l_cont,
            l_adv,
            l_total: loss_total(l_cls, l_ae, l_cont, l_adv, w),
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_cls, self.l_ae, self.l_cont, self.l_adv, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Squared reconstruction error summed over features, averaged over rows.
pub fn reconstruction_error(tape: &mut Tape, input: Var, reconstruction: Var) -> Result<Var> {
    let rows = tape.value(input).nrows().max(1);
    let diff = tape.sub(reconstruction, input)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / rows as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct ContrastiveLoss {
    pub loss: Var,
    /// Set when fewer than two embeddings (or no valid pairs) were given and
    /// the loss is the constant 0.
    pub degenerate: bool,
}

/// Mean margin-contrastive distance over unordered pairs of embedding rows:
/// same class ‖fᵢ − fⱼ‖², different class max(0, ρ − ‖fᵢ − fⱼ‖²).
///
/// `from_source[i]` tags the domain of row `i` for [`PairMode::CrossOnly`].
pub fn contrastive(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    from_source: &[bool],
    margin: f64,
    mode: PairMode,
) -> Result<ContrastiveLoss> {
    let n = tape.value(embeddings).nrows();
    if labels.len() != n || from_source.len() != n {
        return Err(IdianError::config(format!(
            "{n} embeddings but {} labels and {} domain tags",
            labels.len(),
            from_source.len()
        )));
    }
    if margin <= 0.0 {
        return Err(IdianError::config("contrastive margin must be positive"));
    }
    let mut same = Array2::zeros((n, n));
    let mut diff = Array2::zeros((n, n));
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            if mode == PairMode::CrossOnly && from_source[i] == from_source[j] {
                continue;
            }
            pairs += 1;
            if labels[i] == labels[j] {
                same[[i, j]] = 1.0;
            } else {
                diff[[i, j]] = 1.0;
            }
        }
    }
    if pairs == 0 {
        let zero = tape.constant(Array2::zeros((1, 1)));
        return Ok(ContrastiveLoss {
            loss: zero,
            degenerate: true,
        });
    }
    let dist = tape.pairwise_sq_dist(embeddings);
    let same = tape.constant(same);
    let pull = tape.mul(dist, same)?;
    let neg = tape.scale(dist, -1.0);
    let gap = tape.add_scalar(neg, margin);
    let hinge = tape.relu(gap);
    let diff = tape.constant(diff);
    let push = tape.mul(hinge, diff)?;
    let both = tape.add(pull, push)?;
    let total = tape.sum(both);
    Ok(ContrastiveLoss {
        loss: tape.scale(total, 1.0 / pairs as f64),
        degenerate: false,
    })
}

/// `−mean(log D_s) − mean(log(1 − D_t))` over discriminator outputs.
pub fn adversarial(tape: &mut Tape, d_source: Var, d_target: Var) -> Var {
    let log_s = tape.log(d_source);
    let mean_s = tape.mean(log_s);
    let neg = tape.scale(d_target, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let log_t = tape.log(one_minus);
    let mean_t = tape.mean(log_t);
    let both = tape.add(mean_s, mean_t).expect("scalars");
    tape.scale(both, -1.0)
}

/// Mean cross-entropy of probability rows against class labels.
pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (rows, classes) = tape.value(probs).dim();
    if labels.len() != rows {
        return Err(IdianError::config(format!(
            "{rows} prediction rows but {} labels",
            labels.len()
        )));
    }
    if let Some(y) = labels.iter().find(|y| **y >= classes) {
        return Err(IdianError::config(format!("label {y} outside [0, {classes})")));
    }
    let targets = tape.constant(one_hot(labels, classes));
    let logp = tape.log(probs);
    let picked = tape.mul(logp, targets)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / rows.max(1) as f64))
}

/// Target cross-entropy plus `α` times the source cross-entropy. The source
/// term is skipped when `source` is `None`.
pub fn classification(
    tape: &mut Tape,
    target: (Var, &[usize]),
    source: Option<(Var, &[usize])>,
    alpha: f64,
) -> Result<Var> {
    let lt = cross_entropy(tape, target.0, target.1)?;
    match source {
        Some((probs, labels)) => {
            let ls = cross_entropy(tape, probs, labels)?;
            let ls = tape.scale(ls, alpha);
            tape.add(lt, ls)
        }
        None => Ok(lt),
    }
}

fn eval_scalar(build: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = build(&mut tape)?;
    Ok(tape.scalar(v))
}

/// Reconstruction loss of the two autoencoders on concrete rows:
/// source rows and already-imputed target rows.
pub fn loss_ae(model: &IdianModel, source: &Matrix, imputed_target: &Matrix) -> Result<f64> {
    if source.nrows() == 0 || imputed_target.nrows() == 0 {
        return Err(IdianError::config("reconstruction blocks must be nonempty"));
    }
    let recon_s = model
        .net(NetId::SourceDecoder)
        .forward(&model.net(NetId::SourceEncoder).forward(source)?)?;
    let recon_t = model
        .net(NetId::TargetDecoder)
        .forward(&model.net(NetId::TargetEncoder).forward(imputed_target)?)?;
    eval_scalar(|tape| {
        let xs = tape.constant(source.clone());
        let rs = tape.constant(recon_s);
        let xt = tape.constant(imputed_target.clone());
        let rt = tape.constant(recon_t);
        let a = reconstruction_error(tape, xs, rs)?;
        let b = reconstruction_error(tape, xt, rt)?;
        tape.add(a, b)
    })
}

/// Contrastive loss on concrete embeddings; the flag reports the degenerate
/// (fewer than two rows) case.
pub fn loss_contrastive(
    embeddings: &Matrix,
    labels: &[usize],
    from_source: &[bool],
    margin: f64,
    mode: PairMode,
) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let f = tape.constant(embeddings.clone());
    let out = contrastive(&mut tape, f, labels, from_source, margin, mode)?;
    Ok((tape.scalar(out.loss), out.degenerate))
}

/// Adversarial loss on concrete discriminator outputs (`n × 1` columns).
pub fn loss_adv(d_source: &Matrix, d_target: &Matrix) -> Result<f64> {
    eval_scalar(|tape| {
        let s = tape.constant(d_source.clone());
        let t = tape.constant(d_target.clone());
        Ok(adversarial(tape, s, t))
    })
}

/// Classification loss on concrete probability rows.
pub fn loss_cls(
    probs_target: &Matrix,
    labels_target: &[usize],
    probs_source: &Matrix,
    labels_source: &[usize],
    alpha: f64,
) -> Result<f64> {
    eval_scalar(|tape| {
        let pt = tape.constant(probs_target.clone());
        let ps = tape.constant(probs_source.clone());
        classification(tape, (pt, labels_target), Some((ps, labels_source)), alpha)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const W: LossWeights = LossWeights {
        beta: 10.0,
        gamma: 10.0,
        lambda: 10.0,
    };

    #[test]
    fn total_combines_components() {
        assert!((loss_total(1.0, 0.2, 0.3, 0.5, W) - 1.0).abs() < 1e-12);
        assert_eq!(loss_total(0.0, 0.0, 0.0, 0.0, W), 0.0);
        let zero = LossWeights {
            beta: 0.0,
            gamma: 0.0,
            lambda: 0.0,
        };
        assert_eq!(loss_total(0.7, 5.0, 3.0, 2.0, zero), 0.7);
    }

    #[test]
    fn reconstruction_of_residuals() {
        let mut tape = Tape::new();
        let x = tape.constant(array![[0.5, 0.5]]);
        let r = tape.constant(array![[0.6, 0.4]]);
        let l = reconstruction_error(&mut tape, x, r).unwrap();
        assert!((tape.scalar(l) - 0.02).abs() < 1e-15);

        let r2 = tape.constant(array![[0.7, 0.3]]);
        let l2 = reconstruction_error(&mut tape, x, r2).unwrap();
        assert!((tape.scalar(l2) - 4.0 * tape.scalar(l)).abs() < 1e-15);
    }

    #[test]
    fn contrastive_cases() {
        let same = array![[1.0, 2.0], [1.0, 2.0]];
        let (l, deg) = loss_contrastive(&same, &[0, 0], &[true, false], 1.0, PairMode::Union).unwrap();
        assert_eq!(l, 0.0);
        assert!(!deg);

        // squared distance 3 with margin 1: hinge inactive
        let far = array![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let (l, _) = loss_contrastive(&far, &[0, 1], &[true, false], 1.0, PairMode::Union).unwrap();
        assert_eq!(l, 0.0);

        // squared distance 0.25
        let near = array![[0.0], [0.5]];
        let (l, _) = loss_contrastive(&near, &[0, 1], &[true, false], 1.0, PairMode::Union).unwrap();
        assert!((l - 0.75).abs() < 1e-15);
    }

    #[test]
    fn contrastive_single_row_is_flagged() {
        let (l, deg) =
            loss_contrastive(&array![[1.0]], &[0], &[true], 1.0, PairMode::Union).unwrap();
        assert_eq!(l, 0.0);
        assert!(deg);
    }

    #[test]
    fn cross_only_skips_intra_domain_pairs() {
        // Two source rows of different classes at distance 0 would add hinge 1.
        let f = array![[0.0], [0.0], [3.0]];
        let (union, _) =
            loss_contrastive(&f, &[0, 1, 0], &[true, true, false], 1.0, PairMode::Union).unwrap();
        let (cross, _) =
            loss_contrastive(&f, &[0, 1, 0], &[true, true, false], 1.0, PairMode::CrossOnly).unwrap();
        // union pairs: (0,1) hinge 1, (0,2) same 9, (1,2) hinge 0 -> 10/3
        assert!((union - 10.0 / 3.0).abs() < 1e-12);
        // cross pairs: (0,2) 9, (1,2) 0 -> 4.5
        assert!((cross - 4.5).abs() < 1e-12);
    }

    #[test]
    fn adversarial_values() {
        let half = Array2::from_elem((3, 1), 0.5);
        let l = loss_adv(&half, &half).unwrap();
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);

        let l = loss_adv(&array![[0.9]], &array![[0.2]]).unwrap();
        assert!((l - (-(0.9f64.ln()) - 0.8f64.ln())).abs() < 1e-12);
        assert!((l - 0.3285040669720361).abs() < 1e-12);

        let l = loss_adv(&array![[1.0 - 1e-15]], &array![[1e-15]]).unwrap();
        assert!(l < 1e-12);
        // exact 0/1 outputs are clamped, not infinite
        assert!(loss_adv(&array![[0.0]], &array![[1.0]]).unwrap().is_finite());
    }

    #[test]
    fn classification_values() {
        let uniform = Array2::from_elem((1, 10), 0.1);
        let l = loss_cls(&uniform, &[3], &uniform, &[7], 1.0).unwrap();
        assert!((l - 2.0 * 10f64.ln()).abs() < 1e-12);

        let perfect = array![[0.0, 1.0, 0.0]];
        assert_eq!(loss_cls(&perfect, &[1], &perfect, &[1], 1.0).unwrap(), 0.0);

        let lt_only = loss_cls(&uniform, &[3], &array![[1.0; 10]], &[0], 0.0).unwrap();
        assert!((lt_only - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let p = tape.constant(array![[0.5, 0.5]]);
        assert!(cross_entropy(&mut tape, p, &[2]).is_err());
    }
}
