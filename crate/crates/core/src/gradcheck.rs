//! Central finite-difference check of tape gradients.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{GradientSet, Matrix, Tape, Var};
use crate::data::{Batch, LabeledBlock, UnlabeledBlock};
use crate::error::{IdianError, Result};
use crate::losses::{LossReport, PairMode};
use crate::model::{ArchSpec, IdianModel};
use crate::nn::{NetId, ParamKey, ParamKind};
use crate::rng::{derive_seed, rng_for, NoiseSource};
use crate::trainer::{compute_step, forward_losses, DiscriminatorDirection, LossVars, TrainConfig};

/// Named parameter arrays fed to a loss closure.
pub type ParamMap = BTreeMap<ParamKey, Matrix>;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter and row-major entry of the largest error.
    pub worst: Option<(ParamKey, usize)>,
    pub checked: usize,
}

/// Compares `backward` against central differences on every entry of `params`.
///
/// `loss_fn` must build the loss on the given tape, registering parameters
/// with `tape.param(key, params[key].clone())`. Relative error per entry is
/// `|a - n| / max(1, |a| + |n|)`, so tiny gradients are compared absolutely.
pub fn grad_check<F>(loss_fn: F, params: &ParamMap, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamMap) -> Result<Var>,
{
    check_epsilon(epsilon)?;
    let eval = |p: &ParamMap| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, p)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(IdianError::numeric(format!("loss is not finite: {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    if !tape.scalar(loss).is_finite() {
        return Err(IdianError::numeric("loss is not finite"));
    }
    let analytic = tape.backward(loss)?;

    compare(&analytic, params, eval, epsilon)
}

/// Compares `analytic` with central differences of `objective` on every
/// entry of `params`.
fn compare<E>(analytic: &GradientSet, params: &ParamMap, objective: E, epsilon: f64) -> Result<GradCheckReport>
where
    E: Fn(&ParamMap) -> Result<f64>,
{
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (key, value) in params {
        let zero;
        let a_grad = match analytic.get(key) {
            Some(g) => g,
            None => {
                zero = Matrix::zeros(value.dim());
                &zero
            }
        };
        for ((r, c), &orig) in value.indexed_iter() {
            let slot = |m: &mut ParamMap, v: f64| {
                m.get_mut(key).expect("key present")[[r, c]] = v;
            };
            slot(&mut work, orig + epsilon);
            let up = objective(&work)?;
            slot(&mut work, orig - epsilon);
            let down = objective(&work)?;
            slot(&mut work, orig);

            let numeric = (up - down) / (2.0 * epsilon);
            let a = a_grad[[r, c]];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some((*key, r * value.ncols() + c));
            }
        }
    }
    Ok(report)
}

/// The objective each network descends, as a function of the loss values.
pub fn routed_objective(net: NetId, r: &LossReport, cfg: &TrainConfig) -> f64 {
    match net {
        NetId::Imputer | NetId::SourceEncoder | NetId::TargetEncoder => r.l_total,
        NetId::SourceDecoder | NetId::TargetDecoder => cfg.beta * r.l_ae,
        NetId::Shared => r.l_cls + cfg.gamma * r.l_cont - cfg.lambda * r.l_adv,
        NetId::Discriminator => match cfg.discriminator_direction {
            DiscriminatorDirection::MinimizeAdversarial => cfg.lambda * r.l_adv,
            DiscriminatorDirection::AscendAdversarial => -cfg.lambda * r.l_adv,
        },
        NetId::Classifier => r.l_cls,
    }
}

/// Checks the routed gradient of every network against central differences
/// of that network's own objective ([`routed_objective`]). `noise` is
/// replayed identically for every evaluation.
pub fn routed_check(
    model: &IdianModel,
    batch: &Batch,
    cfg: &TrainConfig,
    noise: &NoiseSource,
    epsilon: f64,
) -> Result<Vec<(NetId, GradCheckReport)>> {
    check_epsilon(epsilon)?;
    let (_, routed) = compute_step(model, batch, cfg, &mut noise.clone())?;
    let all = model.param_map();
    NetId::ALL
        .iter()
        .map(|&net| {
            let own: ParamMap = all
                .iter()
                .filter(|(k, _)| k.net == net)
                .map(|(k, v)| (*k, v.clone()))
                .collect();
            let objective = |p: &ParamMap| -> Result<f64> {
                let mut m = model.clone();
                m.set_params(p)?;
                let mut tape = Tape::new();
                let vars = forward_losses(&mut tape, &m, batch, cfg, &mut noise.clone())?;
                let v = routed_objective(net, &vars.report(&tape), cfg);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(IdianError::numeric("objective is not finite"))
                }
            };
            Ok((net, compare(&routed, &own, objective, epsilon)?))
        })
        .collect()
}

/// Small random model and batch for the oracle suite: every width at most 8
/// and four rows per block.
pub fn tiny_problem(seed: u64) -> Result<(IdianModel, Batch)> {
    let arch = ArchSpec {
        imputer_hidden: 8,
        encoder_hidden: 8,
        embed_dim: 6,
        decoder_hidden: 8,
        shared_hidden: 8,
        shared_dim: 5,
        discriminator_hidden: 8,
    };
    let (d_s, d_t, n_c, n) = (7, 6, 3, 4);
    let mut model = IdianModel::new(d_s, d_t, n_c, arch, derive_seed(seed, "gradcheck-init", 0))?;
    // Zero biases put whole rows on ReLU kinks (an all-dead encoder row feeds
    // exact zeros to the next layer), where central differences are meaningless.
    let mut rng = rng_for(seed, "gradcheck-bias", 0);
    let mut params = model.param_map();
    for (key, value) in params.iter_mut() {
        if key.kind == ParamKind::Bias {
            value.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
    }
    model.set_params(&params)?;
    let mut rng = rng_for(seed, "gradcheck-batch", 0);
    let mut features = |d: usize| Matrix::from_shape_fn((n, d), |_| rng.random::<f64>());
    let xs = features(d_s);
    let xl = features(d_t);
    let xu = features(d_t);
    let mut mask = || {
        Matrix::from_shape_fn((n, d_t), |_| if rng.random::<f64>() < 0.4 { 0.0 } else { 1.0 })
    };
    let (ml, mu) = (mask(), mask());
    let labels = |offset: usize| (0..n).map(|i| (i + offset) % n_c).collect::<Vec<_>>();
    let idx: Vec<usize> = (0..n).collect();
    let batch = Batch {
        source: LabeledBlock {
            indices: idx.clone(),
            features: xs,
            masks: Matrix::ones((n, d_s)),
            labels: labels(0),
        },
        target_labeled: LabeledBlock {
            indices: idx.clone(),
            features: &xl * &ml,
            masks: ml,
            labels: labels(1),
        },
        target_unlabeled: UnlabeledBlock {
            indices: idx,
            features: &xu * &mu,
            masks: mu,
        },
    };
    Ok((model, batch))
}

/// Named gradient checks of each loss term, the total objective and the
/// routed objectives of every network, on a tiny random problem.
pub fn oracle_suite(seed: u64, epsilon: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let (model, batch) = tiny_problem(seed)?;
    let noise = NoiseSource::streaming(derive_seed(seed, "gradcheck-noise", 0));
    let params = model.param_map();
    let mut out = Vec::new();

    type Pick = fn(&LossVars) -> Option<Var>;
    let terms: [(&str, Pick); 5] = [
        ("reconstruction", |v| v.l_ae),
        ("contrastive", |v| v.l_cont),
        ("adversarial", |v| v.l_adv),
        ("classification", |v| Some(v.l_cls)),
        ("total", |v| Some(v.total)),
    ];
    let base = TrainConfig::default();
    for (name, pick) in terms {
        let report = grad_check(
            |tape, p| {
                let mut m = model.clone();
                m.set_params(p)?;
                let vars = forward_losses(tape, &m, &batch, &base, &mut noise.clone())?;
                pick(&vars).ok_or_else(|| IdianError::usage(format!("{name} is disabled")))
            },
            &params,
            epsilon,
        )?;
        out.push((format!("loss/{name}"), report));
    }

    let mut cross = base.clone();
    cross.pairs = PairMode::CrossOnly;
    let mut ascend = base.clone();
    ascend.discriminator_direction = DiscriminatorDirection::AscendAdversarial;
    let configs = [("routed", base), ("routed-cross-only", cross), ("routed-ascend", ascend)];
    for (prefix, cfg) in configs {
        for (net, report) in routed_check(&model, &batch, &cfg, &noise, epsilon)? {
            out.push((format!("{prefix}/{}", net.name()), report));
        }
    }
    Ok(out)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(IdianError::usage(format!(
            "epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Mlp};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn key(net: NetId, layer: usize, kind: ParamKind) -> ParamKey {
        ParamKey { net, layer, kind }
    }

    #[test]
    fn quadratic_is_exact() {
        let k = key(NetId::Shared, 0, ParamKind::Weights);
        let mut params = ParamMap::new();
        params.insert(k, array![[0.7, -1.3], [2.0, 0.1]]);
        let report = grad_check(
            |tape, p| {
                let w = tape.param(k, p[&k].clone());
                let sq = tape.mul(w, w)?;
                let s = tape.sum(sq);
                Ok(tape.scale(s, 0.5))
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-8, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    fn mlp_params(mlp: &Mlp, net: NetId) -> ParamMap {
        let mut p = ParamMap::new();
        for (i, layer) in mlp.layers().iter().enumerate() {
            p.insert(key(net, i, ParamKind::Weights), layer.weights.clone());
            p.insert(
                key(net, i, ParamKind::Bias),
                layer.bias.clone().insert_axis(ndarray::Axis(0)),
            );
        }
        p
    }

    fn two_layer_loss(tape: &mut Tape, p: &ParamMap, x: &Matrix) -> Result<Var> {
        let input = tape.constant(x.clone());
        let w0 = tape.param(key(NetId::Shared, 0, ParamKind::Weights), p[&key(NetId::Shared, 0, ParamKind::Weights)].clone());
        let b0 = tape.param(key(NetId::Shared, 0, ParamKind::Bias), p[&key(NetId::Shared, 0, ParamKind::Bias)].clone());
        let w1 = tape.param(key(NetId::Shared, 1, ParamKind::Weights), p[&key(NetId::Shared, 1, ParamKind::Weights)].clone());
        let b1 = tape.param(key(NetId::Shared, 1, ParamKind::Bias), p[&key(NetId::Shared, 1, ParamKind::Bias)].clone());
        let h = tape.matmul(input, w0)?;
        let h = tape.add_bias(h, b0)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w1)?;
        let o = tape.add_bias(o, b1)?;
        let sq = tape.mul(o, o)?;
        Ok(tape.mean(sq))
    }

    #[test]
    fn two_layer_relu_net_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mlp = Mlp::random(&[3, 5, 2], &[Activation::Relu, Activation::Identity], &mut rng)
            .unwrap();
        let mut params = mlp_params(&mlp, NetId::Shared);
        // Bias the hidden layer so no pre-activation sits near zero.
        params
            .get_mut(&key(NetId::Shared, 0, ParamKind::Bias))
            .unwrap()
            .fill(0.05);
        let x = array![[0.5, -0.2, 0.9], [0.1, 0.4, -0.7]];
        let report = grad_check(|t, p| two_layer_loss(t, p, &x), &params, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");
    }

    #[test]
    fn relu_kink_is_reported_not_fatal() {
        let k = key(NetId::Shared, 0, ParamKind::Weights);
        let mut params = ParamMap::new();
        params.insert(k, array![[0.0]]);
        let report = grad_check(
            |tape, p| {
                let w = tape.param(k, p[&k].clone());
                let r = tape.relu(w);
                Ok(tape.sum(r))
            },
            &params,
            1e-4,
        )
        .unwrap();
        // analytic 0 vs numeric 0.5
        assert!(report.max_relative_error > 1e-4);
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let k = key(NetId::Shared, 0, ParamKind::Weights);
        let mut params = ParamMap::new();
        params.insert(k, array![[1.0]]);
        let err = grad_check(
            |tape, p| {
                let w = tape.param(k, p[&k].clone());
                Ok(tape.scale(w, f64::INFINITY))
            },
            &params,
            1e-4,
        )
        .unwrap_err();
        assert!(matches!(err, IdianError::Numeric(_)));
    }

    #[test]
    fn epsilon_out_of_range() {
        let params = ParamMap::new();
        assert!(grad_check(|t, _| Ok(t.constant(array![[0.0]])), &params, 0.1).is_err());
    }

    #[test]
    fn oracle_suite_within_tolerance() {
        for (name, report) in oracle_suite(3, 1e-6).unwrap() {
            assert!(report.max_relative_error < 1e-4, "{name}: {report:?}");
            assert!(report.checked > 0, "{name}");
        }
    }
}
