//! Loss terms and the joint objective.
//!
//! The trainer minimizes `α·L_cross + β(t)·L_KL + γ·L_match`, where β ramps
//! linearly from 0 to `beta_max` over the first half of training.

use serde::{Deserialize, Serialize};

use crate::data::batch::{Batch, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{LatentGaussian, Model, Session, Side, Variant};
use crate::numeric::{grad_check, GradCheckOptions, GradCheckReport, Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub beta_max: f64,
    /// Annealing horizon `T`; β grows by `2/T` per epoch. Defaults to the
    /// training epoch budget when loaded from a run config.
    #[serde(default)]
    pub total_epochs: Option<usize>,
}

fn one() -> f64 {
    1.0
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gamma: 1.0,
            beta_max: 1.0,
            total_epochs: None,
        }
    }
}

impl ObjectiveConfig {
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.total_epochs = Some(epochs);
        self
    }

    pub fn anneal_rate(&self) -> f64 {
        match self.total_epochs {
            Some(t) if t > 0 => 2.0 / t as f64,
            _ => f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("gamma", self.gamma), ("beta_max", self.beta_max)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("objective.{name} must be a nonnegative number")));
            }
        }
        if self.beta_max > 1.0 {
            return Err(Error::Config("objective.beta_max must not exceed 1".into()));
        }
        Ok(())
    }
}

/// KL weight for (0-based) epoch `t`: `min(beta_max, 2t/T)`.
pub fn beta_schedule(epoch: usize, cfg: &ObjectiveConfig) -> f64 {
    let ramp = cfg.anneal_rate() * epoch as f64;
    if ramp.is_nan() {
        return 0.0;
    }
    cfg.beta_max.min(ramp)
}

/// Mean token NLL of each reconstruction, summed over both directions.
///
/// `logits_*` are time-major `[T·B, V]` decoder outputs for the respective
/// target batch.
pub fn cross_reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    logits_q: Var,
    target_q: &TokenBatch,
    logits_a: Var,
    target_a: &TokenBatch,
) -> Result<Var> {
    let lq = g.cross_entropy(logits_q, &target_q.time_major_ids(), &target_q.time_major_mask())?;
    let la = g.cross_entropy(logits_a, &target_a.time_major_ids(), &target_a.time_major_mask())?;
    g.add(lq, la)
}

/// Closed-form `KL(N(mu, diag σ²) ‖ N(0, I))` averaged over rows.
pub fn kl_to_standard_normal<T: Real>(g: &mut Graph<T>, mu: Var, log_var: Var) -> Result<Var> {
    if g.value(mu).iter().chain(g.value(log_var)).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("kl inputs".into()));
    }
    let rows = g.shape(mu)[0];
    let mu2 = g.square(mu);
    let var = g.exp(log_var);
    let a = g.add_scalar(log_var, T::one());
    let b = g.sub(a, mu2)?;
    let c = g.sub(b, var)?;
    let s = g.sum(c);
    Ok(g.scale(s, T::from_f64_lossy(-0.5 / rows as f64)))
}

/// KL term summed over the question and answer posteriors.
pub fn kl_loss<T: Real>(g: &mut Graph<T>, q: &LatentGaussian, a: &LatentGaussian) -> Result<Var> {
    let (Some(lq), Some(la)) = (q.log_var, a.log_var) else {
        return Err(Error::Config("kl_loss needs Gaussian posteriors with variance".into()));
    };
    let kq = kl_to_standard_normal(g, q.mu, lq)?;
    let ka = kl_to_standard_normal(g, a.mu, la)?;
    g.add(kq, ka)
}

/// Binary cross-entropy over a `[B, B']` probability matrix whose diagonal
/// holds the positive pairs, averaged over all cells.
pub fn matching_loss<T: Real>(g: &mut Graph<T>, p: Var) -> Result<Var> {
    let shape = g.shape(p).to_vec();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "matching_loss",
            left: shape,
            right: vec![],
        });
    }
    if let Some(&bad) = g.value(p).iter().find(|&&v| !(v > T::zero() && v < T::one())) {
        return Err(Error::ProbabilityOutOfRange(bad.as_f64()));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let y: Vec<T> = (0..rows * cols)
        .map(|k| if k / cols == k % cols { T::one() } else { T::zero() })
        .collect();
    let not_y: Vec<T> = y.iter().map(|&v| T::one() - v).collect();
    let y = g.constant(&shape, y);
    let not_y = g.constant(&shape, not_y);
    let log_p = g.log(p);
    let neg_p = g.neg(p);
    let one_minus = g.add_scalar(neg_p, T::one());
    let log_1mp = g.log(one_minus);
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_1mp)?;
    let both = g.add(pos, neg)?;
    let m = g.mean(both);
    Ok(g.neg(m))
}

/// Component values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cross: f64,
    pub l_kl: f64,
    pub l_match: f64,
    pub beta_effective: f64,
    pub total: f64,
}

/// Graph nodes of the individual loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub cross: Option<Var>,
    pub kl: Option<Var>,
    pub matching: Var,
}

/// `total = α·l_cross + β·l_kl + γ·l_match`; absent terms count as zero.
pub fn joint_objective<T: Real>(
    g: &mut Graph<T>,
    terms: LossTerms,
    beta: f64,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown)> {
    let mut total = g.scale(terms.matching, T::from_f64_lossy(cfg.gamma));
    if let Some(c) = terms.cross {
        let w = g.scale(c, T::from_f64_lossy(cfg.alpha));
        total = g.add(total, w)?;
    }
    if let Some(k) = terms.kl {
        let w = g.scale(k, T::from_f64_lossy(beta));
        total = g.add(total, w)?;
    }
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v).as_f64());
    let breakdown = LossBreakdown {
        l_cross: val(terms.cross),
        l_kl: val(terms.kl),
        l_match: g.scalar(terms.matching).as_f64(),
        beta_effective: if terms.kl.is_some() { beta } else { 0.0 },
        total: g.scalar(total).as_f64(),
    };
    Ok((total, breakdown))
}

/// Reparameterization noise for one batch, `[B, d_z]` per side.
#[derive(Clone, Debug)]
pub struct BatchNoise<T> {
    pub question: Vec<T>,
    pub answer: Vec<T>,
}

impl<T: Real> BatchNoise<T> {
    pub fn sample(rng: &mut impl rand::Rng, batch: usize, latent: usize) -> Self {
        let mut draw = || {
            (0..batch * latent)
                .map(|_| {
                    let v: f64 = rng.sample(rand_distr::StandardNormal);
                    T::from_f64_lossy(v)
                })
                .collect()
        };
        let question = draw();
        let answer = draw();
        Self { question, answer }
    }
}

/// Full forward pass for one batch and its joint objective.
///
/// With `noise` the latents are sampled (train mode); without, `z = mu`.
/// Dual encoders use only the matching term.
pub fn batch_objective<T: Real>(
    s: &mut Session<'_, T>,
    batch: &Batch,
    noise: Option<&BatchNoise<T>>,
    beta: f64,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown)> {
    let variant = s.model().config().variant;
    let eq = s.encode(&batch.questions, Side::Question)?;
    let ea = s.encode(&batch.answers, Side::Answer)?;
    let train = noise.is_some();
    let zq = s.reparameterize(&eq.gaussian, noise.map(|n| n.question.as_slice()), train)?;
    let za = s.reparameterize(&ea.gaussian, noise.map(|n| n.answer.as_slice()), train)?;

    let (cross, kl) = if variant == Variant::DualEncoders {
        (None, None)
    } else {
        let pick = |side: Side| if side == Side::Question { zq } else { za };
        let src_q = pick(s.source_for(Side::Question));
        let src_a = pick(s.source_for(Side::Answer));
        let logits_q = s.decode(src_q, &batch.questions, Side::Question)?;
        let logits_a = s.decode(src_a, &batch.answers, Side::Answer)?;
        let cross = cross_reconstruction_loss(&mut s.graph, logits_q, &batch.questions, logits_a, &batch.answers)?;
        let kl = kl_loss(&mut s.graph, &eq.gaussian, &ea.gaussian)?;
        (Some(cross), Some(kl))
    };
    let p = s.match_probability(zq, za)?;
    let matching = matching_loss(&mut s.graph, p)?;
    joint_objective(&mut s.graph, LossTerms { cross, kl, matching }, beta, cfg)
}

/// Finite-difference check of `batch_objective` with respect to every
/// parameter tensor of `model`.
pub fn check_gradients(
    model: &Model<f64>,
    batch: &Batch,
    noise: Option<&BatchNoise<f64>>,
    beta: f64,
    cfg: &ObjectiveConfig,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let params: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |g, vars| {
            let mut s = model.session_with(std::mem::take(g), vars)?;
            let result = batch_objective(&mut s, batch, noise, beta, cfg);
            *g = s.graph;
            Ok(result?.0)
        },
        &params,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use rand::{Rng as _, SeedableRng};
    use rand_distr::StandardNormal;

    use super::*;
    use crate::data::batch::QaPair;
    use crate::model::ModelConfig;

    fn cfg(t: usize) -> ObjectiveConfig {
        ObjectiveConfig::default().with_epochs(t)
    }

    #[test]
    fn beta_schedule_points() {
        let c = cfg(100);
        assert_eq!(beta_schedule(0, &c), 0.0);
        assert_eq!(beta_schedule(25, &c), 0.5);
        assert_eq!(beta_schedule(50, &c), 1.0);
        assert_eq!(beta_schedule(80, &c), 1.0);
        let capped = ObjectiveConfig {
            beta_max: 0.3,
            ..cfg(10)
        };
        assert_eq!(beta_schedule(9, &capped), 0.3);
        assert!((c.anneal_rate() * 100.0 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_v_per_direction() {
        let mut g = Graph::<f64>::new();
        let tq = TokenBatch::from_sequences(&[vec![5, 2], vec![6, 7, 2]]);
        let ta = TokenBatch::from_sequences(&[vec![4, 2], vec![2]]);
        let lq = g.constant(&[tq.batch * tq.len, 8], vec![0.0; tq.batch * tq.len * 8]);
        let la = g.constant(&[ta.batch * ta.len, 8], vec![0.0; ta.batch * ta.len * 8]);
        let l = cross_reconstruction_loss(&mut g, lq, &tq, la, &ta).unwrap();
        assert!((g.scalar(l) - 2.0 * 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut g = Graph::<f64>::new();
        let t = TokenBatch::from_sequences(&[vec![1, 2]]);
        let mut logits = vec![0.0; 2 * 4];
        logits[1] = 60.0;
        logits[4 + 2] = 60.0;
        let l = g.constant(&[2, 4], logits);
        let loss = cross_reconstruction_loss(&mut g, l, &t, l, &t).unwrap();
        assert!(g.scalar(loss) < 1e-20);
    }

    #[test]
    fn hand_softmax_nll() {
        // 2-token target [1, 3] over vocab 4.
        let rows = [[0.5, 1.5, -1.0, 0.0], [2.0, 0.0, 0.3, 1.0]];
        let targets = [1usize, 3];
        let mut oracle = 0.0;
        for (r, &t) in rows.iter().zip(&targets) {
            let z: f64 = r.iter().map(|v: &f64| v.exp()).sum();
            oracle += -(r[t].exp() / z).ln();
        }
        oracle /= 2.0;
        let mut g = Graph::<f64>::new();
        let tb = TokenBatch::from_sequences(&[targets.to_vec()]);
        let l = g.constant(&[2, 4], rows.concat());
        let loss = cross_reconstruction_loss(&mut g, l, &tb, l, &tb).unwrap();
        assert!((g.scalar(loss) - 2.0 * oracle).abs() < 1e-12);
    }

    fn kl_of(mu: &[f64], lv: &[f64]) -> f64 {
        let mut g = Graph::<f64>::new();
        let m = g.constant(&[1, mu.len()], mu.to_vec());
        let l = g.constant(&[1, lv.len()], lv.to_vec());
        let k = kl_to_standard_normal(&mut g, m, l).unwrap();
        g.scalar(k)
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_of(&[0.0], &[0.0]), 0.0);
        assert!((kl_of(&[1.0], &[0.0]) - 0.5).abs() < 1e-12);
        let expect = 0.5 * (4.0 - 1.0 - 4f64.ln());
        assert!((kl_of(&[0.0], &[4f64.ln()]) - expect).abs() < 1e-12);
        assert!((expect - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn kl_rejects_non_finite() {
        let mut g = Graph::<f64>::new();
        let m = g.constant(&[1, 1], vec![f64::NAN]);
        let l = g.constant(&[1, 1], vec![0.0]);
        assert!(matches!(kl_to_standard_normal(&mut g, m, l), Err(Error::NonFiniteValue(_))));
    }

    fn match_loss_of(p: &[f64], b: usize) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let pv = g.constant(&[b, p.len() / b], p.to_vec());
        let l = matching_loss(&mut g, pv)?;
        Ok(g.scalar(l))
    }

    #[test]
    fn matching_loss_cases() {
        let (hi, lo) = (1.0 - 1e-7, 1e-7);
        assert!(match_loss_of(&[hi, lo, lo, hi], 2).unwrap() < 1e-6);
        assert!((match_loss_of(&[0.5; 4], 2).unwrap() - 2f64.ln()).abs() < 1e-12);
        let oracle = -0.25 * (0.9f64.ln() + 0.8f64.ln() + 0.8f64.ln() + 0.6f64.ln());
        let got = match_loss_of(&[0.9, 0.2, 0.4, 0.8], 2).unwrap();
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 0.2656).abs() < 1e-4);
        assert!(matches!(match_loss_of(&[1.2, 0.5, 0.5, 0.5], 2), Err(Error::ProbabilityOutOfRange(_))));
    }

    #[test]
    fn matching_loss_falls_when_diagonal_rises() {
        let base = [0.6, 0.3, 0.2, 0.7];
        let h = 1e-4;
        for d in [0, 3] {
            let mut up = base;
            up[d] += h;
            assert!(match_loss_of(&up, 2).unwrap() < match_loss_of(&base, 2).unwrap());
        }
    }

    #[test]
    fn joint_weighting() {
        let run = |alpha: f64, beta: f64, gamma: f64, vals: (f64, f64, f64)| {
            let mut g = Graph::<f64>::new();
            let x = Tensor::new(vec![1], vec![1.0]).unwrap().with_requires_grad(true);
            let xv = g.input(&x);
            let c = g.scale(xv, vals.0);
            let k = g.scale(xv, vals.1);
            let m = g.scale(xv, vals.2);
            let c_cfg = ObjectiveConfig {
                alpha,
                gamma,
                ..Default::default()
            };
            let terms = LossTerms {
                cross: Some(c),
                kl: Some(k),
                matching: m,
            };
            let (t, b) = joint_objective(&mut g, terms, beta, &c_cfg).unwrap();
            g.backward(t).unwrap();
            (b, g.grad(xv).unwrap()[0])
        };
        assert_eq!(run(1.0, 0.0, 1.0, (2.0, 5.0, 1.0)).0.total, 3.0);
        let (b, grad) = run(0.0, 0.0, 0.0, (2.0, 5.0, 1.0));
        assert_eq!(b.total, 0.0);
        assert_eq!(grad, 0.0);
        assert!((run(1.0, 0.5, 1.0, (1.0, 0.4, 0.7)).0.total - 1.9).abs() < 1e-12);
    }

    #[test]
    fn kl_agrees_with_monte_carlo() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let d = r.random_range(1..=3);
            let mu: Vec<f64> = (0..d).map(|_| r.random_range(-1.5..1.5)).collect();
            let lv: Vec<f64> = (0..d).map(|_| r.random_range(-1.5..1.5)).collect();
            // E_q[log q(z) - log p(z)] with z ~ q, constants cancel.
            let n = 100_000;
            let mut acc = 0.0;
            for _ in 0..n {
                for k in 0..d {
                    let e: f64 = r.sample(StandardNormal);
                    let z = mu[k] + (lv[k] / 2.0).exp() * e;
                    acc += -0.5 * lv[k] - 0.5 * e * e + 0.5 * z * z;
                }
            }
            let mc = acc / n as f64;
            assert!((kl_of(&mu, &lv) - mc).abs() < 1e-2, "mu {mu:?} lv {lv:?}");
        }
        assert!(kl_of(&[0.0, 0.0], &[0.0, 0.0]).abs() < 1e-9);
    }

    fn tiny_model(variant: Variant) -> Model<f64> {
        let cfg = ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            hidden_dim: 8,
            latent_dim: 4,
            attention_hops: 2,
            attention_dim: 8,
            variant,
            max_len: 8,
        };
        Model::new(cfg, 21).unwrap()
    }

    fn tiny_batch() -> Batch {
        let pairs = vec![
            QaPair {
                pair_id: "a".into(),
                question: vec![5, 6, 7, 8, 2],
                answer: vec![9, 10, 11, 2],
                answer_id: "x".into(),
            },
            QaPair {
                pair_id: "b".into(),
                question: vec![12, 13, 2],
                answer: vec![14, 15, 16, 17, 2],
                answer_id: "y".into(),
            },
        ];
        Batch::from_pairs(&pairs, &[0, 1])
    }

    fn tiny_noise() -> BatchNoise<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        BatchNoise::sample(&mut r, 2, 4)
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        let model = tiny_model(Variant::CrossVae);
        let opts = GradCheckOptions {
            tol: 1e-3,
            ..Default::default()
        };
        let report =
            check_gradients(&model, &tiny_batch(), Some(&tiny_noise()), 0.5, &ObjectiveConfig::default(), opts).unwrap();
        assert_eq!(report.params.len(), model.params().len());
        assert!(report.max_rel_error() < 1e-3, "max rel error {}", report.max_rel_error());
    }

    fn grads(model: &Model<f64>, beta: f64, cfg: &ObjectiveConfig) -> (LossBreakdown, Vec<(String, Vec<f64>)>) {
        let mut s = model.session();
        let (loss, parts) = batch_objective(&mut s, &tiny_batch(), Some(&tiny_noise()), beta, cfg).unwrap();
        s.graph.backward(loss).unwrap();
        let g = s
            .into_param_grads()
            .into_iter()
            .map(|(id, g)| (model.params().name(id).to_string(), g))
            .collect();
        (parts, g)
    }

    #[test]
    fn loss_terms_separate() {
        let model = tiny_model(Variant::CrossVae);
        let only_match = ObjectiveConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let (_, g) = grads(&model, 0.0, &only_match);
        for (name, v) in &g {
            if name.starts_with("dec_") {
                assert!(v.iter().all(|&x| x == 0.0), "{name}");
            }
        }
        let only_cross = ObjectiveConfig {
            gamma: 0.0,
            ..Default::default()
        };
        let (parts, _) = grads(&model, 0.0, &only_cross);
        assert_eq!(parts.total, parts.l_cross);
        let zero = ObjectiveConfig {
            alpha: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let (parts, g) = grads(&model, 0.0, &zero);
        assert_eq!(parts.total, 0.0);
        assert!(g.iter().all(|(_, v)| v.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn breakdown_is_consistent_and_nonnegative() {
        for variant in [Variant::DualEncoders, Variant::DualVae, Variant::CrossVae] {
            let model = tiny_model(variant);
            let cfg = ObjectiveConfig {
                alpha: 0.7,
                gamma: 1.3,
                ..Default::default()
            };
            let (p, _) = grads(&model, 0.4, &cfg);
            assert!(p.l_cross >= 0.0 && p.l_kl >= 0.0 && p.l_match >= 0.0);
            let expect = cfg.alpha * p.l_cross + p.beta_effective * p.l_kl + cfg.gamma * p.l_match;
            assert!((p.total - expect).abs() < 1e-12);
            if variant == Variant::DualEncoders {
                assert_eq!((p.l_cross, p.l_kl, p.beta_effective), (0.0, 0.0, 0.0));
            }
        }
    }

    #[test]
    fn cross_and_dual_differ_only_in_wiring() {
        let cross = tiny_model(Variant::CrossVae);
        let dual = tiny_model(Variant::DualVae);
        let (pc, _) = grads(&cross, 0.5, &ObjectiveConfig::default());
        let (pd, _) = grads(&dual, 0.5, &ObjectiveConfig::default());
        assert_eq!(pc.l_kl, pd.l_kl);
        assert_eq!(pc.l_match, pd.l_match);
        assert_ne!(pc.l_cross, pd.l_cross);
    }

    proptest::proptest! {
        #[test]
        fn beta_is_monotone(t_total in 1usize..200, beta_max in 0.0f64..=1.0) {
            let c = ObjectiveConfig { beta_max, ..cfg(t_total) };
            let mut prev = 0.0;
            for t in 0..=2 * t_total {
                let b = beta_schedule(t, &c);
                proptest::prop_assert!(b >= prev && b <= beta_max);
                prev = b;
            }
        }

        #[test]
        fn kl_is_nonnegative(mu in proptest::collection::vec(-3.0f64..3.0, 1..5), lv in proptest::collection::vec(-3.0f64..3.0, 5)) {
            let lv = &lv[..mu.len()];
            proptest::prop_assert!(kl_of(&mu, lv) >= 0.0);
        }
    }
}
