//! Mixture of invariant experts.
//!
//! A router network produces a simplex weight vector over `K` feedforward
//! experts; the router-weighted expert mixture is the in-domain sentiment
//! representation. A binary domain discriminator sits behind a
//! gradient-reversal node, so minimizing its cross-entropy trains the
//! discriminator to tell the two code distributions apart while pushing the
//! experts (and everything upstream) to make them indistinguishable.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamStore};
use crate::scalar::Scalar;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` inside the
/// cross-entropy logs so a saturated discriminator cannot produce an
/// infinite loss.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MoieConfig {
    /// Number of experts.
    pub k: usize,
    pub d_hidden: usize,
    /// Length of the mixture's output representation.
    pub d_repr: usize,
    /// Gradient-reversal strength.
    pub lambda: f64,
}

impl MoieConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d_hidden == 0 || self.d_repr == 0 {
            return Err(Error::Config(format!("moie dimensions must be positive, got {self:?}")));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("grl lambda {} must be nonnegative", self.lambda)));
        }
        Ok(())
    }
}

/// Binary pseudo-domain label for the adversarial game.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainLabel {
    /// Representation derived from the in-domain codes (label 0).
    InDomain,
    /// Representation derived from the out-of-domain codes (label 1).
    SimulatedOut,
}

impl DomainLabel {
    pub fn target<F: Scalar>(self) -> F {
        match self {
            DomainLabel::InDomain => F::zero(),
            DomainLabel::SimulatedOut => F::one(),
        }
    }
}

/// Router, experts, domain discriminator and the in-domain regression head.
#[derive(Clone, Debug)]
pub struct Moie {
    pub cfg: MoieConfig,
    pub d_in: usize,
    router_fc1: Linear,
    router_fc2: Linear,
    experts: Vec<Mlp>,
    discriminator: Mlp,
    head: Mlp,
}

impl Moie {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        cfg: MoieConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let experts = (0..cfg.k)
            .map(|k| Mlp::new(store, rng, &format!("{name}.expert{k}"), d_in, cfg.d_hidden, cfg.d_repr))
            .collect();
        Ok(Moie {
            cfg,
            d_in,
            router_fc1: Linear::new(store, rng, &format!("{name}.router.fc1"), d_in, cfg.d_hidden),
            router_fc2: Linear::new(store, rng, &format!("{name}.router.fc2"), cfg.d_hidden, cfg.k),
            experts,
            discriminator: Mlp::new(store, rng, &format!("{name}.disc"), cfg.d_repr, cfg.d_hidden, 1),
            head: Mlp::new(store, rng, &format!("{name}.head"), cfg.d_repr, cfg.d_hidden, 1),
        })
    }

    /// Router weights `[n, K]`: two linear layers with a ReLU between, then
    /// a softmax onto the simplex.
    pub fn route<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.router_fc1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let logits = self.router_fc2.forward(tape, store, h)?;
        tape.softmax(logits, 1)
    }

    /// Output of expert `k` on the fused input.
    pub fn expert_forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        k: usize,
    ) -> Result<Var> {
        let expert = self.experts.get(k).ok_or_else(|| Error::Contract {
            op: "expert_forward",
            msg: format!("expert index {k} out of range (K = {})", self.cfg.k),
        })?;
        expert.forward(tape, store, x)
    }

    /// Dense mixture `sum_k g_k(x) * E_k(x)`, shape `[n, d_repr]`. All
    /// experts are evaluated; there is no top-k truncation.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let weights = self.route(tape, store, x)?;
        let mut acc: Option<Var> = None;
        for k in 0..self.cfg.k {
            let e = self.expert_forward(tape, store, x, k)?;
            let w_k = tape.narrow(weights, 1, k, 1)?;
            let weighted = tape.mul(w_k, e)?;
            acc = Some(match acc {
                None => weighted,
                Some(a) => tape.add(a, weighted)?,
            });
        }
        Ok(acc.expect("K >= 1"))
    }

    /// Probability that a representation came from the simulated
    /// out-of-domain distribution, shape `[n, 1]`, strictly inside (0, 1).
    pub fn discriminate<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        h: Var,
    ) -> Result<Var> {
        let logits = self.discriminator.forward(tape, store, h)?;
        Ok(tape.sigmoid(logits))
    }

    /// In-domain sentiment prediction from the mixture representation,
    /// shape `[n, 1]`.
    pub fn predict_in<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        h: Var,
    ) -> Result<Var> {
        self.head.forward(tape, store, h)
    }

    /// Adversarial loss from an already-computed mixture representation.
    /// `grl_lambda = Some(l)` inserts the gradient reversal with strength
    /// `l`; `None` leaves the path un-reversed (used by finite-difference
    /// checks, whose premise the reversal deliberately violates).
    pub fn adversarial_loss_from_repr<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        h: Var,
        labels: &[DomainLabel],
        grl_lambda: Option<F>,
    ) -> Result<Var> {
        if labels.is_empty() {
            return Err(Error::Contract {
                op: "loss_in",
                msg: "empty batch".into(),
            });
        }
        if tape.shape(h)[0] != labels.len() {
            return Err(Error::Contract {
                op: "loss_in",
                msg: format!("{} representations vs {} labels", tape.shape(h)[0], labels.len()),
            });
        }
        let hr = match grl_lambda {
            Some(l) => tape.grad_reverse(h, l),
            None => h,
        };
        let probs = self.discriminate(tape, store, hr)?;
        let targets: Vec<F> = labels.iter().map(|l| l.target()).collect();
        let t = tape.leaf(&[labels.len(), 1], &targets)?;
        binary_cross_entropy(tape, probs, t)
    }

    /// Domain-adversarial binary cross-entropy over a batch of fused inputs:
    /// mixture -> gradient reversal -> discriminator -> clamped BCE.
    pub fn loss_in<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        labels: &[DomainLabel],
    ) -> Result<Var> {
        let h = self.forward(tape, store, x)?;
        self.adversarial_loss_from_repr(tape, store, h, labels, Some(F::of(self.cfg.lambda)))
    }
}

/// Mean binary cross-entropy `-(1/N) sum [t log p + (1-t) log(1-p)]` with
/// probabilities clamped away from 0 and 1.
pub fn binary_cross_entropy<F: Scalar>(tape: &mut Tape<F>, probs: Var, targets: Var) -> Result<Var> {
    if tape.shape(probs) != tape.shape(targets) {
        return Err(Error::Shape {
            op: "binary_cross_entropy",
            lhs: tape.shape(probs).to_vec(),
            rhs: tape.shape(targets).to_vec(),
        });
    }
    let lo = F::of(PROB_FLOOR);
    let hi = F::one() - lo;
    let p = tape.clamp(probs, lo, hi);
    let log_p = tape.log(p)?;
    let neg_p = tape.neg(p);
    let one_minus_p = tape.add_scalar(neg_p, F::one());
    let log_1p = tape.log(one_minus_p)?;
    let neg_t = tape.neg(targets);
    let one_minus_t = tape.add_scalar(neg_t, F::one());
    let pos = tape.mul(targets, log_p)?;
    let negp = tape.mul(one_minus_t, log_1p)?;
    let s = tape.add(pos, negp)?;
    let m = tape.mean_all(s);
    Ok(tape.neg(m))
}

/// GRL warm-up schedule `2 / (1 + exp(-10 p)) - 1` for training progress
/// `p in [0, 1]`; multiplies the configured lambda when enabled.
pub fn grl_warmup(progress: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, InputSpec};
    use rand::{Rng, SeedableRng};

    fn cfg(k: usize) -> MoieConfig {
        MoieConfig {
            k,
            d_hidden: 5,
            d_repr: 4,
            lambda: 1.0,
        }
    }

    fn build<F: Scalar>(seed: u64, k: usize) -> (ParamStore<F>, Moie) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let moie = Moie::new(&mut store, &mut rng, "moie", 6, cfg(k)).unwrap();
        (store, moie)
    }

    #[test]
    fn single_expert_router_is_degenerate() {
        let (store, moie) = build::<f64>(1, 1);
        let mut tape = Tape::new(0);
        let x = tape.row(&[0.1, -0.4, 0.3, 0.9, -1.0, 0.2]);
        let w = moie.route(&mut tape, &store, x).unwrap();
        assert_eq!(tape.values(w), &[1.0]);
        // and the mixture equals the single expert exactly
        let mix = moie.forward(&mut tape, &store, x).unwrap();
        let e0 = moie.expert_forward(&mut tape, &store, x, 0).unwrap();
        assert_eq!(tape.values(mix), tape.values(e0));
    }

    #[test]
    fn zero_initialized_router_is_uniform() {
        let (mut store, moie) = build::<f64>(2, 4);
        store.set_values(moie.router_fc1.w, &vec![0.0; 6 * 5]);
        store.set_values(moie.router_fc2.w, &vec![0.0; 5 * 4]);
        let mut tape = Tape::new(0);
        let x = tape.row(&[1.0, 2.0, -3.0, 0.5, 0.0, -0.7]);
        let w = moie.route(&mut tape, &store, x).unwrap();
        assert_eq!(tape.values(w), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn router_weights_stay_on_the_simplex() {
        let (store, moie) = build::<f64>(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x_vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut tape = Tape::new(0);
            let x = tape.row(&x_vals);
            let w = moie.route(&mut tape, &store, x).unwrap();
            let vals = tape.values(w);
            assert!(vals.iter().all(|&v| v >= 0.0));
            let sum: f64 = vals.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn experts_have_independent_parameters() {
        let (store, moie) = build::<f64>(5, 3);
        let mut tape = Tape::new(0);
        let x = tape.row(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let e0 = moie.expert_forward(&mut tape, &store, x, 0).unwrap();
        let e1 = moie.expert_forward(&mut tape, &store, x, 1).unwrap();
        assert_eq!(tape.shape(e0), &[1, 4]);
        assert_ne!(tape.values(e0), tape.values(e1));
    }

    #[test]
    fn expert_index_out_of_range_is_contract_error() {
        let (store, moie) = build::<f64>(5, 2);
        let mut tape = Tape::new(0);
        let x = tape.row(&[0.0; 6]);
        assert!(matches!(
            moie.expert_forward(&mut tape, &store, x, 2),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn identical_experts_collapse_the_mixture() {
        let (mut store, moie) = build::<f64>(6, 3);
        // copy expert 0's parameters into experts 1 and 2
        for k in 1..3 {
            for (src, dst) in [
                (moie.experts[0].fc1, moie.experts[k].fc1),
                (moie.experts[0].fc2, moie.experts[k].fc2),
            ] {
                let w = store.values(src.w).to_vec();
                let b = store.values(src.b).to_vec();
                store.set_values(dst.w, &w);
                store.set_values(dst.b, &b);
            }
        }
        let mut tape = Tape::new(0);
        let x = tape.row(&[0.4, -0.2, 0.9, 0.1, -0.6, 0.3]);
        let mix = moie.forward(&mut tape, &store, x).unwrap();
        let e0 = moie.expert_forward(&mut tape, &store, x, 0).unwrap();
        for (m, e) in tape.values(mix).iter().zip(tape.values(e0)) {
            assert!((m - e).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_is_coordinatewise_convex() {
        let (store, moie) = build::<f64>(7, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let x_vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut tape = Tape::new(0);
            let x = tape.row(&x_vals);
            let mix = tape_values_owned(&mut tape, &store, &moie, x);
            let experts: Vec<Vec<f64>> = (0..4)
                .map(|k| {
                    let e = moie.expert_forward(&mut tape, &store, x, k).unwrap();
                    tape.values(e).to_vec()
                })
                .collect();
            for j in 0..4 {
                let lo = experts.iter().map(|e| e[j]).fold(f64::INFINITY, f64::min);
                let hi = experts.iter().map(|e| e[j]).fold(f64::NEG_INFINITY, f64::max);
                assert!(
                    mix[j] >= lo - 1e-9 && mix[j] <= hi + 1e-9,
                    "coordinate {j} outside hull"
                );
            }
        }
    }

    fn tape_values_owned(
        tape: &mut Tape<f64>,
        store: &ParamStore<f64>,
        moie: &Moie,
        x: Var,
    ) -> Vec<f64> {
        let mix = moie.forward(tape, store, x).unwrap();
        tape.values(mix).to_vec()
    }

    #[test]
    fn zero_initialized_discriminator_says_half() {
        let (mut store, moie) = build::<f64>(9, 2);
        store.zero_all();
        let mut tape = Tape::new(0);
        let h = tape.row(&[1.0, -2.0, 3.0, -4.0]);
        let p = moie.discriminate(&mut tape, &store, h).unwrap();
        assert_eq!(tape.values(p), &[0.5]);
    }

    #[test]
    fn discriminator_output_strictly_inside_unit_interval() {
        let (store, moie) = build::<f64>(10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let h_vals: Vec<f64> = (0..4).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let mut tape = Tape::new(0);
            let h = tape.row(&h_vals);
            let p = moie.discriminate(&mut tape, &store, h).unwrap();
            let v = tape.values(p)[0];
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn bce_of_half_is_ln_two() {
        let (mut store, moie) = build::<f64>(12, 2);
        store.zero_all();
        let mut tape = Tape::new(0);
        let x = tape.row(&[0.0; 6]);
        let l = moie.loss_in(&mut tape, &store, x, &[DomainLabel::SimulatedOut]).unwrap();
        assert!((tape.values(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // two samples, labels (0, 1), both probabilities 0.5
        let mut tape = Tape::new(0);
        let x2 = tape.leaf(&[2, 6], &[0.0; 12]).unwrap();
        let l2 = moie
            .loss_in(
                &mut tape,
                &store,
                x2,
                &[DomainLabel::InDomain, DomainLabel::SimulatedOut],
            )
            .unwrap();
        assert!((tape.values(l2)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_discriminator_drives_loss_to_zero() {
        let (mut store, moie) = build::<f64>(13, 2);
        store.zero_all();
        // saturate the discriminator towards p ~ 1
        store.set_values(moie.discriminator.fc2.b, &[40.0]);
        let mut tape = Tape::new(0);
        let x = tape.row(&[0.0; 6]);
        let l = moie.loss_in(&mut tape, &store, x, &[DomainLabel::SimulatedOut]).unwrap();
        assert!(tape.values(l)[0] < 1e-5);
    }

    #[test]
    fn empty_batch_is_a_contract_error() {
        let (store, moie) = build::<f64>(14, 2);
        let mut tape = Tape::new(0);
        let h = tape.row(&[0.0; 4]);
        assert!(matches!(
            moie.adversarial_loss_from_repr(&mut tape, &store, h, &[], Some(1.0)),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn hand_computed_bce_matches_on_four_samples() {
        let (store, moie) = build::<f64>(15, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x_vals: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [
            DomainLabel::InDomain,
            DomainLabel::SimulatedOut,
            DomainLabel::InDomain,
            DomainLabel::SimulatedOut,
        ];
        let mut tape = Tape::new(0);
        let x = tape.leaf(&[4, 6], &x_vals).unwrap();
        let h = moie.forward(&mut tape, &store, x).unwrap();
        let hr = tape.grad_reverse(h, 1.0);
        let probs = moie.discriminate(&mut tape, &store, hr).unwrap();
        let p = tape.values(probs).to_vec();
        let loss = moie
            .adversarial_loss_from_repr(&mut tape, &store, h, &labels, Some(1.0))
            .unwrap();
        let got = tape.values(loss)[0];
        let mut want = 0.0;
        for (pi, l) in p.iter().zip(&labels) {
            let d = match l {
                DomainLabel::InDomain => 0.0,
                DomainLabel::SimulatedOut => 1.0,
            };
            want -= d * pi.ln() + (1.0 - d) * (1.0 - pi).ln();
        }
        want /= 4.0;
        assert!((got - want).abs() < 1e-10, "got {got}, want {want}");
    }

    #[test]
    fn zero_initialized_head_returns_bias() {
        let (mut store, moie) = build::<f64>(17, 2);
        store.zero_all();
        store.set_values(moie.head.fc2.b, &[0.42]);
        let mut tape = Tape::new(0);
        let h = tape.row(&[5.0, -3.0, 2.0, 1.0]);
        let y = moie.predict_in(&mut tape, &store, h).unwrap();
        assert_eq!(tape.shape(y), &[1, 1]);
        assert_eq!(tape.values(y), &[0.42]);
    }

    #[test]
    fn grl_sign_property_on_a_tiny_model() {
        // With the discriminator fixed, expert/router gradients of the
        // adversarial loss equal -lambda times the gradients computed with
        // the reversal replaced by the identity.
        let lambda = 1.5;
        let (store, moie) = build::<f64>(18, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x_vals: Vec<f64> = (0..2 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let labels = [DomainLabel::InDomain, DomainLabel::SimulatedOut];

        let grads = |grl: Option<f64>| {
            let mut tape = Tape::new(0);
            let x = tape.leaf(&[2, 6], &x_vals).unwrap();
            let h = moie.forward(&mut tape, &store, x).unwrap();
            let loss = moie
                .adversarial_loss_from_repr(&mut tape, &store, h, &labels, grl)
                .unwrap();
            tape.backward(loss).unwrap();
            let mut expert_router = Vec::new();
            let mut disc = Vec::new();
            for id in store.ids() {
                let name = store.name(id);
                let g = tape.param_grad(id).map(|g| g.to_vec()).unwrap_or_default();
                if name.starts_with("moie.expert") || name.starts_with("moie.router") {
                    expert_router.extend(g);
                } else if name.starts_with("moie.disc") {
                    disc.extend(g);
                }
            }
            (expert_router, disc)
        };

        let (upstream_rev, disc_rev) = grads(Some(lambda));
        let (upstream_id, disc_id) = grads(None);
        for (r, i) in upstream_rev.iter().zip(&upstream_id) {
            assert!(
                (r + lambda * i).abs() < 1e-12,
                "reversed {r} vs identity {i}"
            );
        }
        // the discriminator sits downstream of the reversal: untouched
        for (r, i) in disc_rev.iter().zip(&disc_id) {
            assert!((r - i).abs() < 1e-12);
        }
    }

    #[test]
    fn expert_and_discriminator_and_head_pass_gradcheck() {
        let (store, moie) = build::<f64>(20, 2);
        let through_expert = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let e = moie.expert_forward(t, &store, v[0], 1)?;
            let s = t.square(e);
            Ok(t.mean_all(s))
        };
        let through_disc = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let p = moie.discriminate(t, &store, v[0])?;
            Ok(t.mean_all(p))
        };
        let through_head = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let y = moie.predict_in(t, &store, v[0])?;
            let s = t.square(y);
            Ok(t.mean_all(s))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x6: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h4: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert!(gradcheck(&through_expert, &[InputSpec::new(&[1, 6], x6.clone())], 1e-4).unwrap() < 1e-4);
        assert!(gradcheck(&through_disc, &[InputSpec::new(&[1, 4], h4.clone())], 1e-4).unwrap() < 1e-4);
        assert!(gradcheck(&through_head, &[InputSpec::new(&[1, 4], h4)], 1e-4).unwrap() < 1e-4);
    }

    #[test]
    fn warmup_schedule_ramps_from_zero_to_one() {
        assert!(grl_warmup(0.0).abs() < 1e-12);
        assert!(grl_warmup(1.0) > 0.99);
        assert!(grl_warmup(0.3) > grl_warmup(0.1));
    }
}
