//! End-to-end training, prediction, evaluation and the ablation harness.
//!
//! Per sample, each modality is disentangled into in-domain and
//! out-of-domain codes. The concatenated in-domain codes feed the expert
//! mixture (adversarially trained against the domain discriminator, with
//! the out-of-domain codes standing in as the simulated second domain) and
//! the in-domain regression head. The out-of-domain codes feed the three
//! cross-modal adapters, the fusion layer and the out-of-domain head. At
//! test time a sample passes only through the out-of-domain path, taken at
//! the posterior means with dropout off.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{loss_out, AdapterConfig, CrossModalAdapter, FusionHead};
use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, Sample};
use crate::disentangle::{Branch, DisentangleConfig, Disentangler};
use crate::error::{Error, Result};
use crate::gradcheck::gradcheck_flat;
use crate::metrics::{self, MetricsReport};
use crate::moie::{grl_warmup, DomainLabel, Moie, MoieConfig};
use crate::nn::{Mlp, ParamId, ParamStore};
use crate::optim::Adam;
use crate::scalar::Scalar;

/// Loss weights, fusion weights and optimization settings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight on the adversarial domain loss.
    pub alpha: f64,
    /// Weight on the out-of-domain regression loss.
    pub beta: f64,
    /// Weight on the decoupling loss.
    pub gamma: f64,
    /// Weight on the combined-prediction regression loss.
    pub delta: f64,
    /// Fusion weight on the in-domain prediction; `w1 + w2 = 1`.
    pub w1: f64,
    /// Fusion weight on the out-of-domain prediction.
    pub w2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub label_lo: f64,
    pub label_hi: f64,
    /// Ramp the reversal strength in over training instead of holding it
    /// constant.
    pub grl_warmup: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.1,
            beta: 1.0,
            gamma: 0.01,
            delta: 1.0,
            w1: 0.5,
            w2: 0.5,
            lr: 1e-3,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            label_lo: -3.0,
            label_hi: 3.0,
            grl_warmup: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} = {v} must be nonnegative")));
            }
        }
        if (self.w1 + self.w2 - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "fusion weights must sum to 1, got {} + {}",
                self.w1, self.w2
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if self.label_lo >= self.label_hi {
            return Err(Error::Config(format!(
                "label range [{}, {}] is empty",
                self.label_lo, self.label_hi
            )));
        }
        Ok(())
    }
}

/// Which structural pieces to remove for an ablation run.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct AblationSwitches {
    /// Replace the expert mixture by a single feedforward fusion network,
    /// dropping the router, experts and discriminator (and with them the
    /// adversarial loss).
    pub no_moie: bool,
    /// Feed the out-of-domain codes straight into fusion, dropping the
    /// attention/gate adapters.
    pub no_adapter: bool,
}

/// Architecture dimensions and switches.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub d_code: usize,
    pub d_hidden: usize,
    pub k_experts: usize,
    pub d_repr: usize,
    pub heads: usize,
    pub d_fuse: usize,
    pub grl_lambda: f64,
    pub attn_dropout: f64,
    pub literal_kv: bool,
    pub ablation: AblationSwitches,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_t: 8,
            d_a: 6,
            d_v: 6,
            d_code: 8,
            d_hidden: 16,
            k_experts: 4,
            d_repr: 16,
            heads: 4,
            d_fuse: 16,
            grl_lambda: 1.0,
            attn_dropout: 0.1,
            literal_kv: false,
            ablation: AblationSwitches::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_t", self.d_t),
            ("d_a", self.d_a),
            ("d_v", self.d_v),
            ("d_code", self.d_code),
            ("d_hidden", self.d_hidden),
            ("k_experts", self.k_experts),
            ("d_repr", self.d_repr),
            ("heads", self.heads),
            ("d_fuse", self.d_fuse),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_code % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads {} must divide d_code {}",
                self.heads, self.d_code
            )));
        }
        if self.grl_lambda < 0.0 {
            return Err(Error::Config(format!(
                "grl_lambda {} must be nonnegative",
                self.grl_lambda
            )));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::Config(format!(
                "attn_dropout {} outside [0, 1)",
                self.attn_dropout
            )));
        }
        Ok(())
    }

    fn dis_cfg(&self, d_input: usize) -> DisentangleConfig {
        DisentangleConfig {
            d_input,
            d_code: self.d_code,
            d_hidden: self.d_hidden,
        }
    }

    fn moie_cfg(&self) -> MoieConfig {
        MoieConfig {
            k: self.k_experts,
            d_hidden: self.d_hidden,
            d_repr: self.d_repr,
            lambda: self.grl_lambda,
        }
    }

    fn adapter_cfg(&self) -> AdapterConfig {
        AdapterConfig {
            heads: self.heads,
            dropout: self.attn_dropout,
            literal_kv: self.literal_kv,
        }
    }
}

enum InBranch {
    Moie(Moie),
    Plain { fusion: Mlp, head: Mlp },
}

/// How the adversarial path treats gradients for one pass.
#[derive(Clone, Copy, Debug)]
pub enum AdvMode {
    /// Normal training: reversal active, strength = `grl_lambda * scale`.
    Reversed(f64),
    /// Reversal disabled. Finite-difference checks need this: a reversal
    /// node's backward is by definition not the derivative of its forward,
    /// so the composed graph is checked with the reversal off and the
    /// reversal itself is covered by its sign-property checks.
    PassThrough,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    /// Weighted fusion of both branch predictions (training-time view).
    TrainFusion,
    /// Out-of-domain pipeline only; the in-domain branch is not evaluated.
    Test,
}

/// Per-sample prediction. `y1` is absent in test mode, where the in-domain
/// branch is never run.
#[derive(Clone, Copy, Debug)]
pub struct Prediction<F> {
    pub y1: Option<F>,
    pub y2: F,
    pub combined: F,
}

/// Scalar view of one step's loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossComponents {
    pub l_dis: f64,
    pub l_in: f64,
    pub l_out: f64,
    pub l_reg: f64,
}

/// Total objective `alpha*L_in + beta*L_out + gamma*L_dis + delta*L_reg`;
/// with `gamma = delta = 0` only the two-term task loss remains.
pub fn total_loss(c: &LossComponents, tc: &TrainConfig) -> f64 {
    tc.alpha * c.l_in + tc.beta * c.l_out + tc.gamma * c.l_dis + tc.delta * c.l_reg
}

/// One epoch of the training log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_dis: f64,
    pub l_in: f64,
    pub l_out: f64,
    pub l_reg: f64,
    pub total: f64,
}

/// Graph handles produced by one training forward pass.
pub struct StepVars {
    pub total: Var,
    pub l_dis: Var,
    pub l_in: Var,
    pub l_out: Var,
    pub l_reg: Var,
    pub y1: Var,
    pub y2: Var,
}

struct BatchMatrices<F> {
    n: usize,
    t: Vec<F>,
    a: Vec<F>,
    v: Vec<F>,
    y: Vec<F>,
}

impl<F: Scalar> BatchMatrices<F> {
    fn build(samples: &[&Sample<F>], cfg: &ModelConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract {
                op: "forward_train",
                msg: "empty batch".into(),
            });
        }
        let n = samples.len();
        let mut t = Vec::with_capacity(n * cfg.d_t);
        let mut a = Vec::with_capacity(n * cfg.d_a);
        let mut v = Vec::with_capacity(n * cfg.d_v);
        let mut y = Vec::with_capacity(n);
        for s in samples {
            if s.t.len() != cfg.d_t || s.a.len() != cfg.d_a || s.v.len() != cfg.d_v {
                return Err(Error::Data(format!(
                    "sample '{}': feature dims ({}, {}, {}) do not match model ({}, {}, {})",
                    s.id,
                    s.t.len(),
                    s.a.len(),
                    s.v.len(),
                    cfg.d_t,
                    cfg.d_a,
                    cfg.d_v
                )));
            }
            t.extend_from_slice(&s.t);
            a.extend_from_slice(&s.a);
            v.extend_from_slice(&s.v);
            y.push(s.label);
        }
        Ok(BatchMatrices { n, t, a, v, y })
    }
}

/// The full architecture with its parameter store.
pub struct MidgModel<F: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<F>,
    dis: [Disentangler; 3],
    in_branch: InBranch,
    adapters: Option<[CrossModalAdapter; 3]>,
    fusion: FusionHead,
}

impl<F: Scalar> MidgModel<F> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let dis = [
            Disentangler::new(&mut store, &mut rng, "dis.t", cfg.dis_cfg(cfg.d_t))?,
            Disentangler::new(&mut store, &mut rng, "dis.a", cfg.dis_cfg(cfg.d_a))?,
            Disentangler::new(&mut store, &mut rng, "dis.v", cfg.dis_cfg(cfg.d_v))?,
        ];
        let d_fused = 3 * cfg.d_code;
        let in_branch = if cfg.ablation.no_moie {
            InBranch::Plain {
                fusion: Mlp::new(&mut store, &mut rng, "plain.fusion", d_fused, cfg.d_hidden, cfg.d_repr),
                head: Mlp::new(&mut store, &mut rng, "plain.head", cfg.d_repr, cfg.d_hidden, 1),
            }
        } else {
            InBranch::Moie(Moie::new(&mut store, &mut rng, "moie", d_fused, cfg.moie_cfg())?)
        };
        let adapters = if cfg.ablation.no_adapter {
            None
        } else {
            Some([
                CrossModalAdapter::new(&mut store, &mut rng, "adapter.t", cfg.d_code, cfg.d_hidden, cfg.adapter_cfg())?,
                CrossModalAdapter::new(&mut store, &mut rng, "adapter.a", cfg.d_code, cfg.d_hidden, cfg.adapter_cfg())?,
                CrossModalAdapter::new(&mut store, &mut rng, "adapter.v", cfg.d_code, cfg.d_hidden, cfg.adapter_cfg())?,
            ])
        };
        let fusion = FusionHead::new(&mut store, &mut rng, "out", cfg.d_code, cfg.d_hidden, cfg.d_fuse);
        Ok(MidgModel {
            cfg: cfg.clone(),
            store,
            dis,
            in_branch,
            adapters,
            fusion,
        })
    }

    /// Parameters of the in-domain branch: the in-encoders, the expert
    /// mixture (or its plain replacement) and the in-domain head. Test-mode
    /// predictions must not depend on any of these.
    pub fn in_branch_param_ids(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|id| {
                let n = self.store.name(*id);
                n.contains(".enc_in.") || n.starts_with("moie.") || n.starts_with("plain.")
            })
            .collect()
    }

    /// One training forward pass over a prepared batch.
    fn forward_batch(
        &self,
        tape: &mut Tape<F>,
        batch: &BatchMatrices<F>,
        tc: &TrainConfig,
        adv: AdvMode,
    ) -> Result<StepVars> {
        let n = batch.n;
        let store = &self.store;
        let xt = tape.leaf(&[n, self.cfg.d_t], &batch.t)?;
        let xa = tape.leaf(&[n, self.cfg.d_a], &batch.a)?;
        let xv = tape.leaf(&[n, self.cfg.d_v], &batch.v)?;
        let y = tape.leaf(&[n, 1], &batch.y)?;

        let pairs = [
            self.dis[0].encode_pair(tape, store, xt, true)?,
            self.dis[1].encode_pair(tape, store, xa, true)?,
            self.dis[2].encode_pair(tape, store, xv, true)?,
        ];

        // decoupling loss: summed over modalities, averaged over the batch
        let rt = self.dis[0].loss_rows(tape, store, xt, &pairs[0])?;
        let ra = self.dis[1].loss_rows(tape, store, xa, &pairs[1])?;
        let rv = self.dis[2].loss_rows(tape, store, xv, &pairs[2])?;
        let r = tape.add(rt, ra)?;
        let r = tape.add(r, rv)?;
        let l_dis = tape.mean_all(r);

        let fused_in = tape.concat(&[pairs[0].in_sample, pairs[1].in_sample, pairs[2].in_sample], 1)?;
        let fused_out = tape.concat(&[pairs[0].out_sample, pairs[1].out_sample, pairs[2].out_sample], 1)?;

        // in-domain branch: both code groups flow through the mixture and
        // discriminator (labels 0 = in codes, 1 = out codes); only the
        // in-code representations feed the in-domain head
        let (l_in, y1) = match &self.in_branch {
            InBranch::Moie(moie) => {
                let both = tape.concat(&[fused_in, fused_out], 0)?;
                let h = moie.forward(tape, store, both)?;
                let mut labels = vec![DomainLabel::InDomain; n];
                labels.extend(std::iter::repeat(DomainLabel::SimulatedOut).take(n));
                let grl = match adv {
                    AdvMode::Reversed(scale) => Some(F::of(self.cfg.grl_lambda * scale)),
                    AdvMode::PassThrough => None,
                };
                let l_in = moie.adversarial_loss_from_repr(tape, store, h, &labels, grl)?;
                let h_in = tape.narrow(h, 0, 0, n)?;
                let y1 = moie.predict_in(tape, store, h_in)?;
                (l_in, y1)
            }
            InBranch::Plain { fusion, head } => {
                let h_in = fusion.forward(tape, store, fused_in)?;
                let y1 = head.forward(tape, store, h_in)?;
                (tape.scalar(F::zero()), y1)
            }
        };

        // out-of-domain branch
        let (o_t, o_a, o_v) = match &self.adapters {
            Some([at, aa, av]) => (
                at.forward(tape, store, pairs[0].out_sample, pairs[1].out_sample, pairs[2].out_sample, true)?,
                aa.forward(tape, store, pairs[1].out_sample, pairs[0].out_sample, pairs[2].out_sample, true)?,
                av.forward(tape, store, pairs[2].out_sample, pairs[0].out_sample, pairs[1].out_sample, true)?,
            ),
            None => (pairs[0].out_sample, pairs[1].out_sample, pairs[2].out_sample),
        };
        let fused = self.fusion.fuse(tape, store, o_t, o_a, o_v)?;
        let y2 = self.fusion.predict_out(tape, store, fused)?;
        let l_out = loss_out(tape, y, y2)?;

        // combined prediction and its supervision
        let wy1 = tape.scale(y1, F::of(tc.w1));
        let wy2 = tape.scale(y2, F::of(tc.w2));
        let combined = tape.add(wy1, wy2)?;
        let diff = tape.sub(y, combined)?;
        let sq = tape.square(diff);
        let l_reg = tape.mean_all(sq);

        let mut total = tape.scale(l_in, F::of(tc.alpha));
        let b = tape.scale(l_out, F::of(tc.beta));
        total = tape.add(total, b)?;
        let g = tape.scale(l_dis, F::of(tc.gamma));
        total = tape.add(total, g)?;
        let d = tape.scale(l_reg, F::of(tc.delta));
        total = tape.add(total, d)?;

        Ok(StepVars {
            total,
            l_dis,
            l_in,
            l_out,
            l_reg,
            y1,
            y2,
        })
    }

    /// Training forward pass over raw samples; returns graph handles for
    /// the loss components, the total and both prediction columns.
    pub fn forward_train(
        &self,
        tape: &mut Tape<F>,
        samples: &[&Sample<F>],
        tc: &TrainConfig,
        adv: AdvMode,
    ) -> Result<StepVars> {
        for s in samples {
            let l = s.label.to64();
            if !(tc.label_lo..=tc.label_hi).contains(&l) {
                return Err(Error::Data(format!(
                    "sample '{}': label {l} outside [{}, {}]",
                    s.id, tc.label_lo, tc.label_hi
                )));
            }
        }
        let batch = BatchMatrices::build(samples, &self.cfg)?;
        self.forward_batch(tape, &batch, tc, adv)
    }

    /// Minibatch training with per-epoch loss logging. Deterministic under
    /// a fixed seed: shuffling, dropout and sampling noise all derive from
    /// `tc.seed`.
    pub fn train(&mut self, samples: &[&Sample<F>], tc: &TrainConfig) -> Result<Vec<EpochRecord>> {
        tc.validate()?;
        if samples.is_empty() {
            return Err(Error::Contract {
                op: "train",
                msg: "empty training set".into(),
            });
        }
        for s in samples {
            let l = s.label.to64();
            if !(tc.label_lo..=tc.label_hi).contains(&l) {
                return Err(Error::Data(format!(
                    "sample '{}': label {l} outside [{}, {}]",
                    s.id, tc.label_lo, tc.label_hi
                )));
            }
        }

        let n = samples.len();
        let steps_per_epoch = n.div_ceil(tc.batch_size);
        let total_steps = (tc.epochs * steps_per_epoch) as f64;
        let mut opt = Adam::new(tc.lr, self.store.flat_len());
        let mut log = Vec::with_capacity(tc.epochs);
        let mut gstep = 0u64;

        for epoch in 1..=tc.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut erng = ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
            order.shuffle(&mut erng);

            let mut sums = LossComponents {
                l_dis: 0.0,
                l_in: 0.0,
                l_out: 0.0,
                l_reg: 0.0,
            };
            let mut total_sum = 0.0;

            for chunk in order.chunks(tc.batch_size) {
                let refs: Vec<&Sample<F>> = chunk.iter().map(|&i| samples[i]).collect();
                let batch = BatchMatrices::build(&refs, &self.cfg)?;
                let mut tape = Tape::new(tc.seed ^ (gstep + 1).wrapping_mul(0xD1B5_4A32_D192_ED03));
                let progress = gstep as f64 / total_steps;
                let scale = if tc.grl_warmup { grl_warmup(progress) } else { 1.0 };
                let sv = self.forward_batch(&mut tape, &batch, tc, AdvMode::Reversed(scale))?;

                let comp = LossComponents {
                    l_dis: tape.value_scalar(sv.l_dis)?.to64(),
                    l_in: tape.value_scalar(sv.l_in)?.to64(),
                    l_out: tape.value_scalar(sv.l_out)?.to64(),
                    l_reg: tape.value_scalar(sv.l_reg)?.to64(),
                };
                for (name, v) in [
                    ("l_dis", comp.l_dis),
                    ("l_in", comp.l_in),
                    ("l_out", comp.l_out),
                    ("l_reg", comp.l_reg),
                ] {
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!(
                            "loss component {name} became {v} at epoch {epoch}"
                        )));
                    }
                }

                tape.backward(sv.total)?;
                let mut grads = vec![F::zero(); self.store.flat_len()];
                for id in self.store.ids() {
                    if let Some(g) = tape.param_grad(id) {
                        grads[self.store.flat_range(id)].copy_from_slice(g);
                    }
                }
                opt.step(self.store.flat_mut(), &grads);

                let w = chunk.len() as f64 / n as f64;
                sums.l_dis += w * comp.l_dis;
                sums.l_in += w * comp.l_in;
                sums.l_out += w * comp.l_out;
                sums.l_reg += w * comp.l_reg;
                total_sum += w * total_loss(&comp, tc);
                gstep += 1;
            }

            log.push(EpochRecord {
                epoch,
                l_dis: sums.l_dis,
                l_in: sums.l_in,
                l_out: sums.l_out,
                l_reg: sums.l_reg,
                total: total_sum,
            });
        }
        Ok(log)
    }

    /// Deterministic predictions: posterior-mean codes, dropout off. In
    /// test mode only the out-of-domain branch is built, so its output
    /// cannot depend on any in-branch parameter.
    pub fn predict_batch(
        &self,
        samples: &[&Sample<F>],
        tc: &TrainConfig,
        mode: PredictMode,
    ) -> Result<Vec<Prediction<F>>> {
        let batch = BatchMatrices::build(samples, &self.cfg)?;
        let n = batch.n;
        let store = &self.store;
        let mut tape = Tape::new(0);
        let xt = tape.leaf(&[n, self.cfg.d_t], &batch.t)?;
        let xa = tape.leaf(&[n, self.cfg.d_a], &batch.a)?;
        let xv = tape.leaf(&[n, self.cfg.d_v], &batch.v)?;

        let out_t = self.dis[0].encode(&mut tape, store, xt, Branch::OutOfDomain)?.mean;
        let out_a = self.dis[1].encode(&mut tape, store, xa, Branch::OutOfDomain)?.mean;
        let out_v = self.dis[2].encode(&mut tape, store, xv, Branch::OutOfDomain)?.mean;

        let (o_t, o_a, o_v) = match &self.adapters {
            Some([at, aa, av]) => (
                at.forward(&mut tape, store, out_t, out_a, out_v, false)?,
                aa.forward(&mut tape, store, out_a, out_t, out_v, false)?,
                av.forward(&mut tape, store, out_v, out_t, out_a, false)?,
            ),
            None => (out_t, out_a, out_v),
        };
        let fused = self.fusion.fuse(&mut tape, store, o_t, o_a, o_v)?;
        let y2 = self.fusion.predict_out(&mut tape, store, fused)?;
        let y2_vals = tape.values(y2).to_vec();

        match mode {
            PredictMode::Test => Ok(y2_vals
                .into_iter()
                .map(|v| Prediction {
                    y1: None,
                    y2: v,
                    combined: v,
                })
                .collect()),
            PredictMode::TrainFusion => {
                let in_t = self.dis[0].encode(&mut tape, store, xt, Branch::InDomain)?.mean;
                let in_a = self.dis[1].encode(&mut tape, store, xa, Branch::InDomain)?.mean;
                let in_v = self.dis[2].encode(&mut tape, store, xv, Branch::InDomain)?.mean;
                let fused_in = tape.concat(&[in_t, in_a, in_v], 1)?;
                let y1 = match &self.in_branch {
                    InBranch::Moie(moie) => {
                        let h = moie.forward(&mut tape, store, fused_in)?;
                        moie.predict_in(&mut tape, store, h)?
                    }
                    InBranch::Plain { fusion, head } => {
                        let h = fusion.forward(&mut tape, store, fused_in)?;
                        head.forward(&mut tape, store, h)?
                    }
                };
                let y1_vals = tape.values(y1).to_vec();
                Ok(y1_vals
                    .into_iter()
                    .zip(y2_vals)
                    .map(|(a, b)| Prediction {
                        y1: Some(a),
                        y2: b,
                        combined: F::of(tc.w1) * a + F::of(tc.w2) * b,
                    })
                    .collect())
            }
        }
    }

    pub fn predict(&self, sample: &Sample<F>, tc: &TrainConfig, mode: PredictMode) -> Result<Prediction<F>> {
        Ok(self.predict_batch(&[sample], tc, mode)?[0])
    }

    /// Metrics of the combined prediction over a sample set.
    pub fn evaluate(
        &self,
        samples: &[&Sample<F>],
        tc: &TrainConfig,
        mode: PredictMode,
    ) -> Result<MetricsReport> {
        let preds = self.predict_batch(samples, tc, mode)?;
        let y: Vec<f64> = samples.iter().map(|s| s.label.to64()).collect();
        let p: Vec<f64> = preds.iter().map(|p| p.combined.to64()).collect();
        metrics::compute(&y, &p)
    }
}

// ---- ablation harness --------------------------------------------------

/// One row of the ablation table: which modules were active and the
/// seed-averaged metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub moie: bool,
    pub adapter: bool,
    pub acc: f64,
    pub corr: f64,
    pub f1: f64,
    pub mae: f64,
    pub per_seed: Vec<MetricsReport>,
}

/// Leave-one-domain-out ablation: trains each of the four module
/// configurations on `train_domains` and evaluates on `test_domain` under
/// the test protocol, once per seed. Rows are ordered
/// (off, off), (on, off), (off, on), (on, on).
pub fn ablate<F: Scalar>(
    data: &Dataset<F>,
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    train_domains: &[usize],
    test_domain: usize,
    seeds: &[u64],
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Contract {
            op: "ablate",
            msg: "need at least one seed".into(),
        });
    }
    let train = data.domain_in(train_domains);
    let test = data.domain_in(&[test_domain]);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Contract {
            op: "ablate",
            msg: format!(
                "empty partition: {} train samples (domains {train_domains:?}), {} test samples (domain {test_domain})",
                train.len(),
                test.len()
            ),
        });
    }

    let configs = [(false, false), (true, false), (false, true), (true, true)];
    let mut rows = Vec::with_capacity(4);
    for (moie_on, adapter_on) in configs {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = model_cfg.clone();
            cfg.ablation = AblationSwitches {
                no_moie: !moie_on,
                no_adapter: !adapter_on,
            };
            cfg.init_seed = seed;
            let mut tcc = tc.clone();
            tcc.seed = seed;
            let mut model = MidgModel::<F>::new(&cfg)?;
            model.train(&train, &tcc)?;
            per_seed.push(model.evaluate(&test, &tcc, PredictMode::Test)?);
        }
        let k = per_seed.len() as f64;
        rows.push(AblationRow {
            moie: moie_on,
            adapter: adapter_on,
            acc: per_seed.iter().map(|m| m.acc).sum::<f64>() / k,
            corr: per_seed.iter().map(|m| m.corr).sum::<f64>() / k,
            f1: per_seed.iter().map(|m| m.f1).sum::<f64>() / k,
            mae: per_seed.iter().map(|m| m.mae).sum::<f64>() / k,
            per_seed,
        });
    }
    Ok(rows)
}

// ---- whole-graph gradient check -----------------------------------------

const GRAPH_CHECK_SEED: u64 = 0x6C0D;

/// Finite-difference check of the full composed training graph over every
/// parameter coordinate. Runs with [`AdvMode::PassThrough`] (see there) and
/// in 64-bit precision. Returns the max relative error.
pub fn training_graph_gradcheck(
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    samples: &[&Sample<f64>],
    epsilon: f64,
) -> Result<f64> {
    let mut model = MidgModel::<f64>::new(model_cfg)?;
    let batch = BatchMatrices::build(samples, model_cfg)?;

    let mut tape = Tape::new(GRAPH_CHECK_SEED);
    let sv = model.forward_batch(&mut tape, &batch, tc, AdvMode::PassThrough)?;
    tape.backward(sv.total)?;
    let mut analytic = vec![0.0f64; model.store.flat_len()];
    for id in model.store.ids() {
        if let Some(g) = tape.param_grad(id) {
            analytic[model.store.flat_range(id)].copy_from_slice(g);
        }
    }
    let point = model.store.flat().to_vec();

    let mut f = |x: &[f64]| -> Result<f64> {
        model.store.flat_mut().copy_from_slice(x);
        let mut tape = Tape::new(GRAPH_CHECK_SEED);
        let sv = model.forward_batch(&mut tape, &batch, tc, AdvMode::PassThrough)?;
        tape.value_scalar(sv.total)
    };
    gradcheck_flat(&mut f, &point, &analytic, epsilon)
}

// ---- parameter file ------------------------------------------------------

const PARAMS_FORMAT: &str = "midg-params-v1";

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format: String,
    model: ModelConfig,
    train: TrainConfig,
    params: Vec<ParamFileEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamFileEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Serializes a trained model (plus the train config needed to evaluate it)
/// as JSON, written atomically.
pub fn save_model<F: Scalar>(model: &MidgModel<F>, tc: &TrainConfig, path: &Path) -> Result<()> {
    let params = model
        .store
        .ids()
        .map(|id| ParamFileEntry {
            name: model.store.name(id).to_string(),
            shape: model.store.shape(id).to_vec(),
            values: model.store.values(id).iter().map(|v| v.to64()).collect(),
        })
        .collect();
    let file = ParamsFile {
        format: PARAMS_FORMAT.to_string(),
        model: model.cfg.clone(),
        train: tc.clone(),
        params,
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Data(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(text.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuilds a model from a parameter file.
pub fn load_model<F: Scalar>(path: &Path) -> Result<(MidgModel<F>, TrainConfig)> {
    let text = std::fs::read_to_string(path)?;
    let file: ParamsFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("parameter file: {e}"),
    })?;
    if file.format != PARAMS_FORMAT {
        return Err(Error::Data(format!(
            "unsupported parameter format '{}', expected '{PARAMS_FORMAT}'",
            file.format
        )));
    }
    let mut model = MidgModel::<F>::new(&file.model)?;
    if file.params.len() != model.store.param_count() {
        return Err(Error::Data(format!(
            "parameter file has {} tensors, model needs {}",
            file.params.len(),
            model.store.param_count()
        )));
    }
    for entry in &file.params {
        let id = model.store.find(&entry.name).ok_or_else(|| {
            Error::Data(format!("unknown parameter '{}' in file", entry.name))
        })?;
        if model.store.shape(id) != entry.shape.as_slice() {
            return Err(Error::Data(format!(
                "parameter '{}': file shape {:?} vs model shape {:?}",
                entry.name,
                entry.shape,
                model.store.shape(id)
            )));
        }
        let values: Vec<F> = entry.values.iter().map(|&v| F::of(v)).collect();
        model.store.set_values(id, &values);
    }
    Ok((model, file.train))
}
