//! Entropy-based feature decoupling.
//!
//! Each modality's encoded feature vector is passed through two independent
//! encoders producing diagonal-Gaussian codes: an in-domain code and an
//! out-of-domain code. Training minimizes a variational upper bound on the
//! mutual information between the two codes: a KL term pulls each posterior
//! toward a standard-normal reference while a shared decoder forces the pair
//! to jointly reconstruct the input.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, ParamStore};
use crate::scalar::Scalar;

/// Log-variances are clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]` so the
/// variance can neither overflow nor collapse to zero.
pub const LOGVAR_CLAMP: f64 = 8.0;

/// Diagonal-Gaussian code parameters (data-level view).
#[derive(Clone, Debug)]
pub struct GaussianCode<F> {
    pub mean: Vec<F>,
    pub logvar: Vec<F>,
}

impl<F: Scalar> GaussianCode<F> {
    /// Builds a code, clamping the log-variance into the legal range.
    pub fn new(mean: Vec<F>, logvar: Vec<F>) -> Result<Self> {
        if mean.len() != logvar.len() {
            return Err(Error::Contract {
                op: "GaussianCode",
                msg: format!("mean len {} != logvar len {}", mean.len(), logvar.len()),
            });
        }
        let hi = F::of(LOGVAR_CLAMP);
        let lo = -hi;
        let logvar = logvar
            .into_iter()
            .map(|v| if v < lo { lo } else if v > hi { hi } else { v })
            .collect();
        Ok(GaussianCode { mean, logvar })
    }

    /// Closed-form KL divergence to the standard normal:
    /// `0.5 * sum(mean^2 + exp(logvar) - 1 - logvar)`.
    pub fn kl_to_prior(&self) -> F {
        let mut s = F::zero();
        for (m, lv) in self.mean.iter().zip(&self.logvar) {
            s += *m * *m + lv.exp() - F::one() - *lv;
        }
        s * F::of(0.5)
    }

    /// Reparameterized draw: `mean + exp(logvar/2) * noise`.
    pub fn sample(&self, noise: &[F]) -> Vec<F> {
        assert_eq!(noise.len(), self.mean.len());
        self.mean
            .iter()
            .zip(&self.logvar)
            .zip(noise)
            .map(|((m, lv), n)| *m + (*lv * F::of(0.5)).exp() * *n)
            .collect()
    }
}

/// Tape-level code: `[n, d_code]` mean and log-variance nodes.
#[derive(Clone, Copy, Debug)]
pub struct CodeVars {
    pub mean: Var,
    pub logvar: Var,
}

/// Tape-level disentangled pair for a batch: codes plus reparameterized
/// samples for both branches.
#[derive(Clone, Copy, Debug)]
pub struct DisentangledPair {
    pub in_code: CodeVars,
    pub out_code: CodeVars,
    pub in_sample: Var,
    pub out_sample: Var,
}

/// Which code an encoder produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    InDomain,
    OutOfDomain,
}

#[derive(Clone, Copy, Debug)]
pub struct DisentangleConfig {
    pub d_input: usize,
    pub d_code: usize,
    pub d_hidden: usize,
}

impl DisentangleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_input == 0 || self.d_code == 0 || self.d_hidden == 0 {
            return Err(Error::Config(format!(
                "disentangle dimensions must be positive, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One Gaussian encoder: shared hidden layer, separate mean/logvar heads.
#[derive(Clone, Copy, Debug)]
pub struct Encoder {
    pub fc1: Linear,
    pub mean_head: Linear,
    pub logvar_head: Linear,
}

impl Encoder {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &DisentangleConfig,
    ) -> Self {
        Encoder {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), cfg.d_input, cfg.d_hidden),
            mean_head: Linear::new(store, rng, &format!("{name}.mean"), cfg.d_hidden, cfg.d_code),
            logvar_head: Linear::new(
                store,
                rng,
                &format!("{name}.logvar"),
                cfg.d_hidden,
                cfg.d_code,
            ),
        }
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<CodeVars> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.relu(h);
        let mean = self.mean_head.forward(tape, store, h)?;
        let logvar = self.logvar_head.forward(tape, store, h)?;
        let logvar = tape.clamp(logvar, F::of(-LOGVAR_CLAMP), F::of(LOGVAR_CLAMP));
        Ok(CodeVars { mean, logvar })
    }
}

/// Per-modality decoupler: two encoders and the shared reconstruction
/// decoder over the concatenated samples.
#[derive(Clone, Copy, Debug)]
pub struct Disentangler {
    pub cfg: DisentangleConfig,
    pub enc_in: Encoder,
    pub enc_out: Encoder,
    pub decoder: Mlp,
}

impl Disentangler {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: DisentangleConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Disentangler {
            cfg,
            enc_in: Encoder::new(store, rng, &format!("{name}.enc_in"), &cfg),
            enc_out: Encoder::new(store, rng, &format!("{name}.enc_out"), &cfg),
            decoder: Mlp::new(
                store,
                rng,
                &format!("{name}.dec"),
                2 * cfg.d_code,
                cfg.d_hidden,
                cfg.d_input,
            ),
        })
    }

    /// Encodes a `[n, d_input]` batch with the chosen branch's encoder.
    pub fn encode<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        branch: Branch,
    ) -> Result<CodeVars> {
        if tape.shape(x).last() != Some(&self.cfg.d_input) {
            return Err(Error::Shape {
                op: "encode",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.cfg.d_input],
            });
        }
        let enc = match branch {
            Branch::InDomain => &self.enc_in,
            Branch::OutOfDomain => &self.enc_out,
        };
        enc.forward(tape, store, x)
    }

    /// Encodes both branches and draws one reparameterized sample per code.
    /// With `training` off, the samples are the posterior means.
    pub fn encode_pair<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        training: bool,
    ) -> Result<DisentangledPair> {
        let in_code = self.encode(tape, store, x, Branch::InDomain)?;
        let out_code = self.encode(tape, store, x, Branch::OutOfDomain)?;
        let (in_sample, out_sample) = if training {
            let n = tape.shape(x)[0];
            let shape = [n, self.cfg.d_code];
            let noise_in = tape.noise(n * self.cfg.d_code);
            let noise_in = tape.leaf(&shape, &noise_in)?;
            let noise_out = tape.noise(n * self.cfg.d_code);
            let noise_out = tape.leaf(&shape, &noise_out)?;
            (
                sample(tape, &in_code, noise_in)?,
                sample(tape, &out_code, noise_out)?,
            )
        } else {
            (in_code.mean, out_code.mean)
        };
        Ok(DisentangledPair {
            in_code,
            out_code,
            in_sample,
            out_sample,
        })
    }

    /// Decodes the concatenated `[in_sample, out_sample]` pair back to a
    /// unit-variance Gaussian mean over the input space.
    pub fn reconstruct<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        in_sample: Var,
        out_sample: Var,
    ) -> Result<Var> {
        let joint = tape.concat(&[in_sample, out_sample], 1)?;
        self.decoder.forward(tape, store, joint)
    }

    /// Per-sample decoupling bound as a `[n, 1]` column:
    /// `KL(q_in || prior) + KL(q_out || prior) - log p(x | in_sample, out_sample)`
    /// with the unit-variance Gaussian log-likelihood
    /// `-0.5 ||x - decode||^2 - (d_input/2) ln(2 pi)`.
    pub fn loss_rows<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        pair: &DisentangledPair,
    ) -> Result<Var> {
        let kl_in = kl_to_prior(tape, &pair.in_code)?;
        let kl_out = kl_to_prior(tape, &pair.out_code)?;
        let recon = self.reconstruct(tape, store, pair.in_sample, pair.out_sample)?;
        let diff = tape.sub(x, recon)?;
        let sq = tape.square(diff);
        let sse = tape.sum_axis(sq, 1)?;
        let half_sse = tape.scale(sse, F::of(0.5));
        let norm_const = F::of(self.cfg.d_input as f64 / 2.0 * (2.0 * std::f64::consts::PI).ln());
        let neg_loglik = tape.add_scalar(half_sse, norm_const);
        let kl = tape.add(kl_in, kl_out)?;
        tape.add(kl, neg_loglik)
    }

    /// Batch-mean decoupling loss (scalar).
    pub fn loss<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        pair: &DisentangledPair,
    ) -> Result<Var> {
        let rows = self.loss_rows(tape, store, x, pair)?;
        Ok(tape.mean_all(rows))
    }
}

/// Reparameterized sampling on the tape: `mean + exp(logvar/2) * noise`.
/// Gradients flow to both mean and logvar.
pub fn sample<F: Scalar>(tape: &mut Tape<F>, code: &CodeVars, noise: Var) -> Result<Var> {
    let half_lv = tape.scale(code.logvar, F::of(0.5));
    let std = tape.exp(half_lv);
    let scaled = tape.mul(std, noise)?;
    tape.add(code.mean, scaled)
}

/// Per-sample KL divergence to the standard-normal prior as a `[n, 1]`
/// column: `0.5 * sum_j(mean^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_to_prior<F: Scalar>(tape: &mut Tape<F>, code: &CodeVars) -> Result<Var> {
    let m2 = tape.square(code.mean);
    let ev = tape.exp(code.logvar);
    let a = tape.add(m2, ev)?;
    let b = tape.sub(a, code.logvar)?;
    let c = tape.add_scalar(b, -F::one());
    let summed = tape.sum_axis(c, 1)?;
    Ok(tape.scale(summed, F::of(0.5)))
}
