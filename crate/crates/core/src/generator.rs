//! One-step generator: a denoiser evaluated at the fixed noise level
//! `sigma_init`, fed with latents drawn from `N(0, sigma_init^2 I)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffusion::{CleanSource, Condition, DenoiseCache, Denoiser};
use crate::error::{Error, Result};

pub const SIGMA_INIT: f64 = 2.5;

#[derive(Clone, Debug, PartialEq)]
pub struct OneStepGenerator {
    denoiser: Denoiser,
    sigma_init: f64,
}

impl OneStepGenerator {
    pub fn new(denoiser: Denoiser, sigma_init: f64) -> Result<Self> {
        if !(sigma_init > 0.0 && sigma_init.is_finite()) {
            return Err(Error::Config(format!("sigma_init must be positive, got {sigma_init}")));
        }
        Ok(Self { denoiser, sigma_init })
    }

    /// Parameter-wise copy of a reference denoiser. The generator owns its
    /// copy, so later training never touches `reference`.
    pub fn from_reference(reference: &Denoiser, sigma_init: f64) -> Result<Self> {
        Self::new(reference.clone(), sigma_init)
    }

    pub fn sigma_init(&self) -> f64 {
        self.sigma_init
    }

    pub fn denoiser(&self) -> &Denoiser {
        &self.denoiser
    }

    pub fn denoiser_mut(&mut self) -> &mut Denoiser {
        &mut self.denoiser
    }

    pub fn dim(&self) -> usize {
        crate::diffusion::Denoise::dim(&self.denoiser)
    }

    pub fn params(&self) -> &[f64] {
        self.denoiser.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.denoiser.net_mut().params_mut()
    }

    /// `batch` latents, i.i.d. `N(0, sigma_init^2)` per coordinate.
    pub fn sample_latent<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<f64> {
        (0..batch * self.dim())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                self.sigma_init * z
            })
            .collect()
    }

    pub fn generate(&self, z: &[f64], conds: &[Condition]) -> Result<Vec<f64>> {
        Ok(self.generate_cached(z, conds)?.output().to_vec())
    }

    pub fn generate_cached(&self, z: &[f64], conds: &[Condition]) -> Result<DenoiseCache> {
        if conds.contains(&Condition::Null) {
            return Err(Error::Config("generator needs a concrete condition label".into()));
        }
        let t = vec![self.sigma_init; conds.len()];
        self.denoiser.forward_cached(z, &t, conds)
    }

    /// Parameter gradient of `<cotangent, generate(z, c)>`.
    pub fn backward(&self, cache: &DenoiseCache, cotangent: &[f64]) -> Result<Vec<f64>> {
        Ok(self.denoiser.backward(cache, cotangent)?.0)
    }
}

/// Generator pushforward as a data source; latents are drawn internally and
/// the output carries no gradient.
impl CleanSource for OneStepGenerator {
    fn dim(&self) -> usize {
        OneStepGenerator::dim(self)
    }

    fn n_conditions(&self) -> usize {
        self.denoiser.n_conditions()
    }

    fn sample_clean(&self, conds: &[Condition], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        let z = self.sample_latent(conds.len(), rng);
        self.generate(&z, conds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SIGMA_DATA;
    use crate::nn::{Activation, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_denoiser(seed: u64) -> Denoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Denoiser::new(2, 3, &[16, 16], SIGMA_DATA, &mut rng).unwrap()
    }

    #[test]
    fn latent_statistics() {
        let g = OneStepGenerator::new(small_denoiser(0), SIGMA_INIT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = g.sample_latent(500_000, &mut rng);
        assert_eq!(z.len(), 1_000_000);
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64;
        assert!((var / 6.25 - 1.0).abs() < 0.01, "var {var}");

        assert!(g.sample_latent(0, &mut rng).is_empty());
        let a = g.sample_latent(4, &mut ChaCha8Rng::seed_from_u64(5));
        let b = g.sample_latent(4, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_network_generates_gaussian_posterior_mean() {
        // With F = 0 the preconditioned denoiser is c_skip * x, which is the
        // exact posterior mean for data N(0, sigma_data^2 I).
        let widths = vec![Denoiser::input_width(2, 1), 8, 2];
        let net = Mlp::zeros(widths, Activation::Tanh).unwrap();
        let den = Denoiser::from_net(net, 2, 1, SIGMA_DATA).unwrap();
        let g = OneStepGenerator::from_reference(&den, SIGMA_INIT).unwrap();
        let z = [1.0, -2.0, 0.5, 3.0];
        let x = g.generate(&z, &[Condition::Label(0); 2]).unwrap();
        let s2 = SIGMA_DATA * SIGMA_DATA;
        let shrink = s2 / (s2 + SIGMA_INIT * SIGMA_INIT);
        for (xi, zi) in x.iter().zip(&z) {
            assert!((xi - shrink * zi).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_generate_bias_pattern() {
        let widths = vec![Denoiser::input_width(2, 1), 8, 2];
        let mut net = Mlp::zeros(widths, Activation::Tanh).unwrap();
        let n = net.num_params();
        net.params_mut()[n - 2] = 0.4;
        net.params_mut()[n - 1] = -0.2;
        let den = Denoiser::from_net(net, 2, 1, SIGMA_DATA).unwrap();
        let g = OneStepGenerator::from_reference(&den, SIGMA_INIT).unwrap();
        let s2 = SIGMA_DATA * SIGMA_DATA;
        let r = (SIGMA_INIT * SIGMA_INIT + s2).sqrt();
        let (c_skip, c_out) = (s2 / (r * r), SIGMA_INIT * SIGMA_DATA / r);
        let x = g.generate(&[0.0, 0.0], &[Condition::Label(0)]).unwrap();
        assert!((x[0] - c_out * 0.4).abs() < 1e-15);
        assert!((x[1] + c_out * 0.2).abs() < 1e-15);
        let x = g.generate(&[1.0, 1.0], &[Condition::Label(0)]).unwrap();
        assert!((x[0] - (c_skip + c_out * 0.4)).abs() < 1e-15);
    }

    #[test]
    fn batch_consistency() {
        let g = OneStepGenerator::new(small_denoiser(2), SIGMA_INIT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = g.sample_latent(6, &mut rng);
        let c: Vec<Condition> = (0..6).map(|i| Condition::Label(i % 3)).collect();
        let all = g.generate(&z, &c).unwrap();
        let mut parts = g.generate(&z[..6], &c[..3]).unwrap();
        parts.extend(g.generate(&z[6..], &c[3..]).unwrap());
        assert_eq!(all, parts);
    }

    #[test]
    fn init_copies_and_isolates_reference() {
        let reference = small_denoiser(4);
        let snapshot = reference.clone();
        let mut g = OneStepGenerator::from_reference(&reference, SIGMA_INIT).unwrap();
        let g2 = OneStepGenerator::from_reference(&reference, SIGMA_INIT).unwrap();
        assert_eq!(g, g2);

        let z = [0.3, -1.2, 2.0, 0.1];
        let c = [Condition::Label(1), Condition::Label(2)];
        let direct = reference.denoise(&z, &[SIGMA_INIT; 2], &c).unwrap();
        assert_eq!(g.generate(&z, &c).unwrap(), direct);

        g.params_mut().iter_mut().for_each(|p| *p += 0.1);
        assert_eq!(reference, snapshot);
        assert_eq!(reference.denoise(&z, &[SIGMA_INIT; 2], &c).unwrap(), direct);
    }

    #[test]
    fn out_of_range_condition_rejected() {
        let g = OneStepGenerator::new(small_denoiser(0), SIGMA_INIT).unwrap();
        assert!(matches!(g.generate(&[0.0, 0.0], &[Condition::Label(3)]), Err(Error::Config(_))));
        assert!(matches!(g.generate(&[0.0, 0.0], &[Condition::Null]), Err(Error::Config(_))));
    }

    #[test]
    fn generator_gradient_matches_fd() {
        let g = OneStepGenerator::new(small_denoiser(6), SIGMA_INIT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let z = g.sample_latent(3, &mut rng);
        let c = [Condition::Label(0), Condition::Label(1), Condition::Label(2)];
        // scalar objective: sum of squares of the outputs
        let f = |g: &OneStepGenerator| g.generate(&z, &c).unwrap().iter().map(|v| v * v).sum::<f64>();
        let cache = g.generate_cached(&z, &c).unwrap();
        let cot: Vec<f64> = cache.output().iter().map(|v| 2.0 * v).collect();
        let grad = g.backward(&cache, &cot).unwrap();
        let h = 1e-5;
        for i in (0..grad.len()).step_by(7) {
            let mut p = g.clone();
            p.params_mut()[i] += h;
            let mut m = g.clone();
            m.params_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-6);
        }
    }
}
