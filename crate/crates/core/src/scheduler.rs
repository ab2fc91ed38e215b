//! Noise schedule, deterministic DDIM sampling and DDIM inversion.
//!
//! Timestep `None` denotes the fully denoised level. Its cumulative alpha is
//! `alpha_bar[0]`, so inverting from clean latents starts at that level.

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schedule parameters as stored in the checkpoint header.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            steps: 50,
        }
    }
}

impl ScheduleConfig {
    /// The two-step setting used for fast sampling.
    pub fn few_step() -> Self {
        Self {
            steps: 2,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    timesteps: Vec<usize>,
}

/// Anything that predicts the noise component of `x` at timestep `t`.
pub trait EpsilonModel {
    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> EpsilonModel for F
where
    F: Fn(&Tensor, usize) -> Result<Tensor>,
{
    fn predict_eps(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        self(x, t)
    }
}

/// Fixed-point refinement of each inversion step.
///
/// With `refine_iters == 0` the step uses the lagged prediction only. Otherwise
/// the implicit equation `x_t = invert(x_s, eps(x_t))` is solved with Anderson
/// acceleration until the max-abs residual drops below `tol`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionOptions {
    pub refine_iters: usize,
    pub tol: f64,
    pub history: usize,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            refine_iters: 0,
            tol: 1e-6,
            history: 5,
        }
    }
}

impl InversionOptions {
    pub fn exact(tol: f64) -> Self {
        Self {
            refine_iters: 200,
            tol,
            history: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RefineReport {
    pub iterations: usize,
    pub residual: f64,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t_total = config.train_timesteps;
        if t_total < 2 {
            return Err(Error::config("train_timesteps must be >= 2"));
        }
        if !(config.beta_start > 0.0 && config.beta_start < config.beta_end && config.beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < beta_start < beta_end < 1, got [{}, {}]",
                config.beta_start, config.beta_end
            )));
        }
        if config.steps > t_total {
            return Err(Error::config(format!(
                "steps {} exceeds train timesteps {t_total}",
                config.steps
            )));
        }
        let betas: Vec<f64> = (0..t_total)
            .map(|i| {
                config.beta_start
                    + (config.beta_end - config.beta_start) * i as f64 / (t_total - 1) as f64
            })
            .collect();
        let alpha_bar = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        // Uniform stride ending at the last train timestep.
        let timesteps = (0..config.steps)
            .map(|i| {
                let v = t_total as f64 - i as f64 * t_total as f64 / config.steps as f64;
                v.round() as usize - 1
            })
            .collect();
        Ok(Self {
            config,
            betas,
            alpha_bar,
            timesteps,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::new(ScheduleConfig {
            steps,
            ..self.config
        })
    }

    pub fn train_timesteps(&self) -> usize {
        self.config.train_timesteps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Inference timesteps in denoising (decreasing) order.
    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// The level reached after denoising position `i`.
    pub fn prev_timestep(&self, i: usize) -> Option<usize> {
        self.timesteps.get(i + 1).copied()
    }

    pub fn alpha_bar(&self, t: Option<usize>) -> f64 {
        self.alpha_bar[t.unwrap_or(0)]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.config.train_timesteps {
            return Err(Error::TimestepOutOfRange {
                t,
                max: self.config.train_timesteps,
            });
        }
        Ok(())
    }

    /// Forward process `sqrt(ab) x0 + sqrt(1 - ab) eps`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        same_shape(x0, eps)?;
        let ab = self.alpha_bar[t];
        Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
    }

    /// Deterministic DDIM update from `t` down to `prev`.
    pub fn ddim_step(&self, x_t: &Tensor, eps: &Tensor, t: usize, prev: Option<usize>) -> Result<Tensor> {
        self.check_t(t)?;
        if let Some(p) = prev {
            if p >= t {
                return Err(Error::invalid(format!(
                    "ddim_step needs t > t_prev, got {t} -> {p}"
                )));
            }
        }
        same_shape(x_t, eps)?;
        Ok(transfer(x_t, eps, self.alpha_bar[t], self.alpha_bar(prev))?)
    }

    /// Exact algebraic inverse of [`ddim_step`](Self::ddim_step) for a given `eps`.
    pub fn ddim_step_inverse(&self, x_prev: &Tensor, eps: &Tensor, prev: Option<usize>, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if let Some(p) = prev {
            if p >= t {
                return Err(Error::invalid(format!(
                    "inversion needs t_prev < t, got {p} -> {t}"
                )));
            }
        }
        same_shape(x_prev, eps)?;
        Ok(transfer(x_prev, eps, self.alpha_bar(prev), self.alpha_bar[t])?)
    }

    /// One inversion step from level `prev` to timestep `t`.
    ///
    /// `eps_at_t` evaluates the model at timestep `t` for a candidate latent.
    /// The first evaluation uses `x_prev` itself (the lagged estimate).
    pub fn invert_step<F>(
        &self,
        x_prev: &Tensor,
        prev: Option<usize>,
        t: usize,
        mut eps_at_t: F,
        opts: &InversionOptions,
    ) -> Result<(Tensor, RefineReport)>
    where
        F: FnMut(&Tensor) -> Result<Tensor>,
    {
        let eps0 = eps_at_t(x_prev)?;
        let x = self.ddim_step_inverse(x_prev, &eps0, prev, t)?;
        if opts.refine_iters == 0 {
            return Ok((x, RefineReport::default()));
        }
        let map = |cand: &Tensor, eps_at_t: &mut F| -> Result<Tensor> {
            let eps = eps_at_t(cand)?;
            self.ddim_step_inverse(x_prev, &eps, prev, t)
        };
        anderson(x, |cand| map(cand, &mut eps_at_t), opts)
    }

    /// Runs the inversion recurrence over the inference timesteps in increasing order.
    ///
    /// Returns the latents at every inference timestep in denoising order, so
    /// element 0 lives at the largest timestep.
    pub fn ddim_invert_trajectory(
        &self,
        x0: &Tensor,
        model: &dyn EpsilonModel,
        opts: &InversionOptions,
    ) -> Result<Vec<Tensor>> {
        let k = self.timesteps.len();
        if k == 0 {
            return Err(Error::config("inversion requires at least one step"));
        }
        let mut traj = vec![x0.clone(); k];
        let mut x = x0.clone();
        for i in (0..k).rev() {
            let t = self.timesteps[i];
            let prev = self.prev_timestep(i);
            let (next, _) = self.invert_step(
                &x,
                prev,
                t,
                |cand| {
                    let eps = model.predict_eps(cand, t)?;
                    same_shape(cand, &eps)?;
                    Ok(eps)
                },
                opts,
            )?;
            x = next;
            traj[i] = x.clone();
        }
        Ok(traj)
    }

    pub fn ddim_invert(&self, x0: &Tensor, model: &dyn EpsilonModel, opts: &InversionOptions) -> Result<Tensor> {
        Ok(self.ddim_invert_trajectory(x0, model, opts)?.swap_remove(0))
    }

    /// Full deterministic sampling from the largest inference timestep.
    pub fn ddim_sample(&self, x_t: &Tensor, model: &dyn EpsilonModel) -> Result<Tensor> {
        let mut x = x_t.clone();
        for (i, &t) in self.timesteps.iter().enumerate() {
            let eps = model.predict_eps(&x, t)?;
            same_shape(&x, &eps)?;
            x = self.ddim_step(&x, &eps, t, self.prev_timestep(i))?;
        }
        Ok(x)
    }
}

/// Moves `x` from cumulative alpha `from` to `to` along the DDIM path defined by `eps`.
fn transfer(x: &Tensor, eps: &Tensor, from: f64, to: f64) -> candle_core::Result<Tensor> {
    let x0 = ((x - (eps * (1.0 - from).sqrt())?)? / from.sqrt())?;
    (x0 * to.sqrt())? + (eps * (1.0 - to).sqrt())?
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn to_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Anderson-accelerated fixed-point iteration for `x = g(x)`.
fn anderson<G>(x0: Tensor, mut g: G, opts: &InversionOptions) -> Result<(Tensor, RefineReport)>
where
    G: FnMut(&Tensor) -> Result<Tensor>,
{
    let shape = x0.shape().clone();
    let (dtype, device) = (x0.dtype(), x0.device().clone());
    let to_tensor = |v: &[f64]| -> Result<Tensor> {
        Ok(Tensor::from_slice(v, shape.clone(), &device)?.to_dtype(dtype)?)
    };

    let mut x = to_vec(&x0)?;
    let mut x_t = x0;
    let mut gx = to_vec(&g(&x_t)?)?;
    let mut f: Vec<f64> = gx.iter().zip(&x).map(|(a, b)| a - b).collect();
    let mut best = (max_abs_diff(&gx, &x), gx.clone());
    let mut d_f: Vec<Vec<f64>> = Vec::new();
    let mut d_g: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 1;

    while best.0 > opts.tol && iterations < opts.refine_iters {
        let next: Vec<f64> = if d_f.is_empty() || opts.history == 0 {
            gx.clone()
        } else {
            let n = f.len();
            let m = d_f.len();
            let df = DMatrix::from_fn(n, m, |r, c| d_f[c][r]);
            let fv = DVector::from_column_slice(&f);
            let mut normal = df.transpose() * &df;
            let scale = normal.trace().max(1e-300) * 1e-12;
            for i in 0..m {
                normal[(i, i)] += scale;
            }
            match normal.lu().solve(&(df.transpose() * fv)) {
                Some(gamma) => (0..n)
                    .map(|r| gx[r] - (0..m).map(|c| d_g[c][r] * gamma[c]).sum::<f64>())
                    .collect(),
                None => gx.clone(),
            }
        };
        x_t = to_tensor(&next)?;
        x = to_vec(&x_t)?;
        let g_new = to_vec(&g(&x_t)?)?;
        iterations += 1;
        let f_new: Vec<f64> = g_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let res = max_abs_diff(&g_new, &x);
        if res < best.0 {
            best = (res, g_new.clone());
        }
        d_f.push(f_new.iter().zip(&f).map(|(a, b)| a - b).collect());
        d_g.push(g_new.iter().zip(&gx).map(|(a, b)| a - b).collect());
        if d_f.len() > opts.history {
            d_f.remove(0);
            d_g.remove(0);
        }
        f = f_new;
        gx = g_new;
        if !res.is_finite() {
            break;
        }
    }
    Ok((
        to_tensor(&best.1)?,
        RefineReport {
            iterations,
            residual: best.0,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn sched(steps: usize) -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig {
            steps,
            ..Default::default()
        })
        .unwrap()
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
        max_abs_diff(&to_vec(a).unwrap(), &to_vec(b).unwrap())
    }

    #[test]
    fn schedule_invariants() {
        for steps in [1, 2, 3, 7, 50, 1000] {
            let s = sched(steps);
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            assert!((s.alpha_bar(Some(0)) - (1.0 - 1e-4)).abs() < 1e-15);
            assert!(s.timesteps().windows(2).all(|w| w[1] < w[0]));
            assert!(s.timesteps().iter().all(|&t| t < 1000));
            assert_eq!(s.timesteps().len(), steps);
            assert_eq!(s.timesteps()[0], 999);
        }
        assert_eq!(sched(2).timesteps(), &[999, 499]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(NoiseSchedule::new(ScheduleConfig { beta_end: 1e-5, ..Default::default() }).is_err());
        assert!(NoiseSchedule::new(ScheduleConfig { steps: 1001, ..Default::default() }).is_err());
    }

    #[test]
    fn add_noise_examples() {
        let s = sched(50);
        let x0 = randn(&[2, 4, 3, 3], 1).clamp(-1.0, 1.0).unwrap();
        let eps = randn(&[2, 4, 3, 3], 2).clamp(-1.0, 1.0).unwrap();
        assert!(max_abs(&s.add_noise(&x0, &eps, 0).unwrap(), &x0) <= 2e-2);
        let zero = eps.zeros_like().unwrap();
        let xt = s.add_noise(&x0, &zero, 600).unwrap();
        let expect = (&x0 * s.alpha_bar(Some(600)).sqrt()).unwrap();
        assert_eq!(to_vec(&xt).unwrap(), to_vec(&expect).unwrap());
        assert!(matches!(s.add_noise(&x0, &eps, 1000), Err(Error::TimestepOutOfRange { .. })));
    }

    #[test]
    fn add_noise_variance_monte_carlo() {
        let s = sched(50);
        let t = 300;
        let n = 100_000;
        let x0 = (randn(&[n], 3) * 0.7).unwrap();
        let eps = randn(&[n], 4);
        let xt = to_vec(&s.add_noise(&x0, &eps, t).unwrap()).unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let ab = s.alpha_bar(Some(t));
        let expected = ab * var(&to_vec(&x0).unwrap()) + (1.0 - ab);
        assert!((var(&xt) / expected - 1.0).abs() < 0.02);
    }

    #[test]
    fn ddim_step_examples() {
        let s = sched(50);
        let z = Tensor::zeros((1, 4, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(to_vec(&s.ddim_step(&z, &z, 999, Some(979)).unwrap()).unwrap(), vec![0.0; 16]);

        let x = randn(&[1, 4, 2, 2], 5);
        let out = s.ddim_step(&x, &z, 979, Some(959)).unwrap();
        let ratio = (s.alpha_bar(Some(959)) / s.alpha_bar(Some(979))).sqrt();
        assert!(max_abs(&out, &(&x * ratio).unwrap()) < 1e-12);
        assert!(s.ddim_step(&x, &z, 500, Some(500)).is_err());
    }

    #[test]
    fn step_then_inverse_recovers_input() {
        let s = sched(50);
        let x = randn(&[2, 4, 3, 3], 6);
        let eps = randn(&[2, 4, 3, 3], 7);
        for (t, prev) in [(999, Some(979)), (19, None), (500, Some(10))] {
            let down = s.ddim_step(&x, &eps, t, prev).unwrap();
            let up = s.ddim_step_inverse(&down, &eps, prev, t).unwrap();
            assert!(max_abs(&up, &x) <= 1e-10, "t={t}");
        }
    }

    #[test]
    fn invert_single_step_zero_model() {
        let s = sched(1);
        let x0 = randn(&[1, 4, 2, 2], 8);
        let zero = |x: &Tensor, _t: usize| -> Result<Tensor> { Ok(x.zeros_like()?) };
        let xt = s.ddim_invert(&x0, &zero, &InversionOptions::default()).unwrap();
        let scale = (s.alpha_bar(Some(999)) / s.alpha_bar(Some(0))).sqrt();
        assert!(max_abs(&xt, &(&x0 * scale).unwrap()) < 1e-14);

        let zeros = x0.zeros_like().unwrap();
        let inv = s.ddim_invert(&zeros, &zero, &InversionOptions::default()).unwrap();
        assert_eq!(to_vec(&inv).unwrap(), vec![0.0; 16]);
    }

    /// `eps(x) = A x` over the flattened latent.
    struct Linear(Tensor);

    impl EpsilonModel for Linear {
        fn predict_eps(&self, x: &Tensor, _t: usize) -> Result<Tensor> {
            let flat = x.flatten_all()?.unsqueeze(1)?;
            Ok(self.0.matmul(&flat)?.reshape(x.shape())?)
        }
    }

    fn linear_model(n: usize, seed: u64) -> Linear {
        Linear((randn(&[n, n], seed) * (0.3 / (n as f64).sqrt())).unwrap())
    }

    #[test]
    fn lagged_inversion_is_approximate_refined_is_exact() {
        let s = sched(10);
        let x0 = randn(&[1, 4, 2, 2], 9);
        let model = linear_model(16, 10);
        let lagged = s.ddim_invert(&x0, &model, &InversionOptions::default()).unwrap();
        let lagged_err = max_abs(&s.ddim_sample(&lagged, &model).unwrap(), &x0);
        let exact = s.ddim_invert(&x0, &model, &InversionOptions::exact(1e-13)).unwrap();
        let exact_err = max_abs(&s.ddim_sample(&exact, &model).unwrap(), &x0);
        assert!(exact_err <= 1e-8, "{exact_err}");
        assert!(lagged_err > exact_err);
    }

    #[test]
    fn anderson_solves_contractive_map() {
        let target = randn(&[8], 11);
        let x0 = target.zeros_like().unwrap();
        let g = |x: &Tensor| -> Result<Tensor> { Ok(((x * 0.95)? + (&target * 0.05)?)?) };
        let (x, rep) = anderson(x0, g, &InversionOptions::exact(1e-12)).unwrap();
        assert!(max_abs(&x, &target) < 1e-10);
        assert!(rep.iterations < 20, "{rep:?}");
    }
}
