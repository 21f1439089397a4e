//! Expectation-propagation scheduler over the line-spectral factor graph.
//!
//! The graph has one frequency node `theta_n` and one amplitude node `x_n`
//! per candidate component, and one factor per observed row. Every
//! (component, row) pair is an edge carrying four messages: von Mises
//! messages for the frequency in both directions and Gaussian messages for
//! the amplitude in both directions. Rows are coupled to the measurement
//! channel through a Gaussian pseudo-measurement per row.
//!
//! Message arrays are stored row-major by component, `index = n * rows + m`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::bgprior::{bg_posterior, em_update_prior_with, BgPosterior, BgPrior, PI_MIN};
use crate::channels::{em_noise_variance, Channel, ChannelKind, ObservedRows, Sample};
use crate::circular::{
    bessel_ratios_upto, laplace_concentration_raw, moment_unchecked, vm_divide, VonMisesMsg, KAPPA_MAX,
};
use crate::init::InitResult;
use crate::metrics::{dnmse_db, nmse_db};
use crate::{Error, Result, VAR_MAX, VAR_MIN};

/// Gaussian message `CN(mean, var)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianMsg {
    pub mean: Complex64,
    pub var: f64,
}

impl GaussianMsg {
    pub const UNINFORMATIVE: GaussianMsg = GaussianMsg {
        mean: Complex64 { re: 0.0, im: 0.0 },
        var: VAR_MAX,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Cap on outer iterations.
    pub t_outer: usize,
    /// Cap on inner sweeps per outer iteration; `None` picks 1 for linear
    /// channels and 30 otherwise.
    pub t_inner: Option<usize>,
    /// Relative change of the reconstruction that ends the run.
    pub conv_tol: f64,
    /// Cap on inner sweeps summed over the whole run.
    pub max_total_iters: usize,
    /// Activation threshold for the model order.
    pub gamma: f64,
    pub pi_min: f64,
    pub var_min: f64,
    /// Early exit of the inner loop on the largest relative change of lambda.
    pub inner_stop_tol: f64,
    /// Below this `|lambda_{n->m}|` the amplitude message is uninformative.
    pub lambda_floor: f64,
    /// Newton steps in the frequency projection.
    pub newton_steps: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            t_outer: 2000,
            t_inner: None,
            conv_tol: 1e-6,
            max_total_iters: 2000,
            gamma: 0.5,
            pi_min: PI_MIN,
            var_min: VAR_MIN,
            inner_stop_tol: 1e-3,
            lambda_floor: 1e-8,
            newton_steps: 1,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("conv_tol", self.conv_tol),
            ("pi_min", self.pi_min),
            ("var_min", self.var_min),
            ("inner_stop_tol", self.inner_stop_tol),
            ("lambda_floor", self.lambda_floor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::input(format!("{name} must be positive, got {v}")));
            }
        }
        if self.t_outer == 0 || self.max_total_iters == 0 || self.t_inner == Some(0) {
            return Err(Error::input("iteration caps must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::input(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.pi_min >= 0.5 {
            return Err(Error::input("pi_min must be below 0.5"));
        }
        Ok(())
    }

    pub fn inner_cap(&self, channel: &Channel) -> usize {
        self.t_inner
            .unwrap_or(if channel.is_linear() { 1 } else { 30 })
    }
}

/// Output of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    /// Posterior mean direction of every candidate frequency.
    pub theta_hat: Vec<f64>,
    /// Posterior mean of every candidate amplitude.
    pub x_hat: Vec<Complex64>,
    pub lambda: Vec<f64>,
    pub k_hat: usize,
    /// Indices with activation prior above `gamma`.
    pub active_set: Vec<usize>,
    /// Reconstruction on the full grid from the active components.
    pub z_hat: Vec<Complex64>,
    pub sigma_w2_hat: f64,
    pub iterations: usize,
    pub total_sweeps: usize,
    pub converged: bool,
    /// Set when an iteration produced non-finite messages; the estimate is
    /// then taken from the last finite state.
    pub breakdown: bool,
}

impl Estimate {
    pub fn active_frequencies(&self) -> Vec<f64> {
        self.active_set.iter().map(|&n| self.theta_hat[n]).collect()
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub inner_sweeps: usize,
    pub rel_change: f64,
    pub k_hat: usize,
    pub sigma_w2: f64,
    pub nmse_db: Option<f64>,
    pub dnmse_db: Option<f64>,
    pub lambda: Vec<f64>,
    #[serde(skip)]
    pub z_hat: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub estimate: Estimate,
    pub trace: Vec<TraceRecord>,
}

/// Leave-one-out statistics of row `m` without component `n`.
#[derive(Debug, Clone, Copy, Default)]
struct Cavity {
    /// `sum_{l != n} E[e^{j p theta_l}] x_{l->m}`
    mean: Complex64,
    /// `sum_{l != n} sigma^2_{l->m}`
    amp_var: f64,
    /// `sum_{l != n} |x_{l->m}|^2 (1 - |E[e^{j p theta_l}]|^2)`
    phase_var: f64,
}

/// All messages of the factor graph.
#[derive(Debug, Clone)]
pub struct GraphState {
    pub n_comp: usize,
    /// Steering phase order (absolute row index) of every observed row.
    pub orders: Vec<u32>,
    pub full_len: usize,
    pub samples: Vec<Sample>,
    pub channel: Channel,
    pub theta_out: Vec<VonMisesMsg>,
    pub theta_in: Vec<VonMisesMsg>,
    pub x_out: Vec<GaussianMsg>,
    pub x_in: Vec<GaussianMsg>,
    /// `E[e^{j p theta}]` under `theta_in`, per edge.
    pub moment: Vec<Complex64>,
    pub za: Vec<Complex64>,
    pub va: Vec<f64>,
    pub zb: Vec<Complex64>,
    pub vb: Vec<f64>,
    pub theta_post: Vec<VonMisesMsg>,
    /// Combined amplitude pseudo-measurement `(r_n, sigma_n^2)`.
    pub x_combined: Vec<GaussianMsg>,
    pub posterior: Vec<BgPosterior>,
    pub prior: BgPrior,
    pub config: EngineConfig,
}

impl GraphState {
    /// Builds the graph with every edge carrying the initial messages.
    pub fn new(y: &ObservedRows, mut channel: Channel, init: &InitResult, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        init.validate()?;
        let n_comp = init.x0.len();
        let rows = y.len();
        if rows == 0 {
            return Err(Error::input("no observed rows"));
        }
        if n_comp == 0 {
            return Err(Error::input("at least one candidate component is required"));
        }
        if init.prior0.pi.len() != n_comp {
            return Err(Error::input("prior length differs from the number of components"));
        }
        for s in &y.samples {
            match (&channel.kind, s) {
                (ChannelKind::Awgn, Sample::Value(_)) | (ChannelKind::Quantized(_), Sample::Cell(_)) => {}
                _ => return Err(Error::input("sample type does not match the channel")),
            }
        }
        if channel.learn_noise {
            channel.sigma_w2 = init.sigma_w2_0.max(config.var_min);
        }
        let orders: Vec<u32> = y.indices.iter().map(|&r| r as u32).collect();
        let mut theta_in = Vec::with_capacity(n_comp * rows);
        let mut x_in = Vec::with_capacity(n_comp * rows);
        let mut theta_post = Vec::with_capacity(n_comp);
        for n in 0..n_comp {
            let msg = VonMisesMsg::new(init.mu0_msgs[n], init.kappa0[n])?.capped(KAPPA_MAX);
            let x = GaussianMsg {
                mean: init.x0[n],
                var: init.sx0[n].clamp(config.var_min, VAR_MAX),
            };
            theta_post.push(msg);
            for _ in 0..rows {
                theta_in.push(msg);
                x_in.push(x);
            }
        }
        let posterior = (0..n_comp)
            .map(|n| BgPosterior {
                lambda: init.prior0.pi[n],
                m: init.x0[n],
                v: init.sx0[n],
                mhat: init.x0[n],
                vhat: init.sx0[n],
            })
            .collect();
        let mut state = GraphState {
            n_comp,
            orders,
            full_len: y.full_len,
            samples: y.samples.clone(),
            channel,
            theta_out: vec![VonMisesMsg::UNIFORM; n_comp * rows],
            theta_in,
            x_out: vec![GaussianMsg::UNINFORMATIVE; n_comp * rows],
            x_in,
            moment: vec![Complex64::new(0.0, 0.0); n_comp * rows],
            za: vec![Complex64::new(0.0, 0.0); rows],
            va: vec![VAR_MAX; rows],
            zb: vec![Complex64::new(0.0, 0.0); rows],
            vb: vec![VAR_MAX; rows],
            theta_post,
            x_combined: init
                .x0
                .iter()
                .zip(&init.sx0)
                .map(|(&mean, &var)| GaussianMsg { mean, var })
                .collect(),
            posterior,
            prior: init.prior0.clone(),
            config,
        };
        for n in 0..n_comp {
            state.refresh_moments(n);
        }
        state.update_delta_to_z();
        Ok(state)
    }

    pub fn rows(&self) -> usize {
        self.orders.len()
    }

    #[inline]
    pub fn idx(&self, n: usize, m: usize) -> usize {
        n * self.orders.len() + m
    }

    fn refresh_moments(&mut self, n: usize) {
        for m in 0..self.rows() {
            let i = self.idx(n, m);
            self.moment[i] = moment_unchecked(&self.theta_in[i], self.orders[m]);
        }
    }

    fn cavity(&self, n: usize, m: usize) -> Cavity {
        let mut c = Cavity::default();
        for l in (0..self.n_comp).filter(|&l| l != n) {
            add_edge(&mut c, self.x_in[self.idx(l, m)], self.moment[self.idx(l, m)]);
        }
        c
    }

    /// Cavities of every row for component `n`, walking memory in order.
    fn cavities(&self, n: usize, out: &mut [Cavity]) {
        let rows = self.rows();
        out.iter_mut().for_each(|c| *c = Cavity::default());
        for l in (0..self.n_comp).filter(|&l| l != n) {
            let base = l * rows;
            let xs = &self.x_in[base..base + rows];
            let lams = &self.moment[base..base + rows];
            for ((c, &x), &lam) in out.iter_mut().zip(xs).zip(lams) {
                add_edge(c, x, lam);
            }
        }
    }

    /// Extrinsic pseudo-measurements from the channel, followed by the EM
    /// noise update when the channel learns its variance.
    pub fn update_z_to_delta(&mut self) -> Result<()> {
        let rows = self.rows();
        let mut z_post = Vec::with_capacity(rows);
        let mut v_post = Vec::with_capacity(rows);
        for m in 0..rows {
            let (z, v, post) = self.channel.extrinsic(&self.samples[m], self.za[m], self.va[m])?;
            self.zb[m] = z;
            self.vb[m] = v.clamp(self.config.var_min, VAR_MAX);
            z_post.push(post.mean);
            v_post.push(post.var);
        }
        if self.channel.learn_noise {
            let y_tilde: Vec<Complex64> = match self.channel.kind {
                ChannelKind::Awgn => self
                    .samples
                    .iter()
                    .map(|s| match s {
                        Sample::Value(v) => *v,
                        Sample::Cell(_) => unreachable!("checked at construction"),
                    })
                    .collect(),
                ChannelKind::Quantized(_) => self.zb.clone(),
            };
            let s2 = em_noise_variance(&y_tilde, &z_post, &v_post)?;
            self.channel.sigma_w2 = s2.clamp(self.config.var_min, VAR_MAX);
            if self.channel.is_linear() {
                self.vb.iter_mut().for_each(|v| *v = self.channel.sigma_w2);
            }
        }
        Ok(())
    }

    /// Frequency message from row `m` to component `n`.
    pub fn compute_theta_out(&self, n: usize, m: usize) -> Result<VonMisesMsg> {
        let cav = self.cavity(n, m);
        self.theta_out_with(n, m, &cav)
    }

    fn theta_out_with(&self, n: usize, m: usize, cav: &Cavity) -> Result<VonMisesMsg> {
        let p = self.orders[m];
        let i = self.idx(n, m);
        let x = self.x_in[i];
        if p == 0 || x.mean.norm_sqr() == 0.0 {
            return Ok(VonMisesMsg::UNIFORM);
        }
        let y_r = self.zb[m] - cav.mean;
        let var_z = cav.amp_var + x.var + cav.phase_var;
        let amp = 2.0 * (y_r.norm_sqr() * x.mean.norm_sqr()).sqrt() / (self.vb[m] + var_z);
        if !(amp > 0.0 && amp.is_finite()) {
            return Ok(VonMisesMsg::UNIFORM);
        }
        // Work in offsets d from the incoming mean: the data term's phase
        // e^{j(p t + phi)} is w0 e^{j p d}, the incoming term's is e^{j d}.
        let incoming = self.theta_in[i];
        let kappa = incoming.kappa();
        let u = if kappa > 0.0 { incoming.eta / kappa } else { Complex64::new(1.0, 0.0) };
        let pf = p as f64;
        let w0 = u.powu(p) * x.mean * y_r.conj() / (x.mean.norm() * y_r.norm());
        let derivs = |d: f64| {
            let w = if d == 0.0 { w0 } else { w0 * Complex64::cis(pf * d) };
            let (sd, cd) = d.sin_cos();
            (amp * pf * w.im + kappa * sd, amp * pf * pf * w.re + kappa * cd)
        };
        let mut d = 0.0;
        for _ in 0..self.config.newton_steps {
            let (g1, g2) = derivs(d);
            if !(g1.is_finite() && g2.is_finite()) {
                return Err(Error::numeric(format!("non-finite frequency derivatives on edge ({n}, {m})")));
            }
            if g2 <= 0.0 {
                return Ok(VonMisesMsg::UNIFORM);
            }
            d -= g1 / g2;
        }
        let curvature = derivs(d).1;
        if !curvature.is_finite() {
            return Err(Error::numeric(format!("non-finite frequency curvature on edge ({n}, {m})")));
        }
        if curvature <= 0.0 {
            return Ok(VonMisesMsg::UNIFORM);
        }
        let projected = VonMisesMsg {
            eta: u * Complex64::cis(d) * laplace_concentration_raw(curvature)?,
        };
        Ok(vm_divide(projected, incoming).capped(KAPPA_MAX))
    }

    /// Frequency posterior of `n` and the leave-one-out messages to every row.
    pub fn combine_theta_in(&mut self, n: usize) {
        let rows = self.rows();
        let base = self.idx(n, 0);
        let total: Complex64 = self.theta_out[base..base + rows].iter().map(|msg| msg.eta).sum();
        self.theta_post[n] = VonMisesMsg::from_natural(total).capped(KAPPA_MAX);
        for m in 0..rows {
            let eta = total - self.theta_out[base + m].eta;
            self.theta_in[base + m] = VonMisesMsg::from_natural(eta).capped(KAPPA_MAX);
        }
        self.refresh_moments(n);
    }

    /// Amplitude message from row `m` to component `n`.
    pub fn compute_x_out(&self, n: usize, m: usize) -> GaussianMsg {
        let cav = self.cavity(n, m);
        self.x_out_with(n, m, &cav)
    }

    fn x_out_with(&self, n: usize, m: usize, cav: &Cavity) -> GaussianMsg {
        let lam = self.moment[self.idx(n, m)];
        let lam2 = lam.norm_sqr();
        if lam2 < self.config.lambda_floor * self.config.lambda_floor {
            return GaussianMsg::UNINFORMATIVE;
        }
        let mean = (self.zb[m] - cav.mean) / lam;
        let spread = (1.0 - lam2).max(0.0);
        let var = (spread * mean.norm_sqr() + cav.amp_var + cav.phase_var + self.vb[m]) / lam2;
        if !(mean.re.is_finite() && mean.im.is_finite() && var.is_finite()) {
            return GaussianMsg::UNINFORMATIVE;
        }
        GaussianMsg {
            mean,
            var: var.clamp(self.config.var_min, VAR_MAX),
        }
    }

    /// Amplitude posterior of `n` under the spike-and-slab prior and the
    /// extrinsic messages back to every row.
    pub fn combine_x_in(&mut self, n: usize) -> Result<()> {
        let rows = self.rows();
        let base = self.idx(n, 0);
        let mut prec = 0.0;
        let mut weighted = Complex64::new(0.0, 0.0);
        for msg in &self.x_out[base..base + rows] {
            prec += 1.0 / msg.var;
            weighted += msg.mean / msg.var;
        }
        let s2 = (1.0 / prec).clamp(self.config.var_min, VAR_MAX);
        let r = weighted * s2;
        self.x_combined[n] = GaussianMsg { mean: r, var: s2 };
        let mut post = bg_posterior(r, s2, &self.prior, n)?;
        post.vhat = post.vhat.max(self.config.var_min);
        self.posterior[n] = post;
        for m in 0..rows {
            let out = self.x_out[base + m];
            let pe = 1.0 / post.vhat - 1.0 / out.var;
            self.x_in[base + m] = if pe > 0.0 && pe.is_finite() {
                let var = 1.0 / pe;
                GaussianMsg {
                    mean: (post.mhat / post.vhat - out.mean / out.var) * var,
                    var: var.clamp(self.config.var_min, VAR_MAX),
                }
            } else {
                GaussianMsg {
                    mean: post.mhat,
                    var: VAR_MAX,
                }
            };
        }
        Ok(())
    }

    /// Gaussian belief about every observed noiseless sample.
    pub fn update_delta_to_z(&mut self) {
        for m in 0..self.rows() {
            let mut mean = Complex64::new(0.0, 0.0);
            let mut var = 0.0;
            for l in 0..self.n_comp {
                let i = self.idx(l, m);
                let x = self.x_in[i];
                let lam = self.moment[i];
                mean += lam * x.mean;
                var += x.var + x.mean.norm_sqr() * (1.0 - lam.norm_sqr()).max(0.0);
            }
            self.za[m] = mean;
            self.va[m] = var.clamp(self.config.var_min, VAR_MAX);
        }
    }

    /// Components ordered by decreasing activation, ties by amplitude.
    fn sweep_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_comp).collect();
        order.sort_by(|&a, &b| {
            let (pa, pb) = (&self.posterior[a], &self.posterior[b]);
            pb.lambda
                .total_cmp(&pa.lambda)
                .then(pb.mhat.norm_sqr().total_cmp(&pa.mhat.norm_sqr()))
        });
        order
    }

    /// One pass over every component followed by the prior update.
    pub fn sweep(&mut self) -> Result<()> {
        let rows = self.rows();
        let mut cavities = vec![Cavity::default(); rows];
        for n in self.sweep_order() {
            self.cavities(n, &mut cavities);
            for m in 0..rows {
                let i = self.idx(n, m);
                self.theta_out[i] = self.theta_out_with(n, m, &cavities[m])?;
            }
            self.combine_theta_in(n);
            for m in 0..rows {
                let i = self.idx(n, m);
                self.x_out[i] = self.x_out_with(n, m, &cavities[m]);
            }
            self.combine_x_in(n)?;
        }
        let update = em_update_prior_with(&self.posterior, &self.prior, self.config.pi_min, self.config.var_min);
        self.prior = update.prior;
        Ok(())
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.posterior.iter().map(|p| p.lambda).collect()
    }

    pub fn active_set(&self) -> Vec<usize> {
        (0..self.n_comp)
            .filter(|&n| self.prior.pi[n] > self.config.gamma)
            .collect()
    }

    /// `sum_{n active} mhat_n E[e^{j r theta_n}]` for every row `r` of the full grid.
    pub fn reconstruct(&self) -> Result<Vec<Complex64>> {
        let mut z = vec![Complex64::new(0.0, 0.0); self.full_len];
        let max_order = self.full_len.saturating_sub(1) as u32;
        for n in self.active_set() {
            let post = self.theta_post[n];
            let ratios = bessel_ratios_upto(max_order, post.kappa())?;
            let mu = post.mu();
            let amp = self.posterior[n].mhat;
            for (r, zr) in z.iter_mut().enumerate() {
                *zr += amp * Complex64::from_polar(ratios[r], r as f64 * mu);
            }
        }
        Ok(z)
    }

    /// True when every pseudo-measurement and combined amplitude is finite.
    pub fn is_finite(&self) -> bool {
        self.za.iter().all(|z| z.re.is_finite() && z.im.is_finite())
            && self.va.iter().all(|v| v.is_finite())
            && self
                .x_combined
                .iter()
                .all(|x| x.mean.re.is_finite() && x.mean.im.is_finite() && x.var.is_finite())
    }

    pub fn estimate(&self, iterations: usize, total_sweeps: usize, converged: bool) -> Result<Estimate> {
        let active_set = self.active_set();
        Ok(Estimate {
            theta_hat: self.theta_post.iter().map(|t| t.mu()).collect(),
            x_hat: self.posterior.iter().map(|p| p.mhat).collect(),
            lambda: self.lambdas(),
            k_hat: active_set.len(),
            z_hat: self.reconstruct()?,
            active_set,
            sigma_w2_hat: self.channel.sigma_w2,
            iterations,
            total_sweeps,
            converged,
            breakdown: false,
        })
    }
}

#[inline]
fn add_edge(c: &mut Cavity, x: GaussianMsg, lam: Complex64) {
    c.mean += lam * x.mean;
    c.amp_var += x.var;
    c.phase_var += x.mean.norm_sqr() * (1.0 - lam.norm_sqr()).max(0.0);
}

fn max_relative_change(old: &[f64], new: &[f64], floor: f64) -> f64 {
    old.iter()
        .zip(new)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn relative_change(prev: &[Complex64], cur: &[Complex64]) -> f64 {
    let diff: f64 = prev.iter().zip(cur).map(|(a, b)| (a - b).norm_sqr()).sum();
    let norm: f64 = cur.iter().map(|c| c.norm_sqr()).sum();
    if norm > 0.0 {
        (diff / norm).sqrt()
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Runs the estimator to convergence or to the iteration caps.
///
/// When `truth` (the clean full-grid signal) is given, the trace carries
/// per-iteration error figures.
pub fn run(
    y: &ObservedRows,
    channel: Channel,
    config: &EngineConfig,
    init: &InitResult,
    truth: Option<&[Complex64]>,
) -> Result<RunOutput> {
    if let Some(t) = truth {
        if t.len() != y.full_len {
            return Err(Error::input("truth length differs from the full grid"));
        }
    }
    let mut state = GraphState::new(y, channel, init, config.clone())?;
    let inner_cap = config.inner_cap(&state.channel);
    let mut trace = Vec::new();
    let mut z_prev = state.reconstruct()?;
    let mut total = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;
    let mut last_good = state.clone();
    let mut breakdown = false;
    while iterations < config.t_outer && total < config.max_total_iters {
        iterations += 1;
        state.update_z_to_delta()?;
        let mut sweeps = 0;
        while sweeps < inner_cap && total < config.max_total_iters {
            let before = state.lambdas();
            if let Err(e) = state.sweep() {
                if state.is_finite() {
                    return Err(e);
                }
                break;
            }
            sweeps += 1;
            total += 1;
            let change = max_relative_change(&before, &state.lambdas(), config.pi_min);
            if change < config.inner_stop_tol {
                break;
            }
        }
        state.update_delta_to_z();
        if !state.is_finite() {
            log::warn!("non-finite messages at iteration {iterations}; keeping the previous state");
            state = last_good;
            iterations -= 1;
            breakdown = true;
            break;
        }
        let z_hat = state.reconstruct()?;
        let rel = relative_change(&z_prev, &z_hat);
        let (nmse, dnmse) = match truth {
            Some(t) => (Some(nmse_db(&z_hat, t)?), Some(dnmse_db(&z_hat, t)?)),
            None => (None, None),
        };
        trace.push(TraceRecord {
            iteration: iterations,
            inner_sweeps: sweeps,
            rel_change: rel,
            k_hat: state.active_set().len(),
            sigma_w2: state.channel.sigma_w2,
            nmse_db: nmse,
            dnmse_db: dnmse,
            lambda: state.lambdas(),
            z_hat: z_hat.clone(),
        });
        z_prev = z_hat;
        if rel < config.conv_tol {
            converged = true;
            break;
        }
        last_good.clone_from(&state);
    }
    if !converged {
        log::debug!("stopped after {iterations} iterations without convergence");
    }
    let mut estimate = state.estimate(iterations, total, converged)?;
    estimate.breakdown = breakdown;
    Ok(RunOutput { estimate, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bgprior::BgPrior;
    use crate::circular::{bessel_ratio, circular_moment, laplace_concentration, vm_multiply, wrap_angle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_state(n_comp: usize, rows: usize, seed: u64) -> GraphState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<Complex64> = (0..rows)
            .map(|_| c(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        let init = InitResult {
            x0: (0..n_comp)
                .map(|_| c(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
                .collect(),
            sx0: (0..n_comp).map(|_| rng.random_range(0.05..0.5)).collect(),
            mu0_msgs: (0..n_comp).map(|_| rng.random_range(-PI..PI)).collect(),
            kappa0: (0..n_comp).map(|_| rng.random_range(5.0..200.0)).collect(),
            sigma_w2_0: 0.3,
            prior0: BgPrior::uniform(n_comp, 0.5, c(0.0, 0.0), 1.0).unwrap(),
        };
        let ch = Channel::awgn(0.3, false).unwrap();
        let mut st = GraphState::new(&ObservedRows::complete(&y), ch, &init, EngineConfig::default()).unwrap();
        st.update_z_to_delta().unwrap();
        st
    }

    fn value(s: &Sample) -> Complex64 {
        match s {
            Sample::Value(v) => *v,
            Sample::Cell(_) => unreachable!(),
        }
    }

    #[test]
    fn flat_belief_returns_the_likelihood() {
        let mut st = random_state(2, 5, 1);
        st.za.iter_mut().for_each(|z| *z = c(0.3, -0.2));
        st.va.iter_mut().for_each(|v| *v = VAR_MAX);
        st.update_z_to_delta().unwrap();
        for m in 0..5 {
            assert_eq!(st.zb[m], value(&st.samples[m]));
            assert_eq!(st.vb[m], 0.3);
        }
    }

    #[test]
    fn awgn_extrinsic_precisions_add_up() {
        let st = random_state(3, 7, 2);
        for m in 0..7 {
            let post = st.channel.posterior_moments(&st.samples[m], st.za[m], st.va[m]).unwrap();
            let lhs = 1.0 / st.vb[m] + 1.0 / st.va[m];
            assert!((lhs * post.var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_amplitude_carries_no_frequency_information() {
        let mut st = random_state(2, 4, 3);
        let i = st.idx(0, 2);
        st.x_in[i].mean = c(0.0, 0.0);
        assert!(st.compute_theta_out(0, 2).unwrap().is_uniform());
    }

    #[test]
    fn single_sinusoid_projects_onto_its_frequency() {
        let theta = 0.8123;
        let x = c(1.1, -0.4);
        let y = ObservedRows::new(2, vec![1], vec![Sample::Value(x * Complex64::from_polar(1.0, theta))]).unwrap();
        let init = InitResult {
            x0: vec![x],
            sx0: vec![1e-6],
            mu0_msgs: vec![theta + 0.01],
            kappa0: vec![1e-6],
            sigma_w2_0: 1e-3,
            prior0: BgPrior::uniform(1, 0.5, c(0.0, 0.0), 1.0).unwrap(),
        };
        let ch = Channel::awgn(1e-3, false).unwrap();
        let mut st = GraphState::new(&y, ch, &init, EngineConfig::default()).unwrap();
        st.update_z_to_delta().unwrap();
        let out = st.compute_theta_out(0, 0).unwrap();
        let projected = vm_multiply(out, st.theta_in[0]);
        assert!(wrap_angle(projected.mu() - theta).abs() < 1e-6);
    }

    /// Log-density of the frequency pseudo-likelihood times the incoming message.
    fn theta_objective(st: &GraphState, n: usize, m: usize) -> impl Fn(f64) -> f64 {
        let p = st.orders[m];
        let mut cav_mean = c(0.0, 0.0);
        let mut var_z = 0.0;
        for l in 0..st.n_comp {
            let i = st.idx(l, m);
            let x = st.x_in[i];
            var_z += x.var;
            if l != n {
                let rho = bessel_ratio(p, st.theta_in[i].kappa()).unwrap();
                cav_mean += circular_moment(&st.theta_in[i], p).unwrap() * x.mean;
                var_z += x.mean.norm_sqr() * (1.0 - rho * rho);
            }
        }
        let i = st.idx(n, m);
        let x = st.x_in[i];
        let yr = st.zb[m] - cav_mean;
        let amp = 2.0 * (yr * x.mean.conj()).norm() / (st.vb[m] + var_z);
        let phase = x.mean.arg() - yr.arg();
        let (kappa, mu) = (st.theta_in[i].kappa(), st.theta_in[i].mu());
        let pf = p as f64;
        move |t: f64| amp * (pf * t + phase).cos() + kappa * (t - mu).cos()
    }

    #[test]
    fn theta_projection_matches_grid_oracle() {
        let mut checked = 0;
        for seed in 0..40 {
            let st = random_state(2, 4, 100 + seed);
            let (n, m) = (0, 1 + (seed as usize % 3));
            let f = theta_objective(&st, n, m);
            let mu = st.theta_in[st.idx(n, m)].mu();
            let grid = 1_000_000;
            let h = 2.0 * PI / grid as f64;
            // climb from the grid point nearest mu to the local maximum
            let mut g = ((wrap_angle(mu) + PI) / h).round() as i64;
            let at = |g: i64| f(-PI + g as f64 * h);
            loop {
                if at(g + 1) > at(g) {
                    g += 1;
                } else if at(g - 1) > at(g) {
                    g -= 1;
                } else {
                    break;
                }
            }
            let mode = -PI + g as f64 * h;
            let d = 1e-4;
            let curv = -(f(mode + d) - 2.0 * f(mode) + f(mode - d)) / (d * d);
            if wrap_angle(mode - mu).abs() > 0.05 || curv <= 0.0 {
                // the single Newton step only promises the nearby basin
                continue;
            }
            let out = st.compute_theta_out(n, m).unwrap();
            let projected = vm_multiply(out, st.theta_in[st.idx(n, m)]);
            let kappa = laplace_concentration(curv).unwrap();
            assert!(wrap_angle(projected.mu() - mode).abs() < 1e-3, "seed {seed}");
            assert!((projected.kappa() - kappa).abs() / kappa < 1e-3, "seed {seed}");
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} instances in the basin");
    }

    #[test]
    fn theta_combination_is_leave_one_out() {
        let mut st = random_state(2, 2, 4);
        st.theta_out[0] = VonMisesMsg::new(0.4, 3.0).unwrap();
        st.theta_out[1] = VonMisesMsg::new(-1.2, 7.0).unwrap();
        st.combine_theta_in(0);
        assert!((st.theta_in[0].eta - st.theta_out[1].eta).norm() < 1e-14);
        assert!((st.theta_in[1].eta - st.theta_out[0].eta).norm() < 1e-14);

        let mut st = random_state(3, 6, 5);
        for m in 0..6 {
            let i = st.idx(1, m);
            st.theta_out[i] = st.compute_theta_out(1, m).unwrap();
        }
        st.combine_theta_in(1);
        for m in 0..6 {
            let i = st.idx(1, m);
            let diff = st.theta_post[1].eta - st.theta_in[i].eta - st.theta_out[i].eta;
            assert!(diff.norm() < 1e-10 * st.theta_post[1].kappa().max(1.0));
        }

        let mut st = random_state(1, 3, 6);
        st.theta_out.iter_mut().for_each(|t| *t = VonMisesMsg::UNIFORM);
        st.combine_theta_in(0);
        assert!(st.theta_in.iter().all(|t| t.is_uniform()));
        assert!(st.theta_post[0].is_uniform());
    }

    #[test]
    fn known_frequency_amplitude_message() {
        let mut st = random_state(1, 4, 7);
        let mu = 0.37;
        st.theta_in.iter_mut().for_each(|t| *t = VonMisesMsg::new(mu, KAPPA_MAX).unwrap());
        st.refresh_moments(0);
        for m in 1..4 {
            let out = st.compute_x_out(0, m);
            let p = st.orders[m] as f64;
            let expect = st.zb[m] * Complex64::from_polar(1.0, -p * mu);
            assert!((out.mean - expect).norm() < 1e-5 * expect.norm().max(1.0));
            assert!((out.var - st.vb[m]).abs() < 1e-5 * st.vb[m].max(1.0));
        }
    }

    #[test]
    fn flat_frequency_gives_uninformative_amplitude() {
        let mut st = random_state(2, 4, 8);
        let i = st.idx(0, 2);
        st.theta_in[i] = VonMisesMsg::UNIFORM;
        st.refresh_moments(0);
        assert_eq!(st.compute_x_out(0, 2), GaussianMsg::UNINFORMATIVE);
    }

    #[test]
    fn amplitude_messages_respect_the_clamp() {
        for seed in 0..20 {
            let st = random_state(3, 5, 200 + seed);
            for n in 0..3 {
                for m in 0..5 {
                    let v = st.compute_x_out(n, m).var;
                    assert!((VAR_MIN..=VAR_MAX).contains(&v));
                }
            }
        }
    }

    #[test]
    fn single_edge_extrinsic_is_the_prior() {
        let mut st = random_state(1, 1, 9);
        st.prior = BgPrior::new(vec![1.0], c(0.2, -0.1), 0.7).unwrap();
        st.x_out[0] = GaussianMsg { mean: c(1.3, 0.4), var: 0.25 };
        st.combine_x_in(0).unwrap();
        assert!((st.x_in[0].mean - c(0.2, -0.1)).norm() < 1e-12);
        assert!((st.x_in[0].var - 0.7).abs() < 1e-12);
    }

    #[test]
    fn identical_edges_halve_the_variance() {
        let mut st = random_state(1, 2, 10);
        let msg = GaussianMsg { mean: c(0.9, -0.6), var: 0.4 };
        st.x_out[0] = msg;
        st.x_out[1] = msg;
        st.combine_x_in(0).unwrap();
        assert!((st.x_combined[0].mean - msg.mean).norm() < 1e-15);
        assert!((st.x_combined[0].var - 0.2).abs() < 1e-15);
    }

    #[test]
    fn amplitude_extrinsics_recombine_to_the_posterior() {
        for seed in 0..10 {
            let mut st = random_state(2, 6, 300 + seed);
            for m in 0..6 {
                let i = st.idx(0, m);
                st.x_out[i] = st.compute_x_out(0, m);
            }
            st.combine_x_in(0).unwrap();
            let post = st.posterior[0];
            for m in 0..6 {
                let (inn, out) = (st.x_in[st.idx(0, m)], st.x_out[st.idx(0, m)]);
                if inn.var >= VAR_MAX || out.var >= VAR_MAX {
                    continue;
                }
                let prec = 1.0 / inn.var + 1.0 / out.var;
                let mean = (inn.mean / inn.var + out.mean / out.var) / prec;
                assert!((prec * post.vhat - 1.0).abs() < 1e-10);
                assert!((mean - post.mhat).norm() < 1e-10 * post.mhat.norm().max(1.0));
            }
        }
    }

    #[test]
    fn point_mass_messages_reconstruct_exactly() {
        let mut st = random_state(2, 5, 11);
        let mus = [0.3, -1.9];
        for n in 0..2 {
            for m in 0..5 {
                let i = st.idx(n, m);
                st.theta_in[i] = VonMisesMsg::new(mus[n], KAPPA_MAX).unwrap();
                st.x_in[i].var = VAR_MIN;
            }
            st.refresh_moments(n);
        }
        st.update_delta_to_z();
        for m in 0..5 {
            let p = st.orders[m] as f64;
            let expect: Complex64 = (0..2)
                .map(|n| st.x_in[st.idx(n, 0)].mean * Complex64::from_polar(1.0, p * mus[n]))
                .sum();
            assert!((st.za[m] - expect).norm() < 1e-5);
            assert!(st.va[m] < 1e-5);
        }

        st.x_in.iter_mut().for_each(|x| x.mean = c(0.0, 0.0));
        st.update_delta_to_z();
        for m in 0..5 {
            assert_eq!(st.za[m], c(0.0, 0.0));
            let total: f64 = (0..2).map(|n| st.x_in[st.idx(n, m)].var).sum();
            assert!((st.va[m] - total).abs() <= 1e-15 * total.max(1.0));
        }
    }

    #[test]
    fn single_component_moments_match_quadrature() {
        let st = random_state(1, 6, 12);
        for m in 0..6 {
            let p = st.orders[m] as f64;
            let msg = st.theta_in[m];
            let (kappa, mu) = (msg.kappa(), msg.mu());
            let grid = 200_000;
            let h = 2.0 * PI / grid as f64;
            let (mut w, mut e) = (0.0, c(0.0, 0.0));
            for g in 0..grid {
                let t = -PI + g as f64 * h;
                let d = (kappa * ((t - mu).cos() - 1.0)).exp();
                w += d;
                e += Complex64::from_polar(d, p * t);
            }
            let moment = e / w;
            let x = st.x_in[m];
            let mean = moment * x.mean;
            let var = x.var + x.mean.norm_sqr() * (1.0 - moment.norm_sqr());
            assert!((st.za[m] - mean).norm() < 1e-10);
            assert!((st.va[m] - var).abs() < 1e-10);
        }
    }

    #[test]
    fn state_invariants_hold_after_sweeps() {
        let mut st = random_state(4, 9, 13);
        for _ in 0..5 {
            st.update_z_to_delta().unwrap();
            st.sweep().unwrap();
            st.update_delta_to_z();
            let cfg = &st.config;
            for msg in st.x_in.iter().chain(&st.x_out).chain(&st.x_combined) {
                assert!((cfg.var_min..=VAR_MAX).contains(&msg.var));
            }
            for v in st.va.iter().chain(&st.vb) {
                assert!((cfg.var_min..=VAR_MAX).contains(v));
            }
            for t in st.theta_in.iter().chain(&st.theta_out).chain(&st.theta_post) {
                assert!((0.0..=KAPPA_MAX).contains(&t.kappa()));
            }
            assert!(st.posterior.iter().all(|p| (0.0..=1.0).contains(&p.lambda)));
            assert!(st.prior.pi.iter().all(|&p| p >= cfg.pi_min && p <= 1.0 - cfg.pi_min));
        }
    }

    #[test]
    fn config_validation() {
        assert!(EngineConfig::default().validate().is_ok());
        let bad = [
            EngineConfig { gamma: 1.0, ..Default::default() },
            EngineConfig { conv_tol: 0.0, ..Default::default() },
            EngineConfig { t_inner: Some(0), ..Default::default() },
            EngineConfig { pi_min: 0.6, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err());
        }
        let q = crate::channels::Quantizer::new(2, 1.0).unwrap();
        let cfg = EngineConfig::default();
        assert_eq!(cfg.inner_cap(&Channel::awgn(1.0, true).unwrap()), 1);
        assert_eq!(cfg.inner_cap(&Channel::quantized(q, 1.0, true).unwrap()), 30);
    }

    #[test]
    fn relative_change_edge_cases() {
        assert_eq!(relative_change(&[c(0.0, 0.0)], &[c(0.0, 0.0)]), 0.0);
        assert_eq!(relative_change(&[c(1.0, 0.0)], &[c(0.0, 0.0)]), f64::INFINITY);
        assert!((relative_change(&[c(1.0, 0.0)], &[c(2.0, 0.0)]) - 0.5).abs() < 1e-15);
        assert_eq!(max_relative_change(&[0.0], &[1e-4], 1e-2), 1e-2);
    }
}
