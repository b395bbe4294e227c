//! No-U-turn transition kernel with multinomial trajectory sampling.
//!
//! The implementation follows Hoffman and Gelman (2014) with the later
//! refinements that shipped in mainstream HMC engines: multinomial draws
//! weighted by the Boltzmann factor instead of slice sampling, a
//! generalized U-turn criterion on accumulated momentum, and the extra
//! boundary checks when subtrees merge. Step size adapts by dual
//! averaging; the diagonal mass matrix is estimated by the caller (see
//! the sampler module) and enters through its inverse.

use rand::Rng;
use rand_distr::StandardNormal;

/// Differentiable unnormalised log density.
///
/// Implementations return the log density at `position` and write its
/// gradient into `grad`. Out-of-support points must return negative
/// infinity; the kernel then treats the step as divergent and never
/// reads the gradient.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn logp_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;
}

/// Position, momentum, cached gradient and log density: one point of the
/// simulated Hamiltonian flow.
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub position: Vec<f64>,
    pub momentum: Vec<f64>,
    pub gradient: Vec<f64>,
    pub logp: f64,
}

impl PhaseState {
    /// Evaluates the target at `position` to seed the cached fields.
    pub fn new(target: &dyn Target, position: Vec<f64>, momentum: Vec<f64>) -> Self {
        let mut gradient = vec![0.0; position.len()];
        let logp = target.logp_grad(&position, &mut gradient);
        Self {
            position,
            momentum,
            gradient,
            logp,
        }
    }
}

/// Kinetic energy `p' M^{-1} p / 2` for a diagonal inverse mass.
pub fn kinetic_energy(momentum: &[f64], inv_mass: &[f64]) -> f64 {
    momentum
        .iter()
        .zip(inv_mass)
        .map(|(p, m)| 0.5 * m * p * p)
        .sum()
}

/// Total energy (negative log joint) of a phase-space point.
pub fn hamiltonian(state: &PhaseState, inv_mass: &[f64]) -> f64 {
    -state.logp + kinetic_energy(&state.momentum, inv_mass)
}

/// One leapfrog step of size `eps` (signed; negative integrates the flow
/// backwards). Updates the state in place, including the cached gradient
/// and log density.
pub fn leapfrog(target: &dyn Target, state: &mut PhaseState, eps: f64, inv_mass: &[f64]) {
    let half = 0.5 * eps;
    for (p, g) in state.momentum.iter_mut().zip(&state.gradient) {
        *p += half * g;
    }
    for ((q, p), m) in state
        .position
        .iter_mut()
        .zip(&state.momentum)
        .zip(inv_mass)
    {
        *q += eps * m * p;
    }
    state.logp = target.logp_grad(&state.position, &mut state.gradient);
    if !state.logp.is_finite() {
        // Divergent: leave the momentum half-updated, the energy check
        // rejects this state before the gradient is ever used.
        return;
    }
    for (p, g) in state.momentum.iter_mut().zip(&state.gradient) {
        *p += half * g;
    }
}

/// Energy error beyond which a transition is declared divergent.
const DIVERGENCE_ENERGY: f64 = 1000.0;

/// Generalized U-turn test: the trajectory keeps extending while the
/// summed momentum `rho` points forward at both ends.
fn no_u_turn(p_sharp_beg: &[f64], p_sharp_end: &[f64], rho: &[f64]) -> bool {
    let dot_beg: f64 = rho.iter().zip(p_sharp_beg).map(|(r, p)| r * p).sum();
    let dot_end: f64 = rho.iter().zip(p_sharp_end).map(|(r, p)| r * p).sum();
    dot_beg > 0.0 && dot_end > 0.0
}

fn p_sharp(momentum: &[f64], inv_mass: &[f64]) -> Vec<f64> {
    momentum.iter().zip(inv_mass).map(|(p, m)| p * m).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

/// One balanced subtree, carried in integration order: `beg` is the end
/// facing the existing trajectory, `end` the outermost state.
struct Subtree {
    /// Outermost phase point, the launchpad for further integration.
    z_end: PhaseState,
    /// Summed momentum across the subtree's states.
    rho: Vec<f64>,
    p_raw_beg: Vec<f64>,
    p_raw_end: Vec<f64>,
    p_sharp_beg: Vec<f64>,
    p_sharp_end: Vec<f64>,
    propose_position: Vec<f64>,
    propose_logp: f64,
    log_sum_weight: f64,
}

struct TreeContext<'a, R: Rng> {
    target: &'a dyn Target,
    rng: &'a mut R,
    inv_mass: &'a [f64],
    /// Signed step: sign encodes the growth direction.
    eps: f64,
    h0: f64,
    sum_accept: f64,
    n_leapfrog: usize,
    divergent: bool,
}

impl<'a, R: Rng> TreeContext<'a, R> {
    /// Builds a subtree of `2^depth` states beyond `from`. `None` means
    /// the subtree contains a divergence or an internal U-turn and the
    /// whole doubling must be discarded.
    fn build(&mut self, depth: usize, from: &PhaseState) -> Option<Subtree> {
        if depth == 0 {
            let mut z = from.clone();
            leapfrog(self.target, &mut z, self.eps, self.inv_mass);
            self.n_leapfrog += 1;
            let h = hamiltonian(&z, self.inv_mass);
            let delta = self.h0 - h;
            // `!(>=)` instead of `<` so NaN energies count as divergent.
            if !(delta >= -DIVERGENCE_ENERGY) {
                self.divergent = true;
                return None;
            }
            self.sum_accept += delta.min(0.0).exp();
            let sharp = p_sharp(&z.momentum, self.inv_mass);
            Some(Subtree {
                rho: z.momentum.clone(),
                p_raw_beg: z.momentum.clone(),
                p_raw_end: z.momentum.clone(),
                p_sharp_beg: sharp.clone(),
                p_sharp_end: sharp,
                propose_position: z.position.clone(),
                propose_logp: z.logp,
                log_sum_weight: delta,
                z_end: z,
            })
        } else {
            let inner = self.build(depth - 1, from)?;
            let outer = self.build(depth - 1, &inner.z_end)?;

            let log_sum_weight = log_sum_exp(inner.log_sum_weight, outer.log_sum_weight);
            let take_outer = {
                let t = (outer.log_sum_weight - log_sum_weight).exp();
                self.rng.random::<f64>() < t
            };
            let (propose_position, propose_logp) = if take_outer {
                (outer.propose_position, outer.propose_logp)
            } else {
                (inner.propose_position, inner.propose_logp)
            };

            let rho = add(&inner.rho, &outer.rho);
            // Full-span check plus the two joins that include the
            // boundary momentum of the neighbouring half.
            let ok = no_u_turn(&inner.p_sharp_beg, &outer.p_sharp_end, &rho)
                && no_u_turn(
                    &inner.p_sharp_beg,
                    &outer.p_sharp_beg,
                    &add(&inner.rho, &outer.p_raw_beg),
                )
                && no_u_turn(
                    &inner.p_sharp_end,
                    &outer.p_sharp_end,
                    &add(&outer.rho, &inner.p_raw_end),
                );
            if !ok {
                return None;
            }
            Some(Subtree {
                z_end: outer.z_end,
                rho,
                p_raw_beg: inner.p_raw_beg,
                p_raw_end: outer.p_raw_end,
                p_sharp_beg: inner.p_sharp_beg,
                p_sharp_end: outer.p_sharp_end,
                propose_position,
                propose_logp,
                log_sum_weight,
            })
        }
    }
}

/// Outcome of one no-U-turn transition.
#[derive(Debug, Clone)]
pub struct Transition {
    pub position: Vec<f64>,
    pub logp: f64,
    /// Mean Metropolis statistic over the trajectory, the dual-averaging
    /// input.
    pub accept_stat: f64,
    pub divergent: bool,
    pub depth: usize,
    pub n_leapfrog: usize,
}

/// Runs one transition from `position` (whose log density must be
/// finite). Draws a momentum, grows the trajectory by doubling until a
/// U-turn, divergence or `max_depth`, and samples a state multinomially.
pub fn transition<R: Rng>(
    target: &dyn Target,
    rng: &mut R,
    position: &[f64],
    eps: f64,
    inv_mass: &[f64],
    max_depth: usize,
) -> Transition {
    let dim = target.dim();
    debug_assert_eq!(position.len(), dim);
    let momentum: Vec<f64> = inv_mass
        .iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            z / m.sqrt()
        })
        .collect();
    let z0 = PhaseState::new(target, position.to_vec(), momentum);
    let h0 = hamiltonian(&z0, inv_mass);

    let mut sample_position = z0.position.clone();
    let mut sample_logp = z0.logp;
    let mut log_sum_weight = 0.0f64;

    let sharp0 = p_sharp(&z0.momentum, inv_mass);
    let mut rho = z0.momentum.clone();
    let mut sharp_bck = sharp0.clone();
    let mut sharp_fwd = sharp0;
    let mut raw_bck = z0.momentum.clone();
    let mut raw_fwd = z0.momentum.clone();
    let mut z_bck = z0.clone();
    let mut z_fwd = z0;

    let mut divergent = false;
    let mut sum_accept = 0.0;
    let mut n_leapfrog = 0usize;
    let mut depth = 0usize;

    while depth < max_depth {
        let forward = rng.random::<f64>() < 0.5;
        let subtree = {
            let mut ctx = TreeContext {
                target,
                rng,
                inv_mass,
                eps: if forward { eps } else { -eps },
                h0,
                sum_accept: 0.0,
                n_leapfrog: 0,
                divergent: false,
            };
            let from = if forward { &z_fwd } else { &z_bck };
            let built = ctx.build(depth, from);
            sum_accept += ctx.sum_accept;
            n_leapfrog += ctx.n_leapfrog;
            divergent |= ctx.divergent;
            built
        };
        let Some(sub) = subtree else {
            break;
        };
        depth += 1;

        // Progressive multinomial draw, biased towards the fresh half.
        let accept_new = if sub.log_sum_weight > log_sum_weight {
            true
        } else {
            rng.random::<f64>() < (sub.log_sum_weight - log_sum_weight).exp()
        };
        if accept_new {
            sample_position = sub.propose_position.clone();
            sample_logp = sub.propose_logp;
        }
        log_sum_weight = log_sum_exp(log_sum_weight, sub.log_sum_weight);

        // U-turn checks across the doubled tree; the subtree's `beg` end
        // faces the old tree.
        let full_rho = add(&rho, &sub.rho);
        let ok = if forward {
            no_u_turn(&sharp_bck, &sub.p_sharp_end, &full_rho)
                && no_u_turn(&sharp_bck, &sub.p_sharp_beg, &add(&rho, &sub.p_raw_beg))
                && no_u_turn(&sharp_fwd, &sub.p_sharp_end, &add(&sub.rho, &raw_fwd))
        } else {
            no_u_turn(&sub.p_sharp_end, &sharp_fwd, &full_rho)
                && no_u_turn(&sub.p_sharp_beg, &sharp_fwd, &add(&rho, &sub.p_raw_beg))
                && no_u_turn(&sub.p_sharp_end, &sharp_bck, &add(&sub.rho, &raw_bck))
        };
        rho = full_rho;
        if forward {
            sharp_fwd = sub.p_sharp_end;
            raw_fwd = sub.p_raw_end;
            z_fwd = sub.z_end;
        } else {
            sharp_bck = sub.p_sharp_end;
            raw_bck = sub.p_raw_end;
            z_bck = sub.z_end;
        }
        if !ok {
            break;
        }
    }

    let accept_stat = if n_leapfrog == 0 {
        0.0
    } else {
        sum_accept / n_leapfrog as f64
    };
    Transition {
        position: sample_position,
        logp: sample_logp,
        accept_stat,
        divergent,
        depth,
        n_leapfrog,
    }
}

/// Doubles or halves the step size until the one-step Metropolis ratio
/// crosses one half, starting from `eps = 1`.
pub fn find_reasonable_epsilon<R: Rng>(
    target: &dyn Target,
    rng: &mut R,
    position: &[f64],
    inv_mass: &[f64],
) -> f64 {
    let mut eps = 1.0f64;
    let momentum: Vec<f64> = inv_mass
        .iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            z / m.sqrt()
        })
        .collect();
    let z0 = PhaseState::new(target, position.to_vec(), momentum);
    let h0 = hamiltonian(&z0, inv_mass);

    let ratio = |eps: f64| -> f64 {
        let mut z = z0.clone();
        leapfrog(target, &mut z, eps, inv_mass);
        let delta = h0 - hamiltonian(&z, inv_mass);
        if delta.is_nan() {
            f64::NEG_INFINITY
        } else {
            delta
        }
    };

    let half_log = 0.5f64.ln();
    let up = ratio(eps) > half_log;
    for _ in 0..100 {
        let r = ratio(eps);
        if up && r <= half_log {
            break;
        }
        if !up && r > half_log {
            break;
        }
        eps *= if up { 2.0 } else { 0.5 };
        if !(1e-10..=1e10).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-10, 1e10)
}

/// Nesterov dual averaging of the log step size towards a target
/// Metropolis statistic.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    mu: f64,
    target: f64,
    gamma: f64,
    t0: f64,
    exponent: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
    log_eps: f64,
}

impl DualAveraging {
    pub fn new(eps0: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps0).ln(),
            target,
            gamma: 0.05,
            t0: 10.0,
            exponent: 0.75,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
            log_eps: eps0.ln(),
        }
    }

    /// Re-anchors the average around a freshly chosen step size, used
    /// after each mass-matrix update.
    pub fn restart(&mut self, eps: f64) {
        self.mu = (10.0 * eps).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
        self.log_eps = eps.ln();
    }

    /// Feeds one acceptance statistic, returns the next step size.
    pub fn learn(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - stat);
        self.log_eps = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let x_eta = self.counter.powf(-self.exponent);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * self.log_eps;
        self.log_eps.exp()
    }

    /// Final smoothed step size for the sampling phase.
    pub fn completed(&self) -> f64 {
        if self.counter == 0.0 {
            self.log_eps.exp()
        } else {
            self.x_bar.exp()
        }
    }

    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }
}

/// Streaming mean and variance over position draws, used to estimate the
/// diagonal inverse mass during warmup.
#[derive(Debug, Clone)]
pub struct RunningVariance {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningVariance {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn reset(&mut self) {
        self.n = 0.0;
        self.mean.iter_mut().for_each(|x| *x = 0.0);
        self.m2.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn count(&self) -> usize {
        self.n as usize
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.n;
            *s += d * (v - *m);
        }
    }

    /// Sample variances shrunk towards a small constant, the usual
    /// regularisation for short adaptation windows.
    pub fn regularized(&self) -> Vec<f64> {
        if self.n < 2.0 {
            return vec![1.0; self.mean.len()];
        }
        let w = self.n / (self.n + 5.0);
        self.m2
            .iter()
            .map(|s| {
                let var = s / (self.n - 1.0);
                (w * var + 1e-3 * (1.0 - w)).max(1e-10)
            })
            .collect()
    }
}
