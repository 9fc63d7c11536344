//! Multinomial no-U-turn transitions with dual-averaging step-size
//! adaptation and windowed diagonal mass-matrix estimation.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use super::{SamplerError, Target};
use crate::math::log_add_exp;

/// Energy error beyond which a transition is flagged divergent.
pub const MAX_ENERGY_ERROR: f64 = 1000.0;

#[derive(Clone)]
pub(crate) struct Point {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    pub grad: Vec<f64>,
    pub logp: f64,
    pub clamped: bool,
}

/// Per-transition statistics.
#[derive(Debug, Clone, Copy)]
pub struct TransitionStats {
    pub accept_prob: f64,
    pub divergent: bool,
    pub tree_depth: usize,
    pub energy: f64,
    pub n_leapfrog: usize,
    pub clamped: bool,
}

struct DualAveraging {
    mu: f64,
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    count: f64,
    s_bar: f64,
    log_eps_bar: f64,
}

impl DualAveraging {
    fn new(eps0: f64, target: f64) -> DualAveraging {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            count: 0.0,
            s_bar: 0.0,
            log_eps_bar: 0.0,
        }
    }

    fn update(&mut self, accept_prob: f64) -> f64 {
        self.count += 1.0;
        let eta = 1.0 / (self.count + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_prob);
        let log_eps = self.mu - self.s_bar * self.count.sqrt() / self.gamma;
        let w = self.count.powf(-self.kappa);
        self.log_eps_bar = (1.0 - w) * self.log_eps_bar + w * log_eps;
        log_eps.exp()
    }

    fn adapted_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Running mean/variance accumulator.
#[derive(Default)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Welford {
        Welford {
            n: 0.0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Regularized variance estimate (shrunk toward 1e-3 for small n).
    fn regularized_variance(&self) -> Option<Vec<f64>> {
        if self.n < 2.0 {
            return None;
        }
        let w = self.n / (self.n + 5.0);
        Some(
            self.m2
                .iter()
                .map(|&m2| (w * m2 / (self.n - 1.0) + 1e-3 * (1.0 - w)).max(1e-12))
                .collect(),
        )
    }
}

/// Warm-up plan: a step-size-only opening buffer, doubling variance
/// windows, and a step-size-only closing buffer. Returns the opening
/// buffer length and the (ascending) iteration indices ending each window.
fn warmup_plan(n_warmup: usize) -> (usize, Vec<usize>) {
    let (init, term, base) = if n_warmup >= 150 {
        (75usize, 50usize, 25usize)
    } else if n_warmup >= 20 {
        let init = (0.15 * n_warmup as f64) as usize;
        let term = (0.10 * n_warmup as f64) as usize;
        (init, term, n_warmup - init - term)
    } else {
        return (n_warmup, Vec::new());
    };
    let last = n_warmup - term;
    let mut ends = Vec::new();
    let mut size = base;
    let mut end = init + size;
    while end < last {
        // final window absorbs the remainder if the next doubling overshoots
        if end + 3 * size > last {
            end = last;
        }
        ends.push(end);
        size *= 2;
        end += size;
    }
    if ends.last() != Some(&last) {
        ends.push(last);
    }
    (init, ends)
}

pub(crate) struct NutsChain<'t, T: Target + ?Sized> {
    target: &'t T,
    pub rng: ChaCha12Rng,
    dim: usize,
    inv_mass: Vec<f64>,
    step_size: f64,
    max_depth: usize,
    current: Point,
}

impl<'t, T: Target + ?Sized> NutsChain<'t, T> {
    /// Initialize from a uniform(-2, 2) draw, retrying until the target
    /// is finite there.
    pub fn init(
        target: &'t T,
        mut rng: ChaCha12Rng,
        max_depth: usize,
    ) -> Result<NutsChain<'t, T>, SamplerError> {
        let dim = target.dim();
        for _ in 0..100 {
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut grad = vec![0.0; dim];
            let eval = target.logp_grad_raw(&q, &mut grad);
            if eval.value.is_finite() && grad.iter().all(|g| g.is_finite()) {
                let current = Point {
                    q,
                    p: vec![0.0; dim],
                    grad,
                    logp: eval.value,
                    clamped: eval.clamped,
                };
                return Ok(NutsChain {
                    target,
                    rng,
                    dim,
                    inv_mass: vec![1.0; dim],
                    step_size: 1.0,
                    max_depth,
                    current,
                });
            }
        }
        Err(SamplerError::InitFailed)
    }

    pub fn position(&self) -> &[f64] {
        &self.current.q
    }

    fn eval_at(&self, q: Vec<f64>) -> Point {
        let mut grad = vec![0.0; self.dim];
        let eval = self.target.logp_grad_raw(&q, &mut grad);
        Point {
            q,
            p: vec![0.0; self.dim],
            grad,
            logp: eval.value,
            clamped: eval.clamped,
        }
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        let kinetic: f64 = z
            .p
            .iter()
            .zip(&self.inv_mass)
            .map(|(&p, &im)| 0.5 * p * p * im)
            .sum();
        -z.logp + kinetic
    }

    fn sample_momentum(&mut self, z: &mut Point) {
        for i in 0..self.dim {
            let n: f64 = self.rng.sample(StandardNormal);
            z.p[i] = n / self.inv_mass[i].sqrt();
        }
    }

    fn leapfrog(&self, z: &Point, eps: f64) -> Point {
        let mut p: Vec<f64> = z
            .p
            .iter()
            .zip(&z.grad)
            .map(|(&p, &g)| p + 0.5 * eps * g)
            .collect();
        let q: Vec<f64> = z
            .q
            .iter()
            .zip(p.iter().zip(&self.inv_mass))
            .map(|(&q, (&p, &im))| q + eps * im * p)
            .collect();
        let mut out = self.eval_at(q);
        for i in 0..self.dim {
            p[i] += 0.5 * eps * out.grad[i];
        }
        out.p = p;
        out
    }

    fn velocity(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_mass).map(|(&p, &im)| p * im).collect()
    }

    fn criterion(&self, sharp_minus: &[f64], sharp_plus: &[f64], rho: &[f64]) -> bool {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(sharp_plus, rho) > 0.0 && dot(sharp_minus, rho) > 0.0
    }

    /// Stan-style heuristic search for an initial step size.
    fn find_initial_step(&mut self) -> Result<(), SamplerError> {
        if !self.step_size.is_finite() || self.step_size <= 0.0 {
            self.step_size = 1.0;
        }
        let mut z = self.current.clone();
        self.sample_momentum(&mut z);
        let h0 = self.hamiltonian(&z);
        let znew = self.leapfrog(&z, self.step_size);
        let mut dh = h0 - self.hamiltonian(&znew);
        if dh.is_nan() {
            dh = f64::NEG_INFINITY;
        }
        let target = 0.8f64.ln();
        let dir = if dh > target { 1 } else { -1 };
        loop {
            let mut z = self.current.clone();
            self.sample_momentum(&mut z);
            let h0 = self.hamiltonian(&z);
            let znew = self.leapfrog(&z, self.step_size);
            let mut dh = h0 - self.hamiltonian(&znew);
            if dh.is_nan() {
                dh = f64::NEG_INFINITY;
            }
            if dir == 1 && dh <= target {
                break;
            }
            if dir == -1 && dh >= target {
                break;
            }
            self.step_size *= if dir == 1 { 2.0 } else { 0.5 };
            if self.step_size > 1e7 {
                return Err(SamplerError::ImproperPosterior);
            }
            if self.step_size <= 1e-16 {
                return Err(SamplerError::NoStepSize);
            }
        }
        Ok(())
    }

    /// One multinomial NUTS transition; updates the current position.
    pub fn transition(&mut self) -> TransitionStats {
        let mut z = self.current.clone();
        self.sample_momentum(&mut z);
        let h0 = self.hamiltonian(&z);

        let mut fwd = z.clone();
        let mut bck = z.clone();
        let mut sample = z.clone();
        let mut sharp_fwd = self.velocity(&fwd.p);
        let mut sharp_bck = sharp_fwd.clone();
        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0f64;
        let mut sum_accept = 0.0f64;
        let mut n_leapfrog = 0usize;
        let mut divergent = false;
        let mut clamped = z.clamped;
        let mut depth = 0usize;

        while depth < self.max_depth {
            let dir: f64 = if self.rng.gen::<bool>() { 1.0 } else { -1.0 };
            let from = if dir > 0.0 { fwd.clone() } else { bck.clone() };
            let mut log_sum_weight_subtree = f64::NEG_INFINITY;
            let tree = self.build_tree(
                depth,
                from,
                dir,
                h0,
                &mut log_sum_weight_subtree,
                &mut sum_accept,
                &mut n_leapfrog,
                &mut divergent,
                &mut clamped,
            );
            let Some(tree) = tree else { break };

            depth += 1;
            // biased progressive sampling toward the new subtree
            if log_sum_weight_subtree > log_sum_weight
                || self.rng.gen::<f64>() < (log_sum_weight_subtree - log_sum_weight).exp()
            {
                sample = tree.proposal.clone();
            }
            log_sum_weight = log_add_exp(log_sum_weight, log_sum_weight_subtree);

            // boundary momentum of the old trajectory on the extended side
            let (old_end_p, old_end_sharp) = if dir > 0.0 {
                (fwd.p.clone(), sharp_fwd.clone())
            } else {
                (bck.p.clone(), sharp_bck.clone())
            };
            let (sub_begin_p, sub_begin_sharp) = (tree.begin_p, tree.begin_sharp);
            let sub_end_sharp = tree.end_sharp;
            let sub_rho = tree.rho;
            if dir > 0.0 {
                fwd = tree.end;
                sharp_fwd = sub_end_sharp;
            } else {
                bck = tree.end;
                sharp_bck = sub_end_sharp;
            }

            // merged-trajectory no-U-turn checks (trajectory plus both
            // boundary-extended variants)
            let old_rho = rho.clone();
            for i in 0..self.dim {
                rho[i] += sub_rho[i];
            }
            let mut keep_going = self.criterion(&sharp_bck, &sharp_fwd, &rho);
            let ext1: Vec<f64> = old_rho
                .iter()
                .zip(&sub_begin_p)
                .map(|(a, b)| a + b)
                .collect();
            let ext2: Vec<f64> = sub_rho
                .iter()
                .zip(&old_end_p)
                .map(|(a, b)| a + b)
                .collect();
            if dir > 0.0 {
                keep_going = keep_going && self.criterion(&sharp_bck, &sub_begin_sharp, &ext1);
                keep_going = keep_going && self.criterion(&old_end_sharp, &sharp_fwd, &ext2);
            } else {
                keep_going = keep_going && self.criterion(&sub_begin_sharp, &sharp_fwd, &ext1);
                keep_going = keep_going && self.criterion(&sharp_bck, &old_end_sharp, &ext2);
            }
            if !keep_going {
                break;
            }
        }

        let accept_prob = if n_leapfrog > 0 {
            sum_accept / n_leapfrog as f64
        } else {
            0.0
        };
        self.current = sample.clone();
        TransitionStats {
            accept_prob,
            divergent,
            tree_depth: depth,
            energy: self.hamiltonian(&sample),
            n_leapfrog,
            clamped,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        from: Point,
        dir: f64,
        h0: f64,
        log_sum_weight: &mut f64,
        sum_accept: &mut f64,
        n_leapfrog: &mut usize,
        divergent: &mut bool,
        clamped: &mut bool,
    ) -> Option<Tree> {
        if depth == 0 {
            let z = self.leapfrog(&from, dir * self.step_size);
            *n_leapfrog += 1;
            *clamped |= z.clamped;
            let mut h = self.hamiltonian(&z);
            if h.is_nan() {
                h = f64::INFINITY;
            }
            if h - h0 > MAX_ENERGY_ERROR {
                *divergent = true;
                return None;
            }
            let dh = h0 - h;
            *log_sum_weight = log_add_exp(*log_sum_weight, dh);
            *sum_accept += dh.min(0.0).exp();
            let sharp = self.velocity(&z.p);
            return Some(Tree {
                begin_p: z.p.clone(),
                begin_sharp: sharp.clone(),
                end_p: z.p.clone(),
                end_sharp: sharp,
                rho: z.p.clone(),
                proposal: z.clone(),
                end: z,
            });
        }

        let mut lsw_first = f64::NEG_INFINITY;
        let first = self.build_tree(
            depth - 1,
            from,
            dir,
            h0,
            &mut lsw_first,
            sum_accept,
            n_leapfrog,
            divergent,
            clamped,
        )?;
        let mut lsw_second = f64::NEG_INFINITY;
        let second = self.build_tree(
            depth - 1,
            first.end.clone(),
            dir,
            h0,
            &mut lsw_second,
            sum_accept,
            n_leapfrog,
            divergent,
            clamped,
        )?;

        let lsw_subtree = log_add_exp(lsw_first, lsw_second);
        *log_sum_weight = log_add_exp(*log_sum_weight, lsw_subtree);
        let proposal = if lsw_second > lsw_subtree
            || self.rng.gen::<f64>() < (lsw_second - lsw_subtree).exp()
        {
            second.proposal.clone()
        } else {
            first.proposal.clone()
        };

        let rho: Vec<f64> = first.rho.iter().zip(&second.rho).map(|(a, b)| a + b).collect();
        // merged and cross-subtree U-turn checks
        let mut ok = self.criterion(&first.begin_sharp, &second.end_sharp, &rho);
        let ext1: Vec<f64> = first
            .rho
            .iter()
            .zip(&second.begin_p)
            .map(|(a, b)| a + b)
            .collect();
        ok = ok && self.criterion(&first.begin_sharp, &second.begin_sharp, &ext1);
        let ext2: Vec<f64> = second
            .rho
            .iter()
            .zip(&first.end_p)
            .map(|(a, b)| a + b)
            .collect();
        ok = ok && self.criterion(&first.end_sharp, &second.end_sharp, &ext2);
        if !ok {
            return None;
        }

        Some(Tree {
            begin_p: first.begin_p,
            begin_sharp: first.begin_sharp,
            end_p: second.end_p,
            end_sharp: second.end_sharp,
            rho,
            proposal,
            end: second.end,
        })
    }

    /// Warm-up: adapt step size throughout; estimate the diagonal mass in
    /// doubling windows. Returns the transition stats of each iteration.
    pub fn warmup(
        &mut self,
        n_warmup: usize,
        target_accept: f64,
    ) -> Result<Vec<TransitionStats>, SamplerError> {
        let mut stats = Vec::with_capacity(n_warmup);
        if n_warmup == 0 {
            return Ok(stats);
        }
        let (init_buffer, ends) = warmup_plan(n_warmup);
        self.find_initial_step()?;
        let mut da = DualAveraging::new(self.step_size, target_accept);
        let mut welford = Welford::new(self.dim);
        let mut next_window = 0usize;

        for it in 1..=n_warmup {
            let s = self.transition();
            self.step_size = da.update(s.accept_prob);
            stats.push(s);
            if next_window < ends.len() && it > init_buffer {
                welford.push(&self.current.q);
                if it == ends[next_window] {
                    if let Some(var) = welford.regularized_variance() {
                        self.inv_mass = var;
                    }
                    welford = Welford::new(self.dim);
                    next_window += 1;
                    self.step_size = da.adapted_step();
                    self.find_initial_step()?;
                    da = DualAveraging::new(self.step_size, target_accept);
                }
            }
        }
        self.step_size = da.adapted_step();
        if stats.iter().all(|s| s.divergent) {
            return Err(SamplerError::AllDivergentWarmup);
        }
        Ok(stats)
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }
}

struct Tree {
    begin_p: Vec<f64>,
    begin_sharp: Vec<f64>,
    end_p: Vec<f64>,
    end_sharp: Vec<f64>,
    rho: Vec<f64>,
    proposal: Point,
    end: Point,
}
