//! Standalone per-submodel posteriors for the separate-fit mode.
//!
//! The count submodels keep a patient-level normal random effect with a
//! free scale, the ordinal submodels a patient-level random intercept,
//! and the probit submodels collapse their unit-variance latent into the
//! closed-form Phi likelihood (no free random effect).

use thiserror::Error;

use crate::data::{DesignMatrices, Submodel};
use crate::math::{norm_logcdf_grad, norm_logpdf};
use crate::model::joint::LogpEval;
use crate::model::loglik::{
    dot, half_cauchy_logpdf, ordinal_term, poisson_term, probit_collapsed_loglik,
    PRIOR_CAUCHY_SCALE, PRIOR_SD_PROBIT, PRIOR_SD_WEAK,
};
use crate::model::params::ParameterSet;

#[derive(Debug, Error)]
pub enum SeparateError {
    #[error("latent vector has length {found}, submodel needs {expected}")]
    LatentCount { found: usize, expected: usize },
    #[error("non-finite log-posterior")]
    NonFinite,
}

enum Kind {
    /// Poisson with optional offset and a per-unit random effect.
    Count { y: Vec<u32>, offset: Vec<f64> },
    /// Cumulative logit with a per-cluster random intercept.
    Ordinal {
        grades: Vec<u8>,
        cluster_of_row: Vec<usize>,
        n_clusters: usize,
    },
    /// Collapsed probit regression.
    Probit { y: Vec<bool> },
}

/// One submodel's posterior in its own unconstrained parameterization.
pub struct SeparateModel {
    submodel: Submodel,
    x: ndarray::Array2<f64>,
    p: usize,
    kind: Kind,
}

impl SeparateModel {
    pub fn new(submodel: Submodel, design: &DesignMatrices) -> SeparateModel {
        let d = design.design(submodel);
        let x = d.x.clone();
        let p = d.n_cols();
        let kind = match submodel {
            Submodel::Oocytes => Kind::Count {
                y: design.y_o.clone(),
                offset: vec![0.0; design.y_o.len()],
            },
            Submodel::Fertilisation => Kind::Count {
                y: design.y_m.clone(),
                offset: design.offset_m.clone(),
            },
            Submodel::Evenness | Submodel::Fragmentation => {
                // contiguous cluster ids over the cycles that own embryos
                let mut cluster_of_cycle = vec![usize::MAX; design.n_cycles()];
                let mut n_clusters = 0;
                let mut cluster_of_row = Vec::with_capacity(design.cycle_of_embryo.len());
                for &c in &design.cycle_of_embryo {
                    if cluster_of_cycle[c] == usize::MAX {
                        cluster_of_cycle[c] = n_clusters;
                        n_clusters += 1;
                    }
                    cluster_of_row.push(cluster_of_cycle[c]);
                }
                Kind::Ordinal {
                    grades: if submodel == Submodel::Evenness {
                        design.grade_e.clone()
                    } else {
                        design.grade_f.clone()
                    },
                    cluster_of_row,
                    n_clusters,
                }
            }
            Submodel::Det => Kind::Probit {
                y: design.y_d.clone(),
            },
            Submodel::Lbe => Kind::Probit {
                y: design.y_l.clone(),
            },
        };
        SeparateModel {
            submodel,
            x,
            p,
            kind,
        }
    }

    pub fn submodel(&self) -> Submodel {
        self.submodel
    }

    pub fn n_latents(&self) -> usize {
        match &self.kind {
            Kind::Count { y, .. } => y.len(),
            Kind::Ordinal { n_clusters, .. } => *n_clusters,
            Kind::Probit { .. } => 0,
        }
    }

    fn has_scale(&self) -> bool {
        !matches!(self.kind, Kind::Probit { .. })
    }

    fn n_alpha(&self) -> usize {
        if matches!(self.kind, Kind::Ordinal { .. }) {
            3
        } else {
            0
        }
    }

    /// Total unconstrained dimension: beta, thresholds, log-scale, latents.
    pub fn dim(&self) -> usize {
        self.p + self.n_alpha() + usize::from(self.has_scale()) + self.n_latents()
    }

    /// Reported (non-latent) parameter count.
    pub fn n_reported(&self) -> usize {
        self.p + self.n_alpha() + usize::from(self.has_scale())
    }

    pub fn names(&self) -> Vec<String> {
        let tag = self.submodel.tag();
        let mut names: Vec<String> = (1..=self.p).map(|k| format!("beta_{tag}[{k}]")).collect();
        for k in 1..=self.n_alpha() {
            names.push(format!("alpha_{tag}[{k}]"));
        }
        if self.has_scale() {
            names.push(format!("theta_{tag}"));
        }
        names
    }

    /// Constrained reported values at an unconstrained point.
    pub fn constrain(&self, x: &[f64]) -> Vec<f64> {
        let mut out = x[..self.p].to_vec();
        if self.n_alpha() == 3 {
            let a1 = x[self.p];
            let a2 = a1 + x[self.p + 1].exp();
            let a3 = a2 + x[self.p + 2].exp();
            out.extend([a1, a2, a3]);
        }
        if self.has_scale() {
            out.push(x[self.p + self.n_alpha()].exp());
        }
        out
    }

    /// Pack the submodel's slice of a parameter set plus latents.
    pub fn pack(&self, params: &ParameterSet, latents: &[f64]) -> Result<Vec<f64>, SeparateError> {
        if latents.len() != self.n_latents() {
            return Err(SeparateError::LatentCount {
                found: latents.len(),
                expected: self.n_latents(),
            });
        }
        let mut x = params.beta(self.submodel).to_vec();
        if self.n_alpha() == 3 {
            let alpha = if self.submodel == Submodel::Evenness {
                params.alpha_e
            } else {
                params.alpha_f
            };
            x.push(alpha[0]);
            x.push((alpha[1] - alpha[0]).ln());
            x.push((alpha[2] - alpha[1]).ln());
        }
        if self.has_scale() {
            let theta = match self.submodel {
                Submodel::Oocytes => params.theta[0],
                Submodel::Fertilisation => params.theta[1],
                Submodel::Evenness => params.theta[2],
                _ => params.theta[3],
            };
            x.push(theta.ln());
        }
        x.extend_from_slice(latents);
        Ok(x)
    }

    pub fn logp_grad(&self, x: &[f64], grad: &mut [f64]) -> Result<LogpEval, SeparateError> {
        assert_eq!(x.len(), self.dim());
        assert_eq!(grad.len(), self.dim());
        grad.fill(0.0);
        let beta = &x[..self.p];
        let rows = self.x.as_slice().expect("row-major design");
        let mut lp = 0.0;
        let mut clamped = false;

        match &self.kind {
            Kind::Count { y, offset } => {
                let t_off = self.p;
                let v_off = self.p + 1;
                let theta = x[t_off].exp();
                let mut dlogtheta = 0.0;
                for (i, (&yi, &oi)) in y.iter().zip(offset).enumerate() {
                    let xrow = &rows[i * self.p..(i + 1) * self.p];
                    let v = x[v_off + i];
                    let eta = oi + dot(xrow, beta) + theta * v;
                    let (ll, r, cl) = poisson_term(yi, eta);
                    clamped |= cl;
                    lp += ll + norm_logpdf(v);
                    for (g, &xv) in grad[..self.p].iter_mut().zip(xrow) {
                        *g += r * xv;
                    }
                    grad[v_off + i] += r * theta - v;
                    dlogtheta += r * theta * v;
                }
                lp += half_cauchy_logpdf(theta, PRIOR_CAUCHY_SCALE) + x[t_off];
                grad[t_off] += dlogtheta
                    - 2.0 * theta * theta / (PRIOR_CAUCHY_SCALE * PRIOR_CAUCHY_SCALE + theta * theta)
                    + 1.0;
                for k in 0..self.p {
                    lp += norm_logpdf(beta[k] / PRIOR_SD_WEAK) - PRIOR_SD_WEAK.ln();
                    grad[k] += -beta[k] / (PRIOR_SD_WEAK * PRIOR_SD_WEAK);
                }
            }
            Kind::Ordinal {
                grades,
                cluster_of_row,
                n_clusters,
            } => {
                let a_off = self.p;
                let t_off = self.p + 3;
                let v_off = self.p + 4;
                let a1 = x[a_off];
                let a2 = a1 + x[a_off + 1].exp();
                let a3 = a2 + x[a_off + 2].exp();
                let alpha = [a1, a2, a3];
                let theta = x[t_off].exp();
                let mut abar = [0.0f64; 3];
                let mut dlogtheta = 0.0;
                for (i, &g) in grades.iter().enumerate() {
                    let xrow = &rows[i * self.p..(i + 1) * self.p];
                    let c = cluster_of_row[i];
                    let v = x[v_off + c];
                    let lin = dot(xrow, beta) + theta * v;
                    let (ll, dlin, da) = ordinal_term(g, &alpha, lin);
                    lp += ll;
                    for (gr, &xv) in grad[..self.p].iter_mut().zip(xrow) {
                        *gr += dlin * xv;
                    }
                    grad[v_off + c] += dlin * theta;
                    dlogtheta += dlin * theta * v;
                    for k in 0..3 {
                        abar[k] += da[k];
                    }
                }
                for c in 0..*n_clusters {
                    let v = x[v_off + c];
                    lp += norm_logpdf(v);
                    grad[v_off + c] += -v;
                }
                // threshold priors on the alpha scale + log-increment Jacobian
                for (k, &a) in alpha.iter().enumerate() {
                    lp += norm_logpdf(a / PRIOR_SD_WEAK) - PRIOR_SD_WEAK.ln();
                    abar[k] += -a / (PRIOR_SD_WEAK * PRIOR_SD_WEAK);
                }
                lp += x[a_off + 1] + x[a_off + 2];
                grad[a_off] += abar[0] + abar[1] + abar[2];
                grad[a_off + 1] += (abar[1] + abar[2]) * x[a_off + 1].exp() + 1.0;
                grad[a_off + 2] += abar[2] * x[a_off + 2].exp() + 1.0;
                lp += half_cauchy_logpdf(theta, PRIOR_CAUCHY_SCALE) + x[t_off];
                grad[t_off] += dlogtheta
                    - 2.0 * theta * theta / (PRIOR_CAUCHY_SCALE * PRIOR_CAUCHY_SCALE + theta * theta)
                    + 1.0;
                for k in 0..self.p {
                    lp += norm_logpdf(beta[k] / PRIOR_SD_WEAK) - PRIOR_SD_WEAK.ln();
                    grad[k] += -beta[k] / (PRIOR_SD_WEAK * PRIOR_SD_WEAK);
                }
            }
            Kind::Probit { y } => {
                for (i, &yi) in y.iter().enumerate() {
                    let xrow = &rows[i * self.p..(i + 1) * self.p];
                    let lin = dot(xrow, beta);
                    lp += probit_collapsed_loglik(yi, lin);
                    let d = if yi {
                        norm_logcdf_grad(lin)
                    } else {
                        -norm_logcdf_grad(-lin)
                    };
                    for (g, &xv) in grad[..self.p].iter_mut().zip(xrow) {
                        *g += d * xv;
                    }
                }
                for k in 0..self.p {
                    lp += norm_logpdf(beta[k] / PRIOR_SD_PROBIT) - PRIOR_SD_PROBIT.ln();
                    grad[k] += -beta[k] / (PRIOR_SD_PROBIT * PRIOR_SD_PROBIT);
                }
            }
        }
        if !lp.is_finite() {
            return Err(SeparateError::NonFinite);
        }
        Ok(LogpEval { value: lp, clamped })
    }
}

/// Log-posterior and gradient of one submodel fitted on its own, at the
/// given parameter set and latent vector.
pub fn separate_log_posterior(
    submodel: Submodel,
    design: &DesignMatrices,
    params: &ParameterSet,
    latents: &[f64],
) -> Result<(f64, Vec<f64>), SeparateError> {
    let model = SeparateModel::new(submodel, design);
    let x = model.pack(params, latents)?;
    let mut grad = vec![0.0; x.len()];
    let eval = model.logp_grad(&x, &mut grad)?;
    Ok((eval.value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_design, Attempt, CycleRecord, Dataset, Setting};
    use crate::math::{norm_logpdf, LN_2PI};
    use crate::model::joint::tests::{random_point, toy_dataset};
    use crate::model::joint::JointPosterior;
    use crate::model::loglik::ordinal_loglik;
    use approx::assert_relative_eq;

    #[test]
    fn gradients_match_finite_differences() {
        let ds = toy_dataset();
        let design = build_design(&ds, Setting::Pretreatment).unwrap();
        for s in Submodel::ALL {
            let model = SeparateModel::new(s, &design);
            let x = random_point(model.dim(), 11);
            let mut grad = vec![0.0; model.dim()];
            model.logp_grad(&x, &mut grad).unwrap();
            let h = 1e-5;
            let mut work = vec![0.0; model.dim()];
            for k in 0..model.dim() {
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                let fd = (model.logp_grad(&xp, &mut work).unwrap().value
                    - model.logp_grad(&xm, &mut work).unwrap().value)
                    / (2.0 * h);
                let denom = grad[k].abs().max(fd.abs()).max(1e-4);
                assert!(
                    ((grad[k] - fd) / denom).abs() < 1e-5,
                    "{s:?} coord {k}: analytic {} vs fd {}",
                    grad[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn det_single_observation_composes_by_hand() {
        let ds = Dataset::from_records(
            vec![CycleRecord {
                cycle_id: "c".into(),
                age: 0.0,
                partner_age: 0.0,
                attempt: Attempt::First,
                n_oocytes: Some(5),
                oocytes_mixed: true,
                n_embryos: Some(1),
                transfer_done: true,
                det: Some(true),
                lbe: Some(false),
            }],
            vec![crate::data::EmbryoRecord {
                cycle_id: "c".into(),
                evenness: 2,
                fragmentation: 3,
                icsi: false,
            }],
        )
        .unwrap();
        let design = build_design(&ds, Setting::Pretreatment).unwrap();
        let model = SeparateModel::new(Submodel::Det, &design);
        let x = vec![0.0; model.dim()];
        let mut grad = vec![0.0; model.dim()];
        let value = model.logp_grad(&x, &mut grad).unwrap().value;
        // data term ln Phi(0) = ln 0.5 plus six N(0, 2^2) priors at 0
        let prior_at_zero = -0.5 * LN_2PI - 2f64.ln();
        assert_relative_eq!(
            value,
            0.5f64.ln() + 6.0 * prior_at_zero,
            epsilon = 1e-12
        );
    }

    #[test]
    fn count_model_approaches_plain_poisson_as_theta_vanishes() {
        let ds = toy_dataset();
        let design = build_design(&ds, Setting::Pretreatment).unwrap();
        let model = SeparateModel::new(Submodel::Oocytes, &design);
        let plain = |beta: &[f64]| -> f64 {
            let rows = design.o.x.as_slice().unwrap();
            let p = design.o.n_cols();
            let mut lp = 0.0;
            for (i, &yi) in design.y_o.iter().enumerate() {
                lp += poisson_term(yi, dot(&rows[i * p..(i + 1) * p], beta)).0;
            }
            for &b in beta {
                lp += norm_logpdf(b / PRIOR_SD_WEAK) - PRIOR_SD_WEAK.ln();
            }
            lp
        };
        let beta1 = vec![1.9, -0.1, 0.02, 0.1, 0.2, 0.0];
        let beta2 = vec![2.2, 0.1, -0.05, 0.0, 0.1, 0.3];
        let eval = |beta: &[f64]| -> f64 {
            let mut x = beta.to_vec();
            x.push(1e-4f64.ln());
            x.extend(vec![1e-3; model.n_latents()]); // latents fixed, nearly inert
            let mut grad = vec![0.0; model.dim()];
            model.logp_grad(&x, &mut grad).unwrap().value
        };
        let diff_model = eval(&beta2) - eval(&beta1);
        let diff_plain = plain(&beta2) - plain(&beta1);
        assert!(
            (diff_model - diff_plain).abs() < 1e-6,
            "{diff_model} vs {diff_plain}"
        );
    }

    #[test]
    fn ordinal_single_embryo_composes_exactly() {
        let ds = Dataset::from_records(
            vec![CycleRecord {
                cycle_id: "c".into(),
                age: 0.5,
                partner_age: -0.5,
                attempt: Attempt::First,
                n_oocytes: Some(3),
                oocytes_mixed: true,
                n_embryos: Some(1),
                transfer_done: true,
                det: Some(false),
                lbe: Some(false),
            }],
            vec![crate::data::EmbryoRecord {
                cycle_id: "c".into(),
                evenness: 3,
                fragmentation: 1,
                icsi: true,
            }],
        )
        .unwrap();
        let design = build_design(&ds, Setting::Pretreatment).unwrap();
        let model = SeparateModel::new(Submodel::Evenness, &design);
        // beta (3), alpha raw (3), log theta, one latent
        let beta = [0.1f64, -0.2, 0.4];
        let alpha = [-1.5f64, 0.0, 1.2];
        let theta = 0.7f64;
        let v = 0.9f64;
        let x = vec![
            beta[0],
            beta[1],
            beta[2],
            alpha[0],
            (alpha[1] - alpha[0]).ln(),
            (alpha[2] - alpha[1]).ln(),
            theta.ln(),
            v,
        ];
        let mut grad = vec![0.0; model.dim()];
        let value = model.logp_grad(&x, &mut grad).unwrap().value;
        let lin = 0.1 * 0.5 + (-0.2) * (-0.5) + 0.4 + theta * v;
        let mut expected = ordinal_loglik(3, &alpha, lin).unwrap() + norm_logpdf(v);
        for &b in &beta {
            expected += norm_logpdf(b / PRIOR_SD_WEAK) - PRIOR_SD_WEAK.ln();
        }
        for &a in &alpha {
            expected += norm_logpdf(a / PRIOR_SD_WEAK) - PRIOR_SD_WEAK.ln();
        }
        expected += (alpha[1] - alpha[0]).ln() + (alpha[2] - alpha[1]).ln();
        expected += half_cauchy_logpdf(theta, PRIOR_CAUCHY_SCALE) + theta.ln();
        assert_relative_eq!(value, expected, epsilon = 1e-12);
    }

    #[test]
    fn joint_with_null_correlation_marginalizes_to_separate_sum() {
        // Integrate the joint posterior over each constrained probit
        // innovation by quadrature; with corr = I the result must equal
        // the sum of the six separate posteriors plus the priors of the
        // joint's unused latent coordinates.
        let ds = toy_dataset();
        let design = build_design(&ds, Setting::Pretreatment).unwrap();
        let post = JointPosterior::new(&design);
        let params = ParameterSet {
            beta_o: vec![1.8, -0.1, 0.05, 0.1, 0.0, 0.2],
            beta_m: vec![-0.9, 0.05, 0.01],
            beta_e: vec![0.05, 0.01, -0.3],
            beta_f: vec![-0.1, 0.02, -0.2],
            beta_d: vec![0.13, 0.1, -0.02, 0.2, 0.4, 0.5],
            beta_l: vec![-0.5, -0.05, -0.01],
            alpha_e: [-2.0, -0.5, 1.5],
            alpha_f: [-2.5, -1.0, 0.0],
            theta: [0.5, 0.3, 0.8, 0.8],
            corr: crate::model::params::Corr::identity(),
        };
        let n = post.n_patients();
        // innovations; with corr = I, z_k = theta_k * u_k
        let u_vals = [0.4, -0.3, 0.2, -0.1];
        let latents = crate::model::joint::LatentState {
            u: (0..n)
                .map(|j| {
                    [
                        u_vals[j % 4],
                        u_vals[(j + 1) % 4],
                        u_vals[(j + 2) % 4],
                        u_vals[(j + 3) % 4],
                        0.0,
                        0.0,
                    ]
                })
                .collect(),
        };
        let x0 = post.pack(&params, &latents).unwrap();
        let mut work = vec![0.0; post.dim()];
        let base = post.logp_grad(&x0, &mut work).unwrap().value;

        // replace each constrained probit coordinate's point evaluation
        // by its integral: marginal = base + sum_k ln(int exp(J(t) - base) dt)
        // where only coordinate k varies (separable since corr = I)
        let mut marginal = base;
        for j in 0..n {
            if design.dl_row_of[j].is_none() {
                continue;
            }
            for k in [4usize, 5usize] {
                let idx = post.latent_offset() + 6 * j + k;
                let mut x = x0.clone();
                let mut at = |t: f64| -> f64 {
                    x[idx] = t;
                    post.logp_grad(&x, &mut work).unwrap().value - base
                };
                // composite Simpson over the effective support
                let (a, b, steps) = (-30.0, 30.0, 12000usize);
                let h = (b - a) / steps as f64;
                let mut total = at(a).exp() + at(b).exp();
                for i in 1..steps {
                    let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                    total += w * at(a + i as f64 * h).exp();
                }
                total *= h / 3.0;
                marginal += total.ln();
            }
        }

        // sum of separate posteriors at the matching parameters/latents
        let v_o: Vec<f64> = (0..n).map(|j| latents.u[j][0]).collect();
        let v_m: Vec<f64> = design.m.units.iter().map(|&j| latents.u[j][1]).collect();
        let cluster_cycles: Vec<usize> = (0..n).filter(|&j| design.embryo_range[j].1 > 0).collect();
        let v_e: Vec<f64> = cluster_cycles.iter().map(|&j| latents.u[j][2]).collect();
        let v_f: Vec<f64> = cluster_cycles.iter().map(|&j| latents.u[j][3]).collect();
        let mut expected = 0.0;
        for (s, v) in [
            (Submodel::Oocytes, v_o),
            (Submodel::Fertilisation, v_m),
            (Submodel::Evenness, v_e),
            (Submodel::Fragmentation, v_f),
            (Submodel::Det, vec![]),
            (Submodel::Lbe, vec![]),
        ] {
            expected += separate_log_posterior(s, &design, &params, &v).unwrap().0;
        }
        // unused joint latent coordinates contribute only their priors
        for j in 0..n {
            if design.m_row_of[j].is_none() {
                expected += norm_logpdf(latents.u[j][1]);
            }
            if design.embryo_range[j].1 == 0 {
                expected += norm_logpdf(latents.u[j][2]) + norm_logpdf(latents.u[j][3]);
            }
            if design.dl_row_of[j].is_none() {
                expected += norm_logpdf(latents.u[j][4]) + norm_logpdf(latents.u[j][5]);
            }
        }
        assert_relative_eq!(marginal, expected, epsilon = 1e-6);
    }
}
