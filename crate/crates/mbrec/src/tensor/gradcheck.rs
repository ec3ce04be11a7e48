//! Central finite-difference verification of reverse-mode gradients.
//!
//! The numeric side never touches the backward pass: it re-evaluates the
//! loss forward at perturbed parameter values, so it stays an independent
//! oracle for whatever the graph computes.

use std::collections::BTreeMap;

use super::{DiffError, Graph, NodeId, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step. Must lie in [1e-7, 1e-3].
    pub eps: f64,
    /// Maximum allowed relative error per parameter entry.
    pub tol: f64,
    /// Denominator floor for the relative error, so near-zero gradient
    /// entries are judged on absolute difference instead of noise ratio.
    pub rel_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, tol: 1e-4, rel_floor: 1e-3 }
    }
}

/// Worst entry found for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl ParamCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub checks: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed(self.tol))
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.checks.iter().filter(|c| !c.passed(self.tol)).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    /// Compare two gradient maps entry by entry. Exposed separately so a
    /// deliberately corrupted analytic gradient can be checked against the
    /// numeric one in tests.
    pub fn compare(
        analytic: &BTreeMap<String, Tensor>,
        numeric: &BTreeMap<String, Tensor>,
        cfg: &GradCheckConfig,
    ) -> Self {
        let mut checks = Vec::new();
        for (name, a) in analytic {
            let n = &numeric[name];
            assert_eq!(a.shape(), n.shape(), "gradient shape mismatch for {name}");
            let mut worst = ParamCheck {
                name: name.clone(),
                max_rel_err: 0.0,
                worst_index: 0,
                analytic_at_worst: 0.0,
                numeric_at_worst: 0.0,
            };
            for (i, (&av, &nv)) in a.data().iter().zip(n.data()).enumerate() {
                let denom = av.abs().max(nv.abs()).max(cfg.rel_floor);
                let rel = (av - nv).abs() / denom;
                if rel > worst.max_rel_err {
                    worst.max_rel_err = rel;
                    worst.worst_index = i;
                    worst.analytic_at_worst = av;
                    worst.numeric_at_worst = nv;
                }
            }
            checks.push(worst);
        }
        GradCheckReport { checks, tol: cfg.tol }
    }
}

/// Evaluate the loss once at the given parameter values (forward only).
fn eval_loss<F>(build_loss: &F, params: &BTreeMap<String, Tensor>) -> f64
where
    F: Fn(&mut Graph, &BTreeMap<String, NodeId>) -> NodeId,
{
    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params {
        ids.insert(name.clone(), g.param(name, t.clone()));
    }
    let loss = build_loss(&mut g, &ids);
    g.value(loss).item()
}

/// Central finite differences of the loss with respect to every parameter
/// entry, rebuilding the forward pass for each perturbation.
pub fn numeric_gradients<F>(
    build_loss: &F,
    params: &BTreeMap<String, Tensor>,
    eps: f64,
) -> BTreeMap<String, Tensor>
where
    F: Fn(&mut Graph, &BTreeMap<String, NodeId>) -> NodeId,
{
    let mut out = BTreeMap::new();
    for (name, t) in params {
        let mut grad = Tensor::zeros(t.shape().to_vec());
        for i in 0..t.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += eps;
            let fp = eval_loss(build_loss, &plus);

            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= eps;
            let fm = eval_loss(build_loss, &minus);

            grad.data_mut()[i] = (fp - fm) / (2.0 * eps);
        }
        out.insert(name.clone(), grad);
    }
    out
}

/// Run the full check: analytic reverse-mode gradients against central
/// finite differences, reported per parameter.
pub fn finite_diff_check<F>(
    build_loss: F,
    params: &BTreeMap<String, Tensor>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Graph, &BTreeMap<String, NodeId>) -> NodeId,
{
    assert!((1e-7..=1e-3).contains(&cfg.eps), "eps {} outside [1e-7, 1e-3]", cfg.eps);

    let mut g = Graph::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params {
        ids.insert(name.clone(), g.param(name, t.clone()));
    }
    let loss = build_loss(&mut g, &ids);
    let analytic = g.grad(loss)?.into_by_name();

    let numeric = numeric_gradients(&build_loss, params, cfg.eps);
    Ok(GradCheckReport::compare(&analytic, &numeric, cfg))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::SparseMatrix;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// One loss that routes through every supported op.
    fn kitchen_sink_loss(g: &mut Graph, ids: &BTreeMap<String, NodeId>) -> NodeId {
        let a = ids["a"]; // 3×4
        let b = ids["b"]; // 4×3
        let c = ids["c"]; // 3×4
        let s = ids["s"]; // scalar
        let slope = ids["slope"]; // scalar

        let sparse = Arc::new(SparseMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 0.5), (0, 2, -0.25), (1, 1, 1.0), (2, 0, 0.75)],
        ));

        let m1 = g.matmul(a, b); // 3×3
        let m2 = g.matmul_nt(a, c); // 3×3
        let sm = g.softmax_rows(m1);
        let nr = g.normalize_rows(c);
        let pr = g.prelu(m2, slope);
        let sp = g.spmm(sparse, a); // 3×4
        let sig = g.sigmoid(m1);
        let scaled = g.scale(sm, 0.3);
        let e = g.exp(scaled);
        let ones9 = g.constant(Tensor::matrix(3, 3, vec![1.0; 9]));
        let shifted = g.add(e, ones9);
        let lg = g.log(shifted);
        let sq_in = g.mul(m2, m2);
        let ones9b = g.constant(Tensor::matrix(3, 3, vec![1.0; 9]));
        let sq_arg = g.add(sq_in, ones9b);
        let sq = g.sqrt(sq_arg);
        let cc = g.concat_cols(&[sm, sig]); // 3×6
        let sc = g.slice_cols(cc, 1, 4); // 3×4
        let gr = g.gather_rows(sc, vec![2, 0, 1, 2]); // 4×4
        let st = g.stack_rows(&[nr, gr]); // 7×4
        let rd = g.row_dot(nr, sp); // 3
        let rs = g.row_sum(st); // 7
        let cm = g.col_mul(nr, rd); // 3×4
        let sby = g.scale_by(s, cm);
        let sub = g.sub(sby, sp);

        let t1 = g.mean(sub);
        let t2 = g.sum(lg);
        let t3 = g.mean(sq);
        let t4 = g.dot(rd, rd);
        let t5 = g.mean(rs);
        let t6 = g.sum(pr);
        let t7 = g.mean(e);

        let mut acc = t1;
        for t in [t2, t3, t4, t5, t6, t7] {
            let scaled = g.scale(t, 0.37);
            acc = g.add(acc, scaled);
        }
        acc
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), random_tensor(&mut rng, vec![3, 4]));
        params.insert("b".to_string(), random_tensor(&mut rng, vec![4, 3]));
        params.insert("c".to_string(), random_tensor(&mut rng, vec![3, 4]));
        params.insert("s".to_string(), Tensor::scalar(0.8));
        params.insert("slope".to_string(), Tensor::scalar(0.25));

        let report = finite_diff_check(kitchen_sink_loss, &params, &GradCheckConfig::default())
            .expect("check runs");
        assert!(
            report.passed(),
            "finite-difference mismatch: {:?}",
            report.failures()
        );
    }

    #[test]
    fn repeated_runs_with_fresh_seeds_pass() {
        for seed in [11u64, 23, 42] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = BTreeMap::new();
            params.insert("a".to_string(), random_tensor(&mut rng, vec![3, 4]));
            params.insert("b".to_string(), random_tensor(&mut rng, vec![4, 3]));
            params.insert("c".to_string(), random_tensor(&mut rng, vec![3, 4]));
            params.insert("s".to_string(), Tensor::scalar(rng.gen_range(0.2..1.5)));
            params.insert("slope".to_string(), Tensor::scalar(0.25));
            let report =
                finite_diff_check(kitchen_sink_loss, &params, &GradCheckConfig::default()).unwrap();
            assert!(report.passed(), "seed {seed}: {:?}", report.failures());
        }
    }

    #[test]
    fn corrupted_gradient_is_flagged_on_that_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), random_tensor(&mut rng, vec![2, 2]));
        params.insert("x".to_string(), random_tensor(&mut rng, vec![2, 2]));

        let build = |g: &mut Graph, ids: &BTreeMap<String, NodeId>| {
            let y = g.matmul(ids["w"], ids["x"]);
            let sg = g.sigmoid(y);
            g.mean(sg)
        };

        let cfg = GradCheckConfig::default();
        let mut g = Graph::new();
        let mut ids = BTreeMap::new();
        for (name, t) in &params {
            ids.insert(name.clone(), g.param(name, t.clone()));
        }
        let loss = build(&mut g, &ids);
        let mut analytic = g.grad(loss).unwrap().into_by_name();
        let numeric = numeric_gradients(&build, &params, cfg.eps);

        // sanity: clean comparison passes
        assert!(GradCheckReport::compare(&analytic, &numeric, &cfg).passed());

        analytic.get_mut("w").unwrap().data_mut()[0] += 0.1;
        let report = GradCheckReport::compare(&analytic, &numeric, &cfg);
        assert!(!report.passed());
        let failures = report.failures();
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].name, "w");
        assert_eq!(failures[0].worst_index, 0);
    }

    #[test]
    #[should_panic(expected = "outside [1e-7, 1e-3]")]
    fn eps_out_of_range_is_rejected() {
        let params = BTreeMap::from([("x".to_string(), Tensor::scalar(1.0))]);
        let cfg = GradCheckConfig { eps: 1e-2, ..Default::default() };
        let _ = finite_diff_check(|g, ids| g.sum(ids["x"]), &params, &cfg);
    }
}
