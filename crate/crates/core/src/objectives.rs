//! Training objectives: denoising regression, next-item cross-entropy from
//! the cross- and single-domain views, and the tri-view contrastive term.
//!
//! Each loss has a tape form used by the trainer and a plain-value form that
//! builds a throwaway tape around it.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dataset::{Domain, FIRST_ITEM_INDEX};
use crate::error::{DpgError, Result};
use crate::tensor::Mat;

/// Next-item targets of one training example, per domain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Targets {
    pub x: Option<usize>,
    pub y: Option<usize>,
}

impl Targets {
    pub fn get(&self, d: Domain) -> Option<usize> {
        match d {
            Domain::X => self.x,
            Domain::Y => self.y,
        }
    }

    pub fn set(&mut self, d: Domain, item: usize) {
        match d {
            Domain::X => self.x = Some(item),
            Domain::Y => self.y = Some(item),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_none() && self.y.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub diff: f64,
    pub rec: f64,
    pub tri_cl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            diff: 1.0,
            rec: 1.0,
            tri_cl: 1.0,
        }
    }
}

/// Weighted, stage-gated loss terms; `l_total` is their left-to-right sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_diff: f64,
    pub l_rec: f64,
    pub l_tri_cl: f64,
    pub l_total: f64,
}

/// `sum_b ||x0_hat_b - x0_b||^2 / B` over `B x d` rows.
pub fn diffusion_loss_var(tape: &mut Tape<'_>, x0: Var, x0_hat: Var) -> Var {
    let b = tape.value(x0).rows;
    let d = tape.sq_dist(x0_hat, x0);
    tape.scale(d, 1.0 / b as f64)
}

/// Cross-entropy terms summed per example and averaged over the batch.
///
/// `cross` holds the denoised rows (`B x d`) and may be absent during
/// warm-up; `single[d]` holds the single-domain query rows used for domain
/// `d`. Reserved table rows are never candidates.
pub fn rec_loss_var(
    tape: &mut Tape<'_>,
    cross: Option<Var>,
    single: [Var; 2],
    targets: &[Targets],
    tables: [Var; 2],
) -> Result<Var> {
    if targets.is_empty() {
        return Err(DpgError::MalformedExample("empty batch".into()));
    }
    let mut terms = Vec::new();
    for d in Domain::BOTH {
        let table = tables[d as usize];
        let n = tape.value(table).rows;
        let mut logit_mats = Vec::new();
        if let Some(c) = cross {
            logit_mats.push(tape.matmul_t(c, table));
        }
        logit_mats.push(tape.matmul_t(single[d as usize], table));
        for (b, t) in targets.iter().enumerate() {
            if t.is_empty() {
                return Err(DpgError::MalformedExample(format!("example {b} has no target")));
            }
            let Some(v) = t.get(d) else { continue };
            if v < FIRST_ITEM_INDEX || v >= n {
                return Err(DpgError::IndexOutOfRange {
                    what: "target item",
                    index: v,
                    size: n,
                });
            }
            for &logits in &logit_mats {
                let row = tape.gather(logits, vec![b]);
                terms.push(tape.cross_entropy(row, v, FIRST_ITEM_INDEX));
            }
        }
    }
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / targets.len() as f64))
}

/// Tri-view contrastive loss over three `B x d` view matrices.
pub fn tri_view_cl_var(tape: &mut Tape<'_>, h_c: Var, h_d: Var, h_aug: Var, normalize: bool) -> Result<Var> {
    let b = tape.value(h_c).rows;
    if b < 2 {
        return Err(DpgError::InvalidArgument(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    if tape.value(h_d).shape() != tape.value(h_c).shape() || tape.value(h_aug).shape() != tape.value(h_c).shape() {
        return Err(DpgError::InvalidArgument("contrastive views differ in shape".into()));
    }
    let views = tape.concat_rows(vec![h_c, h_d, h_aug]);
    let views = if normalize { tape.l2_normalize_rows(views) } else { views };
    let sim = tape.matmul_t(views, views);
    Ok(tape.tri_view_contrast(sim, b))
}

pub fn diffusion_loss(x0: &Mat, x0_hat: &Mat) -> Result<f64> {
    if x0.shape() != x0_hat.shape() {
        return Err(DpgError::InvalidArgument("x0 and x0_hat differ in shape".into()));
    }
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(x0.clone()), tape.constant(x0_hat.clone()));
    let l = diffusion_loss_var(&mut tape, a, b);
    Ok(tape.scalar(l))
}

/// Plain-value reconstruction loss with one shared single-domain query.
pub fn rec_loss(x0_hat: &Mat, g_d_pooled: &Mat, targets: &[Targets], e_x: &Mat, e_y: &Mat) -> Result<f64> {
    let mut tape = Tape::new();
    let c = tape.constant(x0_hat.clone());
    let g = tape.constant(g_d_pooled.clone());
    let tx = tape.constant(e_x.clone());
    let ty = tape.constant(e_y.clone());
    let l = rec_loss_var(&mut tape, Some(c), [g, g], targets, [tx, ty])?;
    Ok(tape.scalar(l))
}

pub fn tri_view_cl_loss(h_c: &Mat, h_d: &Mat, h_aug: &Mat, normalize: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b, c) = (
        tape.constant(h_c.clone()),
        tape.constant(h_d.clone()),
        tape.constant(h_aug.clone()),
    );
    let l = tri_view_cl_var(&mut tape, a, b, c, normalize)?;
    Ok(tape.scalar(l))
}

/// Combines raw terms into a breakdown. During warm-up the diffusion and
/// contrastive terms are gated to zero.
pub fn total_loss(l_diff: f64, l_rec: f64, l_tri_cl: f64, weights: &LossWeights, warmup: bool) -> Result<LossBreakdown> {
    for (name, v) in [("l_diff", l_diff), ("l_rec", l_rec), ("l_tri_cl", l_tri_cl)] {
        if !v.is_finite() {
            return Err(DpgError::NonFinite(format!("{name} = {v}")));
        }
    }
    let gate = if warmup { 0.0 } else { 1.0 };
    let l_diff = gate * weights.diff * l_diff;
    let l_rec = weights.rec * l_rec;
    let l_tri_cl = gate * weights.tri_cl * l_tri_cl;
    Ok(LossBreakdown {
        l_diff,
        l_rec,
        l_tri_cl,
        l_total: l_diff + l_rec + l_tri_cl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn rand_mat(r: &mut rng::StreamRng, rows: usize, cols: usize, scale: f64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect())
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    fn ce_oracle(logits: &[f64], target: usize) -> f64 {
        let cands = &logits[FIRST_ITEM_INDEX..];
        let m = cands.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = cands.iter().map(|v| (v - m).exp()).sum();
        -((logits[target] - m).exp() / z).ln()
    }

    fn logits_of(q: &[f64], e: &Mat) -> Vec<f64> {
        (0..e.rows).map(|i| q.iter().zip(e.row(i)).map(|(a, b)| a * b).sum()).collect()
    }

    #[test]
    fn diffusion_loss_cases() {
        let z = Mat::zeros(1, 4);
        assert_eq!(diffusion_loss(&z, &z).unwrap(), 0.0);
        let u = Mat::from_vec(1, 4, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(diffusion_loss(&z, &u).unwrap(), 1.0);
        let mut r = rng::stream(1, "test", 0);
        for _ in 0..100 {
            let (b, d) = (r.random_range(1..6), r.random_range(1..9));
            let x = rand_mat(&mut r, b, d, 2.0);
            let y = rand_mat(&mut r, b, d, 2.0);
            let mut acc = 0.0;
            for i in 0..b {
                for j in 0..d {
                    acc += (y.at(i, j) - x.at(i, j)) * (y.at(i, j) - x.at(i, j));
                }
            }
            assert!(close(diffusion_loss(&x, &y).unwrap(), acc / b as f64, 1e-12));
        }
    }

    #[test]
    fn rec_loss_matches_loop_oracle() {
        let mut r = rng::stream(2, "test", 0);
        for _ in 0..100 {
            let (b, d) = (r.random_range(1..5), r.random_range(1..7));
            let (nx, ny) = (r.random_range(3..12), r.random_range(3..12));
            let ex = rand_mat(&mut r, nx, d, 1.5);
            let ey = rand_mat(&mut r, ny, d, 1.5);
            let c = rand_mat(&mut r, b, d, 1.5);
            let g = rand_mat(&mut r, b, d, 1.5);
            let targets: Vec<Targets> = (0..b)
                .map(|_| {
                    let mut t = Targets::default();
                    match r.random_range(0..3) {
                        0 => t.x = Some(r.random_range(2..nx)),
                        1 => t.y = Some(r.random_range(2..ny)),
                        _ => {
                            t.x = Some(r.random_range(2..nx));
                            t.y = Some(r.random_range(2..ny));
                        }
                    }
                    t
                })
                .collect();
            let mut acc = 0.0;
            for (i, t) in targets.iter().enumerate() {
                for (v, e) in [(t.x, &ex), (t.y, &ey)] {
                    if let Some(v) = v {
                        acc += ce_oracle(&logits_of(c.row(i), e), v) + ce_oracle(&logits_of(g.row(i), e), v);
                    }
                }
            }
            let got = rec_loss(&c, &g, &targets, &ex, &ey).unwrap();
            assert!(close(got, acc / b as f64, 1e-10), "{got} vs {}", acc / b as f64);
        }
    }

    #[test]
    fn rec_loss_closed_forms_and_errors() {
        // Zero queries give uniform logits over the 7 real items of X.
        let e = Mat::filled(9, 3, 0.4);
        let z = Mat::zeros(1, 3);
        let t = [Targets { x: Some(4), y: None }];
        let l = rec_loss(&z, &z, &t, &e, &e).unwrap();
        assert!((l - 2.0 * 7f64.ln()).abs() < 1e-10);

        let mut e = Mat::zeros(5, 1);
        *e.at_mut(3, 0) = 20.0;
        let q = Mat::filled(1, 1, 1.0);
        let t = [Targets { x: Some(3), y: None }];
        assert!(rec_loss(&q, &q, &t, &e, &e).unwrap() < 2e-8);

        let bad = [Targets::default()];
        assert!(matches!(rec_loss(&q, &q, &bad, &e, &e), Err(DpgError::MalformedExample(_))));
        let oob = [Targets { x: Some(9), y: None }];
        assert!(rec_loss(&q, &q, &oob, &e, &e).is_err());
    }

    #[test]
    fn rec_loss_shift_invariant() {
        let mut r = rng::stream(3, "test", 0);
        let ex = rand_mat(&mut r, 8, 4, 1.0);
        let ey = rand_mat(&mut r, 6, 4, 1.0);
        // Shifting every logit of X by k: append a constant column to E_x
        // and a matching coordinate to the queries.
        let c = rand_mat(&mut r, 2, 4, 1.0);
        let g = rand_mat(&mut r, 2, 4, 1.0);
        let t = [Targets { x: Some(5), y: None }, Targets { x: Some(2), y: None }];
        let base = rec_loss(&c, &g, &t, &ex, &ey).unwrap();
        let widen = |m: &Mat, v: f64| {
            let mut out = Mat::zeros(m.rows, 5);
            for i in 0..m.rows {
                out.row_mut(i)[..4].copy_from_slice(m.row(i));
                out.row_mut(i)[4] = v;
            }
            out
        };
        let shifted = rec_loss(&widen(&c, 1.0), &widen(&g, 1.0), &t, &widen(&ex, 3.7), &widen(&ey, 0.0)).unwrap();
        assert!((base - shifted).abs() < 1e-10);
    }

    fn cl_oracle(h: [&Mat; 3], normalize: bool) -> f64 {
        let b = h[0].rows;
        let norm = |v: &[f64]| -> Vec<f64> {
            if !normalize {
                return v.to_vec();
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        };
        let dotp = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..b {
            for a in 0..3 {
                for p in 0..3 {
                    if a == p {
                        continue;
                    }
                    let anchor = norm(h[a].row(i));
                    let pos = dotp(&anchor, &norm(h[p].row(i))).exp();
                    let mut denom = pos;
                    for v in h {
                        for j in 0..b {
                            if j != i {
                                denom += dotp(&anchor, &norm(v.row(j))).exp();
                            }
                        }
                    }
                    total += -(pos / denom).ln();
                }
            }
        }
        total / (6 * b) as f64
    }

    #[test]
    fn tri_view_matches_loop_oracle() {
        let mut r = rng::stream(4, "test", 0);
        for k in 0..100 {
            let b = if k < 50 { 5 } else { r.random_range(2..7) };
            let d = r.random_range(1..6);
            let hs: Vec<Mat> = (0..3).map(|_| rand_mat(&mut r, b, d, 1.2)).collect();
            for normalize in [true, false] {
                let got = tri_view_cl_loss(&hs[0], &hs[1], &hs[2], normalize).unwrap();
                let want = cl_oracle([&hs[0], &hs[1], &hs[2]], normalize);
                assert!(close(got, want, 1e-10), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn tri_view_closed_forms() {
        for b in [2usize, 3, 7] {
            let h = Mat::filled(b, 3, 0.5);
            let l = tri_view_cl_loss(&h, &h, &h, true).unwrap();
            let want = ((3 * (b - 1) + 1) as f64).ln();
            assert!((l - want).abs() < 1e-10);
        }
        assert!((tri_view_cl_loss(&Mat::filled(2, 2, 1.0), &Mat::filled(2, 2, 1.0), &Mat::filled(2, 2, 1.0), true).unwrap() - 4f64.ln()).abs() < 1e-10);

        // Each user's three views coincide on a unit axis; users' axes are
        // orthogonal, so positives score 1 and negatives 0.
        let b = 3;
        let mut h = Mat::zeros(b, b);
        for i in 0..b {
            *h.at_mut(i, i) = 1.0;
        }
        let l = tri_view_cl_loss(&h, &h, &h, false).unwrap();
        let e = std::f64::consts::E;
        let want = -(e / (e + 3.0 * (b as f64 - 1.0))).ln();
        assert!((l - want).abs() < 1e-10);

        assert!(tri_view_cl_loss(&Mat::zeros(1, 2), &Mat::zeros(1, 2), &Mat::zeros(1, 2), true).is_err());
    }

    #[test]
    fn tri_view_decreases_with_positive_similarity() {
        let mut r = rng::stream(5, "test", 0);
        let b = 4;
        let sim = rand_mat(&mut r, 3 * b, 3 * b, 1.0);
        let eval = |s: &Mat| {
            let mut tape = Tape::new();
            let v = tape.constant(s.clone());
            let l = tape.tri_view_contrast(v, b);
            tape.scalar(l)
        };
        let base = eval(&sim);
        for (anchor, pos) in [(0, b), (b + 1, 2 * b + 1), (2 * b + 3, 3)] {
            let mut up = sim.clone();
            *up.at_mut(anchor, pos) += 0.1;
            assert!(eval(&up) < base);
        }
    }

    #[test]
    fn total_loss_rules() {
        let w = LossWeights::default();
        let b = total_loss(1.0, 2.0, 0.5, &w, false).unwrap();
        assert_eq!(b.l_total, 3.5);
        let b = total_loss(1.0, 2.0, 0.5, &w, true).unwrap();
        assert_eq!(b.l_total, 2.0);
        assert_eq!((b.l_diff, b.l_tri_cl), (0.0, 0.0));
        match total_loss(f64::NAN, 2.0, 0.5, &w, false) {
            Err(DpgError::NonFinite(m)) => assert!(m.contains("l_diff")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn losses_are_batch_permutation_invariant() {
        let mut r = rng::stream(6, "test", 0);
        let hs: Vec<Mat> = (0..3).map(|_| rand_mat(&mut r, 4, 3, 1.0)).collect();
        let perm = [2usize, 0, 3, 1];
        let permute = |m: &Mat| {
            let mut out = Mat::zeros(m.rows, m.cols);
            for (i, &p) in perm.iter().enumerate() {
                out.row_mut(i).copy_from_slice(m.row(p));
            }
            out
        };
        let a = tri_view_cl_loss(&hs[0], &hs[1], &hs[2], true).unwrap();
        let b = tri_view_cl_loss(&permute(&hs[0]), &permute(&hs[1]), &permute(&hs[2]), true).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
