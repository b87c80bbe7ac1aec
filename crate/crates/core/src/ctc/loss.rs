use crate::error::{Error, Result};
use crate::tensor::{log_add, Mat};

/// Result of [`ctc_loss`]. Unalignable targets give `nll = +∞`, a zero
/// gradient and `alignable = false`.
#[derive(Clone, Debug)]
pub struct CtcLoss {
    pub nll: f64,
    /// `d nll / d logp`, same shape as the input.
    pub grad: Mat,
    pub alignable: bool,
}

/// Frames needed to emit `target`: one per label plus one blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn unalignable(t: usize, v: usize) -> CtcLoss {
    CtcLoss {
        nll: f64::INFINITY,
        grad: Mat::zeros(t, v),
        alignable: false,
    }
}

/// Negative log-likelihood of `target` under frame log-posteriors `logp`
/// (`T × V`), summed over every alignment, with its gradient wrt `logp`.
/// Entries of `logp` are treated as independent inputs.
pub fn ctc_loss(logp: &Mat, target: &[usize], blank: usize) -> CtcLoss {
    let (t_len, v) = (logp.rows(), logp.cols());
    if t_len == 0 || t_len < min_frames(target) || target.iter().any(|&k| k == blank || k >= v) {
        return unalignable(t_len, v);
    }
    let s_len = 2 * target.len() + 1;
    let ext: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { blank } else { target[s / 2] })
        .collect();
    let skip_ok: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2])
        .collect();
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = logp.get(0, ext[0]);
    if s_len > 1 {
        alpha[1] = logp.get(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = logp.row(t);
        // States that cannot still reach the end are skipped.
        for s in 0..s_len {
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok[s] {
                a = log_add(a, prev[s - 2]);
            }
            cur[s] = if a == neg { neg } else { a + row[ext[s]] };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let mut log_p = last[s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, last[s_len - 2]);
    }
    if !log_p.is_finite() {
        return unalignable(t_len, v);
    }

    let mut beta = vec![neg; t_len * s_len];
    let base = (t_len - 1) * s_len;
    beta[base + s_len - 1] = logp.get(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[base + s_len - 2] = logp.get(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        let row = logp.row(t);
        for s in 0..s_len {
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok[s + 2] {
                b = log_add(b, next[s + 2]);
            }
            cur[s] = if b == neg { neg } else { b + row[ext[s]] };
        }
    }

    let mut grad = Mat::zeros(t_len, v);
    let mut occ = vec![neg; v];
    for t in 0..t_len {
        occ.fill(neg);
        let row = logp.row(t);
        for s in 0..s_len {
            let (a, b) = (alpha[t * s_len + s], beta[t * s_len + s]);
            if a == neg || b == neg {
                continue;
            }
            let k = ext[s];
            occ[k] = log_add(occ[k], a + b - row[k]);
        }
        for (g, &o) in grad.row_mut(t).iter_mut().zip(&occ) {
            if o != neg {
                *g = -(o - log_p).exp();
            }
        }
    }
    CtcLoss {
        nll: -log_p,
        grad,
        alignable: true,
    }
}

/// Upper bound on labelings [`brute_force_ctc`] will enumerate.
pub const BRUTE_FORCE_LIMIT: f64 = 1e7;

/// Exact probability of `target` by enumerating all `V^T` frame labelings and
/// summing those that collapse to it. Reference oracle for [`ctc_loss`].
pub fn brute_force_ctc(logp: &Mat, target: &[usize], blank: usize) -> Result<f64> {
    let (t_len, v) = (logp.rows(), logp.cols());
    let n = (v as f64).powi(t_len as i32);
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge(n));
    }
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    let mut collapsed = Vec::with_capacity(t_len);
    loop {
        collapsed.clear();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == target {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| logp.get(t, k)).sum();
            total += lp.exp();
        }
        // Mixed-radix increment.
        let mut i = 0;
        loop {
            if i == t_len {
                return Ok(total);
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(t: usize, v: usize) -> Mat {
        Mat::filled(t, v, -(v as f64).ln())
    }

    #[test]
    fn single_frame_single_label() {
        let lp = Mat::from_rows(&[vec![0.3f64.ln(), 0.7f64.ln()]]);
        let out = ctc_loss(&lp, &[1], 0);
        assert!((out.nll + 0.7f64.ln()).abs() < 1e-14);
        assert_eq!(out.grad.row(0), &[0.0, -1.0]);
    }

    #[test]
    fn two_frames_enumeration() {
        let (a1, a2) = (0.6, 0.2);
        let lp = Mat::from_rows(&[
            vec![(1.0f64 - a1).ln(), a1.ln()],
            vec![(1.0f64 - a2).ln(), a2.ln()],
        ]);
        let p = a1 * a2 + a1 * (1.0 - a2) + (1.0 - a1) * a2;
        let out = ctc_loss(&lp, &[1], 0);
        assert!(((-out.nll).exp() - p).abs() < 1e-14);
        assert!((brute_force_ctc(&lp, &[1], 0).unwrap() - p).abs() < 1e-14);
    }

    #[test]
    fn repeats_need_a_blank() {
        let out = ctc_loss(&uniform(2, 3), &[1, 1], 0);
        assert!(!out.alignable);
        assert_eq!(out.nll, f64::INFINITY);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(brute_force_ctc(&uniform(2, 3), &[1, 1], 0).unwrap(), 0.0);
        assert!(ctc_loss(&uniform(3, 3), &[1, 1], 0).alignable);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let lp = Mat::from_rows(&[
            vec![0.5f64.ln(), 0.5f64.ln()],
            vec![0.9f64.ln(), 0.1f64.ln()],
        ]);
        let out = ctc_loss(&lp, &[], 0);
        assert!(((-out.nll).exp() - 0.45).abs() < 1e-14);
        assert!((brute_force_ctc(&lp, &[], 0).unwrap() - 0.45).abs() < 1e-14);
    }

    #[test]
    fn uniform_single_frame_oracle() {
        assert!((brute_force_ctc(&uniform(1, 2), &[1], 0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn oracle_refuses_huge_instances() {
        assert!(matches!(
            brute_force_ctc(&uniform(12, 10), &[1], 0),
            Err(Error::InstanceTooLarge(_))
        ));
    }

    #[test]
    fn minimum_frames() {
        assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
        assert_eq!(min_frames(&[]), 0);
    }
}
