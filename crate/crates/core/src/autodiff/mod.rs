//! Minimal tape-based reverse-mode differentiation over the small set of
//! matrix operations the mesh autoencoder needs.
//!
//! A [`Tape`] is rebuilt for every training step. Every operation records its
//! value eagerly and knows its vector-Jacobian product; [`Tape::backward`]
//! walks the nodes once in reverse creation order. Nonsmooth points use fixed
//! conventions: `|x|'(0) = 0` and nearest-neighbour assignments (see
//! [`nearest_assignments`]) are constants.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// For each row of `a`, the index of the nearest row of `b` (squared
/// Euclidean distance, ties to the lowest index), and the same from `b` to
/// `a`. Both matrices must have the same number of columns.
///
/// The result is piecewise constant in the inputs, so it is used as a
/// constant index set when differentiating.
pub fn nearest_assignments(a: &Tensor, b: &Tensor) -> (Vec<usize>, Vec<usize>) {
    assert_eq!(a.cols(), b.cols(), "nearest_assignments: column counts differ");
    let c = a.cols();
    if c == 3 {
        return nearest_assignments_xyz(a, b);
    }
    let mut a_best = vec![(f64::INFINITY, 0usize); a.rows()];
    let mut b_best = vec![(f64::INFINITY, 0usize); b.rows()];
    for (i, ai) in a.data().chunks_exact(c).enumerate() {
        for (j, bj) in b.data().chunks_exact(c).enumerate() {
            let d: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            if d < a_best[i].0 {
                a_best[i] = (d, j);
            }
            if d < b_best[j].0 {
                b_best[j] = (d, i);
            }
        }
    }
    (
        a_best.into_iter().map(|(_, j)| j).collect(),
        b_best.into_iter().map(|(_, i)| i).collect(),
    )
}

fn nearest_assignments_xyz(a: &Tensor, b: &Tensor) -> (Vec<usize>, Vec<usize>) {
    let pts = |t: &Tensor| -> Vec<[f64; 3]> { t.data().chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect() };
    let (pa, pb) = (pts(a), pts(b));
    let mut a_idx = vec![0usize; pa.len()];
    let mut b_dist = vec![f64::INFINITY; pb.len()];
    let mut b_idx = vec![0usize; pb.len()];
    for (i, p) in pa.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, q) in pb.iter().enumerate() {
            let (dx, dy, dz) = (p[0] - q[0], p[1] - q[1], p[2] - q[2]);
            let d = dx * dx + dy * dy + dz * dz;
            if d < best {
                best = d;
                a_idx[i] = j;
            }
            if d < b_dist[j] {
                b_dist[j] = d;
                b_idx[j] = i;
            }
        }
    }
    (a_idx, b_idx)
}

/// Largest componentwise relative error between the reverse-mode gradient of
/// `f` at `point` and a central difference with step `eps`:
/// `|analytic - numeric| / (|analytic| + 1e-12)`.
pub fn check_gradient<F>(f: F, point: &[Tensor], eps: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    assert!(eps > 0.0 && eps <= 1e-3, "eps must lie in (0, 1e-3]");
    let mut tape = Tape::new();
    let leaves: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &leaves);
    let grads = tape
        .backward(root)
        .expect("check_gradient needs a scalar-valued function");

    let eval = |pt: &[Tensor]| {
        let mut t = Tape::new();
        let vars: Vec<Var> = pt.iter().map(|x| t.constant(x.clone())).collect();
        let r = f(&mut t, &vars);
        t.value(r).item()
    };

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = point.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .get(*leaf)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(point[li].rows(), point[li].cols()));
        for k in 0..point[li].len() {
            let x0 = point[li].data()[k];
            work[li].data_mut()[k] = x0 + eps;
            let fp = eval(&work);
            work[li].data_mut()[k] = x0 - eps;
            let fm = eval(&work);
            work[li].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / (a.abs() + 1e-12));
        }
    }
    worst
}
