//! Finite-difference verification oracle for backward rules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::{lit, Scalar};
use crate::tensor::{Parameters, Tape, TensorError, Var};

/// How many coordinates per tensor the checker perturbs.
const COORDS_PER_TENSOR: usize = 32;

/// Compares analytic gradients against central finite differences.
///
/// `f` builds the scalar objective on a fresh tape from leaf handles that
/// appear in parameter order; the same closure serves both the analytic
/// pass (one tape + backward) and each of the two perturbed evaluations per
/// sampled coordinate. Coordinates are sampled without replacement, up to
/// 32 per tensor (all of them for smaller tensors).
///
/// Returns the maximum over sampled coordinates of
/// `|analytic - fd| / (|analytic| + 1e-8)`.
pub fn finite_difference_check<F, B>(
    f: B,
    params: &Parameters<F>,
    h: F,
    rng: &mut ChaCha8Rng,
) -> Result<F, TensorError>
where
    F: Scalar,
    B: Fn(&Tape<F>, &[Var]) -> Result<Var, TensorError>,
{
    assert!(h > F::zero(), "step size must be positive");

    let eval = |p: &Parameters<F>| -> Result<F, TensorError> {
        let tape = Tape::new();
        let vars: Vec<Var> = p.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
        let root = f(&tape, &vars)?;
        let v = tape.value(root).data()[0];
        Ok(v)
    };

    // Analytic gradients in one pass.
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars)?;
    tape.backward(root)?;
    let grads: Vec<Vec<F>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .unwrap_or_else(|| vec![F::zero(); tape.value(v).len()])
        })
        .collect();

    let mut work = params.clone();
    let mut max_rel = F::zero();
    let tiny = lit::<F>(1e-8);
    for ti in 0..work.len() {
        let n = work.at(ti).1.len();
        let coords = sample_coords(n, COORDS_PER_TENSOR, rng);
        for ci in coords {
            let orig = work.at(ti).1.data()[ci];
            work.at_mut(ti).1.data_mut()[ci] = orig + h;
            let plus = eval(&work)?;
            work.at_mut(ti).1.data_mut()[ci] = orig - h;
            let minus = eval(&work)?;
            work.at_mut(ti).1.data_mut()[ci] = orig;

            let fd = (plus - minus) / (h + h);
            let analytic = grads[ti][ci];
            let rel = (analytic - fd).abs() / (analytic.abs() + tiny);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Up to `k` distinct indices in `0..n`, via partial Fisher-Yates.
fn sample_coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut pool: Vec<usize> = (0..n).collect();
    let mut picked = Vec::with_capacity(k);
    for i in 0..k {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
        picked.push(pool[i]);
    }
    picked
}
