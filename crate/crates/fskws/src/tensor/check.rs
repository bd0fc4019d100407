use super::{Scalar, Tape, Tensor, Var};
use crate::error::Result;

/// Compare the tape's analytic gradient of a scalar-valued graph against
/// central finite differences at `point`.
///
/// `build` receives a fresh tape plus one leaf per input tensor and must
/// return a scalar node. The perturbed forward evaluations and the error
/// ratio are computed in the tape's element type, so instantiating with
/// `f64` gives the wide-precision oracle.
///
/// Returns the max over all coordinates of
/// |analytic − central| / (|analytic| + |central| + ε).
pub fn finite_diff_check<T: Scalar, F>(build: F, point: &[Tensor<T>], h: T) -> Result<T>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eps = T::from_f32(1e-8);

    // analytic gradients
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(point)
        .map(|(&v, p)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    let eval = |inputs: &[Tensor<T>]| -> Result<T> {
        let mut tape = Tape::<T>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = point.to_vec();
    for (i, p) in point.iter().enumerate() {
        for j in 0..p.numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let central = (up - down) / (h + h);
            let a = analytic[i].data()[j];
            let rel = (a - central).abs() / (a.abs() + central.abs() + eps);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_checks_tightly() {
        let point = vec![Tensor::<f64>::vector(vec![0.4, -1.7, 2.2])];
        let err = finite_diff_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                Ok(tape.sum_all(sq))
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-6, "rel err {}", err);
    }

    #[test]
    fn reports_disagreement_instead_of_throwing() {
        // gradient of |x| at a kink-adjacent point disagrees with central diff
        let point = vec![Tensor::<f64>::vector(vec![1e-7])];
        let err = finite_diff_check(
            |tape, vars| {
                let r = tape.relu(vars[0]);
                Ok(tape.sum_all(r))
            },
            &point,
            1e-3,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
