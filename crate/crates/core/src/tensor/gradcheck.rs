use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of a scalar
/// function and its central finite difference, over every coordinate of `x`.
///
/// The per-coordinate error is `|a - d| / (|a| + |d| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), step)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if !value.is_scalar() {
        return Err(Error::NonScalarLoss(value.shape().to_vec()));
    }
    if !value.item().is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let analytic: Vec<Tensor> = if g.requires_grad(out) {
        let grads = g.backward(out)?;
        vars.iter()
            .zip(xs)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect()
    } else {
        xs.iter().map(|t| Tensor::zeros(t.shape())).collect()
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (which, base) in xs.iter().enumerate() {
        for i in 0..base.len() {
            let orig = base.data()[i];
            probe[which].data_mut()[i] = orig + step;
            let plus = eval(&probe)?;
            probe[which].data_mut()[i] = orig - step;
            let minus = eval(&probe)?;
            probe[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[which].data()[i];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sum_of_squares_is_sharp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::vector((0..8).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let err = grad_check(
            |g, x| {
                let sq = g.square(x);
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let err = grad_check(
            |g, _| {
                let c = g.constant(Tensor::scalar(3.0));
                Ok(c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::vector(vec![-1.0]);
        let r = grad_check(
            |g, x| {
                let l = g.log(x);
                Ok(g.sum(l))
            },
            &x,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
