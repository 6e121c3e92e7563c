use super::{Tape, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1e-8, |numeric_i|)`.
/// `f` must produce a single-element value. Test inputs should stay clear of
/// relu/max kinks, where the central difference is not the derivative.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = f(&tape, xv);
        let grads = tape
            .backward(y)
            .expect("grad_check: function must return a scalar");
        grads.tensor(xv).into_data()
    };

    let eval = |probe: Tensor| -> f64 {
        let tape = Tape::no_grad();
        let xv = tape.constant(probe);
        f(&tape, xv).item()
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus) - eval(minus)) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    worst
}
