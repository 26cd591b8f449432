use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`. Returns the maximum over all coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = pts.iter().map(|p| tape.leaf(p)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract("grad_check needs a scalar function".into()));
        }
        let v = tape.item(out);
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let leaves: Vec<Tensor> = point.iter().map(|p| p.clone().with_grad()).collect();
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars = leaves.iter().map(|p| tape.leaf(p)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        let g = tape.backward(out)?;
        vars.iter().zip(&leaves).map(|(v, p)| g.get_or_zeros(*v, p.numel())).collect()
    };

    let mut work: Vec<Tensor> = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let x0 = work[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let num = (fp - fm) / (2.0 * h);
            let a = analytic[i][j];
            worst = worst.max((a - num).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}
