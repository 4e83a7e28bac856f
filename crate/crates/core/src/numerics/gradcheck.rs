use super::{Graph, NumericsError, Tensor, Var};

/// Compare reverse-mode gradients against central finite differences.
///
/// `f` must rebuild the computation from the supplied leaves and return a
/// scalar. The result is the maximum over every parameter coordinate of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F, E>(f: F, params: &[Tensor<f64>], epsilon: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<NumericsError>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    if !g.value(loss).item().is_finite() {
        return Err(NumericsError::NonFinite {
            what: "loss".into(),
            coord: 0,
        }
        .into());
    }

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match g.grad(*var) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; params[pi].len()],
        };
        for c in 0..params[pi].len() {
            let orig = params[pi].data()[c];
            work[pi].data_mut()[c] = orig + epsilon;
            let up = eval(&work)?;
            work[pi].data_mut()[c] = orig - epsilon;
            let down = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic[c];
            if !(a.is_finite() && numeric.is_finite()) {
                return Err(NumericsError::NonFinite {
                    what: format!("parameter {pi}"),
                    coord: c,
                }
                .into());
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
