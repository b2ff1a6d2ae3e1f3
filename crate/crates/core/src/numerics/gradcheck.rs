//! Finite-difference gradient checker.

use super::array::{Array, Scalar};
use super::graph::{Graph, NodeId};
use super::NumError;

/// Compares the tape gradient of a scalar objective against central
/// differences.
///
/// `f` builds the objective from parameter nodes; it is re-invoked with
/// perturbed parameter values for the numeric side. Returns the maximum over
/// all parameters and elements of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<T, F>(mut f: F, params: &[Array<T>], eps: T) -> Result<T, NumError>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &[NodeId]) -> Result<NodeId, NumError>,
{
    if eps <= T::zero() {
        return Err(NumError::InvalidParam("grad_check eps must be > 0".into()));
    }

    type Built<T> = (Graph<T>, Vec<NodeId>, NodeId);
    let eval = |f: &mut F, values: &[Array<T>]| -> Result<Built<T>, NumError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|p| g.param(p.clone())).collect();
        let root = f(&mut g, &ids)?;
        if g.value(root).len() != 1 {
            return Err(NumError::InvalidParam(format!(
                "grad_check objective must be scalar, got shape {:?}",
                g.value(root).shape()
            )));
        }
        if !g.value(root).is_all_finite() {
            return Err(NumError::NonFinite {
                stage: "grad_check objective".into(),
            });
        }
        Ok((g, ids, root))
    };

    // analytic gradients
    let (mut g, ids, root) = eval(&mut f, params)?;
    let mut grads = g.backward(root)?;
    let analytic: Vec<Vec<T>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            grads
                .take(id)
                .map(|a| a.as_slice().to_vec())
                .unwrap_or_else(|| vec![T::zero(); p.len()])
        })
        .collect();
    drop(g);

    let floor = T::of_f64(1e-8);
    let mut max_rel = T::zero();
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.len() {
            let mut perturbed: Vec<Array<T>> = params.to_vec();
            let mut plus = p.as_slice().to_vec();
            plus[e] += eps;
            perturbed[pi] = Array::from_vec(p.shape(), plus)?;
            let (gp, _, rp) = eval(&mut f, &perturbed)?;
            let fplus = gp.value(rp).as_slice()[0];
            drop(gp);

            let mut minus = p.as_slice().to_vec();
            minus[e] -= eps;
            perturbed[pi] = Array::from_vec(p.shape(), minus)?;
            let (gm, _, rm) = eval(&mut f, &perturbed)?;
            let fminus = gm.value(rm).as_slice()[0];
            drop(gm);

            let numeric = (fplus - fminus) / (eps + eps);
            let a = analytic[pi][e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
