use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which parameter entries get a finite-difference probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    All,
    /// At most this many entries per parameter tensor, chosen by seed.
    PerTensor { entries: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Compares tape gradients with central differences `(f(p+h) − f(p−h)) / 2h`.
///
/// `f` records a scalar objective on a fresh tape from leaves holding
/// `params`. The error of an entry is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], step: f64, sampling: Sampling) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone().with_grad())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check needs a scalar objective, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();
    drop(tape);

    let mut rng = match sampling {
        Sampling::PerTensor { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Sampling::All => None,
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0 };
    let mut probe = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let entries: Vec<usize> = match (&mut rng, sampling) {
            (Some(rng), Sampling::PerTensor { entries, .. }) if entries < p.numel() => {
                let mut picked = sample(rng, p.numel(), entries).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..p.numel()).collect(),
        };
        for e in entries {
            let orig = p.data()[e];
            probe[pi].data_mut()[e] = orig + step;
            let up = eval(&probe)?;
            let f_up = up.0.value(up.2).data()[0];
            probe[pi].data_mut()[e] = orig - step;
            let down = eval(&probe)?;
            let f_down = down.0.value(down.2).data()[0];
            probe[pi].data_mut()[e] = orig;

            let numeric = (f_up - f_down) / (2.0 * step);
            let exact = analytic[pi][e];
            let rel = (exact - numeric).abs() / 1f64.max(exact.abs()).max(numeric.abs());
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, e));
            }
        }
    }
    Ok(report)
}
