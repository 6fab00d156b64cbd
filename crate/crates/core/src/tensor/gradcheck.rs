//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward function, so it is
//! independent of every backward rule it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Magnitudes below this are treated as this value in the relative-error
    /// denominator.
    pub floor: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(f(&g, &vars)?.item())
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences for every input tensor.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    f: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut perturbed = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < t.len() => {
                let mut v = sample(&mut rng, t.len(), k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..t.len()).collect(),
        };
        for j in coords {
            let orig = t.data()[j];
            perturbed[i].data_mut()[j] = orig + opts.step;
            let up = eval(&perturbed, &f)?;
            perturbed[i].data_mut()[j] = orig - opts.step;
            let down = eval(&perturbed, &f)?;
            perturbed[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[i][j];
            report.checks.push(CoordCheck {
                input: i,
                index: j,
                analytic: a,
                numeric,
                rel_error: rel_error(a, numeric, opts.floor),
            });
        }
    }
    Ok(report)
}
