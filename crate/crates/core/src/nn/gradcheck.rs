use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, NnError, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Number of parameter entries to probe; `None` probes all of them.
    pub samples: Option<usize>,
    pub seed: u64,
    /// Gradients with magnitude below this are compared absolutely.
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples: Some(500),
            seed: 0,
            abs_floor: 1e-7,
        }
    }
}

/// One evaluation of the function under test.
pub struct Probe {
    pub loss: f64,
    pub grads: Gradients,
    /// Hash of every piecewise branch taken (see [`super::Graph::branch_signature`]).
    pub branches: u64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose ±eps probes crossed a ReLU or max-pool decision boundary.
    pub skipped_kinks: usize,
    /// Parameter name, flat index, analytic and numeric value of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare analytic gradients against central finite differences.
///
/// `f` evaluates the scalar loss, its analytic gradients and the branch
/// signature of the graph at the given parameters. A probe whose perturbed
/// evaluations take different branches straddles a non-differentiable point
/// and is skipped.
pub fn check_gradients<F>(
    params: &mut ParamStore,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NnError>
where
    F: Fn(&ParamStore) -> Result<Probe, NnError>,
{
    if !(1e-6..=1e-4).contains(&opts.eps) {
        return Err(NnError::Config(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            opts.eps
        )));
    }
    let base = f(params)?;
    if !base.loss.is_finite() || !base.grads.all_finite() {
        return Err(NnError::NonFinite("analytic gradient".into()));
    }

    // Flat index over every trainable entry; embedding row 0 is padding.
    let mut entries: Vec<(ParamId, usize)> = Vec::new();
    for (id, p) in params.iter() {
        if !p.trainable {
            continue;
        }
        let skip = if p.name.ends_with("embedding") {
            p.value.dims2().1
        } else {
            0
        };
        entries.extend((skip..p.value.len()).map(|i| (id, i)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let picked: Vec<usize> = match opts.samples {
        Some(n) if n < entries.len() => {
            let mut v = sample(&mut rng, entries.len(), n).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..entries.len()).collect(),
    };

    let eps = opts.eps;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    for k in picked {
        let (id, i) = entries[k];
        let orig = params.get(id).value.data()[i];
        params.get_mut(id).value.data_mut()[i] = orig + eps;
        let plus = f(params)?;
        params.get_mut(id).value.data_mut()[i] = orig - eps;
        let minus = f(params)?;
        params.get_mut(id).value.data_mut()[i] = orig;

        if plus.branches != base.branches || minus.branches != base.branches {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * eps);
        let analytic = base.grads.get(id).map_or(0.0, |g| g.at(i));
        let denom = analytic.abs().max(numeric.abs()).max(opts.abs_floor);
        let rel = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((params.get(id).name.clone(), i, analytic, numeric));
        }
    }
    Ok(report)
}
