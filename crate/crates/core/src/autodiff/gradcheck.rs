use super::{GradFault, Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Settings for [`gradcheck`].
#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    /// Largest acceptable relative error `|a - n| / max(|a|, |n|, 1e-8)`.
    pub tolerance: f64,
    /// Check at most this many entries per parameter, drawn at random.
    /// `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Corrupts one backward rule of the analytic pass.
    pub fault: Option<GradFault>,
    /// Richardson-extrapolate from steps `h` and `2h`, `(4 D(h) - D(2h)) / 3`,
    /// which cancels the `h^2` truncation term. Matters for entries whose
    /// gradient is orders of magnitude below the loss.
    pub extrapolate: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            tolerance: 1e-6,
            max_entries: None,
            seed: 0,
            fault: None,
            extrapolate: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    /// Entries whose perturbation moved a ReLU across its kink. The function
    /// is not differentiable between those points, so they are not compared.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    pub worst_entry: Option<usize>,
    pub non_finite: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients with central finite differences,
/// step `1e-4 * max(1, |theta|)`, for every trainable parameter in `params`.
///
/// `build` must construct a one-element loss from the bound parameter vars
/// and must be a deterministic function of the parameter values.
pub fn gradcheck<F>(params: &ParamStore<f64>, mut build: F, config: &GradcheckConfig) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(fault) = config.fault {
        g.inject_fault(fault);
    }
    let vars = params.bind(&mut g);
    let loss = build(&mut g, &vars)?;
    let base_signature = g.kink_signature();
    let grads = g.backward(loss)?;
    drop(g);

    let mut rng = Rng::new(config.seed);
    let mut probe = params.clone();
    let mut report = GradcheckReport {
        tolerance: config.tolerance,
        params: Vec::new(),
    };

    for (slot, param) in params.iter().enumerate() {
        if !param.trainable {
            continue;
        }
        let analytic = grads
            .get(vars[slot])
            .ok_or_else(|| Error::invalid(format!("no gradient for '{}'", param.name)))?;
        let mut order: Vec<usize> = (0..param.value.numel()).collect();
        let wanted = match config.max_entries {
            Some(m) if m < order.len() => {
                rng.shuffle(&mut order);
                m
            }
            _ => order.len(),
        };
        let mut check = ParamCheck {
            name: param.name.clone(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_err: 0.0,
            worst_entry: None,
            non_finite: false,
            passed: true,
        };
        for &entry in &order {
            if check.checked == wanted {
                break;
            }
            let theta = param.value.data()[entry];
            let h = 1e-4 * theta.abs().max(1.0);
            let a = analytic.data()[entry];
            let steps: &[f64] = if config.extrapolate { &[h, 2.0 * h] } else { &[h] };
            let mut diffs = [0.0; 2];
            let mut bad = false;
            let mut kink = false;
            for (k, &step) in steps.iter().enumerate() {
                probe.at_mut(slot).value.data_mut()[entry] = theta + step;
                let (plus, sig_plus) = evaluate(&probe, &mut build)?;
                probe.at_mut(slot).value.data_mut()[entry] = theta - step;
                let (minus, sig_minus) = evaluate(&probe, &mut build)?;
                probe.at_mut(slot).value.data_mut()[entry] = theta;
                bad |= !(plus.is_finite() && minus.is_finite());
                kink |= sig_plus != base_signature || sig_minus != base_signature;
                diffs[k] = (plus - minus) / (2.0 * step);
            }
            if bad || !a.is_finite() {
                check.non_finite = true;
                check.passed = false;
                check.worst_entry = Some(entry);
                check.max_rel_err = f64::INFINITY;
                break;
            }
            if kink {
                check.skipped_kinks += 1;
                continue;
            }
            let numeric = if config.extrapolate {
                (4.0 * diffs[0] - diffs[1]) / 3.0
            } else {
                diffs[0]
            };
            let err = relative_error(a, numeric);
            check.checked += 1;
            if err > check.max_rel_err || check.worst_entry.is_none() {
                check.max_rel_err = check.max_rel_err.max(err);
                check.worst_entry = Some(entry);
            }
        }
        if check.max_rel_err > config.tolerance {
            check.passed = false;
        }
        report.params.push(check);
    }
    Ok(report)
}

fn evaluate<F>(params: &ParamStore<f64>, build: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::inference();
    let vars = params.bind(&mut g);
    let loss = build(&mut g, &vars)?;
    Ok((g.value(loss).item()?, g.kink_signature()))
}
