//! Central finite differences and analytic-versus-numeric comparison reports.

use std::fmt::Write as _;

use crate::error::{dim_err, Error, Result};
use crate::params::Parameterized;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub threshold: f64,
    /// Entries moving a kinked pre-activation within `kink_factor * epsilon` of 0 are skipped.
    pub kink_factor: f64,
    /// A failing entry whose absolute disagreement is within
    /// `resolution_factor * u * |J| / epsilon` (u the unit roundoff) is listed
    /// as unresolved: the difference quotient cannot see that far below the loss.
    pub resolution_factor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-5,
            threshold: 1e-5,
            kink_factor: 10.0,
            resolution_factor: 10.0,
        }
    }
}

/// One loss evaluation together with the pre-activations feeding kinked activations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Probe {
    pub loss: f64,
    pub kinks: Vec<f64>,
}

impl Probe {
    pub fn loss_only(loss: f64) -> Self {
        Probe { loss, kinks: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<Entry>,
    /// Entries whose perturbation crossed a kink.
    pub skipped: Vec<Entry>,
    /// Entries whose disagreement sits below the rounding floor of the difference quotient.
    pub unresolved: Vec<Entry>,
    pub epsilon: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

impl GradCheckReport {
    pub fn new(entries: Vec<Entry>, skipped: Vec<Entry>, epsilon: f64, threshold: f64) -> Self {
        let pass = entries.iter().all(|e| e.rel_error <= threshold);
        GradCheckReport {
            entries,
            skipped,
            unresolved: Vec::new(),
            epsilon,
            threshold,
            pass,
        }
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.rel_error))
    }

    pub fn worst(&self) -> Option<&Entry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn failures(&self) -> impl Iterator<Item = &Entry> {
        self.entries.iter().filter(move |e| e.rel_error > self.threshold)
    }

    /// Appends another report's entries; the verdict is recomputed.
    pub fn merge(mut self, other: GradCheckReport) -> Self {
        self.entries.extend(other.entries);
        self.skipped.extend(other.skipped);
        self.unresolved.extend(other.unresolved);
        self.pass = self.entries.iter().all(|e| e.rel_error <= self.threshold);
        self
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "gradcheck: {} entries, {} skipped at kinks, {} unresolved, eps={:e}, threshold={:e}, max rel error={:.3e} -> {}",
            self.entries.len(),
            self.skipped.len(),
            self.unresolved.len(),
            self.epsilon,
            self.threshold,
            self.max_rel_error(),
            if self.pass { "PASS" } else { "FAIL" }
        );
        for e in self.failures() {
            let _ = writeln!(
                s,
                "  FAIL {}: analytic={:.10e} numeric={:.10e} rel={:.3e}",
                e.path, e.analytic, e.numeric, e.rel_error
            );
        }
        for e in &self.skipped {
            let _ = writeln!(s, "  skipped {} (kink)", e.path);
        }
        for e in &self.unresolved {
            let _ = writeln!(
                s,
                "  unresolved {}: analytic={:.10e} numeric={:.10e} (below rounding floor)",
                e.path, e.analytic, e.numeric
            );
        }
        s
    }

    /// One row per entry: `path,analytic,numeric,rel_error,status`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("path,analytic,numeric,rel_error,status\n");
        for e in &self.entries {
            let status = if e.rel_error <= self.threshold { "pass" } else { "fail" };
            let _ = writeln!(s, "{},{:e},{:e},{:e},{}", e.path, e.analytic, e.numeric, e.rel_error, status);
        }
        for e in &self.skipped {
            let _ = writeln!(s, "{},{:e},{:e},{:e},skipped", e.path, e.analytic, e.numeric, e.rel_error);
        }
        for e in &self.unresolved {
            let _ = writeln!(s, "{},{:e},{:e},{:e},unresolved", e.path, e.analytic, e.numeric, e.rel_error);
        }
        s
    }
}

fn determinism<M>(model: &mut M, probe: &mut impl FnMut(&mut M) -> Result<Probe>) -> Result<Probe> {
    let a = probe(model)?;
    let b = probe(model)?;
    if a.loss.to_bits() != b.loss.to_bits() {
        return Err(Error::Determinism(format!(
            "two baseline evaluations gave {:e} and {:e}",
            a.loss, b.loss
        )));
    }
    Ok(a)
}

fn flat_entry<M: Parameterized>(model: &mut M, flat: usize) -> &mut f64 {
    let mut rem = flat;
    for t in model.params_mut() {
        if rem < t.len() {
            return &mut t.data_mut()[rem];
        }
        rem -= t.len();
    }
    panic!("parameter index {flat} out of range")
}

/// Central-difference gradient of `loss` with respect to every parameter.
pub fn finite_diff_grad<M: Parameterized>(
    model: &mut M,
    mut loss: impl FnMut(&mut M) -> Result<f64>,
    epsilon: f64,
) -> Result<Vec<Tensor>> {
    let mut probe = |m: &mut M| loss(m).map(Probe::loss_only);
    determinism(model, &mut probe)?;
    let shapes: Vec<Vec<usize>> = model.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut out: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
    let mut flat = 0;
    for g in out.iter_mut() {
        for i in 0..g.len() {
            let orig = *flat_entry(model, flat);
            *flat_entry(model, flat) = orig + epsilon;
            let plus = probe(model)?.loss;
            *flat_entry(model, flat) = orig - epsilon;
            let minus = probe(model)?.loss;
            *flat_entry(model, flat) = orig;
            g.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
            flat += 1;
        }
    }
    Ok(out)
}

fn kink_crossed(plus: &Probe, minus: &Probe, margin: f64) -> bool {
    plus.kinks.iter().zip(&minus.kinks).any(|(&p, &m)| {
        p != m && ((p >= 0.0) != (m >= 0.0) || p.abs().min(m.abs()) < margin)
    })
}

/// Compares analytic parameter gradients against central differences.
pub fn check<M: Parameterized>(
    model: &mut M,
    analytic: &[Tensor],
    mut probe: impl FnMut(&mut M) -> Result<Probe>,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    determinism(model, &mut probe)?;
    let names: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec()))
        .collect();
    if names.len() != analytic.len() {
        return dim_err(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            names.len()
        ));
    }
    let eps = config.epsilon;
    let margin = config.kink_factor * eps;
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut unresolved = Vec::new();
    let mut flat = 0;
    for ((name, shape), grad) in names.iter().zip(analytic) {
        if grad.shape() != shape.as_slice() {
            return dim_err(format!("gradient for {name} has shape {:?}, expected {shape:?}", grad.shape()));
        }
        for i in 0..grad.len() {
            let orig = *flat_entry(model, flat);
            *flat_entry(model, flat) = orig + eps;
            let plus = probe(model)?;
            *flat_entry(model, flat) = orig - eps;
            let minus = probe(model)?;
            *flat_entry(model, flat) = orig;
            flat += 1;
            let numeric = (plus.loss - minus.loss) / (2.0 * eps);
            let a = grad.data()[i];
            let entry = Entry {
                path: format!("{name}[{}]", index_label(shape, i)),
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            };
            let floor = config.resolution_factor * f64::EPSILON * plus.loss.abs().max(minus.loss.abs()) / eps;
            if kink_crossed(&plus, &minus, margin) {
                skipped.push(entry);
            } else if entry.rel_error > config.threshold && (a - numeric).abs() <= floor {
                unresolved.push(entry);
            } else {
                entries.push(entry);
            }
        }
    }
    let mut report = GradCheckReport::new(entries, skipped, eps, config.threshold);
    report.unresolved = unresolved;
    Ok(report)
}

/// Central-difference gradient of a scalar function of one tensor.
pub fn finite_diff_fn(
    x: &Tensor,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    epsilon: f64,
) -> Result<Tensor> {
    let mut work = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + epsilon;
        let plus = f(&work)?;
        work.data_mut()[i] = orig - epsilon;
        let minus = f(&work)?;
        work.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(out)
}

/// Five-point stencil `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`.
///
/// Truncation is `O(h⁴)`, so a larger step keeps rounding noise small for
/// entries whose magnitude is far below the loss scale.
pub fn finite_diff_fn_5pt(
    x: &Tensor,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    step: f64,
) -> Result<Tensor> {
    let mut work = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = work.data()[i];
        let mut at = |k: f64| -> Result<f64> {
            work.data_mut()[i] = orig + k * step;
            f(&work)
        };
        let v = -at(2.0)? + 8.0 * at(1.0)? - 8.0 * at(-1.0)? + at(-2.0)?;
        work.data_mut()[i] = orig;
        out.data_mut()[i] = v / (12.0 * step);
    }
    Ok(out)
}

/// Entry-wise comparison of two tensors under a common name.
pub fn compare_tensors(name: &str, analytic: &Tensor, numeric: &Tensor, epsilon: f64, threshold: f64) -> Result<GradCheckReport> {
    analytic.check_same_shape(numeric)?;
    let entries = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .enumerate()
        .map(|(i, (&a, &n))| Entry {
            path: format!("{name}[{}]", index_label(analytic.shape(), i)),
            analytic: a,
            numeric: n,
            rel_error: relative_error(a, n),
        })
        .collect();
    Ok(GradCheckReport::new(entries, Vec::new(), epsilon, threshold))
}

/// Like [`compare_tensors`], but entries whose absolute disagreement is within
/// `resolution` (the rounding floor of the difference quotient) are listed as
/// unresolved instead of judged by relative error.
pub fn compare_tensors_resolved(
    name: &str,
    analytic: &Tensor,
    numeric: &Tensor,
    epsilon: f64,
    threshold: f64,
    resolution: f64,
) -> Result<GradCheckReport> {
    let full = compare_tensors(name, analytic, numeric, epsilon, threshold)?;
    let (unresolved, entries) = full
        .entries
        .into_iter()
        .partition(|e| e.rel_error > threshold && (e.analytic - e.numeric).abs() <= resolution);
    let mut report = GradCheckReport::new(entries, Vec::new(), epsilon, threshold);
    report.unresolved = unresolved;
    Ok(report)
}

fn index_label(shape: &[usize], mut flat: usize) -> String {
    let mut idx = vec![0; shape.len()];
    for (slot, &n) in idx.iter_mut().zip(shape).rev() {
        *slot = flat % n.max(1);
        flat /= n.max(1);
    }
    idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}
