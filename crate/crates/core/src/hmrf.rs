//! Two-class hidden Markov random field segmentation fit by EM, with
//! iterated conditional modes (ICM) as the MAP step.
//!
//! The label prior is a Potts field over the 6-neighbourhood: each voxel
//! pays `beta` for every masked face neighbour carrying a different label.
//! The joint log-posterior counts each unordered neighbour pair once, which
//! makes the ICM local rule an exact coordinate ascent on it.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::NeumaierSum;
use crate::volume::{Grid, Volume3D};

const MAX_CLASSES: usize = 15;
const CHUNK: usize = 1 << 14;

/// Per-voxel class labels (1-based) restricted to a mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    grid: Grid,
    labels: Vec<u8>,
    mask: Vec<bool>,
    k: usize,
}

impl LabelMap {
    /// Unmasked voxels may carry any label; masked ones must be in `1..=k`.
    pub fn new(grid: Grid, labels: Vec<u8>, mask: Vec<bool>, k: usize) -> Result<Self> {
        if labels.len() != grid.len() || mask.len() != grid.len() {
            return Err(Error::DimensionMismatch(
                "label/mask size differs from grid".into(),
            ));
        }
        if !(2..=MAX_CLASSES).contains(&k) {
            return Err(Error::Parameter(format!(
                "class count {k} outside 2..={MAX_CLASSES}"
            )));
        }
        if let Some(i) = (0..labels.len()).find(|&i| mask[i] && !(1..=k as u8).contains(&labels[i]))
        {
            return Err(Error::Parameter(format!(
                "masked voxel {i} has label {}",
                labels[i]
            )));
        }
        Ok(LabelMap {
            grid,
            labels,
            mask,
            k,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    /// Masked voxels carrying `class`.
    pub fn is_class(&self, idx: usize, class: u8) -> bool {
        self.mask[idx] && self.labels[idx] == class
    }

    fn masked_indices(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.mask[i]).collect()
    }
}

/// Model parameters and loop controls.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmParams {
    pub k: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub beta: f64,
    pub eps_em: f64,
    pub n_icm: usize,
    pub n_em_max: usize,
    /// Lower bound applied to every sigma after an M-step.
    pub sigma_min: f64,
}

impl EmParams {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.k) {
            return Err(Error::Parameter(format!(
                "k = {} must be in 2..={MAX_CLASSES}",
                self.k
            )));
        }
        if self.mu.len() != self.k || self.sigma.len() != self.k {
            return Err(Error::Parameter("mu/sigma length must equal k".into()));
        }
        if let Some((i, s)) = self
            .sigma
            .iter()
            .enumerate()
            .find(|(_, s)| !(s.is_finite() && **s > 0.0))
        {
            return Err(Error::Parameter(format!(
                "sigma[{}] = {s} must be positive",
                i + 1
            )));
        }
        if self.mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::Parameter("mu must be finite".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Parameter(format!(
                "beta = {} must be >= 0",
                self.beta
            )));
        }
        if !(self.eps_em > 0.0) {
            return Err(Error::Parameter(format!(
                "eps_em = {} must be > 0",
                self.eps_em
            )));
        }
        if self.n_icm == 0 || self.n_em_max == 0 {
            return Err(Error::Parameter("n_icm and n_em_max must be >= 1".into()));
        }
        if !(self.sigma_min > 0.0) {
            return Err(Error::Parameter("sigma_min must be > 0".into()));
        }
        Ok(())
    }

    /// Class statistics of an initial labelling with the default controls
    /// (beta 1, eps 1e-4, 10 ICM sweeps, 4 EM iterations) and a sigma floor
    /// of 1e-6 of the intensity range.
    pub fn from_labels(vol: &Volume3D, init: &LabelMap) -> Result<Self> {
        check_dims(init, vol)?;
        let k = init.classes();
        let (lo, hi) = vol.intensity_range();
        let sigma_min = ((hi - lo) * 1e-6).max(f64::MIN_POSITIVE);
        let mut mu = vec![0.0; k];
        let mut sigma = vec![0.0; k];
        for c in 0..k {
            let vals: Vec<f64> = (0..vol.data().len())
                .filter(|&i| init.is_class(i, c as u8 + 1))
                .map(|i| vol.data()[i])
                .collect();
            if vals.is_empty() {
                return Err(Error::EmptyClass { class: c + 1 });
            }
            let n = vals.len() as f64;
            let mean = vals.iter().copied().collect::<NeumaierSum>().value() / n;
            let var = vals
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .collect::<NeumaierSum>()
                .value()
                / n;
            mu[c] = mean;
            sigma[c] = var.sqrt().max(sigma_min);
        }
        Ok(EmParams {
            k,
            mu,
            sigma,
            beta: 1.0,
            eps_em: 1e-4,
            n_icm: 10,
            n_em_max: 4,
            sigma_min,
        })
    }

    #[inline]
    fn log_pdf(&self, y: f64, class: usize) -> f64 {
        let s = self.sigma[class];
        let d = y - self.mu[class];
        -0.5 * (2.0 * std::f64::consts::PI * s * s).ln() - d * d / (2.0 * s * s)
    }
}

/// Gaussian density of `y` under mean `mu` and standard deviation `sigma`.
pub fn gaussian_pdf(y: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!(
            "sigma = {sigma} must be positive"
        )));
    }
    let d = y - mu;
    Ok(
        (-d * d / (2.0 * sigma * sigma)).exp()
            / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt(),
    )
}

fn check_dims(labels: &LabelMap, vol: &Volume3D) -> Result<()> {
    if labels.grid.dims != vol.dims() {
        return Err(Error::DimensionMismatch(format!(
            "labels {:?} vs volume {:?}",
            labels.grid.dims,
            vol.dims()
        )));
    }
    Ok(())
}

/// Masked face neighbours of `idx`, returned with their count.
#[inline]
fn masked_neighbours(grid: &Grid, mask: &[bool], idx: usize, out: &mut [usize; 6]) -> usize {
    let [nx, ny, nz] = grid.dims;
    let [x, y, z] = grid.coord(idx);
    let plane = nx * ny;
    let mut n = 0;
    let mut push = |j: usize| {
        if mask[j] {
            out[n] = j;
            n += 1;
        }
    };
    if x > 0 {
        push(idx - 1);
    }
    if x + 1 < nx {
        push(idx + 1);
    }
    if y > 0 {
        push(idx - nx);
    }
    if y + 1 < ny {
        push(idx + nx);
    }
    if z > 0 {
        push(idx - plane);
    }
    if z + 1 < nz {
        push(idx + plane);
    }
    n
}

/// Per-class neighbour tallies; returns the number of masked neighbours.
#[inline]
fn neighbour_tally(labels: &LabelMap, idx: usize, tally: &mut [u32; MAX_CLASSES + 1]) -> u32 {
    let mut nb = [0usize; 6];
    let n = masked_neighbours(&labels.grid, &labels.mask, idx, &mut nb);
    tally.fill(0);
    for &j in &nb[..n] {
        tally[labels.labels[j] as usize] += 1;
    }
    n as u32
}

/// Number of masked 6-neighbours of `voxel` whose label differs from `class`.
pub fn prior_penalty(labels: &LabelMap, voxel: usize, class: u8) -> u32 {
    let mut tally = [0u32; MAX_CLASSES + 1];
    let n = neighbour_tally(labels, voxel, &mut tally);
    n - tally[class as usize]
}

/// Sum of masked-voxel log-likelihoods minus `beta` times the number of
/// disagreeing masked neighbour pairs.
pub fn log_posterior(labels: &LabelMap, vol: &Volume3D, params: &EmParams) -> Result<f64> {
    check_dims(labels, vol)?;
    params.validate()?;
    let g = labels.grid;
    let [nx, ny, _] = g.dims;
    let plane = nx * ny;
    let data = vol.data();
    let partials: Vec<NeumaierSum> = (0..g.dims[2])
        .into_par_iter()
        .map(|z| {
            let mut acc = NeumaierSum::default();
            let mut cut = 0u64;
            for y in 0..ny {
                for x in 0..nx {
                    let i = g.index(x, y, z);
                    if !labels.mask[i] {
                        continue;
                    }
                    let li = labels.labels[i];
                    acc.add(params.log_pdf(data[i], li as usize - 1));
                    let mut forward = |j: usize| {
                        if labels.mask[j] && labels.labels[j] != li {
                            cut += 1;
                        }
                    };
                    if x + 1 < nx {
                        forward(i + 1);
                    }
                    if y + 1 < ny {
                        forward(i + nx);
                    }
                    if z + 1 < g.dims[2] {
                        forward(i + plane);
                    }
                }
            }
            acc.add(-params.beta * cut as f64);
            acc
        })
        .collect();
    Ok(partials.into_iter().collect::<NeumaierSum>().value())
}

/// Local ICM objective of assigning `class` (0-based) to voxel `i`.
#[inline]
fn local_score(
    params: &EmParams,
    y: f64,
    class: usize,
    n: u32,
    tally: &[u32; MAX_CLASSES + 1],
) -> f64 {
    params.log_pdf(y, class) - params.beta * f64::from(n - tally[class + 1])
}

/// One sequential sweep in ascending linear-index order; returns the
/// number of voxels whose label changed.
pub fn icm_sweep(labels: &mut LabelMap, vol: &Volume3D, params: &EmParams) -> usize {
    let data = vol.data();
    let mut tally = [0u32; MAX_CLASSES + 1];
    let mut changed = 0;
    for i in 0..labels.labels.len() {
        if !labels.mask[i] {
            continue;
        }
        let n = neighbour_tally(labels, i, &mut tally);
        let y = data[i];
        let mut best = 0;
        let mut best_score = local_score(params, y, 0, n, &tally);
        for c in 1..params.k {
            let s = local_score(params, y, c, n, &tally);
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        let new = best as u8 + 1;
        if labels.labels[i] != new {
            labels.labels[i] = new;
            changed += 1;
        }
    }
    changed
}

/// Up to `n_icm` sweeps; stops early once a sweep changes nothing, which
/// leaves the result identical to running every sweep.
pub fn icm_update(labels: &LabelMap, vol: &Volume3D, params: &EmParams) -> Result<LabelMap> {
    check_dims(labels, vol)?;
    params.validate()?;
    if labels.k != params.k {
        return Err(Error::Parameter(
            "label classes differ from params.k".into(),
        ));
    }
    let mut out = labels.clone();
    for _ in 0..params.n_icm {
        if icm_sweep(&mut out, vol, params) == 0 {
            break;
        }
    }
    Ok(out)
}

/// Posterior class probabilities of the masked voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct Memberships {
    k: usize,
    voxels: Vec<usize>,
    values: Vec<f64>,
    /// Voxels whose unnormalised memberships were all zero or non-finite
    /// and were reset to `1/k`.
    pub underflow_voxels: usize,
}

impl Memberships {
    pub fn classes(&self) -> usize {
        self.k
    }

    /// Masked voxel indices, ascending.
    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    /// Membership row of the `n`-th masked voxel.
    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.k..(n + 1) * self.k]
    }

    /// Membership row of a voxel by linear index.
    pub fn of_voxel(&self, idx: usize) -> Option<&[f64]> {
        self.voxels.binary_search(&idx).ok().map(|n| self.row(n))
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Build from explicit rows (one per masked voxel, ascending).
    pub fn from_rows(k: usize, voxels: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if values.len() != voxels.len() * k {
            return Err(Error::DimensionMismatch(
                "membership rows do not match voxel list".into(),
            ));
        }
        Ok(Memberships {
            k,
            voxels,
            values,
            underflow_voxels: 0,
        })
    }
}

/// E-step: memberships proportional to `pdf * exp(-beta * U)`, normalised
/// per voxel. Computed in the log domain.
pub fn e_step(labels: &LabelMap, vol: &Volume3D, params: &EmParams) -> Result<Memberships> {
    check_dims(labels, vol)?;
    params.validate()?;
    let voxels = labels.masked_indices();
    let k = params.k;
    let data = vol.data();
    let mut values = vec![0.0; voxels.len() * k];
    let underflow: usize = values
        .par_chunks_mut(CHUNK * k)
        .zip(voxels.par_chunks(CHUNK))
        .map(|(rows, idxs)| {
            let mut tally = [0u32; MAX_CLASSES + 1];
            let mut bad = 0;
            for (row, &i) in rows.chunks_mut(k).zip(idxs) {
                let n = neighbour_tally(labels, i, &mut tally);
                let mut peak = f64::NEG_INFINITY;
                for (c, r) in row.iter_mut().enumerate() {
                    *r = local_score(params, data[i], c, n, &tally);
                    peak = peak.max(*r);
                }
                let mut total = 0.0;
                if peak.is_finite() {
                    for r in row.iter_mut() {
                        *r = (*r - peak).exp();
                        total += *r;
                    }
                }
                if total > 0.0 && total.is_finite() {
                    for r in row.iter_mut() {
                        *r /= total;
                    }
                } else {
                    row.fill(1.0 / k as f64);
                    bad += 1;
                }
            }
            bad
        })
        .sum();
    if underflow > 0 {
        log::warn!("{underflow} voxels had degenerate memberships; set to uniform");
    }
    Ok(Memberships {
        k,
        voxels,
        values,
        underflow_voxels: underflow,
    })
}

/// Fixed-chunk weighted sums; chunk boundaries do not depend on the
/// thread count, so the result is bit-stable.
fn weighted_sum(m: &Memberships, data: &[f64], class: usize, f: impl Fn(f64) -> f64 + Sync) -> f64 {
    let k = m.k;
    let partials: Vec<NeumaierSum> = m
        .voxels
        .par_chunks(CHUNK)
        .zip(m.values.par_chunks(CHUNK * k))
        .map(|(idxs, rows)| {
            let mut acc = NeumaierSum::default();
            for (&i, row) in idxs.iter().zip(rows.chunks(k)) {
                acc.add(row[class] * f(data[i]));
            }
            acc
        })
        .collect();
    partials.into_iter().collect::<NeumaierSum>().value()
}

/// Outcome of an M-step, including how many sigmas hit the floor.
#[derive(Clone, Debug, PartialEq)]
pub struct MStep {
    pub params: EmParams,
    /// 1-based classes whose sigma was clamped to `sigma_min`.
    pub clamped: Vec<usize>,
}

/// M-step: membership-weighted class means and (population) variances.
pub fn m_step(memberships: &Memberships, vol: &Volume3D, params: &EmParams) -> Result<MStep> {
    if memberships.k != params.k {
        return Err(Error::Parameter(
            "membership classes differ from params.k".into(),
        ));
    }
    let data = vol.data();
    if memberships.voxels.last().is_some_and(|&i| i >= data.len()) {
        return Err(Error::DimensionMismatch(
            "memberships index past the volume".into(),
        ));
    }
    let mut next = params.clone();
    let mut clamped = Vec::new();
    for c in 0..params.k {
        let w = weighted_sum(memberships, data, c, |_| 1.0);
        if !(w > 0.0) {
            return Err(Error::EmptyClass { class: c + 1 });
        }
        let mu = weighted_sum(memberships, data, c, |y| y) / w;
        let var = weighted_sum(memberships, data, c, |y| (y - mu) * (y - mu)) / w;
        let mut sigma = var.sqrt();
        if !(sigma >= params.sigma_min) {
            log::warn!(
                "class {} sigma {sigma} clamped to {}",
                c + 1,
                params.sigma_min
            );
            sigma = params.sigma_min;
            clamped.push(c + 1);
        }
        next.mu[c] = mu;
        next.sigma[c] = sigma;
    }
    Ok(MStep {
        params: next,
        clamped,
    })
}

/// Why the EM loop stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Relative change of the ICM step fell to `eps_em` or below.
    Converged,
    /// ICM lowered the log-posterior; the pre-ICM labelling is returned.
    PosteriorDecreased,
    /// The parameter update lowered the log-posterior of the current
    /// labelling; the previous parameters are restored.
    ParametersDecreased,
    MaxIterations,
}

/// One pass through the loop body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub log_posterior_before: f64,
    pub log_posterior_after: Option<f64>,
    pub rel_change: Option<f64>,
    /// True when the iteration went on to update the parameters.
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct EmOutput {
    pub labels: LabelMap,
    /// Memberships of the last E-step, if one ran.
    pub memberships: Option<Memberships>,
    /// Final parameters.
    pub params: EmParams,
    /// Parameters the returned labelling was computed with.
    pub seg_params: EmParams,
    pub trace: Vec<EmIteration>,
    pub stop: StopReason,
    pub underflow_voxels: usize,
    pub sigma_clamps: usize,
}

impl EmOutput {
    /// Loop-top log-posteriors of the iterations that passed every
    /// decrease check.
    pub fn accepted_log_posteriors(&self) -> Vec<f64> {
        self.trace
            .iter()
            .filter(|t| t.accepted)
            .map(|t| t.log_posterior_before)
            .collect()
    }

    /// The log-posterior trace as CSV.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from(
            "iteration,log_posterior_before,log_posterior_after,rel_change,accepted\n",
        );
        for (i, t) in self.trace.iter().enumerate() {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.10e}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{:.10e},{},{},{}\n",
                i + 1,
                t.log_posterior_before,
                opt(t.log_posterior_after),
                opt(t.rel_change),
                t.accepted
            ));
        }
        s
    }
}

fn relative_change(before: f64, after: f64) -> f64 {
    let d = (after - before).abs();
    if d == 0.0 {
        0.0
    } else {
        d / before.abs()
    }
}

/// Alternate ICM, E-step and M-step until the relative change of the ICM
/// step drops to `eps_em`, the log-posterior decreases, or `n_em_max`
/// parameter updates have run.
pub fn em_segment(vol: &Volume3D, init: &LabelMap, params: &EmParams) -> Result<EmOutput> {
    check_dims(init, vol)?;
    params.validate()?;
    if init.k != params.k {
        return Err(Error::Parameter(
            "initial labels use a different class count".into(),
        ));
    }
    let mut seg = init.clone();
    let mut current = params.clone();
    let mut previous: Option<(EmParams, f64)> = None;
    let mut memberships = None;
    let mut trace = Vec::new();
    let mut updates = 0;
    let mut underflow = 0;
    let mut clamps = 0;

    let (stop, seg_params) = loop {
        let before = log_posterior(&seg, vol, &current)?;
        if let Some((prev_params, prev_after)) = &previous {
            if before < *prev_after {
                trace.push(EmIteration {
                    log_posterior_before: before,
                    log_posterior_after: None,
                    rel_change: None,
                    accepted: false,
                });
                current = prev_params.clone();
                break (StopReason::ParametersDecreased, current.clone());
            }
        }
        let refined = icm_update(&seg, vol, &current)?;
        let after = log_posterior(&refined, vol, &current)?;
        let rel = relative_change(before, after);
        let mut record = EmIteration {
            log_posterior_before: before,
            log_posterior_after: Some(after),
            rel_change: Some(rel),
            accepted: false,
        };
        if after < before {
            trace.push(record);
            break (
                StopReason::PosteriorDecreased,
                previous.map_or(current.clone(), |p| p.0),
            );
        }
        seg = refined;
        if rel <= current.eps_em {
            trace.push(record);
            break (StopReason::Converged, current.clone());
        }
        record.accepted = true;
        trace.push(record);

        let m = e_step(&seg, vol, &current)?;
        underflow += m.underflow_voxels;
        let step = m_step(&m, vol, &current)?;
        clamps += step.clamped.len();
        memberships = Some(m);
        previous = Some((current.clone(), after));
        current = step.params;
        updates += 1;
        if updates >= current.n_em_max {
            break (
                StopReason::MaxIterations,
                previous.as_ref().map(|p| p.0.clone()).unwrap(),
            );
        }
    };

    Ok(EmOutput {
        labels: seg,
        memberships,
        params: current,
        seg_params,
        trace,
        stop,
        underflow_voxels: underflow,
        sigma_clamps: clamps,
    })
}
