//! Regression, mapping and geometric alignment losses.
//!
//! All terms are built on a [`Tape`] so the same code serves the inner step
//! (gradients w.r.t. θ, λ held constant) and the outer step (gradients w.r.t.
//! λ, θ held constant).

use serde::{Deserialize, Serialize};

use crate::autodiff::{pairwise_sum, Tape, Tensor, Var};
use crate::error::{GateError, Result};
use crate::model::BoundGate;

/// Perturbation settings for the distance loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationConfig {
    /// perturbed points per input (M)
    pub points: usize,
    /// std of the additive Gaussian noise on the embedding
    pub sigma: f64,
    /// C_s, indexed by task
    pub source_weights: Vec<f64>,
}

impl PerturbationConfig {
    pub fn new(points: usize, sigma: f64, source_weights: Vec<f64>) -> Result<Self> {
        if points == 0 {
            return Err(GateError::InvalidArgument("perturbation points must be >= 1".into()));
        }
        if !(sigma > 0.0) {
            return Err(GateError::InvalidArgument(format!("sigma must be > 0, got {sigma}")));
        }
        if let Some(w) = source_weights.iter().find(|w| !(**w >= 0.0)) {
            return Err(GateError::InvalidArgument(format!("C_s must be >= 0, got {w}")));
        }
        Ok(Self {
            points,
            sigma,
            source_weights,
        })
    }

    /// Uniform C_s for `n_tasks` tasks.
    pub fn uniform(points: usize, sigma: f64, weight: f64, n_tasks: usize) -> Result<Self> {
        Self::new(points, sigma, vec![weight; n_tasks])
    }
}

/// Scalar values of every loss term for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub map: f64,
    pub ae: f64,
    pub cons: f64,
    pub dis: f64,
    pub tot: f64,
}

impl LossBreakdown {
    /// Builds the breakdown with `tot` as the sum of the five components.
    pub fn total_loss(reg: f64, map: f64, ae: f64, cons: f64, dis: f64) -> Self {
        Self {
            reg,
            map,
            ae,
            cons,
            dis,
            tot: reg + ae + cons + dis + map,
        }
    }

    pub fn components(&self) -> [f64; 5] {
        [self.reg, self.map, self.ae, self.cons, self.dis]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().chain([&self.tot]).all(|v| v.is_finite())
    }

    /// Running sum, used for epoch means.
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.reg += other.reg;
        self.map += other.map;
        self.ae += other.ae;
        self.cons += other.cons;
        self.dis += other.dis;
        self.tot += other.tot;
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            reg: self.reg * factor,
            map: self.map * factor,
            ae: self.ae * factor,
            cons: self.cons * factor,
            dis: self.dis * factor,
            tot: self.tot * factor,
        }
    }
}

/// Mean squared error on plain slices.
pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(GateError::ShapeMismatch {
            op: "mse",
            left: vec![y.len()],
            right: vec![y_hat.len()],
        });
    }
    if y.is_empty() {
        return Err(GateError::InvalidArgument("mse of zero points".into()));
    }
    let sq: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(pairwise_sum(&sq) / y.len() as f64)
}

/// `(1/N) Σ (y - ŷ)^2`.
pub fn regression_loss(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
    tape.mean_sq_diff(y, y_hat)
}

/// `Σ_s λ_{s→t} MSE(y_t, ŷ_t via s)` over the given `(λ, ŷ)` terms.
pub fn mapping_loss(tape: &mut Tape, y: Var, terms: &[(Var, Var)]) -> Result<Var> {
    let mut weighted = Vec::with_capacity(terms.len());
    for &(lambda, y_hat) in terms {
        let err = tape.mean_sq_diff(y, y_hat)?;
        weighted.push(tape.mul_scalar(err, lambda)?);
    }
    tape.add_all(&weighted)
}

/// `Σ_i MSE(z_i, φ⁻¹_i(φ_i(z_i)))` over `(task, z_i, φ_i(z_i))` triples.
pub fn reconstruction_loss(
    tape: &mut Tape,
    gate: &BoundGate,
    latents: &[(usize, Var, Var)],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(latents.len());
    for &(task, z, z_m) in latents {
        let back = gate.from_manifold(tape, z_m, task)?;
        terms.push(tape.mean_sq_diff(z, back)?);
    }
    tape.add_all(&terms)
}

/// `Σ_s MSE(z_M^s, z_M^t)`, compared in manifold space.
pub fn consistency_loss(tape: &mut Tape, target_m: Var, source_m: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(source_m.len());
    for &zs in source_m {
        terms.push(tape.mean_sq_diff(zs, target_m)?);
    }
    tape.add_all(&terms)
}

/// Per-row displacement norm `‖clean - perturbed‖`, shape `[B, 1]`.
pub fn displacement(tape: &mut Tape, clean_m: Var, perturbed_m: Var) -> Result<Var> {
    let d = tape.sub(clean_m, perturbed_m)?;
    tape.row_norm(d)
}

/// `(1/M) Σ_s C_s Σ_p MSE(s^p_s, s^p_t)`.
///
/// `target` holds the M displacement vectors of the target task; each source
/// entry pairs its C_s with its own M displacement vectors.
pub fn distance_loss(tape: &mut Tape, target: &[Var], sources: &[(f64, Vec<Var>)]) -> Result<Var> {
    let m = target.len();
    if m == 0 {
        return Err(GateError::InvalidArgument("distance loss needs M >= 1".into()));
    }
    let mut terms = Vec::with_capacity(sources.len());
    for (weight, disp) in sources {
        if disp.len() != m {
            return Err(GateError::InvalidArgument(format!(
                "source has {} perturbed points, target has {m}",
                disp.len()
            )));
        }
        let mut per_point = Vec::with_capacity(m);
        for (&ds, &dt) in disp.iter().zip(target) {
            per_point.push(tape.mean_sq_diff(ds, dt)?);
        }
        let summed = tape.add_all(&per_point)?;
        terms.push(tape.scale(summed, *weight)?);
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, 1.0 / m as f64)
}

/// `l_reg + l_ae + l_cons + l_dis + l_map` on the tape.
pub fn total_loss(tape: &mut Tape, terms: &ObjectiveVars) -> Result<Var> {
    tape.add_all(&[terms.reg, terms.ae, terms.cons, terms.dis, terms.map])
}

/// Gaussian draws `σ·ε^p`, one `[rows, d_z]` tensor per perturbed point.
/// Every task branch reuses the same draws.
pub fn draw_perturbations<R: rand::Rng>(
    rng: &mut R,
    rows: usize,
    d_z: usize,
    config: &PerturbationConfig,
) -> Vec<Tensor> {
    use rand_distr::StandardNormal;
    (0..config.points)
        .map(|_| {
            let data = (0..rows * d_z)
                .map(|_| config.sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::matrix(rows, d_z, data).expect("positive dims")
        })
        .collect()
}

/// Inputs for one target-task batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchInputs<'a> {
    /// `[B, d_x]`
    pub x: &'a Tensor,
    /// `[B, 1]` target labels
    pub y: &'a Tensor,
    pub target: usize,
    /// source tasks evaluated on the batch (excluding `target`)
    pub sources: &'a [usize],
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub reg: Var,
    pub map: Var,
    pub ae: Var,
    pub cons: Var,
    pub dis: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub terms: ObjectiveVars,
    pub total: Var,
}

impl Objective {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let t = &self.terms;
        LossBreakdown {
            reg: tape.scalar(t.reg),
            map: tape.scalar(t.map),
            ae: tape.scalar(t.ae),
            cons: tape.scalar(t.cons),
            dis: tape.scalar(t.dis),
            tot: tape.scalar(self.total),
        }
    }
}

/// Full training objective for one batch of `target`.
///
/// `map_terms` lists `(source, λ_{s→t})` for the pairs whose mapping loss is
/// evaluated; pairs absent from it cost nothing. `noise` holds the shared
/// perturbation draws.
pub fn training_objective(
    tape: &mut Tape,
    gate: &BoundGate,
    batch: BatchInputs<'_>,
    map_terms: &[(usize, Var)],
    perturb: &PerturbationConfig,
    noise: &[Tensor],
) -> Result<Objective> {
    if noise.len() != perturb.points {
        return Err(GateError::InvalidArgument(format!(
            "expected {} perturbation draws, got {}",
            perturb.points,
            noise.len()
        )));
    }
    let t = batch.target;
    let x = tape.constant(batch.x.clone());
    let y = tape.constant(batch.y.clone());
    let z = gate.embed(tape, x)?;

    let mut involved: Vec<usize> = Vec::with_capacity(batch.sources.len() + 1);
    involved.push(t);
    involved.extend(batch.sources.iter().copied().filter(|&s| s != t));

    // per-task latent and manifold points, indexed like `involved`
    let mut latent = Vec::with_capacity(involved.len());
    let mut manifold = Vec::with_capacity(involved.len());
    for &i in &involved {
        let zi = gate.encode(tape, z, i)?;
        let zm = gate.to_manifold(tape, zi, i)?;
        latent.push(zi);
        manifold.push(zm);
    }

    let y_hat = gate.head(tape, latent[0], t)?;
    let reg = regression_loss(tape, y, y_hat)?;

    let mut map_pairs = Vec::with_capacity(map_terms.len());
    for &(s, lambda) in map_terms {
        if s == t {
            return Err(GateError::InvalidArgument("self-transfer mapping term".into()));
        }
        let pos = involved.iter().position(|&i| i == s).ok_or_else(|| {
            GateError::InvalidArgument(format!("mapping source {s} not among batch sources"))
        })?;
        let via = gate.predict_from_manifold(tape, manifold[pos], t)?;
        map_pairs.push((lambda, via));
    }
    let map = mapping_loss(tape, y, &map_pairs)?;

    let triples: Vec<(usize, Var, Var)> = involved
        .iter()
        .enumerate()
        .map(|(k, &i)| (i, latent[k], manifold[k]))
        .collect();
    let ae = reconstruction_loss(tape, gate, &triples)?;
    let cons = consistency_loss(tape, manifold[0], &manifold[1..])?;

    let mut disp: Vec<Vec<Var>> = vec![Vec::with_capacity(noise.len()); involved.len()];
    for eps in noise {
        let e = tape.constant(eps.clone());
        let zp = tape.add(z, e)?;
        for (k, &i) in involved.iter().enumerate() {
            let zpi = gate.encode(tape, zp, i)?;
            let zpm = gate.to_manifold(tape, zpi, i)?;
            disp[k].push(displacement(tape, manifold[k], zpm)?);
        }
    }
    let sources: Vec<(f64, Vec<Var>)> = involved[1..]
        .iter()
        .zip(&disp[1..])
        .map(|(&s, d)| (perturb.source_weights[s], d.clone()))
        .collect();
    let dis = distance_loss(tape, &disp[0], &sources)?;

    let terms = ObjectiveVars {
        reg,
        map,
        ae,
        cons,
        dis,
    };
    let total = total_loss(tape, &terms)?;
    Ok(Objective { terms, total })
}

/// Mapping loss alone, as evaluated by the outer loop on validation data.
pub fn mapping_objective(
    tape: &mut Tape,
    gate: &BoundGate,
    x: &Tensor,
    y: &Tensor,
    target: usize,
    map_terms: &[(usize, Var)],
) -> Result<Var> {
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let z = gate.embed(tape, xv)?;
    let mut pairs = Vec::with_capacity(map_terms.len());
    for &(s, lambda) in map_terms {
        if s == target {
            return Err(GateError::InvalidArgument("self-transfer mapping term".into()));
        }
        let zs = gate.encode(tape, z, s)?;
        let zm = gate.to_manifold(tape, zs, s)?;
        let via = gate.predict_from_manifold(tape, zm, target)?;
        pairs.push((lambda, via));
    }
    mapping_loss(tape, yv, &pairs)
}
