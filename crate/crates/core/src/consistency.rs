//! Per-attribute momentum memories and the two consistency regularizers.
//!
//! A batch contributes twice: qualified positives (label 1 and probability
//! above τ) update the memories as plain statistics, outside any gradient
//! tracking; all positives form the batch aggregates that the L1
//! regularizers pull toward the (stop-gradient) memory rows.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::{ReduceKind, Tape, Tensor, Var};

pub const MEMORY_MAGIC: &[u8; 7] = b"SSCMEM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Soft,
    Hard,
    Fix,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Baseline => "baseline",
            Variant::Soft => "soft",
            Variant::Hard => "hard",
            Variant::Fix => "fix",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    /// Confidence threshold τ for qualified positives (strict inequality).
    pub tau: f64,
    /// Momentum coefficient α; the new aggregate enters with weight α.
    pub alpha: f64,
    pub variant: Variant,
    /// Binarization threshold for the hard variant.
    pub th_hard: f64,
    /// Norm guard shared with the tensor layer.
    pub eps: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Warm-up horizon: consistency terms enter the objective for e > initial_epoch.
    pub initial_epoch: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            tau: 0.9,
            alpha: 0.9,
            variant: Variant::Soft,
            th_hard: 0.0,
            eps: 1e-12,
            lambda1: 1.0,
            lambda2: 0.1,
            initial_epoch: 4,
        }
    }
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!(
                "tau must be in [0,1), got {}",
                self.tau
            )));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0,1], got {}",
                self.alpha
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    /// Is the consistency branch active at all (any gradient-visible term)?
    pub fn branch_active(&self) -> bool {
        self.variant != Variant::Baseline && (self.lambda1 != 0.0 || self.lambda2 != 0.0)
    }

    /// Gate of the total objective: open strictly after the initial epoch.
    pub fn gate_open(&self, epoch: usize) -> bool {
        epoch > self.initial_epoch
    }
}

// ---- selection and aggregation (pure) ------------------------------------------

/// Qualified-positive selector: mask[i,m] = 1 iff p[i,m] > tau and y[i,m] = 1.
pub fn select_qualified(p: &Tensor, y: &Tensor, tau: f64) -> (Vec<bool>, Vec<usize>) {
    assert_eq!(p.shape(), y.shape(), "probability/label shape mismatch");
    let m = p.shape()[1];
    let mut mask = vec![false; p.len()];
    let mut counts = vec![0usize; m];
    for (i, (&pi, &yi)) in p.data().iter().zip(y.data()).enumerate() {
        if yi == 1.0 && pi > tau {
            mask[i] = true;
            counts[i % m] += 1;
        }
    }
    (mask, counts)
}

/// All-positive selector: mask[i,m] = 1 iff y[i,m] = 1.
pub fn select_positive(y: &Tensor) -> (Vec<bool>, Vec<usize>) {
    let m = y.shape()[1];
    let mut mask = vec![false; y.len()];
    let mut counts = vec![0usize; m];
    for (i, &yi) in y.data().iter().enumerate() {
        if yi == 1.0 {
            mask[i] = true;
            counts[i % m] += 1;
        }
    }
    (mask, counts)
}

/// Masked per-attribute mean over the batch axis:
/// means[m] = (1/n[m]) Σ_i mask[i,m]·x[i,m]; rows with n[m] = 0 are zero.
/// Works for maps (b,M,H,W) and vectors (b,M,C) alike.
pub fn masked_mean_over_batch(x: &Tensor, mask: &[bool]) -> (Tensor, Vec<usize>) {
    let shape = x.shape();
    assert!(shape.len() >= 3, "expected (batch, M, ...)");
    let (b, m) = (shape[0], shape[1]);
    let rest: usize = shape[2..].iter().product();
    assert_eq!(mask.len(), b * m, "mask length mismatch");

    let mut out = vec![0.0; m * rest];
    let mut counts = vec![0usize; m];
    for i in 0..b {
        for mi in 0..m {
            if !mask[i * m + mi] {
                continue;
            }
            counts[mi] += 1;
            let src = &x.data()[(i * m + mi) * rest..(i * m + mi + 1) * rest];
            let dst = &mut out[mi * rest..(mi + 1) * rest];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    for mi in 0..m {
        if counts[mi] > 0 {
            let inv = 1.0 / counts[mi] as f64;
            for v in &mut out[mi * rest..(mi + 1) * rest] {
                *v *= inv;
            }
        }
    }
    let mut out_shape = vec![m];
    out_shape.extend_from_slice(&shape[2..]);
    (Tensor::new(out_shape, out).expect("aggregate shape"), counts)
}

/// Masked aggregation of attention maps under a qualified or positive mask;
/// gradient-free.
pub fn aggregate_cams(cams: &Tensor, mask: &[bool]) -> (Tensor, Vec<usize>) {
    masked_mean_over_batch(cams, mask)
}

/// Differentiable masked mean over the batch axis, for the regularizer path.
/// Rows without positives are zeroed (and must be excluded by the caller).
pub fn masked_mean_over_batch_graph(
    tape: &mut Tape,
    x: Var,
    mask: &[bool],
    counts: &[usize],
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (b, m) = (shape[0], shape[1]);
    let rest: usize = shape[2..].iter().product();
    let x2 = tape.reshape(x, &[b, m, rest])?;
    let mask_t = Tensor::new(
        vec![b, m, 1],
        mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )?;
    let mask_v = tape.constant(&mask_t)?;
    let masked = tape.mul(x2, mask_v)?;
    let summed = tape.reduce(masked, ReduceKind::Sum, &[0])?;
    let counts_t = Tensor::new(vec![m, 1], counts.iter().map(|&c| c.max(1) as f64).collect())?;
    let counts_v = tape.constant(&counts_t)?;
    let means = tape.div(summed, counts_v)?;
    let mut out_shape = vec![m];
    out_shape.extend_from_slice(&shape[2..]);
    tape.reshape(means, &out_shape)
}

fn l2_normalize_slice(row: &[f64], eps: f64) -> Vec<f64> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm.max(eps);
    row.iter().map(|v| v / denom).collect()
}

fn binarize_in_place(row: &mut [f64], threshold: f64) {
    for v in row.iter_mut() {
        *v = if *v > threshold { 1.0 } else { 0.0 };
    }
}

// ---- the memories -----------------------------------------------------------------

/// Momentum memories M_spa (M×H×W) and M_sem (M×C), pure statistics.
///
/// Initialization flags are tracked per memory kind: the fix variant freezes
/// the spatial memory while the semantic memory keeps updating, so their
/// initialized sets can diverge.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyMemory {
    num_attributes: usize,
    height: usize,
    width: usize,
    channels: usize,
    m_spa: Vec<f64>,
    m_sem: Vec<f64>,
    spa_initialized: Vec<bool>,
    sem_initialized: Vec<bool>,
    update_count: Vec<u64>,
    spa_frozen: bool,
    /// Audit counter: spatial updates ignored because the memory is frozen.
    frozen_skips: u64,
}

impl ConsistencyMemory {
    pub fn new(num_attributes: usize, height: usize, width: usize, channels: usize) -> Self {
        ConsistencyMemory {
            num_attributes,
            height,
            width,
            channels,
            m_spa: vec![0.0; num_attributes * height * width],
            m_sem: vec![0.0; num_attributes * channels],
            spa_initialized: vec![false; num_attributes],
            sem_initialized: vec![false; num_attributes],
            update_count: vec![0; num_attributes],
            spa_frozen: false,
            frozen_skips: 0,
        }
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    pub fn spatial_extents(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn spa_row(&self, m: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.m_spa[m * plane..(m + 1) * plane]
    }

    pub fn sem_row(&self, m: usize) -> &[f64] {
        &self.m_sem[m * self.channels..(m + 1) * self.channels]
    }

    pub fn spa_initialized(&self, m: usize) -> bool {
        self.spa_initialized[m]
    }

    pub fn sem_initialized(&self, m: usize) -> bool {
        self.sem_initialized[m]
    }

    pub fn update_count(&self, m: usize) -> u64 {
        self.update_count[m]
    }

    pub fn spa_frozen(&self) -> bool {
        self.spa_frozen
    }

    pub fn frozen_skips(&self) -> u64 {
        self.frozen_skips
    }

    pub fn freeze_spatial(&mut self) {
        self.spa_frozen = true;
    }

    /// Row-normalized spatial memory as an (M, H·W) tensor; zero rows stay zero.
    pub fn normalized_spa(&self, eps: f64) -> Tensor {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(self.m_spa.len());
        for m in 0..self.num_attributes {
            data.extend(l2_normalize_slice(
                &self.m_spa[m * plane..(m + 1) * plane],
                eps,
            ));
        }
        Tensor::new(vec![self.num_attributes, plane], data).expect("spa shape")
    }

    /// Row-normalized semantic memory as an (M, C) tensor.
    pub fn normalized_sem(&self, eps: f64) -> Tensor {
        let mut data = Vec::with_capacity(self.m_sem.len());
        for m in 0..self.num_attributes {
            data.extend(l2_normalize_slice(
                &self.m_sem[m * self.channels..(m + 1) * self.channels],
                eps,
            ));
        }
        Tensor::new(vec![self.num_attributes, self.channels], data).expect("sem shape")
    }

    /// Momentum update from the gradient-free qualified aggregates.
    ///
    /// Per attribute with n_q[m] > 0: a first qualified aggregate is copied
    /// (normalized), later ones blend as (1−α)·normalize(row) + α·normalize(agg).
    /// Hard variant binarizes the aggregate before normalization and
    /// re-binarizes + re-normalizes the row after the blend. A frozen spatial
    /// memory ignores its half of the update and records the skip.
    pub fn update(
        &mut self,
        a_q: &Tensor,
        v_q: &Tensor,
        n_q: &[usize],
        cfg: &ConsistencyConfig,
    ) -> Result<()> {
        let plane = self.height * self.width;
        if a_q.len() != self.num_attributes * plane
            || v_q.len() != self.num_attributes * self.channels
            || n_q.len() != self.num_attributes
        {
            return Err(Error::ShapeMismatch {
                op: "memory_update",
                lhs: a_q.shape().to_vec(),
                rhs: vec![self.num_attributes, plane],
            });
        }
        for m in 0..self.num_attributes {
            if n_q[m] == 0 {
                continue;
            }
            if self.spa_frozen {
                self.frozen_skips += 1;
            } else {
                let mut agg = a_q.data()[m * plane..(m + 1) * plane].to_vec();
                if cfg.variant == Variant::Hard {
                    binarize_in_place(&mut agg, cfg.th_hard);
                }
                let normed = l2_normalize_slice(&agg, cfg.eps);
                // a zero aggregate cannot be normalized; skip rather than
                // initialize a zero row
                if normed.iter().any(|&v| v != 0.0) {
                    let row = &mut self.m_spa[m * plane..(m + 1) * plane];
                    if !self.spa_initialized[m] {
                        row.copy_from_slice(&normed);
                        self.spa_initialized[m] = true;
                    } else {
                        let old = l2_normalize_slice(row, cfg.eps);
                        for ((r, o), n) in row.iter_mut().zip(&old).zip(&normed) {
                            *r = (1.0 - cfg.alpha) * o + cfg.alpha * n;
                        }
                    }
                    if cfg.variant == Variant::Hard {
                        let row = &mut self.m_spa[m * plane..(m + 1) * plane];
                        binarize_in_place(row, cfg.th_hard);
                        let renorm = l2_normalize_slice(row, cfg.eps);
                        row.copy_from_slice(&renorm);
                    }
                }
            }

            let sem_agg = &v_q.data()[m * self.channels..(m + 1) * self.channels];
            let normed = l2_normalize_slice(sem_agg, cfg.eps);
            if normed.iter().any(|&v| v != 0.0) {
                let row = &mut self.m_sem[m * self.channels..(m + 1) * self.channels];
                if !self.sem_initialized[m] {
                    row.copy_from_slice(&normed);
                    self.sem_initialized[m] = true;
                } else {
                    let old = l2_normalize_slice(row, cfg.eps);
                    for ((r, o), n) in row.iter_mut().zip(&old).zip(&normed) {
                        *r = (1.0 - cfg.alpha) * o + cfg.alpha * n;
                    }
                }
            }
            self.update_count[m] += 1;
        }
        Ok(())
    }

    /// Invariants: initialized rows have norm in (0, 1+1e-9], uninitialized
    /// rows are all-zero, every entry finite.
    pub fn validate(&self) -> Result<()> {
        let plane = self.height * self.width;
        let check = |row: &[f64], init: bool, what: &str, m: usize| -> Result<()> {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain {
                    op: "memory_validate",
                    detail: format!("non-finite entry in {what} row {m}"),
                });
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if init {
                if !(norm > 0.0 && norm <= 1.0 + 1e-9) {
                    return Err(Error::Domain {
                        op: "memory_validate",
                        detail: format!("{what} row {m} norm {norm} outside (0, 1+1e-9]"),
                    });
                }
            } else if norm != 0.0 {
                return Err(Error::Domain {
                    op: "memory_validate",
                    detail: format!("uninitialized {what} row {m} is non-zero"),
                });
            }
            Ok(())
        };
        for m in 0..self.num_attributes {
            check(
                &self.m_spa[m * plane..(m + 1) * plane],
                self.spa_initialized[m],
                "spatial",
                m,
            )?;
            check(
                &self.m_sem[m * self.channels..(m + 1) * self.channels],
                self.sem_initialized[m],
                "semantic",
                m,
            )?;
        }
        Ok(())
    }

    /// Hard-variant shape of stored rows: each initialized spatial row must be
    /// the normalization of a {0,1} vector (all positive entries identical).
    pub fn spa_rows_are_binary_normalized(&self) -> bool {
        let plane = self.height * self.width;
        for m in 0..self.num_attributes {
            if !self.spa_initialized[m] {
                continue;
            }
            let row = &self.m_spa[m * plane..(m + 1) * plane];
            let nonzero: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
            if nonzero.is_empty() {
                return false;
            }
            let expected = 1.0 / (nonzero.len() as f64).sqrt();
            if !nonzero.iter().all(|&v| v == expected) {
                return false;
            }
        }
        true
    }

    // ---- dump format ------------------------------------------------------

    /// Binary dump: magic, M/H/W/C extents, f32 rows for both memories, then
    /// one flag byte per attribute (bit0 spatial init, bit1 semantic init).
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e| Error::io(format!("writing {}", path.display()), e);
        w.write_all(MEMORY_MAGIC).map_err(io_err)?;
        for v in [
            self.num_attributes as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
        ] {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        for &v in self.m_spa.iter().chain(&self.m_sem) {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
        for m in 0..self.num_attributes {
            let flags = (self.spa_initialized[m] as u8) | ((self.sem_initialized[m] as u8) << 1);
            w.write_all(&[flags]).map_err(io_err)?;
        }
        w.flush().map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        let mut r = std::io::BufReader::new(file);
        let io_err = |e| Error::io(format!("reading {}", path.display()), e);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != MEMORY_MAGIC {
            return Err(Error::Format {
                file: path.display().to_string(),
                detail: "bad magic, not a memory dump".into(),
            });
        }
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(io_err)?;
        let dim = |i: usize| -> usize {
            u32::from_le_bytes(header[i * 4..(i + 1) * 4].try_into().unwrap()) as usize
        };
        let mut mem = ConsistencyMemory::new(dim(0), dim(1), dim(2), dim(3));
        let mut fbuf = [0u8; 4];
        for v in mem.m_spa.iter_mut().chain(mem.m_sem.iter_mut()) {
            r.read_exact(&mut fbuf).map_err(io_err)?;
            *v = f32::from_le_bytes(fbuf) as f64;
        }
        for m in 0..mem.num_attributes {
            let mut b = [0u8; 1];
            r.read_exact(&mut b).map_err(io_err)?;
            mem.spa_initialized[m] = b[0] & 1 != 0;
            mem.sem_initialized[m] = b[0] & 2 != 0;
        }
        Ok(mem)
    }
}

// ---- the regularizers ---------------------------------------------------------------

/// Spatial consistency: mean over eligible attributes of
/// ‖normalize(A_p[m]) − normalize(M_spa[m])‖₁. An attribute is eligible when
/// the batch has a positive sample (n_p[m] > 0) and the memory row is
/// initialized; with no eligible attribute the loss is exactly 0.
/// Gradients flow only through `a_p`.
pub fn spac_loss(
    tape: &mut Tape,
    a_p: Var,
    n_p: &[usize],
    mem: &ConsistencyMemory,
    eps: f64,
) -> Result<Var> {
    let shape = tape.shape(a_p).to_vec();
    let m = shape[0];
    let cols: usize = shape[1..].iter().product();
    let plane = mem.height * mem.width;
    if m != mem.num_attributes || cols != plane {
        return Err(Error::ShapeMismatch {
            op: "spac_loss",
            lhs: shape,
            rhs: vec![mem.num_attributes, plane],
        });
    }
    let eligible: Vec<bool> = (0..m)
        .map(|i| n_p[i] > 0 && mem.spa_initialized[i])
        .collect();
    masked_l1_alignment(tape, a_p, &eligible, &mem.normalized_spa(eps), eps)
}

/// Semantic consistency over V_p rows and the semantic memory; same structure
/// as [`spac_loss`], gradients flow only through `v_p`.
pub fn semc_loss(
    tape: &mut Tape,
    v_p: Var,
    n_p: &[usize],
    mem: &ConsistencyMemory,
    eps: f64,
) -> Result<Var> {
    let shape = tape.shape(v_p).to_vec();
    let m = shape[0];
    let cols: usize = shape[1..].iter().product();
    if m != mem.num_attributes || cols != mem.channels {
        return Err(Error::ShapeMismatch {
            op: "semc_loss",
            lhs: shape,
            rhs: vec![mem.num_attributes, mem.channels],
        });
    }
    let eligible: Vec<bool> = (0..m)
        .map(|i| n_p[i] > 0 && mem.sem_initialized[i])
        .collect();
    masked_l1_alignment(tape, v_p, &eligible, &mem.normalized_sem(eps), eps)
}

fn masked_l1_alignment(
    tape: &mut Tape,
    rows: Var,
    eligible: &[bool],
    target: &Tensor,
    eps: f64,
) -> Result<Var> {
    let m = eligible.len();
    let k = eligible.iter().filter(|&&e| e).count();
    if k == 0 {
        return tape.scalar(0.0);
    }
    let cols = target.shape()[1];
    let flat = tape.reshape(rows, &[m, cols])?;
    let normed = tape.l2_normalize_rows(flat, eps)?;
    let target_v = tape.constant(target)?;
    let diff = tape.sub(normed, target_v)?;
    let terms = tape.reduce(diff, ReduceKind::L1Norm, &[1])?;
    let weights = Tensor::new(
        vec![m],
        eligible
            .iter()
            .map(|&e| if e { 1.0 / k as f64 } else { 0.0 })
            .collect(),
    )?;
    let weights_v = tape.constant(&weights)?;
    let weighted = tape.mul(terms, weights_v)?;
    tape.sum(weighted)
}

// ---- fix-variant stage one -----------------------------------------------------------

/// One full pass over a trained baseline accumulates qualified CAMs per
/// attribute into a frozen spatial memory: running mean, then row
/// normalization. Attributes without qualified samples stay zero and are
/// excluded from the spatial loss for the whole second stage.
pub fn freeze_from_baseline<I>(
    model: &Model,
    batches: I,
    cfg: &ConsistencyConfig,
) -> Result<ConsistencyMemory>
where
    I: IntoIterator<Item = (Tensor, Tensor)>,
{
    let mut sums: Option<Vec<f64>> = None;
    let mut counts: Option<Vec<usize>> = None;
    let mut dims: Option<(usize, usize, usize)> = None;

    for (images, labels) in batches {
        let mut tape = Tape::new();
        let vars = model.register(&mut tape, false)?;
        let img = tape.constant(&images)?;
        let feats = model.forward_features(&mut tape, &vars, img)?;
        let (_, p) = model.classify(&mut tape, &vars, feats)?;
        let cams = model.compute_cams(&mut tape, &vars, feats)?;
        let cam_t = tape.to_tensor(cams);
        let p_t = tape.to_tensor(p);

        let shape = cam_t.shape();
        let (b, m, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        if dims.is_none() {
            dims = Some((m, h, w));
            sums = Some(vec![0.0; m * plane]);
            counts = Some(vec![0usize; m]);
        }
        let sums = sums.as_mut().unwrap();
        let counts = counts.as_mut().unwrap();

        let (mask, _) = select_qualified(&p_t, &labels, cfg.tau);
        for i in 0..b {
            for mi in 0..m {
                if !mask[i * m + mi] {
                    continue;
                }
                counts[mi] += 1;
                let src = &cam_t.data()[(i * m + mi) * plane..(i * m + mi + 1) * plane];
                let dst = &mut sums[mi * plane..(mi + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }

    let (m, h, w) = dims.ok_or_else(|| Error::Config("freeze pass saw no batches".into()))?;
    let plane = h * w;
    let sums = sums.unwrap();
    let counts = counts.unwrap();
    let mut mem = ConsistencyMemory::new(m, h, w, model.feature_channels());
    for mi in 0..m {
        if counts[mi] == 0 {
            continue;
        }
        let mean: Vec<f64> = sums[mi * plane..(mi + 1) * plane]
            .iter()
            .map(|&v| v / counts[mi] as f64)
            .collect();
        let normed = l2_normalize_slice(&mean, cfg.eps);
        if normed.iter().any(|&v| v != 0.0) {
            mem.m_spa[mi * plane..(mi + 1) * plane].copy_from_slice(&normed);
            mem.spa_initialized[mi] = true;
        }
    }
    mem.freeze_spatial();
    Ok(mem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ClassifierHead;
    use crate::rng;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn selector_threshold_examples() {
        let p = t(&[3, 1], &[0.95, 0.91, 0.60]);
        let y = t(&[3, 1], &[1.0, 1.0, 1.0]);
        let (mask, n_q) = select_qualified(&p, &y, 0.9);
        assert_eq!(mask, vec![true, true, false]);
        assert_eq!(n_q, vec![2]);

        // τ = 0: every positive qualifies since σ(z) > 0 always
        let (mask0, n0) = select_qualified(&p, &y, 0.0);
        assert_eq!(mask0, vec![true, true, true]);
        assert_eq!(n0, vec![3]);

        // label 0 never qualifies
        let y0 = t(&[3, 1], &[0.0, 0.0, 0.0]);
        let (maskz, nz) = select_qualified(&p, &y0, 0.0);
        assert_eq!(maskz, vec![false, false, false]);
        assert_eq!(nz, vec![0]);
    }

    #[test]
    fn selector_monotone_in_tau() {
        let mut gen = rng::stream(5, 0);
        let (b, m) = (24, 6);
        let p = Tensor::from_fn(&[b, m], |_| gen.gen_range(0.0..1.0));
        let y = Tensor::from_fn(&[b, m], |_| if gen.gen_bool(0.5) { 1.0 } else { 0.0 });
        let (_, n_p) = select_positive(&y);
        let taus = [0.0, 0.25, 0.5, 0.75, 0.9];
        let mut prev: Option<Vec<usize>> = None;
        for &tau in &taus {
            let (_, n_q) = select_qualified(&p, &y, tau);
            if tau == 0.0 {
                assert_eq!(n_q, n_p, "τ=0 must select all positives");
            }
            if let Some(prev) = &prev {
                for (a, b) in prev.iter().zip(&n_q) {
                    assert!(a >= b, "selector must be monotone in τ");
                }
            }
            prev = Some(n_q);
        }
    }

    #[test]
    fn aggregate_single_and_symmetric() {
        // single qualified sample: the mean is that sample's map
        let a = t(&[2, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0, 9.0, 9.0, 9.0, 9.0]);
        let mask = vec![true, false];
        let (mean, counts) = aggregate_cams(&a, &mask);
        assert_eq!(counts, vec![1]);
        assert_eq!(mean.data(), &[1.0, 2.0, 3.0, 4.0]);

        // maps u and -u cancel
        let a = t(&[2, 1, 2, 2], &[1.0, -2.0, 3.0, -4.0, -1.0, 2.0, -3.0, 4.0]);
        let (mean, counts) = aggregate_cams(&a, &[true, true]);
        assert_eq!(counts, vec![2]);
        assert_eq!(mean.data(), &[0.0, 0.0, 0.0, 0.0]);

        // no qualifying rows stay zero and report zero count
        let (mean, counts) = aggregate_cams(&a, &[false, false]);
        assert_eq!(counts, vec![0]);
        assert!(mean.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_matches_bruteforce() {
        let mut gen = rng::stream(6, 1);
        let (b, m, h, w) = (7, 4, 3, 2);
        let a = Tensor::from_fn(&[b, m, h, w], |_| gen.gen_range(-1.0..1.0));
        let mask: Vec<bool> = (0..b * m).map(|_| gen.gen_bool(0.6)).collect();
        let (mean, counts) = aggregate_cams(&a, &mask);
        for mi in 0..m {
            let mut n = 0usize;
            for i in 0..b {
                if mask[i * m + mi] {
                    n += 1;
                }
            }
            assert_eq!(counts[mi], n);
            for p in 0..h * w {
                let mut acc = 0.0;
                for i in 0..b {
                    if mask[i * m + mi] {
                        acc += a.data()[(i * m + mi) * h * w + p];
                    }
                }
                let expect = if n > 0 { acc / n as f64 } else { 0.0 };
                assert!((mean.data()[mi * h * w + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_mean_graph_matches_pure() {
        let mut gen = rng::stream(61, 8);
        let (b, m, h, w) = (5, 3, 2, 2);
        let maps = Tensor::from_fn(&[b, m, h, w], |_| gen.gen_range(-1.0..1.0));
        let mask: Vec<bool> = (0..b * m).map(|_| gen.gen_bool(0.5)).collect();
        let (pure, counts) = masked_mean_over_batch(&maps, &mask);

        let mut tape = Tape::new();
        let x = tape.constant(&maps).unwrap();
        let g = masked_mean_over_batch_graph(&mut tape, x, &mask, &counts).unwrap();
        assert_eq!(tape.shape(g), pure.shape());
        for (a, b) in tape.data(g).iter().zip(pure.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_gap_uniform_and_zero_weights() {
        let mut gen = rng::stream(7, 2);
        let (b, m, c, h, w) = (2, 3, 4, 2, 3);
        let feats = Tensor::from_fn(&[b, c, h, w], |_| gen.gen_range(-1.0..1.0));

        let mut tape = Tape::new();
        let ones = tape.constant(&Tensor::full(&[b, m, h, w], 1.0)).unwrap();
        let f = tape.constant(&feats).unwrap();
        let v = tape.weighted_gap(ones, f).unwrap();
        // A ≡ 1 → V[i,m] = GAP(F_i) for every m
        for i in 0..b {
            for mi in 0..m {
                for ci in 0..c {
                    let gap: f64 = feats.data()[(i * c + ci) * h * w..(i * c + ci + 1) * h * w]
                        .iter()
                        .sum::<f64>()
                        / (h * w) as f64;
                    let got = tape.data(v)[(i * m + mi) * c + ci];
                    assert!((got - gap).abs() < 1e-12);
                }
            }
        }

        let zeros = tape.constant(&Tensor::zeros(&[b, m, h, w])).unwrap();
        let v0 = tape.weighted_gap(zeros, f).unwrap();
        assert!(tape.data(v0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn weighted_gap_matches_bruteforce() {
        let mut gen = rng::stream(8, 3);
        let (b, m, c, h, w) = (3, 2, 5, 4, 3);
        let maps = Tensor::from_fn(&[b, m, h, w], |_| gen.gen_range(-1.0..1.0));
        let feats = Tensor::from_fn(&[b, c, h, w], |_| gen.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let a = tape.constant(&maps).unwrap();
        let f = tape.constant(&feats).unwrap();
        let v = tape.weighted_gap(a, f).unwrap();
        for i in 0..b {
            for mi in 0..m {
                for ci in 0..c {
                    let mut acc = 0.0;
                    for y in 0..h {
                        for x in 0..w {
                            acc += maps.data()[((i * m + mi) * h + y) * w + x]
                                * feats.data()[((i * c + ci) * h + y) * w + x];
                        }
                    }
                    acc /= (h * w) as f64;
                    let got = tape.data(v)[(i * m + mi) * c + ci];
                    assert!((acc - got).abs() < 1e-9);
                }
            }
        }
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        l2_normalize_slice(v, 1e-12)
    }

    #[test]
    fn memory_update_fixed_point_and_replacement() {
        let cfg = ConsistencyConfig::default();
        let mut mem = ConsistencyMemory::new(1, 2, 2, 3);
        let u = unit(&[1.0, 2.0, 3.0, 4.0]);
        let a_q = t(&[1, 2, 2], &u);
        let v_q = t(&[1, 3], &unit(&[1.0, 0.0, 0.0]));

        mem.update(&a_q, &v_q, &[1], &cfg).unwrap();
        assert!(mem.spa_initialized(0));
        for (a, b) in mem.spa_row(0).iter().zip(&u) {
            assert!((a - b).abs() < 1e-15);
        }

        // same aggregate again: fixed point
        mem.update(&a_q, &v_q, &[1], &cfg).unwrap();
        for (a, b) in mem.spa_row(0).iter().zip(&u) {
            assert!((a - b).abs() < 1e-12, "fixed point drift");
        }
        assert_eq!(mem.update_count(0), 2);

        // α = 1: full replacement by the normalized aggregate
        let cfg_full = ConsistencyConfig {
            alpha: 1.0,
            ..ConsistencyConfig::default()
        };
        let w = [4.0, 3.0, 2.0, 1.0];
        let a_q2 = t(&[1, 2, 2], &w);
        mem.update(&a_q2, &v_q, &[1], &cfg_full).unwrap();
        assert_eq!(mem.spa_row(0), unit(&w).as_slice());
    }

    #[test]
    fn memory_update_orthonormal_blend_norm() {
        let cfg = ConsistencyConfig {
            alpha: 0.5,
            ..ConsistencyConfig::default()
        };
        let mut mem = ConsistencyMemory::new(1, 1, 2, 2);
        let u = t(&[1, 1, 2], &[1.0, 0.0]);
        let v = t(&[1, 1, 2], &[0.0, 1.0]);
        let sem = t(&[1, 2], &[1.0, 0.0]);
        mem.update(&u, &sem, &[1], &cfg).unwrap();
        mem.update(&v, &sem, &[1], &cfg).unwrap();
        assert_eq!(mem.spa_row(0), &[0.5, 0.5]);
        let norm = mem.spa_row(0).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 0.5f64.sqrt()).abs() < 1e-12);
        mem.validate().unwrap();
    }

    #[test]
    fn zero_positive_batch_leaves_memory_bit_identical() {
        let cfg = ConsistencyConfig::default();
        let mut mem = ConsistencyMemory::new(2, 2, 2, 3);
        let a = t(&[2, 2, 2], &[0.6; 8]);
        let v = t(&[2, 3], &[0.3; 6]);
        mem.update(&a, &v, &[1, 1], &cfg).unwrap();
        let before = mem.clone();
        mem.update(&a, &v, &[0, 0], &cfg).unwrap();
        assert_eq!(mem, before);
    }

    #[test]
    fn spac_loss_alignment_bound_and_hand_value() {
        let eps = 1e-12;
        let cfg = ConsistencyConfig::default();
        let mut mem = ConsistencyMemory::new(2, 2, 1, 2);
        // memory rows from hand-set aggregates
        let m0 = [1.0, 3.0];
        let m1 = [2.0, -1.0];
        let a_q = t(&[2, 2, 1], &[m0[0], m0[1], m1[0], m1[1]]);
        let v_q = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        mem.update(&a_q, &v_q, &[1, 1], &cfg).unwrap();

        // aligned batch aggregates (positive multiples) give exactly zero
        let mut tape = Tape::new();
        let aligned = t(
            &[2, 2, 1],
            &[2.0 * m0[0], 2.0 * m0[1], 0.5 * m1[0], 0.5 * m1[1]],
        );
        let a_p = tape.constant(&aligned).unwrap();
        let loss = spac_loss(&mut tape, a_p, &[1, 1], &mem, eps).unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-12);

        // hand-computed value for different aggregates
        let b0 = [5.0, 1.0];
        let b1 = [-2.0, 0.5];
        let mut tape = Tape::new();
        let a_p = tape
            .constant(&t(&[2, 2, 1], &[b0[0], b0[1], b1[0], b1[1]]))
            .unwrap();
        let loss = spac_loss(&mut tape, a_p, &[1, 1], &mem, eps).unwrap();
        let hand = {
            let term = |a: &[f64], m: &[f64]| -> f64 {
                let an = unit(a);
                let mn = unit(m);
                an.iter().zip(&mn).map(|(x, y)| (x - y).abs()).sum::<f64>()
            };
            0.5 * (term(&b0, &m0) + term(&b1, &m1))
        };
        assert!((tape.data(loss)[0] - hand).abs() < 1e-12);
        // upper bound 2·√(H·W) per term
        assert!(tape.data(loss)[0] <= 2.0 * (2.0f64).sqrt() + 1e-9);

        // excluding one attribute switches to a 1/|eligible| average
        let mut tape = Tape::new();
        let a_p = tape
            .constant(&t(&[2, 2, 1], &[b0[0], b0[1], b1[0], b1[1]]))
            .unwrap();
        let loss = spac_loss(&mut tape, a_p, &[1, 0], &mem, eps).unwrap();
        let hand0 = {
            let an = unit(&b0);
            let mn = unit(&m0);
            an.iter().zip(&mn).map(|(x, y)| (x - y).abs()).sum::<f64>()
        };
        assert!((tape.data(loss)[0] - hand0).abs() < 1e-12);
    }

    #[test]
    fn semc_loss_hand_value_and_bound() {
        let eps = 1e-12;
        let cfg = ConsistencyConfig::default();
        let mut mem = ConsistencyMemory::new(1, 1, 1, 3);
        let m0 = [1.0, 2.0, 2.0];
        let a_q = t(&[1, 1, 1], &[1.0]);
        let v_q = t(&[1, 3], &m0);
        mem.update(&a_q, &v_q, &[1], &cfg).unwrap();

        // parallel → 0
        let mut tape = Tape::new();
        let v_p = tape.constant(&t(&[1, 3], &[3.0, 6.0, 6.0])).unwrap();
        let loss = semc_loss(&mut tape, v_p, &[1], &mem, eps).unwrap();
        assert!(tape.data(loss)[0].abs() < 1e-12);

        // hand value for C = 3
        let b0 = [0.0, 1.0, -1.0];
        let mut tape = Tape::new();
        let v_p = tape.constant(&t(&[1, 3], &b0)).unwrap();
        let loss = semc_loss(&mut tape, v_p, &[1], &mem, eps).unwrap();
        let hand: f64 = unit(&b0)
            .iter()
            .zip(&unit(&m0))
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!((tape.data(loss)[0] - hand).abs() < 1e-12);
        assert!(tape.data(loss)[0] <= 2.0 * 3.0f64.sqrt() + 1e-9);

        // nothing eligible → exactly zero
        let mut tape = Tape::new();
        let v_p = tape.constant(&t(&[1, 3], &b0)).unwrap();
        let loss = semc_loss(&mut tape, v_p, &[0], &mem, eps).unwrap();
        assert_eq!(tape.data(loss)[0], 0.0);
    }

    #[test]
    fn hard_variant_binarizes_aggregate_and_rows() {
        let cfg = ConsistencyConfig {
            variant: Variant::Hard,
            ..ConsistencyConfig::default()
        };
        let mut mem = ConsistencyMemory::new(1, 2, 2, 2);
        let a_q = t(&[1, 2, 2], &[0.5, -0.3, 1.2, 0.0]);
        let v_q = t(&[1, 2], &[1.0, 1.0]);
        mem.update(&a_q, &v_q, &[1], &cfg).unwrap();
        // binarized {1,0,1,0} then normalized
        let s = 1.0 / 2.0f64.sqrt();
        assert_eq!(mem.spa_row(0), &[s, 0.0, s, 0.0]);
        assert!(mem.spa_rows_are_binary_normalized());

        // blending with a different support re-binarizes
        let a_q2 = t(&[1, 2, 2], &[-1.0, 2.0, 0.7, -0.2]);
        mem.update(&a_q2, &v_q, &[1], &cfg).unwrap();
        assert!(mem.spa_rows_are_binary_normalized());
        mem.validate().unwrap();
        // semantic memory stays soft
        assert!(mem.sem_row(0).iter().all(|&v| v != 0.0));
    }

    #[test]
    fn fix_variant_skips_frozen_spatial_updates() {
        let cfg = ConsistencyConfig {
            variant: Variant::Fix,
            ..ConsistencyConfig::default()
        };
        let mut mem = ConsistencyMemory::new(1, 2, 2, 2);
        let a_q = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let v_q = t(&[1, 2], &[1.0, 0.0]);
        mem.update(&a_q, &v_q, &[1], &cfg).unwrap();
        mem.freeze_spatial();
        let spa_before = mem.spa_row(0).to_vec();
        let sem_before = mem.sem_row(0).to_vec();

        let a_q2 = t(&[1, 2, 2], &[0.0, 1.0, 0.0, 0.0]);
        let v_q2 = t(&[1, 2], &[0.0, 1.0]);
        mem.update(&a_q2, &v_q2, &[1], &cfg).unwrap();
        assert_eq!(mem.spa_row(0), spa_before.as_slice(), "frozen row changed");
        assert_ne!(mem.sem_row(0), sem_before.as_slice(), "semantic must update");
        assert_eq!(mem.frozen_skips(), 1);
    }

    #[test]
    fn no_gradient_reaches_memory() {
        // Gradients of the upstream rows must be identical whether memory
        // targets enter the graph as constants or as gradient leaves.
        let eps = 1e-12;
        let cfg = ConsistencyConfig::default();
        let mut mem = ConsistencyMemory::new(2, 2, 1, 2);
        let a_q = t(&[2, 2, 1], &[1.0, 3.0, 2.0, -1.0]);
        let v_q = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        mem.update(&a_q, &v_q, &[1, 1], &cfg).unwrap();

        let rows = t(&[2, 2], &[5.0, 1.0, -2.0, 0.5]);

        // path A: library spac_loss (memory as constant)
        let mut tape_a = Tape::new();
        let rows_a = tape_a.leaf(&rows, true).unwrap();
        let rows_a3 = tape_a.reshape(rows_a, &[2, 2, 1]).unwrap();
        let loss_a = spac_loss(&mut tape_a, rows_a3, &[1, 1], &mem, eps).unwrap();
        tape_a.backward(loss_a).unwrap();
        let grad_a = tape_a.grad(rows_a).unwrap();

        // path B: same formula with the memory as a requires-grad leaf
        let mut tape_b = Tape::new();
        let rows_b = tape_b.leaf(&rows, true).unwrap();
        let normed = tape_b.l2_normalize_rows(rows_b, eps).unwrap();
        let target = tape_b.leaf(&mem.normalized_spa(eps), true).unwrap();
        let diff = tape_b.sub(normed, target).unwrap();
        let terms = tape_b.reduce(diff, ReduceKind::L1Norm, &[1]).unwrap();
        let w = tape_b.constant(&t(&[2], &[0.5, 0.5])).unwrap();
        let weighted = tape_b.mul(terms, w).unwrap();
        let loss_b = tape_b.sum(weighted).unwrap();
        tape_b.backward(loss_b).unwrap();
        let grad_b = tape_b.grad(rows_b).unwrap();

        assert_eq!(tape_a.data(loss_a), tape_b.data(loss_b));
        assert_eq!(grad_a.data(), grad_b.data());
    }

    #[test]
    fn spac_pipeline_passes_gradient_check() {
        let eps = 1e-12;
        let cfg = ConsistencyConfig::default();
        let mut mem = ConsistencyMemory::new(2, 2, 2, 3);
        let mut gen = rng::stream(31, 4);
        let a_q = Tensor::from_fn(&[2, 2, 2], |_| gen.gen_range(-1.0..1.0));
        let v_q = Tensor::from_fn(&[2, 3], |_| gen.gen_range(-1.0..1.0));
        mem.update(&a_q, &v_q, &[1, 1], &cfg).unwrap();

        // random probe rows away from sign flips of the L1 terms
        let rows = Tensor::from_fn(&[2, 4], |_| gen.gen_range(0.2..1.0));
        let n_p = [1usize, 1];
        let report = crate::tensor::grad_check(
            |tape, v| {
                let v3 = tape.reshape(v, &[2, 2, 2])?;
                spac_loss(tape, v3, &n_p, &mem, eps)
            },
            &rows,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn freeze_from_baseline_counts_and_values() {
        // Head-only model: W = 0, bias 0 → p ≡ 0.5 < τ → nothing qualifies.
        let model = Model {
            blocks: vec![],
            head: ClassifierHead {
                weight: Tensor::zeros(&[2, 3]),
                bias: Tensor::zeros(&[2]),
            },
        };
        let cfg = ConsistencyConfig::default();
        let images = Tensor::full(&[1, 3, 2, 2], 1.0);
        let labels = t(&[1, 2], &[1.0, 1.0]);
        let mem = freeze_from_baseline(&model, vec![(images, labels)], &cfg).unwrap();
        assert!(mem.spa_frozen());
        assert!(!mem.spa_initialized(0) && !mem.spa_initialized(1));
        assert!(mem.spa_row(0).iter().all(|&v| v == 0.0));

        // Confident head: single qualified image freezes to its normalized CAM.
        let model = Model {
            blocks: vec![],
            head: ClassifierHead {
                weight: t(&[1, 3], &[2.0, 2.0, 2.0]),
                bias: Tensor::zeros(&[1]),
            },
        };
        let mut gen = rng::stream(77, 5);
        let img1 = Tensor::from_fn(&[1, 3, 2, 2], |_| gen.gen_range(0.5..1.0));
        let labels1 = t(&[1, 1], &[1.0]);
        let mem1 =
            freeze_from_baseline(&model, vec![(img1.clone(), labels1.clone())], &cfg).unwrap();
        assert!(mem1.spa_initialized(0));

        // two-image dataset equals the brute-force mean of two CAMs
        let img2 = Tensor::from_fn(&[1, 3, 2, 2], |_| gen.gen_range(0.5..1.0));
        let mem2 = freeze_from_baseline(
            &model,
            vec![
                (img1.clone(), labels1.clone()),
                (img2.clone(), labels1.clone()),
            ],
            &cfg,
        )
        .unwrap();
        let cam_of = |img: &Tensor| -> Vec<f64> {
            let mut out = vec![0.0; 4];
            for p in 0..4 {
                for c in 0..3 {
                    out[p] += 2.0 * img.data()[c * 4 + p];
                }
            }
            out
        };
        let c1 = cam_of(&img1);
        let c2 = cam_of(&img2);
        let mean: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| 0.5 * (a + b)).collect();
        let expect = unit(&mean);
        for (a, b) in mem2.spa_row(0).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // single-image memory equals that image's normalized CAM
        let expect1 = unit(&c1);
        for (a, b) in mem1.spa_row(0).iter().zip(&expect1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn memory_dump_roundtrip() {
        let cfg = ConsistencyConfig::default();
        let mut mem = ConsistencyMemory::new(2, 2, 2, 3);
        let mut gen = rng::stream(41, 6);
        let a_q = Tensor::from_fn(&[2, 2, 2], |_| gen.gen_range(-1.0..1.0));
        let v_q = Tensor::from_fn(&[2, 3], |_| gen.gen_range(-1.0..1.0));
        mem.update(&a_q, &v_q, &[1, 0], &cfg).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("memory.bin");
        mem.save(&path).unwrap();
        let loaded = ConsistencyMemory::load(&path).unwrap();
        assert_eq!(loaded.num_attributes(), 2);
        assert_eq!(loaded.spatial_extents(), (2, 2));
        assert_eq!(loaded.channels(), 3);
        assert_eq!(loaded.spa_initialized(0), mem.spa_initialized(0));
        assert_eq!(loaded.spa_initialized(1), mem.spa_initialized(1));
        for m in 0..2 {
            for (&a, &b) in mem.spa_row(m).iter().zip(loaded.spa_row(m)) {
                assert_eq!(a as f32, b as f32);
            }
        }
    }

    #[test]
    fn config_validation() {
        let good = ConsistencyConfig::default();
        good.validate().unwrap();
        let bad_tau = ConsistencyConfig { tau: 1.0, ..good };
        assert!(bad_tau.validate().is_err());
        let bad_alpha = ConsistencyConfig { alpha: 0.0, ..good };
        assert!(bad_alpha.validate().is_err());
    }

    #[test]
    fn memory_norm_invariant_under_random_updates() {
        let mut gen = rng::stream(51, 7);
        for variant in [Variant::Soft, Variant::Hard] {
            let cfg = ConsistencyConfig {
                variant,
                alpha: 0.7,
                ..ConsistencyConfig::default()
            };
            let mut mem = ConsistencyMemory::new(3, 2, 2, 4);
            for _ in 0..50 {
                let a_q = Tensor::from_fn(&[3, 2, 2], |_| gen.gen_range(-1.0..1.0));
                let v_q = Tensor::from_fn(&[3, 4], |_| gen.gen_range(-1.0..1.0));
                let n_q: Vec<usize> = (0..3).map(|_| usize::from(gen.gen_bool(0.7))).collect();
                mem.update(&a_q, &v_q, &n_q, &cfg).unwrap();
                mem.validate().unwrap();
            }
        }
    }
}
