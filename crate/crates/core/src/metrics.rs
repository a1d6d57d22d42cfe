//! Evaluation metrics: voxel overlap, surface distance and Jacobian
//! regularity, per registration stage.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{compose, jacobian_stats, warp, Interp, VectorField};
use crate::volume::{Dims, SegMask, Spacing};

/// Dice, precision and recall of a warped mask against the fixed mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub prec: f64,
    pub rec: f64,
    /// The warped mask was empty, so `prec` is reported as 0.
    pub empty_warped: bool,
    /// The fixed mask was empty, so `rec` is reported as 0.
    pub empty_fixed: bool,
}

fn check_pair(a: &SegMask, b: &SegMask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("masks {} vs {}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `w_seg` is the prediction, `f_seg` the reference.
pub fn overlap_metrics(f_seg: &SegMask, w_seg: &SegMask) -> Result<Overlap> {
    check_pair(f_seg, w_seg)?;
    let (mut tp, mut nf, mut nw) = (0usize, 0usize, 0usize);
    for (&f, &w) in f_seg.data().iter().zip(w_seg.data()) {
        tp += (f && w) as usize;
        nf += f as usize;
        nw += w as usize;
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(Overlap {
        dice: ratio(2 * tp, nf + nw),
        prec: ratio(tp, nw),
        rec: ratio(tp, nf),
        empty_warped: nw == 0,
        empty_fixed: nf == 0,
    })
}

/// Set voxels with an unset 6-neighbour or lying on the volume boundary.
pub fn surface(mask: &SegMask) -> Vec<bool> {
    let d = mask.dims();
    let m = mask.data();
    let mut out = vec![false; d.len()];
    for z in 0..d.nz {
        for y in 0..d.ny {
            for x in 0..d.nx {
                let i = d.index(x, y, z);
                if !m[i] {
                    continue;
                }
                out[i] = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == d.nx
                    || y + 1 == d.ny
                    || z + 1 == d.nz
                    || !m[i - 1]
                    || !m[i + 1]
                    || !m[i - d.nx]
                    || !m[i + d.nx]
                    || !m[i - d.nx * d.ny]
                    || !m[i + d.nx * d.ny];
            }
        }
    }
    out
}

/// Lower envelope of parabolas `f[q] + w (p - q)^2`, evaluated in place.
fn edt_1d(f: &mut [f64], w: f64, v: &mut [usize], z: &mut [f64], tmp: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut count = 0usize;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        if count == 0 {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            count = 1;
            k = 0;
            continue;
        }
        loop {
            let r = v[k];
            let s = ((f[q] + w * (q * q) as f64) - (f[r] + w * (r * r) as f64)) / (2.0 * w * (q as f64 - r as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    if count == 0 {
        return;
    }
    tmp[..n].copy_from_slice(f);
    let mut j = 0usize;
    for (p, out) in f.iter_mut().enumerate() {
        while z[j + 1] < p as f64 {
            j += 1;
        }
        let r = v[j];
        let dp = p as f64 - r as f64;
        *out = w * dp * dp + tmp[r];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// `seed` voxel. All entries are infinite when there is no seed.
pub fn squared_distance_transform(seed: &[bool], dims: Dims, spacing: Spacing) -> Vec<f64> {
    let mut d: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let lens = [dims.nx, dims.ny, dims.nz];
    let strides = [1, dims.nx, dims.nx * dims.ny];
    let nmax = *lens.iter().max().unwrap();
    let (mut line, mut v, mut z, mut tmp) = (vec![0.0; nmax], vec![0usize; nmax], vec![0.0; nmax + 1], vec![0.0; nmax]);
    for axis in 0..3 {
        let len = lens[axis];
        let stride = strides[axis];
        let w = spacing[axis] * spacing[axis];
        for start in 0..dims.len() {
            // visit each line once, from its first voxel
            if (start / stride) % len != 0 {
                continue;
            }
            for (p, l) in line[..len].iter_mut().enumerate() {
                *l = d[start + p * stride];
            }
            edt_1d(&mut line[..len], w, &mut v, &mut z, &mut tmp);
            for (p, &l) in line[..len].iter().enumerate() {
                d[start + p * stride] = l;
            }
        }
    }
    d
}

/// Average symmetric surface distance in millimetres.
pub fn assd(a: &SegMask, b: &SegMask) -> Result<f64> {
    check_pair(a, b)?;
    if a.spacing() != b.spacing() {
        return Err(Error::DimMismatch(format!("spacing {:?} vs {:?}", a.spacing(), b.spacing())));
    }
    for (name, m) in [("first", a), ("second", b)] {
        if m.count() == 0 {
            return Err(Error::EmptyMask(format!("{name} mask has no voxels")));
        }
    }
    let (sa, sb) = (surface(a), surface(b));
    let da = squared_distance_transform(&sa, a.dims(), a.spacing());
    let db = squared_distance_transform(&sb, a.dims(), a.spacing());
    let one_way = |s: &[bool], dt: &[f64]| -> (f64, usize) {
        s.iter()
            .zip(dt)
            .filter(|(&on, _)| on)
            .fold((0.0, 0), |(sum, n), (_, &d2)| (sum + d2.sqrt(), n + 1))
    };
    let (sum_a, na) = one_way(&sa, &db);
    let (sum_b, nb) = one_way(&sb, &da);
    Ok((sum_a + sum_b) / (na + nb) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Affine,
    Final,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Initial, Stage::Affine, Stage::Final];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Affine => "affine",
            Stage::Final => "final",
        }
    }

    /// Number of transforms applied at this stage.
    pub fn chain_len(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianSummary {
    pub nonpos_count: usize,
    pub nonpos_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub stage: Stage,
    pub dice: f64,
    pub prec: f64,
    pub rec: f64,
    pub assd_mm: f64,
    /// Only at the final stage.
    pub jac: Option<JacobianSummary>,
}

/// Warps `m_seg` through `chain` (applied first to last, nearest sampling)
/// and scores it against `f_seg`.
pub fn evaluate_stage(f_seg: &SegMask, m_seg: &SegMask, chain: &[&VectorField], stage: Stage) -> Result<EvalReport> {
    check_pair(f_seg, m_seg)?;
    if chain.len() != stage.chain_len() {
        return Err(Error::InvalidArgument(format!(
            "stage {stage} takes {} transforms, got {}",
            stage.chain_len(),
            chain.len()
        )));
    }
    let warped = match chain.split_last() {
        None => m_seg.clone(),
        Some((last, rest)) => {
            let mut total = (*last).clone();
            for u in rest.iter().rev() {
                total = compose(u, &total)?;
            }
            let w = warp(&m_seg.to_volume(), &total, Interp::Nearest)?;
            SegMask::threshold(w.data(), w.dims(), w.spacing(), 0.5)?
        }
    };
    let o = overlap_metrics(f_seg, &warped)?;
    let jac = (stage == Stage::Final).then(|| {
        let s = jacobian_stats(chain[chain.len() - 1], f_seg.spacing());
        JacobianSummary {
            nonpos_count: s.nonpos_count,
            nonpos_percent: s.nonpos_percent,
        }
    });
    Ok(EvalReport {
        stage,
        dice: o.dice,
        prec: o.prec,
        rec: o.rec,
        assd_mm: assd(f_seg, &warped)?,
        jac,
    })
}

/// Reports of one pair at every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairEval {
    pub pair_id: String,
    pub reports: Vec<EvalReport>,
}

/// Means over pairs for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub pairs: usize,
    pub dice: f64,
    pub prec: f64,
    pub rec: f64,
    pub assd_mm: f64,
    pub jac_nonpos_percent: Option<f64>,
}

/// Per-stage means, in stage order; stages with no reports are omitted.
pub fn summarize(pairs: &[PairEval]) -> Vec<StageSummary> {
    Stage::ALL
        .iter()
        .filter_map(|&stage| {
            let rs: Vec<&EvalReport> = pairs.iter().flat_map(|p| &p.reports).filter(|r| r.stage == stage).collect();
            if rs.is_empty() {
                return None;
            }
            let n = rs.len() as f64;
            let mean = |f: fn(&EvalReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let jac: Vec<f64> = rs.iter().filter_map(|r| r.jac.map(|j| j.nonpos_percent)).collect();
            Some(StageSummary {
                stage,
                pairs: rs.len(),
                dice: mean(|r| r.dice),
                prec: mean(|r| r.prec),
                rec: mean(|r| r.rec),
                assd_mm: mean(|r| r.assd_mm),
                jac_nonpos_percent: (!jac.is_empty()).then(|| jac.iter().sum::<f64>() / jac.len() as f64),
            })
        })
        .collect()
}

pub const EVAL_CSV_HEADER: [&str; 8] = [
    "pair_id",
    "stage",
    "dice",
    "prec",
    "rec",
    "assd_mm",
    "jac_nonpos_count",
    "jac_nonpos_percent",
];

/// One row per pair and stage; Jacobian columns are blank before the final stage.
pub fn write_eval_csv(path: impl AsRef<Path>, pairs: &[PairEval]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(EVAL_CSV_HEADER)?;
    for p in pairs {
        for r in &p.reports {
            let (count, pct) = match r.jac {
                Some(j) => (j.nonpos_count.to_string(), j.nonpos_percent.to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                p.pair_id.clone(),
                r.stage.to_string(),
                r.dice.to_string(),
                r.prec.to_string(),
                r.rec.to_string(),
                r.assd_mm.to_string(),
                count,
                pct,
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    Ok(())
}

/// Stage table: one labelled row, with Dice/PREC/REC/ASSD for each of
/// Initial, Affine and Final plus the final non-positive Jacobian share.
pub fn write_stage_table(path: impl AsRef<Path>, rows: &[(String, Vec<StageSummary>)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let mut header = vec!["method".to_string()];
    for s in Stage::ALL {
        for m in ["dice", "prec", "rec", "assd_mm"] {
            header.push(format!("{s}_{m}"));
        }
    }
    header.push("final_jac_nonpos_percent".into());
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record(&header)?;
    for (label, summaries) in rows {
        let mut rec = vec![label.clone()];
        for s in Stage::ALL {
            match summaries.iter().find(|x| x.stage == s) {
                Some(x) => rec.extend([x.dice, x.prec, x.rec, x.assd_mm].map(|v| format!("{v:.4}"))),
                None => rec.extend(std::iter::repeat_n(String::new(), 4)),
            }
        }
        let jac = summaries.iter().find_map(|x| x.jac_nonpos_percent);
        rec.push(jac.map(|v| format!("{v:.4}")).unwrap_or_default());
        w.write_record(&rec)?;
    }
    drop(w);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}
