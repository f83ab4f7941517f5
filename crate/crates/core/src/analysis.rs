//! Step-size trajectories from training logs and canonical correlation
//! between layer representations.

use std::io::{self, BufRead, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::encoder::EncoderError;
use crate::meta::{AdaptedState, MetaModel};

pub const DEFAULT_CCA_REG: f64 = 1e-10;
pub const DEFAULT_NEAR_ZERO: f64 = 1e-5;
pub const DEFAULT_OVERFIT_FRACTION: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("training log: {0}")]
    Log(String),
    #[error("representation rows differ: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("representation contains a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Step-size series per group, one point per outer update.
#[derive(Debug, Clone, PartialEq)]
pub struct LrTrajectories {
    pub groups: Vec<String>,
    pub steps: Vec<u64>,
    /// `series[g][t]` is group `g`'s step size at `steps[t]`.
    pub series: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrSummary {
    pub final_abs: Vec<(String, f64)>,
    pub near_zero_fraction: f64,
    pub meta_overfitting: bool,
}

/// Extracts every `alpha:<group>` column from a training log, keeping the
/// first row of each step (rows within a step share their step sizes).
pub fn lr_trajectories<R: BufRead>(reader: R) -> Result<LrTrajectories, AnalysisError> {
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| AnalysisError::Log("empty file".into()))??;
    let cols: Vec<&str> = header.split(',').collect();
    let step_col = cols
        .iter()
        .position(|c| *c == "step")
        .ok_or_else(|| AnalysisError::Log("missing step column".into()))?;
    let alpha_cols: Vec<(usize, String)> = cols
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.strip_prefix("alpha:").map(|g| (i, g.to_string())))
        .collect();
    if alpha_cols.is_empty() {
        return Err(AnalysisError::Log("no alpha columns".into()));
    }
    let mut out = LrTrajectories {
        groups: alpha_cols.iter().map(|(_, g)| g.clone()).collect(),
        steps: Vec::new(),
        series: vec![Vec::new(); alpha_cols.len()],
    };
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(AnalysisError::Log(format!("line {}: {} fields, expected {}", n + 2, fields.len(), cols.len())));
        }
        let bad = |what: &str| AnalysisError::Log(format!("line {}: bad {what}", n + 2));
        let step: u64 = fields[step_col].parse().map_err(|_| bad("step"))?;
        if out.steps.last() == Some(&step) {
            continue;
        }
        out.steps.push(step);
        for (s, (i, g)) in out.series.iter_mut().zip(&alpha_cols) {
            s.push(fields[*i].parse().map_err(|_| bad(g))?);
        }
    }
    Ok(out)
}

impl LrTrajectories {
    /// Flags meta-overfitting when more than `fraction` of the groups end
    /// with `|alpha| < eps`.
    pub fn summary(&self, eps: f64, fraction: f64) -> LrSummary {
        let final_abs: Vec<(String, f64)> = self
            .groups
            .iter()
            .zip(&self.series)
            .map(|(g, s)| (g.clone(), s.last().copied().unwrap_or(f64::NAN).abs()))
            .collect();
        let near = final_abs.iter().filter(|(_, a)| *a < eps).count();
        let near_zero_fraction = near as f64 / final_abs.len().max(1) as f64;
        LrSummary { final_abs, near_zero_fraction, meta_overfitting: near_zero_fraction > fraction }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,group,alpha")?;
        for (t, step) in self.steps.iter().enumerate() {
            for (g, s) in self.groups.iter().zip(&self.series) {
                writeln!(w, "{step},{g},{}", s[t])?;
            }
        }
        Ok(())
    }
}

/// Rows are inputs, columns hidden units.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub layer: usize,
    pub tag: String,
}

impl RepresentationMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, layer: usize, tag: impl Into<String>) -> Result<Self, AnalysisError> {
        assert_eq!(data.len(), rows * cols, "representation data length");
        if rows < 2 {
            return Err(AnalysisError::TooFewRows(rows));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::NonFinite);
        }
        Ok(Self { rows, cols, data, layer, tag: tag.into() })
    }

    fn centered(&self) -> DMatrix<f64> {
        let mut m = DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        for mut c in m.column_iter_mut() {
            let mean = c.mean();
            c.add_scalar_mut(-mean);
        }
        m
    }
}

fn inv_sqrt(s: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(s);
    let d = eig.eigenvalues.map(|l| 1.0 / l.max(f64::MIN_POSITIVE).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Adds `reg` times the mean variance to the diagonal, so the penalty
/// follows the scale of the representation.
fn ridge(mut s: DMatrix<f64>, reg: f64) -> DMatrix<f64> {
    let scale = s.trace() / s.nrows() as f64;
    let shift = reg * if scale > 0.0 { scale } else { 1.0 };
    for i in 0..s.nrows() {
        s[(i, i)] += shift;
    }
    s
}

/// Mean of the top `min(cols_a, cols_b)` canonical correlations between
/// `a` and `b`, with a relative ridge `reg` on both covariance blocks. Clipped to
/// `[0, 1]`.
pub fn cca_similarity(a: &RepresentationMatrix, b: &RepresentationMatrix, reg: f64) -> Result<f64, AnalysisError> {
    if a.rows != b.rows {
        return Err(AnalysisError::RowMismatch(a.rows, b.rows));
    }
    if a.rows < 2 {
        return Err(AnalysisError::TooFewRows(a.rows));
    }
    let n = (a.rows - 1) as f64;
    let (ca, cb) = (a.centered(), b.centered());
    let saa = ridge(ca.transpose() * &ca / n, reg);
    let sbb = ridge(cb.transpose() * &cb / n, reg);
    let sab = ca.transpose() * &cb / n;
    let t = inv_sqrt(saa) * sab * inv_sqrt(sbb);
    let mut sv: Vec<f64> = t.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    let m = a.cols.min(b.cols);
    let mean = sv.iter().take(m).map(|v| v.clamp(0.0, 1.0)).sum::<f64>() / m as f64;
    Ok(mean.clamp(0.0, 1.0))
}

/// CLS representations of `inputs` at each listed layer (0 = embeddings),
/// in evaluation mode.
pub fn collect_reps(model: &MetaModel, inputs: &[&[u32]], layers: &[usize], tag: &str) -> Result<Vec<RepresentationMatrix>, AnalysisError> {
    let reps = model.encoder.layer_representations(&model.params, inputs, layers)?;
    reps.into_iter()
        .zip(layers)
        .map(|(t, &l)| {
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            RepresentationMatrix::new(rows, cols, t.into_data(), l, tag)
        })
        .collect()
}

/// Per-layer CCA similarity between the model's representations of
/// `inputs` before and after fine-tuning into `state`.
pub fn finetune_cca(
    model: &MetaModel,
    state: &AdaptedState,
    inputs: &[&[u32]],
    reg: f64,
) -> Result<Vec<(usize, f64)>, AnalysisError> {
    let layers: Vec<usize> = (0..=model.encoder.cfg.n_layers).collect();
    let before = collect_reps(model, inputs, &layers, "before")?;
    let tuned = MetaModel { params: model.adapted_params(state), ..model.clone() };
    let after = collect_reps(&tuned, inputs, &layers, "after")?;
    before
        .iter()
        .zip(&after)
        .map(|(a, b)| Ok((a.layer, cca_similarity(a, b, reg)?)))
        .collect()
}

pub fn write_cca_csv<W: Write>(mut w: W, rows: &[(usize, f64)]) -> io::Result<()> {
    writeln!(w, "layer,similarity")?;
    for (l, s) in rows {
        writeln!(w, "{l},{s}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> RepresentationMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        RepresentationMatrix::new(rows, cols, data, 0, "g").unwrap()
    }

    #[test]
    fn self_similarity_is_one() {
        let a = gaussian(100, 8, 1);
        assert!((cca_similarity(&a, &a, DEFAULT_CCA_REG).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric_and_bounded() {
        let a = gaussian(60, 5, 2);
        let b = gaussian(60, 7, 3);
        let ab = cca_similarity(&a, &b, DEFAULT_CCA_REG).unwrap();
        let ba = cca_similarity(&b, &a, DEFAULT_CCA_REG).unwrap();
        assert!((ab - ba).abs() < 1e-8);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn row_mismatch_errors() {
        let a = gaussian(10, 2, 1);
        let b = gaussian(11, 2, 1);
        assert!(matches!(cca_similarity(&a, &b, 1e-6), Err(AnalysisError::RowMismatch(10, 11))));
        assert!(matches!(RepresentationMatrix::new(1, 2, vec![0.0, 1.0], 0, ""), Err(AnalysisError::TooFewRows(1))));
    }

    #[test]
    fn trajectories_keep_one_point_per_step() {
        let log = "step,provenance,inner_losses,val_loss,val_acc,alpha:a,alpha:b\n\
                   0,smlmt,1;1,1,0.5,0.001,0.001\n\
                   0,smlmt,1;1,1,0.5,0.001,0.001\n\
                   1,smlmt,1;1,1,0.5,0.002,0.0\n";
        let t = lr_trajectories(log.as_bytes()).unwrap();
        assert_eq!(t.steps, vec![0, 1]);
        assert_eq!(t.series, vec![vec![0.001, 0.002], vec![0.001, 0.0]]);
        let s = t.summary(DEFAULT_NEAR_ZERO, 0.4);
        assert_eq!(s.near_zero_fraction, 0.5);
        assert!(s.meta_overfitting);
        assert!(!t.summary(DEFAULT_NEAR_ZERO, 0.5).meta_overfitting);
    }

    #[test]
    fn log_without_alpha_columns_errors() {
        assert!(matches!(lr_trajectories("step,val_loss\n0,1\n".as_bytes()), Err(AnalysisError::Log(_))));
    }
}
