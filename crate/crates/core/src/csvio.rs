//! CSV artifacts: comma-separated, header row, LF line endings, floats with
//! 17 significant digits, empty cells for undefined values.

use std::path::Path;

use crate::dynamics::{StepDynamicsReport, DYNAMICS_COLUMNS};
use crate::error::{Error, Result};
use crate::trainer::{TrainRow, TRAIN_COLUMNS};

/// Locale-independent float cell that round-trips through `f64::from_str`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".to_string()
    } else if v > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub struct CsvFile {
    writer: csv::Writer<std::fs::File>,
}

impl CsvFile {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(file);
        writer.write_record(header)?;
        Ok(Self { writer })
    }

    pub fn row(&mut self, cells: &[String]) -> Result<()> {
        self.writer.write_record(cells)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::Csv(e.into()))
    }
}

pub fn dynamics_cells(r: &StepDynamicsReport) -> Vec<String> {
    vec![
        r.step.to_string(),
        fmt_f64(r.log_pi_w),
        fmt_f64(r.log_pi_l),
        fmt_f64(r.z),
        fmt_f64(r.sigma_z),
        fmt_f64(r.term_w),
        fmt_f64(r.term_l),
        fmt_f64(r.delta_w_pred),
        fmt_f64(r.delta_l_pred),
        fmt_f64(r.delta_w_meas),
        fmt_f64(r.delta_l_meas),
        fmt_opt(r.log_delta_ratio()),
        fmt_f64(r.pi_ystar),
        fmt_f64(r.delta_ystar_meas),
        r.case_label.as_str().to_string(),
    ]
}

pub fn write_dynamics(path: &Path, reports: &[StepDynamicsReport]) -> Result<()> {
    let mut f = CsvFile::create(path, &DYNAMICS_COLUMNS)?;
    for r in reports {
        f.row(&dynamics_cells(r))?;
    }
    f.finish()
}

pub fn train_cells(r: &TrainRow) -> Vec<String> {
    vec![
        r.step.to_string(),
        fmt_opt(r.loss_dpo),
        fmt_opt(r.loss_sft),
        fmt_opt(r.loss_sft_star),
        fmt_opt(r.constraint_residual),
        fmt_opt(r.loss_reg),
        fmt_f64(r.loss_total),
        fmt_opt(r.z_mean),
        fmt_opt(r.sigma_z_mean),
        fmt_f64(r.accuracy),
        fmt_f64(r.grad_norm_theta),
        fmt_f64(r.grad_norm_phi),
    ]
}

pub fn write_train(path: &Path, rows: &[TrainRow]) -> Result<()> {
    let mut f = CsvFile::create(path, &TRAIN_COLUMNS)?;
    for r in rows {
        f.row(&train_cells(r))?;
    }
    f.finish()
}
