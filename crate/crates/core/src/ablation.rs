//! Variant suites that train one configuration per row under a shared
//! budget and tabulate parameter counts and validation metrics.

use crate::config::{AdapterKind, ModelConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::pipeline::{count_params, fit, BitAlignModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    BpmPositions,
    Fusion,
    Adapter,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bpm-positions" => Ok(Suite::BpmPositions),
            "fusion" => Ok(Suite::Fusion),
            "adapter" => Ok(Suite::Adapter),
            _ => Err(Error::config("suite", format!("expected bpm-positions, fusion or adapter, got {s:?}"))),
        }
    }
}

/// Depth used by the position suite so every position set fits.
pub const POSITION_SUITE_DEPTH: usize = 12;

pub const POSITION_SETS: [&[usize]; 5] = [
    &[1, 12],
    &[1, 5, 9],
    &[1, 4, 7, 10],
    &[1, 3, 5, 7, 9, 11],
    &[1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12],
];

#[derive(Debug, Clone)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
}

fn positions_name(p: &[usize]) -> String {
    if p.len() == 12 {
        "1-12".into()
    } else {
        p.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
    }
}

pub fn variants(suite: Suite, base: &ModelConfig) -> Vec<Variant> {
    match suite {
        Suite::BpmPositions => [true, false]
            .iter()
            .flat_map(|&shared| {
                POSITION_SETS.iter().map(move |set| {
                    let config = ModelConfig {
                        depth: POSITION_SUITE_DEPTH,
                        bpm_positions: set.to_vec(),
                        bpm_shared: shared,
                        ..base.clone()
                    };
                    let tag = if shared { "shared" } else { "independent" };
                    Variant {
                        name: format!("{} {tag}", positions_name(set)),
                        config,
                    }
                })
            })
            .collect(),
        Suite::Fusion => [(true, false, false), (false, true, false), (true, false, true), (false, true, true)]
            .iter()
            .map(|&(pt, tfg, tcls)| Variant {
                name: format!(
                    "{}{}",
                    if pt { "PT" } else { "TFG" },
                    if tcls { "+tcls" } else { "" }
                ),
                config: ModelConfig {
                    use_pt: pt,
                    use_tfg: tfg,
                    lambda_tcls: if tcls { base.lambda_tcls } else { 0.0 },
                    ..base.clone()
                },
            })
            .collect(),
        Suite::Adapter => [AdapterKind::Bpm, AdapterKind::Baseline]
            .iter()
            .map(|&adapter| Variant {
                name: match adapter {
                    AdapterKind::Bpm => "bpm".into(),
                    AdapterKind::Baseline => "baseline".into(),
                },
                config: ModelConfig {
                    adapter,
                    ..base.clone()
                },
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub positions: String,
    pub shared: bool,
    pub pt: bool,
    pub tfg: bool,
    pub lambda_tcls: f64,
    pub adapter: String,
    pub trainable_params: usize,
    pub kld: f64,
    pub sim: f64,
    pub nss: f64,
    pub final_loss: f64,
    /// `None` on success.
    pub error: Option<String>,
}

pub const CSV_HEADER: &str =
    "variant,positions,shared,pt,tfg,lambda_tcls,adapter,trainable_params,kld,sim,nss,final_loss,status";

impl AblationRow {
    fn skeleton(v: &Variant) -> Self {
        let c = &v.config;
        AblationRow {
            name: v.name.clone(),
            positions: c.get("bpm.positions").unwrap_or_default(),
            shared: c.bpm_shared,
            pt: c.use_pt,
            tfg: c.use_tfg,
            lambda_tcls: c.lambda_tcls,
            adapter: c.get("bpm.adapter").unwrap_or_default(),
            trainable_params: count_params(c).map(|p| p.trainable).unwrap_or(0),
            kld: f64::NAN,
            sim: f64::NAN,
            nss: f64::NAN,
            final_loss: f64::NAN,
            error: None,
        }
    }

    pub fn to_csv_line(&self) -> String {
        let status = match &self.error {
            None => "ok".to_string(),
            Some(e) => format!("\"failed: {}\"", e.replace('"', "'")),
        };
        format!(
            "{},\"{}\",{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
            self.name,
            self.positions,
            self.shared,
            self.pt,
            self.tfg,
            self.lambda_tcls,
            self.adapter,
            self.trainable_params,
            self.kld,
            self.sim,
            self.nss,
            self.final_loss,
            status
        )
    }
}

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

/// Trains `variant` for `steps` and evaluates it on `val`. Failures are
/// recorded in the row rather than returned.
pub fn run_variant(variant: &Variant, train: &[Sample], val: &[Sample], steps: usize, threads: usize) -> AblationRow {
    let mut row = AblationRow::skeleton(variant);
    let run = || -> Result<(f64, f64, f64, f64)> {
        let mut model = BitAlignModel::build(&variant.config)?;
        let trace = fit(&mut model, train, steps)?;
        let report = evaluate(&model, val, threads)?;
        let last = trace.smoothed(20).last().copied().unwrap_or(f64::NAN);
        Ok((report.mean_kld, report.mean_sim, report.mean_nss, last))
    };
    match run() {
        Ok((kld, sim, nss, loss)) => {
            row.kld = kld;
            row.sim = sim;
            row.nss = nss;
            row.final_loss = loss;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_shapes() {
        let base = ModelConfig::toy();
        let p = variants(Suite::BpmPositions, &base);
        assert_eq!(p.len(), 10);
        assert!(p.iter().all(|v| v.config.validate().is_ok() && v.config.depth == 12));
        let f = variants(Suite::Fusion, &base);
        assert_eq!(f.len(), 4);
        assert_eq!(f.iter().filter(|v| v.config.lambda_tcls == 0.0).count(), 2);
        assert_eq!(variants(Suite::Adapter, &base).len(), 2);
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn position_suite_parameter_pattern() {
        let rows: Vec<AblationRow> = variants(Suite::BpmPositions, &ModelConfig::toy())
            .iter()
            .map(AblationRow::skeleton)
            .collect();
        let (shared, indep) = rows.split_at(5);
        assert!(shared.iter().all(|r| r.trainable_params == shared[0].trainable_params));
        assert!(indep.windows(2).all(|w| w[0].trainable_params < w[1].trainable_params));
    }

    #[test]
    fn csv_has_header_and_status() {
        let v = &variants(Suite::Adapter, &ModelConfig::toy())[0];
        let mut row = AblationRow::skeleton(v);
        row.error = Some("boom \"x\"".into());
        let csv = to_csv(&[row]);
        assert!(csv.starts_with(CSV_HEADER));
        assert!(csv.contains("\"failed: boom 'x'\""));
    }
}
