//! Size accounting, accuracy evaluation, and the metrics CSV.
//!
//! Model size multiplies the bit width by the number of nonzeros and adds
//! 32 bits per stored codebook value; sparse-index storage is deliberately
//! not counted (the checkpoint's true byte size shows the difference).
//! Compression ratios divide by the unfactorized dense 32-bit size, which is
//! recorded in the CSV header.

use std::io::Write;
use std::path::Path;

use crate::attacks::{run_attack, AttackConfig, AttackFamily, ModelTarget};
use crate::error::{AtmcError, Result};
use crate::harness::dataset::Dataset;
use crate::model::{count_distinct_nonzero, count_l0, ArchitectureSpec, ModelParams};
use crate::tensor::{Element, Tensor};

/// Bits to store the model at the given width: b * nnz per matrix plus
/// 32 bits per distinct nonzero value (the codebook). Unquantized models
/// (bits >= 32) pay 32 * nnz with no codebook term.
pub fn model_size_bits<E: Element>(model: &ModelParams<E>, bits: u8) -> u64 {
    if bits >= 32 {
        return 32 * model.total_nnz() as u64;
    }
    model
        .matrices()
        .map(|m| bits as u64 * count_l0(m) as u64 + 32 * count_distinct_nonzero(m) as u64)
        .sum()
}

/// Size of the plain (unfactorized) dense 32-bit network — the compression
/// ratio denominator.
pub fn dense_size_bits(arch: &ArchitectureSpec) -> Result<u64> {
    Ok(32 * arch.dense_param_count()? as u64)
}

pub fn compression_ratio(size_bits: u64, dense_bits: u64) -> f64 {
    size_bits as f64 / dense_bits as f64
}

/// Accuracy on clean and attacked versions of the test set.
pub fn evaluate<E: Element>(
    model: &ModelParams<E>,
    data: &Dataset<E>,
    attack: &AttackConfig,
) -> Result<(f64, f64)> {
    const BATCH: usize = 256;
    let n = data.test_y.len();
    if n == 0 {
        return Ok((0.0, 0.0));
    }
    let sample = data.test_x.numel() / data.test_x.shape()[0];
    let mut clean_hits = 0usize;
    let mut adv_hits = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + BATCH).min(n);
        let mut shape = data.test_x.shape().to_vec();
        shape[0] = end - start;
        let bx = Tensor::new(
            shape,
            data.test_x.data()[start * sample..end * sample].to_vec(),
        )?;
        let by = &data.test_y[start..end];
        clean_hits += count_hits(&model.logits(&bx)?, by);
        if attack.family == AttackFamily::None {
            adv_hits = clean_hits;
        } else {
            let x_adv = run_attack(&ModelTarget(model), &bx, by, attack)?;
            adv_hits += count_hits(&model.logits(&x_adv)?, by);
        }
        start = end;
    }
    Ok((clean_hits as f64 / n as f64, adv_hits as f64 / n as f64))
}

fn count_hits<E: Element>(logits: &Tensor<E>, y: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(y.iter())
        .filter(|(row, &label)| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Compact attack description for CSV rows (comma-free so rows stay
/// machine-splittable), e.g. `pgd(delta=0.298039;n=16)`.
pub fn attack_descriptor(cfg: &AttackConfig) -> String {
    match cfg.family {
        AttackFamily::None => "none".to_string(),
        AttackFamily::Pgd => format!("pgd(delta={:.6};n={})", cfg.delta, cfg.n_steps),
        AttackFamily::Fgsm => format!("fgsm(delta={:.6})", cfg.delta),
        AttackFamily::Wrm => format!(
            "wrm(gamma={:.3};n={};delta={:.6})",
            cfg.wrm_gamma, cfg.n_steps, cfg.delta
        ),
    }
}

/// One line of the trade-off table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub pipeline: String,
    /// usize::MAX encodes an unbounded budget and prints as `inf`.
    pub k: usize,
    pub bits: u8,
    pub nnz: usize,
    pub distinct_per_matrix: Vec<usize>,
    pub size_bits: u64,
    pub compression_ratio: f64,
    pub ta: f64,
    pub ata: f64,
    pub attack: String,
    pub seed: u64,
    pub wall_time_s: f64,
}

/// The single measurement path every pipeline goes through: count, size,
/// evaluate, assemble the row.
#[allow(clippy::too_many_arguments)]
pub fn measure<E: Element>(
    pipeline: &str,
    model: &ModelParams<E>,
    bits: u8,
    k: usize,
    data: &Dataset<E>,
    attack: &AttackConfig,
    seed: u64,
    wall_time_s: f64,
) -> Result<MetricsRow> {
    let size_bits = model_size_bits(model, bits);
    let dense = dense_size_bits(&model.arch)?;
    let (ta, ata) = evaluate(model, data, attack)?;
    Ok(MetricsRow {
        pipeline: pipeline.to_string(),
        k,
        bits,
        nnz: model.total_nnz(),
        distinct_per_matrix: model.matrices().map(count_distinct_nonzero).collect(),
        size_bits,
        compression_ratio: compression_ratio(size_bits, dense),
        ta,
        ata,
        attack: attack_descriptor(attack),
        seed,
        wall_time_s,
    })
}

pub const CSV_HEADER: &str =
    "pipeline,k,bits,nnz,distinct_per_matrix,size_bits,compression_ratio,ta,ata,attack,seed,wall_time_s";

fn format_k(k: usize) -> String {
    if k == usize::MAX {
        "inf".to_string()
    } else {
        k.to_string()
    }
}

fn format_row(row: &MetricsRow, stable: bool) -> String {
    let distinct = row
        .distinct_per_matrix
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";");
    let wall = if stable { 0.0 } else { row.wall_time_s };
    format!(
        "{},{},{},{},{},{},{:.8},{:.6},{:.6},{},{},{:.3}",
        row.pipeline,
        format_k(row.k),
        row.bits,
        row.nnz,
        distinct,
        row.size_bits,
        row.compression_ratio,
        row.ta,
        row.ata,
        row.attack,
        row.seed,
        wall
    )
}

/// Write rows in order. `stable` zeroes the wall-time column so identical
/// flags + seed reproduce identical bytes.
pub fn write_csv(rows: &[MetricsRow], path: &Path, dense_bits: u64, stable: bool) -> Result<()> {
    let mut out = Vec::new();
    writeln!(
        out,
        "# dense_size_bits={} denominator=unfactorized-dense-32bit",
        dense_bits
    )?;
    writeln!(out, "{}", CSV_HEADER)?;
    for row in rows {
        writeln!(out, "{}", format_row(row, stable))?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read back a metrics CSV written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.is_empty() || line == CSV_HEADER {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(AtmcError::InvalidConfig(format!(
                "{}:{}: expected 12 CSV fields, got {}",
                path.display(),
                ln + 1,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| AtmcError::InvalidConfig(format!("bad float {:?}: {}", s, e)))
        };
        let k = if fields[1] == "inf" {
            usize::MAX
        } else {
            fields[1]
                .parse()
                .map_err(|e| AtmcError::InvalidConfig(format!("bad k {:?}: {}", fields[1], e)))?
        };
        let distinct = if fields[4].is_empty() {
            Vec::new()
        } else {
            fields[4]
                .split(';')
                .map(|v| {
                    v.parse::<usize>().map_err(|e| {
                        AtmcError::InvalidConfig(format!("bad distinct count {:?}: {}", v, e))
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        rows.push(MetricsRow {
            pipeline: fields[0].to_string(),
            k,
            bits: fields[2]
                .parse()
                .map_err(|e| AtmcError::InvalidConfig(format!("bad bits: {}", e)))?,
            nnz: fields[3]
                .parse()
                .map_err(|e| AtmcError::InvalidConfig(format!("bad nnz: {}", e)))?,
            distinct_per_matrix: distinct,
            size_bits: fields[5]
                .parse()
                .map_err(|e| AtmcError::InvalidConfig(format!("bad size_bits: {}", e)))?,
            compression_ratio: parse_f(fields[6])?,
            ta: parse_f(fields[7])?,
            ata: parse_f(fields[8])?,
            attack: fields[9].to_string(),
            seed: fields[10]
                .parse()
                .map_err(|e| AtmcError::InvalidConfig(format!("bad seed: {}", e)))?,
            wall_time_s: parse_f(fields[11])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_lenet_size_matches_known_figure() {
        let arch = ArchitectureSpec::lenet();
        assert_eq!(dense_size_bits(&arch).unwrap(), 13_776_000);
        // A dense model carrying its weights in C reports the same number.
        let model: ModelParams<f64> = ModelParams::init_dense(&arch, 0).unwrap();
        assert_eq!(model_size_bits(&model, 32), 13_776_000);
    }

    #[test]
    fn size_bits_hand_case() {
        // one matrix, 10 nonzeros, 3 distinct values, b = 8: 80 + 96 = 176
        let arch = ArchitectureSpec {
            name: "t".into(),
            input: (1, 1, 10),
            classes: 1,
            blocks: vec![crate::model::Block::Fc { out: 1, relu: false }],
        };
        let mut model: ModelParams<f64> = ModelParams::init_dense(&arch, 0).unwrap();
        let shape = model.layers[0].c.shape().to_vec();
        model.layers[0].c = Tensor::new(
            shape,
            vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0],
        )
        .unwrap();
        assert_eq!(model_size_bits(&model, 8), 176);
    }

    #[test]
    fn empty_model_is_zero_bits() {
        let arch = ArchitectureSpec::mlp_small();
        let mut model: ModelParams<f64> = ModelParams::init_dense(&arch, 0).unwrap();
        for m in model.matrices_mut() {
            for v in m.data_mut() {
                *v = 0.0;
            }
        }
        assert_eq!(model_size_bits(&model, 8), 0);
        assert_eq!(model_size_bits(&model, 32), 0);
    }

    #[test]
    fn dense_compression_ratio_is_one() {
        let arch = ArchitectureSpec::lenet();
        let model: ModelParams<f64> = ModelParams::init_dense(&arch, 0).unwrap();
        let size = model_size_bits(&model, 32);
        let dense = dense_size_bits(&arch).unwrap();
        assert_eq!(compression_ratio(size, dense), 1.0);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![MetricsRow {
            pipeline: "atmc".into(),
            k: 21525,
            bits: 8,
            nnz: 21000,
            distinct_per_matrix: vec![12, 256, 3],
            size_bits: 250_000,
            compression_ratio: 0.018,
            ta: 0.985,
            ata: 0.91,
            attack: "pgd(delta=0.298039;n=16)".into(),
            seed: 1,
            wall_time_s: 12.5,
        }];
        write_csv(&rows, &path, 13_776_000, true).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].pipeline, "atmc");
        assert_eq!(back[0].k, 21525);
        assert_eq!(back[0].distinct_per_matrix, vec![12, 256, 3]);
        assert_eq!(back[0].wall_time_s, 0.0); // stable output zeroes timing

        // Stable reruns are byte-identical.
        let b1 = std::fs::read(&path).unwrap();
        write_csv(&rows, &path, 13_776_000, true).unwrap();
        let b2 = std::fs::read(&path).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn inf_budget_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![MetricsRow {
            pipeline: "da".into(),
            k: usize::MAX,
            bits: 32,
            nnz: 430_500,
            distinct_per_matrix: vec![430_500],
            size_bits: 13_776_000,
            compression_ratio: 1.0,
            ta: 0.99,
            ata: 0.95,
            attack: "none".into(),
            seed: 0,
            wall_time_s: 0.0,
        }];
        write_csv(&rows, &path, 13_776_000, true).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back[0].k, usize::MAX);
    }
}
