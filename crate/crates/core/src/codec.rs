//! Fixed-length encoding of instances and schedules.
//!
//! Requests are grouped per station by normalised conditional gain
//! `G̃ = G / max G` (maximum over the station's requests). The input side
//! summarises `Q` gain bands per station; the output side counts accepted
//! users in `L × V` gain/demand cells per station. Neither length depends on
//! the number of requests.
//!
//! Feature layout, for `T` slots and stations `c = 1..|C|`:
//!
//! ```text
//! [ d(t)/P̄ : t ]  ++  for c: [ for band q: (avg P̃, |q|/|A|, avg G̃, avg R̃) ] ++ [ n_c(t)/max n_c ]
//! ```
//!
//! Output cells of a station are ordered gain band descending, then demand
//! band ascending, so cell 0 holds the highest-gain, lowest-demand users.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Instance, Schedule};

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("codec mismatch: expected {expected}, found {found}")]
    Mismatch { expected: CodecSpec, found: CodecSpec },
    #[error("invalid codec parameters: {0}")]
    Params(String),
    #[error("schedule references unknown option: {0}")]
    Schedule(#[from] crate::model::ModelError),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DemandNorm {
    /// `P̃ = P / P̄`.
    Capacity,
    /// `P̃ = P / max P` over the station's requests.
    #[default]
    GroupMax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecParams {
    pub q: usize,
    pub l: usize,
    pub v: usize,
    pub demand_norm: DemandNorm,
}

impl Default for CodecParams {
    fn default() -> Self {
        Self {
            q: 4,
            l: 10,
            v: 10,
            demand_norm: DemandNorm::GroupMax,
        }
    }
}

impl CodecParams {
    pub fn validate(&self) -> Result<(), CodecError> {
        if self.q == 0 || self.l == 0 || self.v == 0 {
            return Err(CodecError::Params("Q, L and V must be at least 1".into()));
        }
        Ok(())
    }

    pub fn spec_for(&self, instance: &Instance) -> CodecSpec {
        CodecSpec {
            num_slots: instance.num_slots(),
            num_stations: instance.stations.len(),
            params: *self,
        }
    }
}

/// Codec parameters together with the network shape they imply. Datasets
/// and models carry one so mismatched pairs can be refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodecSpec {
    pub num_slots: usize,
    pub num_stations: usize,
    #[serde(flatten)]
    pub params: CodecParams,
}

impl CodecSpec {
    pub fn feature_len(&self) -> usize {
        self.num_slots + self.num_stations * (4 * self.params.q + self.num_slots)
    }

    pub fn label_len(&self) -> usize {
        self.num_stations * self.params.l * self.params.v
    }

    pub fn check(&self, instance: &Instance) -> Result<(), CodecError> {
        let found = self.params.spec_for(instance);
        if found != *self {
            return Err(CodecError::Mismatch {
                expected: *self,
                found,
            });
        }
        Ok(())
    }

    pub fn ensure_eq(&self, other: &CodecSpec) -> Result<(), CodecError> {
        if self != other {
            return Err(CodecError::Mismatch {
                expected: *self,
                found: *other,
            });
        }
        Ok(())
    }
}

impl fmt::Display for CodecSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "T={} C={} Q={} L={} V={} demand_norm={:?}",
            self.num_slots,
            self.num_stations,
            self.params.q,
            self.params.l,
            self.params.v,
            self.params.demand_norm
        )
    }
}

/// Index of the half-open band `((i-1)/k, i/k]` containing `x ∈ [0, 1]`,
/// 1-based. Zero falls into band 1.
pub fn band(x: f64, k: usize) -> usize {
    let raw = (x * k as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupEntry {
    pub station: usize,
    pub norm_gain: f64,
    pub norm_demand: f64,
    pub norm_ratio: f64,
    /// Input band `1..=Q`.
    pub q_band: usize,
    /// Output gain band `1..=L`, `L` being the highest gains.
    pub l_band: usize,
    /// Output demand band `1..=V`, `1` being the largest demands.
    pub v_band: usize,
    /// Flat output cell index.
    pub cell: usize,
}

/// Group membership of every `(request, option)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    pub entries: Vec<Vec<GroupEntry>>,
}

impl GroupIndex {
    pub fn build(instance: &Instance, params: &CodecParams) -> Self {
        let gains = instance.gain_table();
        Self::build_with_gains(instance, params, &gains)
    }

    pub fn build_with_gains(instance: &Instance, params: &CodecParams, gains: &[Vec<f64>]) -> Self {
        let n_st = instance.stations.len();
        let stations = instance.station_table();
        let mut max_gain = vec![0.0f64; n_st];
        let mut max_demand = vec![0.0f64; n_st];
        let mut max_ratio = vec![0.0f64; n_st];
        for (r, req) in instance.requests.iter().enumerate() {
            for o in 0..req.options.len() {
                let si = stations[r][o];
                let g = gains[r][o].max(0.0);
                max_gain[si] = max_gain[si].max(g);
                max_demand[si] = max_demand[si].max(req.demand_kwh);
                max_ratio[si] = max_ratio[si].max(g / req.demand_kwh);
            }
        }
        let ratio = |x: f64, max: f64| if max > 0.0 { (x / max).clamp(0.0, 1.0) } else { 0.0 };
        let (l, v) = (params.l, params.v);
        let entries = instance
            .requests
            .iter()
            .enumerate()
            .map(|(r, req)| {
                (0..req.options.len())
                    .map(|o| {
                        let si = stations[r][o];
                        let g = gains[r][o].max(0.0);
                        let norm_gain = ratio(g, max_gain[si]);
                        let norm_demand = match params.demand_norm {
                            DemandNorm::Capacity => ratio(req.demand_kwh, instance.capacity_kw),
                            DemandNorm::GroupMax => ratio(req.demand_kwh, max_demand[si]),
                        };
                        let norm_ratio = ratio(g / req.demand_kwh, max_ratio[si]);
                        let l_band = band(norm_gain, l);
                        let demand_rank = band(norm_demand, v);
                        GroupEntry {
                            station: si,
                            norm_gain,
                            norm_demand,
                            norm_ratio,
                            q_band: band(norm_gain, params.q),
                            l_band,
                            v_band: v - demand_rank + 1,
                            cell: si * l * v + (l - l_band) * v + (demand_rank - 1),
                        }
                    })
                    .collect()
            })
            .collect();
        Self { entries }
    }
}

/// Input band (`1..=Q`) of every `(request, option)`.
pub fn build_input_groups(instance: &Instance, q: usize) -> Vec<Vec<usize>> {
    let params = CodecParams {
        q,
        ..CodecParams::default()
    };
    GroupIndex::build(instance, &params)
        .entries
        .iter()
        .map(|es| es.iter().map(|e| e.q_band).collect())
        .collect()
}

/// Output cell of every `(request, option)`.
pub fn build_output_groups(instance: &Instance, l: usize, v: usize, demand_norm: DemandNorm) -> Vec<Vec<usize>> {
    let params = CodecParams {
        q: 1,
        l,
        v,
        demand_norm,
    };
    GroupIndex::build(instance, &params)
        .entries
        .iter()
        .map(|es| es.iter().map(|e| e.cell).collect())
        .collect()
}

pub fn encode_features(instance: &Instance, params: &CodecParams) -> Vec<f64> {
    let groups = GroupIndex::build(instance, params);
    encode_features_with(instance, params, &groups)
}

pub fn encode_features_with(instance: &Instance, params: &CodecParams, groups: &GroupIndex) -> Vec<f64> {
    let spec = params.spec_for(instance);
    let t_len = spec.num_slots;
    let q = params.q;
    let n_users = instance.requests.len();
    let mut out = Vec::with_capacity(spec.feature_len());
    let cap = instance.capacity_kw;
    out.extend(
        instance
            .base_load_kw
            .iter()
            .map(|&d| if cap > 0.0 { (d / cap).clamp(0.0, 1.0) } else { 0.0 }),
    );

    // [station][band] -> (Σ P̃, count, Σ G̃, Σ R̃)
    let mut sums = vec![[0.0f64; 4]; spec.num_stations * q];
    let mut per_slot = vec![0u32; spec.num_stations * t_len];
    for (r, req) in instance.requests.iter().enumerate() {
        for (o, e) in groups.entries[r].iter().enumerate() {
            let acc = &mut sums[e.station * q + e.q_band - 1];
            acc[0] += e.norm_demand;
            acc[1] += 1.0;
            acc[2] += e.norm_gain;
            acc[3] += e.norm_ratio;
            for &t in &req.options[o].slots {
                per_slot[e.station * t_len + t] += 1;
            }
        }
    }
    for si in 0..spec.num_stations {
        for b in 0..q {
            let [p, n, g, ratio] = sums[si * q + b];
            if n > 0.0 {
                out.extend([p / n, n / n_users as f64, g / n, ratio / n]);
            } else {
                out.extend([0.0; 4]);
            }
        }
        let counts = &per_slot[si * t_len..(si + 1) * t_len];
        let max = counts.iter().copied().max().unwrap_or(0);
        out.extend(counts.iter().map(|&c| if max > 0 { c as f64 / max as f64 } else { 0.0 }));
    }
    debug_assert_eq!(out.len(), spec.feature_len());
    out
}

/// Number of accepted `(user, station)` pairs falling into each output cell.
pub fn encode_label(instance: &Instance, schedule: &Schedule, params: &CodecParams) -> Result<Vec<f64>, CodecError> {
    let groups = GroupIndex::build(instance, params);
    let spec = params.spec_for(instance);
    let mut label = vec![0.0; spec.label_len()];
    for (r, o) in schedule.to_pairs(instance)? {
        label[groups.entries[r][o].cell] += 1.0;
    }
    Ok(label)
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub instance: String,
    pub method: String,
    pub features: Vec<f64>,
    pub label: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: CodecSpec,
    pub records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    codec: CodecSpec,
    feature_len: usize,
    label_len: usize,
    records: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

impl Dataset {
    pub fn new(spec: CodecSpec) -> Self {
        Self {
            spec,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) -> Result<(), CodecError> {
        if record.features.len() != self.spec.feature_len() || record.label.len() != self.spec.label_len() {
            return Err(CodecError::Format(format!(
                "record `{}` has {}/{} entries, codec expects {}/{}",
                record.instance,
                record.features.len(),
                record.label.len(),
                self.spec.feature_len(),
                self.spec.label_len()
            )));
        }
        self.records.push(record);
        Ok(())
    }

    /// Writes `path` as CSV (`instance, method, f0.., y0..`) and a JSON
    /// sidecar next to it describing the codec.
    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        let mut header = vec!["instance".to_string(), "method".to_string()];
        header.extend((0..self.spec.feature_len()).map(|i| format!("f{i}")));
        header.extend((0..self.spec.label_len()).map(|i| format!("y{i}")));
        w.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![rec.instance.clone(), rec.method.clone()];
            row.extend(rec.features.iter().chain(&rec.label).map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        let side = Sidecar {
            version: 1,
            codec: self.spec,
            feature_len: self.spec.feature_len(),
            label_len: self.spec.label_len(),
            records: self.records.len(),
        };
        let mut f = BufWriter::new(File::create(sidecar_path(path))?);
        serde_json::to_writer_pretty(&mut f, &side)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        let side: Sidecar = serde_json::from_reader(BufReader::new(File::open(sidecar_path(path))?))?;
        let spec = side.codec;
        if side.feature_len != spec.feature_len() || side.label_len != spec.label_len() {
            return Err(CodecError::Format("sidecar lengths disagree with codec".into()));
        }
        let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
        let width = 2 + spec.feature_len() + spec.label_len();
        if r.headers()?.len() != width {
            return Err(CodecError::Format(format!("expected {width} columns")));
        }
        let mut ds = Dataset::new(spec);
        for (i, row) in r.records().enumerate() {
            let row = row?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| CodecError::Format(format!("row {}: {e}", i + 2)))
            };
            let values = row.iter().skip(2).map(parse).collect::<Result<Vec<_>, _>>()?;
            let (features, label) = values.split_at(spec.feature_len());
            ds.push(Record {
                instance: row[0].to_string(),
                method: row[1].to_string(),
                features: features.to_vec(),
                label: label.to_vec(),
            })?;
        }
        if ds.records.len() != side.records {
            return Err(CodecError::Format("record count disagrees with sidecar".into()));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{push_user, tiny_instance};

    fn gains_instance(gains: &[f64]) -> Instance {
        let mut inst = tiny_instance(&[(1.0, 10)], 100.0, 2);
        for &g in gains {
            push_user(&mut inst, g, 1.0, &[(0, &[0])]);
        }
        inst
    }

    #[test]
    fn band_thresholds() {
        assert_eq!(band(0.0, 4), 1);
        assert_eq!(band(0.25, 4), 1);
        assert_eq!(band(0.2500001, 4), 2);
        assert_eq!(band(1.0, 4), 4);
        assert_eq!(band(0.3, 10), 3);
        assert_eq!(band(0.7, 10), 7);
    }

    #[test]
    fn equal_gains_top_band() {
        let inst = gains_instance(&[3.0, 3.0, 3.0]);
        let bands = build_input_groups(&inst, 4);
        assert!(bands.iter().all(|b| b == &vec![4]));
    }

    #[test]
    fn gains_one_to_four() {
        let inst = gains_instance(&[1.0, 2.0, 3.0, 4.0]);
        let bands: Vec<usize> = build_input_groups(&inst, 4).into_iter().map(|b| b[0]).collect();
        assert_eq!(bands, vec![1, 2, 3, 4]);
    }

    #[test]
    fn zero_requests_features() {
        let mut inst = tiny_instance(&[(1.0, 10), (2.0, 10)], 100.0, 3);
        inst.base_load_kw = vec![10.0, 50.0, 100.0];
        let f = encode_features(&inst, &CodecParams::default());
        assert_eq!(f.len(), 3 + 2 * (16 + 3));
        assert_eq!(&f[..3], &[0.1, 0.5, 1.0]);
        assert!(f[3..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn default_length_formula() {
        let spec = CodecSpec {
            num_slots: 96,
            num_stations: 3,
            params: CodecParams::default(),
        };
        assert_eq!(spec.feature_len(), 432);
        assert_eq!(spec.label_len(), 300);
    }

    #[test]
    fn largest_demand_is_v_band_one() {
        let mut inst = tiny_instance(&[(1.0, 10)], 100.0, 10);
        push_user(&mut inst, 5.0, 10.0, &[(0, &(0..10).collect::<Vec<_>>())]);
        push_user(&mut inst, 5.0, 1.0, &[(0, &[0])]);
        let g = GroupIndex::build(&inst, &CodecParams::default());
        assert_eq!(g.entries[0][0].v_band, 1);
        assert_eq!(g.entries[1][0].v_band, 10);
        // Highest gain band, lowest demand comes first.
        assert_eq!(g.entries[1][0].cell, 0);
        assert_eq!(g.entries[0][0].cell, 9);
    }

    #[test]
    fn single_cell_per_station() {
        let mut inst = tiny_instance(&[(1.0, 10), (1.0, 10)], 100.0, 2);
        push_user(&mut inst, 1.0, 1.0, &[(0, &[0]), (1, &[1])]);
        push_user(&mut inst, 7.0, 2.0, &[(1, &[0, 1])]);
        let cells = build_output_groups(&inst, 1, 1, DemandNorm::GroupMax);
        assert_eq!(cells, vec![vec![0, 1], vec![1]]);
    }

    #[test]
    fn label_counts() {
        let mut inst = tiny_instance(&[(1.0, 10), (1.0, 10)], 100.0, 2);
        push_user(&mut inst, 1.0, 1.0, &[(0, &[0]), (1, &[1])]);
        push_user(&mut inst, 7.0, 2.0, &[(1, &[0, 1])]);
        let p = CodecParams::default();
        assert!(encode_label(&inst, &Schedule::new(), &p).unwrap().iter().all(|&v| v == 0.0));
        let mut s = Schedule::new();
        s.assign(0, 1);
        s.assign(1, 1);
        let y = encode_label(&inst, &s, &p).unwrap();
        assert_eq!(y[..100].iter().sum::<f64>(), 0.0);
        assert_eq!(y[100..].iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn dataset_round_trip_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.csv");
        let spec = CodecSpec {
            num_slots: 2,
            num_stations: 1,
            params: CodecParams {
                q: 1,
                l: 1,
                v: 2,
                demand_norm: DemandNorm::Capacity,
            },
        };
        let mut ds = Dataset::new(spec);
        ds.push(Record {
            instance: "a.json".into(),
            method: "exact".into(),
            features: vec![0.1, 1.0 / 3.0, 0.0, 1.0, 0.5, 0.25, 0.75, 1.0],
            label: vec![2.0, 0.0],
        })
        .unwrap();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        assert!(ds
            .push(Record {
                instance: "b".into(),
                method: "x".into(),
                features: vec![0.0],
                label: vec![],
            })
            .is_err());
    }
}
