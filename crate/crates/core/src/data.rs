//! Multi-task interaction logs: a seeded synthetic generator and a
//! tab-separated reader/writer.
//!
//! File format: a header `user_id<TAB>f_0 .. f_{d-1}<TAB><task names>`,
//! then one record per line. Reals are written with 9 significant digits
//! (`{:.8e}`); the generator quantizes features to that precision so a
//! generated log survives a write/read round-trip bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub user_id: String,
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    task_names: Vec<String>,
    features: usize,
    records: Vec<Record>,
}

impl InteractionLog {
    pub fn new(task_names: Vec<String>, features: usize, records: Vec<Record>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.user_id.is_empty() {
                return Err(Error::Invalid(format!("record {i}: empty user id")));
            }
            if r.features.len() != features || r.labels.len() != task_names.len() {
                return Err(Error::Invalid(format!(
                    "record {i}: {} features and {} labels, expected {features} and {}",
                    r.features.len(),
                    r.labels.len(),
                    task_names.len()
                )));
            }
            if r.labels.iter().any(|&y| y > 1) {
                return Err(Error::Invalid(format!(
                    "record {i}: label outside {{0, 1}}"
                )));
            }
        }
        Ok(Self {
            task_names,
            features,
            records,
        })
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn tasks(&self) -> usize {
        self.task_names.len()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Empirical positive rate per task.
    pub fn positive_rates(&self) -> Vec<f64> {
        let n = self.records.len().max(1) as f64;
        (0..self.tasks())
            .map(|t| self.records.iter().filter(|r| r.labels[t] == 1).count() as f64 / n)
            .collect()
    }

    /// Splits by user so every user falls on exactly one side. Users are
    /// assigned in order of first appearance; the first `fraction` of
    /// them go to the left.
    pub fn split_by_user(&self, fraction: f64) -> (InteractionLog, InteractionLog) {
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.user_id.as_str()) {
                seen.push(&r.user_id);
            }
        }
        let cut = ((seen.len() as f64) * fraction).round() as usize;
        let left_users: std::collections::HashSet<&str> =
            seen[..cut.min(seen.len())].iter().copied().collect();
        let (l, r): (Vec<Record>, Vec<Record>) = self
            .records
            .iter()
            .cloned()
            .partition(|r| left_users.contains(r.user_id.as_str()));
        let make = |records| Self {
            task_names: self.task_names.clone(),
            features: self.features,
            records,
        };
        (make(l), make(r))
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub users: usize,
    pub records_per_user: usize,
    pub features: usize,
    /// Target positive rate per task; its length sets the task count.
    pub positive_rates: Vec<f64>,
    /// Per-task scale of the linear signal relative to unit noise.
    pub signal_strength: Vec<f64>,
    /// Share of each task direction that lies on the common component,
    /// in [0, 1]. Zero gives mutually orthogonal task directions.
    pub correlation: f64,
    /// Standard deviation of the per-user feature offset.
    pub user_scale: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 200,
            records_per_user: 50,
            features: 16,
            positive_rates: vec![0.3, 0.05, 0.01],
            signal_strength: vec![3.0, 3.0, 3.0],
            correlation: 0.5,
            user_scale: 0.5,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn tasks(&self) -> usize {
        self.positive_rates.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::config("users", "must be positive"));
        }
        if self.records_per_user == 0 {
            return Err(Error::config("records_per_user", "must be positive"));
        }
        if self.positive_rates.is_empty() {
            return Err(Error::config(
                "positive_rates",
                "at least one task required",
            ));
        }
        for (t, &r) in self.positive_rates.iter().enumerate() {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::config(
                    "positive_rates",
                    format!("task {t}: {r} is outside (0, 1)"),
                ));
            }
        }
        if self.signal_strength.len() != self.tasks() {
            return Err(Error::config(
                "signal_strength",
                format!(
                    "{} values for {} tasks",
                    self.signal_strength.len(),
                    self.tasks()
                ),
            ));
        }
        if self
            .signal_strength
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(Error::config(
                "signal_strength",
                "must be finite and non-negative",
            ));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::config("correlation", "must lie in [0, 1]"));
        }
        if !(self.user_scale >= 0.0 && self.user_scale.is_finite()) {
            return Err(Error::config(
                "user_scale",
                "must be finite and non-negative",
            ));
        }
        if self.features < self.tasks() + 1 {
            return Err(Error::config(
                "features",
                format!("need at least tasks + 1 = {} features", self.tasks() + 1),
            ));
        }
        Ok(())
    }
}

/// Rounds to the 9 significant digits used by the file format.
pub fn quantize(v: f64) -> f64 {
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Orthonormal vectors from Gram-Schmidt on Gaussian draws.
fn orthonormal(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    out
}

/// Draws a log from a latent-factor model. Features are a per-user offset
/// plus unit Gaussian noise. Task `t` scores `strength_t · v_t·x + noise`
/// with `v_t = √c·v_common + √(1-c)·v_own_t` over orthonormal `v`s; the top
/// `round(n·ρ_t)` scores are labelled positive.
pub fn generate(spec: &SynthSpec) -> Result<InteractionLog> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.features;
    let tasks = spec.tasks();
    let basis = orthonormal(tasks + 1, d, &mut rng);
    let (c_shared, c_own) = (spec.correlation.sqrt(), (1.0 - spec.correlation).sqrt());
    let directions: Vec<Vec<f64>> = (0..tasks)
        .map(|t| {
            (0..d)
                .map(|i| c_shared * basis[0][i] + c_own * basis[t + 1][i])
                .collect()
        })
        .collect();

    let n = spec.users * spec.records_per_user;
    let mut records = Vec::with_capacity(n);
    let mut scores = vec![Vec::with_capacity(n); tasks];
    for u in 0..spec.users {
        let offset: Vec<f64> = (0..d)
            .map(|_| spec.user_scale * gaussian(&mut rng))
            .collect();
        for _ in 0..spec.records_per_user {
            let x: Vec<f64> = offset
                .iter()
                .map(|o| quantize(o + gaussian(&mut rng)))
                .collect();
            for (t, dir) in directions.iter().enumerate() {
                let s: f64 = dir.iter().zip(&x).map(|(a, b)| a * b).sum();
                scores[t].push(spec.signal_strength[t] * s + gaussian(&mut rng));
            }
            records.push(Record {
                user_id: format!("u{u}"),
                features: x,
                labels: vec![0; tasks],
            });
        }
    }

    for (t, &rho) in spec.positive_rates.iter().enumerate() {
        let k = (n as f64 * rho).round() as usize;
        let achieved = k as f64 / n as f64;
        if (achieved - rho).abs() > 0.1 * rho {
            return Err(Error::config(
                "positive_rates",
                format!(
                    "task {t}: rate {rho} unreachable with {n} records (closest is {achieved})"
                ),
            ));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[t][b].total_cmp(&scores[t][a]).then(a.cmp(&b)));
        for &i in &order[..k] {
            records[i].labels[t] = 1;
        }
    }
    let names = (0..tasks).map(|t| format!("y_{t}")).collect();
    InteractionLog::new(names, d, records)
}

/// Writes the log to `path` through a temporary file and a rename.
pub fn write_log(path: &Path, log: &InteractionLog) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        write_log_to(&mut w, log).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_log_to<W: Write>(w: &mut W, log: &InteractionLog) -> std::io::Result<()> {
    let mut header = vec!["user_id".to_string()];
    header.extend((0..log.features).map(|i| format!("f_{i}")));
    header.extend(log.task_names.iter().cloned());
    writeln!(w, "{}", header.join("\t"))?;
    let mut line = String::new();
    for r in &log.records {
        line.clear();
        line.push_str(&r.user_id);
        for v in &r.features {
            line.push('\t');
            line.push_str(&format!("{v:.8e}"));
        }
        for y in &r.labels {
            line.push('\t');
            line.push_str(if *y == 1 { "1" } else { "0" });
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_log(path: &Path) -> Result<InteractionLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text)
}

/// Parses the tab-separated format. Line numbers in errors are 1-based
/// and count the header.
pub fn parse_log(text: &str) -> Result<InteractionLog> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        field: "header".into(),
        message: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.first() != Some(&"user_id") {
        return Err(Error::Parse {
            line: 1,
            field: "user_id".into(),
            message: "first column must be user_id".into(),
        });
    }
    let mut features = 0;
    while features + 1 < cols.len() && cols[features + 1] == format!("f_{features}") {
        features += 1;
    }
    let task_names: Vec<String> = cols[features + 1..].iter().map(|s| s.to_string()).collect();
    if let Some(bad) = task_names
        .iter()
        .find(|n| n.is_empty() || n.starts_with("f_"))
    {
        return Err(Error::Parse {
            line: 1,
            field: bad.clone(),
            message: "feature columns must be f_0, f_1, ... in order before the task columns"
                .into(),
        });
    }
    let width = cols.len();

    let mut records = Vec::new();
    for (i, line) in lines {
        let ln = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != width {
            let field = if fields.len() < width {
                cols[fields.len()]
            } else {
                "<extra>"
            };
            return Err(Error::Parse {
                line: ln,
                field: field.into(),
                message: format!("expected {width} fields, found {}", fields.len()),
            });
        }
        if fields[0].is_empty() {
            return Err(Error::Parse {
                line: ln,
                field: "user_id".into(),
                message: "empty user id".into(),
            });
        }
        let mut x = Vec::with_capacity(features);
        for (j, f) in fields[1..=features].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: ln,
                field: cols[j + 1].into(),
                message: format!("`{f}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: ln,
                    field: cols[j + 1].into(),
                    message: "non-finite value".into(),
                });
            }
            x.push(v);
        }
        let mut y = Vec::with_capacity(task_names.len());
        for (j, f) in fields[features + 1..].iter().enumerate() {
            y.push(match *f {
                "0" => 0,
                "1" => 1,
                _ => {
                    return Err(Error::Parse {
                        line: ln,
                        field: task_names[j].clone(),
                        message: format!("`{f}` is not a 0/1 label"),
                    })
                }
            });
        }
        records.push(Record {
            user_id: fields[0].to_string(),
            features: x,
            labels: y,
        });
    }
    InteractionLog::new(task_names, features, records)
}
