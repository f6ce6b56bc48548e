//! Demonstration episodes, their JSON-lines file format, and action
//! normalization.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CdpError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Episode {
    #[serde(rename = "obs")]
    pub observations: Vec<Vec<f64>>,
    #[serde(rename = "act")]
    pub actions: Vec<Vec<f64>>,
    pub success: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn validate(&self, obs_dim: usize, action_dim: usize) -> Result<()> {
        if self.observations.len() != self.actions.len() {
            return Err(CdpError::Config(format!(
                "episode has {} observations but {} actions",
                self.observations.len(),
                self.actions.len()
            )));
        }
        if self.actions.is_empty() {
            return Err(CdpError::Config("empty episode".into()));
        }
        for (o, a) in self.observations.iter().zip(&self.actions) {
            if o.len() != obs_dim || a.len() != action_dim {
                return Err(CdpError::Config(format!(
                    "episode row dims ({}, {}) differ from ({obs_dim}, {action_dim})",
                    o.len(),
                    a.len()
                )));
            }
            if o.iter().chain(a).any(|v| !v.is_finite()) {
                return Err(CdpError::Config("non-finite value in episode".into()));
            }
        }
        Ok(())
    }
}

pub fn write_jsonl(path: &Path, episodes: &[Episode]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in episodes {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Episode>> {
    let r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Per-dimension min-max map onto [−1, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

const MIN_RANGE: f64 = 1e-6;

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        }
    }

    pub fn fit(episodes: &[Episode], dim: usize) -> Result<Self> {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for a in episodes.iter().flat_map(|e| &e.actions) {
            for (d, v) in a.iter().enumerate().take(dim) {
                min[d] = min[d].min(*v);
                max[d] = max[d].max(*v);
            }
        }
        if min.iter().any(|v| !v.is_finite()) {
            return Err(CdpError::Config("no actions to fit normalization".into()));
        }
        for d in 0..dim {
            if max[d] - min[d] < MIN_RANGE {
                let mid = 0.5 * (max[d] + min[d]);
                min[d] = mid - 0.5;
                max[d] = mid + 0.5;
            }
        }
        Ok(Self { min, max })
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| 2.0 * (v - lo) / (hi - lo) - 1.0)
            .collect()
    }

    pub fn denormalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(self.min.iter().zip(&self.max))
            .map(|(v, (lo, hi))| lo + 0.5 * (v + 1.0) * (hi - lo))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep() -> Episode {
        Episode {
            observations: vec![vec![0.0, 1.0], vec![0.5, 0.5]],
            actions: vec![vec![-0.05, 0.02], vec![0.05, 0.02]],
            success: true,
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&p, &[ep(), ep()]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("{\"obs\":[[0.0,1.0],[0.5,0.5]],\"act\""));
        assert_eq!(read_jsonl(&p).unwrap(), vec![ep(), ep()]);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut e = ep();
        e.actions.pop();
        assert!(e.validate(2, 2).is_err());
        assert!(ep().validate(2, 2).is_ok());
    }

    #[test]
    fn normalizer_maps_range_and_inverts() {
        let n = Normalizer::fit(&[ep()], 2).unwrap();
        assert_eq!(n.normalize(&[-0.05, 0.02])[0], -1.0);
        assert_eq!(n.normalize(&[0.05, 0.02])[0], 1.0);
        // constant dimension gets a unit range centred on its value
        assert!(n.normalize(&[0.0, 0.02])[1].abs() < 1e-12);
        let x = [0.013, -0.4];
        let back = n.denormalize(&n.normalize(&x));
        assert!((back[0] - x[0]).abs() < 1e-12 && (back[1] - x[1]).abs() < 1e-12);
    }
}
