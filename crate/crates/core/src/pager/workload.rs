//! Logical access streams that drive the pager.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PageOp {
    #[serde(rename = "r")]
    Read,
    #[serde(rename = "w")]
    Write,
}

/// One line of a replay file: `{"op":"r"|"w","page":int}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Access {
    pub op: PageOp,
    pub page: usize,
}

impl Access {
    pub fn read(page: usize) -> Self {
        Self { op: PageOp::Read, page }
    }

    pub fn write(page: usize) -> Self {
        Self {
            op: PageOp::Write,
            page,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadSpec {
    /// `ops` writes to uniformly random pages of an array of `pages` pages.
    RandomWrites { ops: usize, pages: usize },
    /// Random reads and writes; `write_percent` of the ops are writes.
    RandomMixed {
        ops: usize,
        pages: usize,
        write_percent: u8,
    },
    /// Reads pages `0..pages` in order, `passes` times.
    Scan { pages: usize, passes: usize },
    /// Secret-dependent page writes over four pages.
    BranchSecret { secret: u64 },
    /// Accesses listed inline.
    Trace { name: String, accesses: Vec<Access> },
    /// Accesses read from a JSON-lines file.
    Replay { path: PathBuf },
}

impl WorkloadSpec {
    pub fn name(&self) -> String {
        match self {
            Self::RandomWrites { .. } => "random_writes".into(),
            Self::RandomMixed { .. } => "random_mixed".into(),
            Self::Scan { .. } => "scan".into(),
            Self::BranchSecret { secret } => format!("branch_secret_{secret}"),
            Self::Trace { name, .. } => name.clone(),
            Self::Replay { path } => format!(
                "replay_{}",
                path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace")
            ),
        }
    }

    /// The access stream. Random streams are fully determined by `seed`.
    pub fn accesses(&self, seed: u64) -> Result<Vec<Access>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match self {
            Self::RandomWrites { ops, pages } => {
                check_pages(*pages)?;
                (0..*ops).map(|_| Access::write(rng.gen_range(0..*pages))).collect()
            }
            Self::RandomMixed {
                ops,
                pages,
                write_percent,
            } => {
                check_pages(*pages)?;
                if *write_percent > 100 {
                    return Err(Error::Workload(format!("write_percent {write_percent} > 100")));
                }
                (0..*ops)
                    .map(|_| {
                        let page = rng.gen_range(0..*pages);
                        if rng.gen_range(0..100) < *write_percent {
                            Access::write(page)
                        } else {
                            Access::read(page)
                        }
                    })
                    .collect()
            }
            Self::Scan { pages, passes } => (0..*passes).flat_map(|_| (0..*pages).map(Access::read)).collect(),
            Self::BranchSecret { secret } => branch_secret_pages(*secret).into_iter().map(Access::write).collect(),
            Self::Trace { accesses, .. } => accesses.clone(),
            Self::Replay { path } => parse_jsonl(&std::fs::read_to_string(path)?)?,
        })
    }

    /// Page contents written by access number `index`.
    pub fn payload(&self, index: usize, page: usize, page_size: usize) -> Vec<u8> {
        if let Self::BranchSecret { .. } = self {
            return vec![0u8; page_size];
        }
        let mut data = vec![(index % 251) as u8; page_size];
        data[..8].copy_from_slice(&(index as u64).to_le_bytes());
        data[8..16].copy_from_slice(&(page as u64).to_le_bytes());
        data
    }
}

fn check_pages(pages: usize) -> Result<()> {
    if pages == 0 {
        return Err(Error::Workload("page array must not be empty".into()));
    }
    Ok(())
}

/// Pages written by the branching program for a given secret:
///
/// ```text
/// if secret {
///     write P0
///     if secret == 1 { write P1; write P2 } else { write P2; write P1 }
///     write P0
///     write P3
/// } else {
///     write P1
/// }
/// ```
pub fn branch_secret_pages(secret: u64) -> Vec<usize> {
    match secret {
        0 => vec![1],
        1 => vec![0, 1, 2, 0, 3],
        _ => vec![0, 2, 1, 0, 3],
    }
}

pub fn branch_secret(secret: u64) -> WorkloadSpec {
    WorkloadSpec::BranchSecret { secret }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<Access>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Workload(format!("line {}: {e}", n + 1))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_secret_sequences() {
        let pages = |s| {
            branch_secret(s)
                .accesses(0)
                .unwrap()
                .into_iter()
                .map(|a| {
                    assert_eq!(a.op, PageOp::Write);
                    a.page
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(pages(1), vec![0, 1, 2, 0, 3]);
        assert_eq!(pages(2), vec![0, 2, 1, 0, 3]);
        assert_eq!(pages(0), vec![1]);
    }

    #[test]
    fn random_streams_are_seeded() {
        let spec = WorkloadSpec::RandomWrites { ops: 100, pages: 10 };
        assert_eq!(spec.accesses(4).unwrap(), spec.accesses(4).unwrap());
        assert_ne!(spec.accesses(4).unwrap(), spec.accesses(5).unwrap());
        assert!(spec.accesses(4).unwrap().iter().all(|a| a.page < 10));
    }

    #[test]
    fn jsonl_round_trip() {
        let text = "{\"op\":\"w\",\"page\":3}\n\n{\"op\":\"r\",\"page\":0}\n";
        assert_eq!(parse_jsonl(text).unwrap(), vec![Access::write(3), Access::read(0)]);
        assert!(matches!(
            parse_jsonl("{\"op\":\"x\",\"page\":1}"),
            Err(Error::Workload(_))
        ));
    }

    #[test]
    fn spec_json_shape() {
        let spec: WorkloadSpec = serde_json::from_str(r#"{"kind":"random_writes","ops":10,"pages":5}"#).unwrap();
        assert_eq!(spec, WorkloadSpec::RandomWrites { ops: 10, pages: 5 });
        assert_eq!(spec.name(), "random_writes");
    }
}
